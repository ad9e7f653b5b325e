//! Closed race tracks described by centerline curvature over arc length.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use super::DynamicsError;

/// Maximum spacing between densified centerline samples (m).
pub const MAX_SAMPLE_SPACING: f64 = 0.5;

/// Tolerance on the total turning of a closed centerline (rad).
pub const CLOSURE_TOLERANCE: f64 = 1e-6;

const GAUSS_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GAUSS_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Centerline pose at a sample node, used by the global-frame helpers.
#[derive(Clone, Copy, Debug, PartialEq)]
struct NodePose {
    x: f64,
    y: f64,
    heading: f64,
}

/// A track centerline as piecewise-linear curvature over arc length.
#[derive(Clone, Debug)]
pub struct Track {
    arc: Vec<f64>,
    curvature: Vec<f64>,
    half_width: f64,
    closed: bool,
    length: f64,
    poses: Vec<NodePose>,
    /// Uniform buckets over `[0, length)` holding the last node at or before
    /// each bucket start, so lookups scan only a node or two.
    buckets: Vec<usize>,
    bucket_width: f64,
}

impl PartialEq for Track {
    fn eq(&self, other: &Self) -> bool {
        self.arc == other.arc
            && self.curvature == other.curvature
            && self.half_width == other.half_width
            && self.closed == other.closed
            && self.length == other.length
    }
}

impl Track {
    /// Builds a track from explicit samples.
    ///
    /// `arc` must start at 0 and be strictly increasing; on a closed track the
    /// last sample must lie before `length` and the segment from it back to
    /// `length` interpolates toward `curvature[0]`.
    pub fn new(
        arc: Vec<f64>,
        curvature: Vec<f64>,
        half_width: f64,
        closed: bool,
        length: f64,
    ) -> Result<Self, DynamicsError> {
        let invalid = |msg: String| Err(DynamicsError::InvalidTrack(msg));
        if arc.len() != curvature.len() || arc.len() < 2 {
            return invalid(format!(
                "need at least two samples with matching columns (got {} s, {} kappa)",
                arc.len(),
                curvature.len()
            ));
        }
        if arc[0] != 0.0 {
            return invalid(format!("first sample must be at s = 0, got {}", arc[0]));
        }
        if arc.iter().chain(curvature.iter()).any(|v| !v.is_finite()) {
            return invalid("non-finite sample".into());
        }
        if let Some(w) = arc.windows(2).position(|w| w[1] <= w[0]) {
            return invalid(format!(
                "arc length not strictly increasing at sample {}",
                w + 1
            ));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return invalid(format!("half width must be positive, got {half_width}"));
        }
        let last = *arc.last().unwrap();
        if closed && !(length > last) {
            return invalid(format!("length {length} must exceed last sample {last}"));
        }
        if !closed && length != last {
            return invalid(format!(
                "open track length {length} must equal last sample {last}"
            ));
        }
        let mut track = Track {
            arc,
            curvature,
            half_width,
            closed,
            length,
            poses: Vec::new(),
            buckets: Vec::new(),
            bucket_width: 1.0,
        };
        if closed {
            let turning = track.total_turning();
            if ((turning.abs() - 2.0 * PI).abs()) > CLOSURE_TOLERANCE {
                return Err(DynamicsError::OpenLoop { turning });
            }
        }
        track.poses = track.integrate_poses();
        let nb = 2 * track.arc.len();
        track.bucket_width = track.length / nb as f64;
        track.buckets = (0..nb)
            .map(|b| {
                let start = b as f64 * track.bucket_width;
                track.arc.partition_point(|&a| a <= start).saturating_sub(1)
            })
            .collect();
        Ok(track)
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// `(s_j, kappa_j)` samples.
    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.arc.iter().copied().zip(self.curvature.iter().copied())
    }

    pub fn sample_count(&self) -> usize {
        self.arc.len()
    }

    /// Trapezoidal integral of the interpolated curvature over the whole track.
    pub fn total_turning(&self) -> f64 {
        let n = self.arc.len();
        let mut total = 0.0;
        for j in 0..n - 1 {
            total +=
                0.5 * (self.curvature[j] + self.curvature[j + 1]) * (self.arc[j + 1] - self.arc[j]);
        }
        if self.closed {
            total +=
                0.5 * (self.curvature[n - 1] + self.curvature[0]) * (self.length - self.arc[n - 1]);
        }
        total
    }

    /// Maps `s` onto `[0, L)` for closed tracks, clamps for open ones.
    pub fn wrap(&self, s: f64) -> f64 {
        if self.closed {
            if (0.0..self.length).contains(&s) {
                return s;
            }
            let w = s.rem_euclid(self.length);
            if w >= self.length {
                0.0
            } else {
                w
            }
        } else {
            s.clamp(0.0, self.length)
        }
    }

    /// Interval index `j` and the interval's end values for a wrapped `s`.
    #[inline]
    fn locate(&self, s: f64) -> (usize, f64, f64, f64, f64) {
        let n = self.arc.len();
        let b = ((s / self.bucket_width) as usize).min(self.buckets.len() - 1);
        let mut j = self.buckets[b];
        while j > 0 && self.arc[j] > s {
            j -= 1;
        }
        while j + 1 < n && self.arc[j + 1] <= s {
            j += 1;
        }
        let (s1, k1) = if j + 1 < n {
            (self.arc[j + 1], self.curvature[j + 1])
        } else if self.closed {
            (self.length, self.curvature[0])
        } else {
            (self.arc[j], self.curvature[j])
        };
        (j, self.arc[j], self.curvature[j], s1, k1)
    }

    /// Piecewise-linear curvature at arc length `s` (wrapped on closed tracks).
    #[inline]
    pub fn curvature(&self, s: f64) -> f64 {
        let s = self.wrap(s);
        let (_, s0, k0, s1, k1) = self.locate(s);
        if s1 <= s0 {
            return k0;
        }
        k0 + (k1 - k0) * (s - s0) / (s1 - s0)
    }

    fn heading_in_interval(k0: f64, k1: f64, span: f64, t: f64) -> f64 {
        k0 * t + (k1 - k0) * t * t / (2.0 * span)
    }

    /// Position advance along an interval from its start node to offset `t`.
    fn advance(k0: f64, k1: f64, span: f64, heading0: f64, t: f64) -> (f64, f64) {
        if t == 0.0 {
            return (0.0, 0.0);
        }
        let half = 0.5 * t;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for (node, w) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS.iter()) {
            let tau = half * (node + 1.0);
            let th = heading0 + Self::heading_in_interval(k0, k1, span, tau);
            dx += w * th.cos();
            dy += w * th.sin();
        }
        (dx * half, dy * half)
    }

    fn integrate_poses(&self) -> Vec<NodePose> {
        let n = self.arc.len();
        let mut poses = Vec::with_capacity(n);
        let mut pose = NodePose {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        };
        poses.push(pose);
        for j in 0..n - 1 {
            let span = self.arc[j + 1] - self.arc[j];
            let (k0, k1) = (self.curvature[j], self.curvature[j + 1]);
            let (dx, dy) = Self::advance(k0, k1, span, pose.heading, span);
            pose = NodePose {
                x: pose.x + dx,
                y: pose.y + dy,
                heading: pose.heading + Self::heading_in_interval(k0, k1, span, span),
            };
            poses.push(pose);
        }
        poses
    }

    /// Centerline position and heading at `s`.
    pub fn centerline_pose(&self, s: f64) -> (f64, f64, f64) {
        let s = self.wrap(s);
        let (j, s0, k0, s1, k1) = self.locate(s);
        let base = self.poses[j];
        let span = (s1 - s0).max(f64::MIN_POSITIVE);
        let t = s - s0;
        let (dx, dy) = Self::advance(k0, k1, span, base.heading, t);
        (
            base.x + dx,
            base.y + dy,
            base.heading + Self::heading_in_interval(k0, k1, span, t),
        )
    }

    /// Road-aligned coordinates to global `(X, Y, yaw)`.
    pub fn to_global(&self, s: f64, lateral_error: f64, heading_error: f64) -> (f64, f64, f64) {
        let (x, y, th) = self.centerline_pose(s);
        let (sn, cs) = th.sin_cos();
        (
            x - lateral_error * sn,
            y + lateral_error * cs,
            th + heading_error,
        )
    }

    /// Global `(X, Y, yaw)` back to `(s, e_Y, e_psi)` by projecting onto the
    /// centerline. Valid while the point lies within the local radius of
    /// curvature of its projection.
    pub fn from_global(&self, x: f64, y: f64, yaw: f64) -> (f64, f64, f64) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, p) in self.poses.iter().enumerate() {
            let d = (p.x - x).powi(2) + (p.y - y).powi(2);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        let mut s = self.arc[best];
        for _ in 0..60 {
            let (cx, cy, th) = self.centerline_pose(s);
            let (sn, cs) = th.sin_cos();
            let (rx, ry) = (x - cx, y - cy);
            let g = rx * cs + ry * sn;
            let lateral = -rx * sn + ry * cs;
            let dg = -1.0 + self.curvature(s) * lateral;
            let step = g / dg;
            s = self.wrap(s - step);
            if step.abs() < 1e-14 * self.length.max(1.0) {
                break;
            }
        }
        let (cx, cy, th) = self.centerline_pose(s);
        let (sn, cs) = th.sin_cos();
        let lateral = -(x - cx) * sn + (y - cy) * cs;
        (s, lateral, normalize_angle(yaw - th))
    }

    /// Serializes in the plain-text `s kappa` table format.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# length={} half_width={} closed={}",
            self.length,
            self.half_width,
            u8::from(self.closed)
        );
        for (s, k) in self.samples() {
            let _ = writeln!(out, "{s} {k}");
        }
        out
    }

    /// Parses the plain-text `s kappa` table format.
    pub fn from_table(text: &str) -> Result<Self, DynamicsError> {
        let bad = |msg: String| DynamicsError::TrackFormat(msg);
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad("empty track file".into()))?;
        let header = header
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| bad("missing '# length=... half_width=... closed=...' header".into()))?;
        let (mut length, mut half_width, mut closed) = (None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header field '{field}'")))?;
            match key {
                "length" => length = Some(parse_f64(value, "length")?),
                "half_width" => half_width = Some(parse_f64(value, "half_width")?),
                "closed" => {
                    closed = Some(match value {
                        "0" => false,
                        "1" => true,
                        other => return Err(bad(format!("closed must be 0 or 1, got '{other}'"))),
                    })
                }
                other => return Err(bad(format!("unknown header key '{other}'"))),
            }
        }
        let length = length.ok_or_else(|| bad("header lacks length".into()))?;
        let half_width = half_width.ok_or_else(|| bad("header lacks half_width".into()))?;
        let closed = closed.ok_or_else(|| bad("header lacks closed".into()))?;
        let mut arc = Vec::new();
        let mut curvature = Vec::new();
        for (lineno, line) in lines {
            if line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split_whitespace();
            let (Some(s), Some(k), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad(format!(
                    "line {}: expected two columns 's kappa'",
                    lineno + 1
                )));
            };
            arc.push(parse_f64(s, "s")?);
            curvature.push(parse_f64(k, "kappa")?);
        }
        Track::new(arc, curvature, half_width, closed, length)
    }

    pub fn load(path: &Path) -> Result<Self, DynamicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DynamicsError::TrackFormat(format!("{}: {e}", path.display())))?;
        Self::from_table(&text)
    }
}

fn parse_f64(value: &str, what: &str) -> Result<f64, DynamicsError> {
    value
        .parse::<f64>()
        .map_err(|_| DynamicsError::TrackFormat(format!("cannot parse {what} from '{value}'")))
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Builds a closed track from `(segment length, curvature)` pieces.
///
/// Each piece is densified at spacing at most [`MAX_SAMPLE_SPACING`]. Junction
/// samples carry the spacing-weighted mean of the two neighbouring curvatures,
/// which keeps the trapezoidal turning integral equal to `sum(kappa_i * l_i)`.
pub fn make_test_track(segments: &[(f64, f64)], half_width: f64) -> Result<Track, DynamicsError> {
    if segments.is_empty() {
        return Err(DynamicsError::OpenLoop { turning: 0.0 });
    }
    if let Some(&(l, k)) = segments
        .iter()
        .find(|(l, k)| !(l.is_finite() && *l > 0.0 && k.is_finite()))
    {
        return Err(DynamicsError::InvalidTrack(format!(
            "invalid segment (length {l}, curvature {k})"
        )));
    }
    let turning: f64 = segments.iter().map(|(l, k)| l * k).sum();
    if (turning.abs() - 2.0 * PI).abs() > CLOSURE_TOLERANCE {
        return Err(DynamicsError::OpenLoop { turning });
    }
    let pieces: Vec<(usize, f64, f64)> = segments
        .iter()
        .map(|&(l, k)| {
            let n = (l / MAX_SAMPLE_SPACING - 1e-12).ceil().max(1.0) as usize;
            (n, l / n as f64, k)
        })
        .collect();
    let mut arc = Vec::new();
    let mut curvature = Vec::new();
    let mut start = 0.0;
    for (i, &(n, h, k)) in pieces.iter().enumerate() {
        let (_, h_prev, k_prev) = pieces[(i + pieces.len() - 1) % pieces.len()];
        for j in 0..n {
            arc.push(start + j as f64 * h);
            curvature.push(if j == 0 {
                (k_prev * h_prev + k * h) / (h_prev + h)
            } else {
                k
            });
        }
        start += n as f64 * h;
    }
    let length: f64 = segments.iter().map(|(l, _)| l).sum();
    Track::new(arc, curvature, half_width, true, length)
}

/// Two straights joined by two half circles (counter-clockwise).
pub fn stadium(straight: f64, radius: f64, half_width: f64) -> Result<Track, DynamicsError> {
    let arc = PI * radius;
    make_test_track(
        &[
            (straight, 0.0),
            (arc, 1.0 / radius),
            (straight, 0.0),
            (arc, 1.0 / radius),
        ],
        half_width,
    )
}
