//! Oriented grasp rectangles, exact rotated IoU, and the success metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IoU must strictly exceed this for a grasp to count.
pub const IOU_THRESHOLD: f64 = 0.25;
/// Orientation offset (degrees) must be strictly below this.
pub const ANGLE_THRESHOLD_DEG: f64 = 30.0;

/// Five-parameter grasp: center `(x, y)`, size `(w, h)` in normalized image
/// units, and orientation `theta` in degrees from the horizontal axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

pub type Point = [f64; 2];

/// Maps an angle into `[-90, 90)`.
pub fn canonical_angle(theta: f64) -> f64 {
    let t = (theta + 90.0).rem_euclid(180.0) - 90.0;
    // rem_euclid can round up to exactly 180 for tiny negative inputs
    if t >= 90.0 {
        t - 180.0
    } else {
        t
    }
}

impl GraspRect {
    /// Validated constructor; `theta` is canonicalized into `[-90, 90)`.
    pub fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let r = Self {
            x,
            y,
            w,
            h,
            theta: canonical_angle(theta),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h, self.theta].iter().all(|v| v.is_finite()) {
            return Err(Error::contract(format!("non-finite rectangle {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::contract(format!(
                "rectangle size must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.w, self.h, self.theta]
    }
}

/// Corners `center + R(θ)·(±w/2, ±h/2)`, counter-clockwise.
pub fn rect_to_polygon(r: &GraspRect) -> Result<[Point; 4]> {
    r.validate()?;
    let (s, c) = r.theta.to_radians().sin_cos();
    let (hw, hh) = (0.5 * r.w, 0.5 * r.h);
    let corner = |dx: f64, dy: f64| [r.x + c * dx - s * dy, r.y + s * dx + c * dy];
    Ok([
        corner(-hw, -hh),
        corner(hw, -hh),
        corner(hw, hh),
        corner(-hw, hh),
    ])
}

/// Shoelace area; positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

#[inline]
fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    // point on segment p→q crossing the infinite line a→b
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().expect("non-empty");
        let mut prev_inside = cross(a, b, prev) >= 0.0;
        for &cur in &input {
            let cur_inside = cross(a, b, cur) >= 0.0;
            if cur_inside != prev_inside {
                output.push(line_intersection(prev, cur, a, b));
            }
            if cur_inside {
                output.push(cur);
            }
            prev = cur;
            prev_inside = cur_inside;
        }
    }
    output
}

/// Area of the intersection of two convex CCW polygons. Degenerate inputs
/// give 0.
pub fn convex_intersection_area(p1: &[Point], p2: &[Point]) -> f64 {
    if signed_area(p1) <= 0.0 || signed_area(p2) <= 0.0 {
        return 0.0;
    }
    signed_area(&clip_convex(p1, p2)).max(0.0)
}

/// Exact intersection-over-union of two oriented rectangles.
pub fn rotated_iou(a: &GraspRect, b: &GraspRect) -> f64 {
    let (Ok(pa), Ok(pb)) = (rect_to_polygon(a), rect_to_polygon(b)) else {
        return 0.0;
    };
    // averaging both clip orders makes the result exactly symmetric
    let inter = 0.5 * (convex_intersection_area(&pa, &pb) + convex_intersection_area(&pb, &pa));
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Orientation offset in `[0, 90]` under the rectangle's 180° symmetry.
pub fn angle_diff(t1: f64, t2: f64) -> f64 {
    let d = (t1 - t2).abs().rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Success rule for IoU/angle pairs already computed.
pub fn passes_thresholds(iou: f64, angle_offset: f64) -> bool {
    iou > IOU_THRESHOLD && angle_offset < ANGLE_THRESHOLD_DEG
}

/// True iff some ground truth has IoU > 0.25 and angle offset < 30°.
pub fn is_success(pred: &GraspRect, gts: &[GraspRect]) -> Result<bool> {
    if gts.is_empty() {
        return Err(Error::contract("is_success needs at least one ground-truth rectangle"));
    }
    Ok(gts
        .iter()
        .any(|gt| passes_thresholds(rotated_iou(pred, gt), angle_diff(pred.theta, gt.theta))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

/// One scene's outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneResult {
    pub success: bool,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub successes: usize,
    pub count: usize,
    pub rate: f64,
}

/// Success rates per split and their harmonic mean. A split with no
/// scenes is `None`, and then so is `harmonic`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seen: Option<SplitScore>,
    pub unseen: Option<SplitScore>,
    pub harmonic: Option<f64>,
}

impl EvalReport {
    pub fn seen_success(&self) -> Option<f64> {
        self.seen.map(|s| s.rate)
    }

    pub fn unseen_success(&self) -> Option<f64> {
        self.unseen.map(|s| s.rate)
    }
}

/// `2su/(s+u)`, or 0 when both rates are 0.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

fn score(results: &[SceneResult], split: Split) -> Option<SplitScore> {
    let (successes, count) = results
        .iter()
        .filter(|r| r.split == split)
        .fold((0, 0), |(s, c), r| (s + r.success as usize, c + 1));
    (count > 0).then(|| SplitScore {
        successes,
        count,
        rate: successes as f64 / count as f64,
    })
}

/// Aggregates per-scene flags; both splits must be present.
pub fn evaluate_split(results: &[SceneResult]) -> Result<EvalReport> {
    for split in [Split::Seen, Split::Unseen] {
        if !results.iter().any(|r| r.split == split) {
            return Err(Error::contract(format!("split `{}` has no scenes", split.name())));
        }
    }
    Ok(evaluate_available(results))
}

/// Like [`evaluate_split`], but reports an absent split as `None`.
pub fn evaluate_available(results: &[SceneResult]) -> EvalReport {
    let seen = score(results, Split::Seen);
    let unseen = score(results, Split::Unseen);
    let harmonic = match (seen, unseen) {
        (Some(s), Some(u)) => Some(harmonic_mean(s.rate, u.rate)),
        _ => None,
    };
    EvalReport {
        seen,
        unseen,
        harmonic,
    }
}
