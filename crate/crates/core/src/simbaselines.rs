//! Classical trajectory-similarity measures over planar point sequences.
//!
//! Seven heuristic measures serve both as retrieval baselines and as
//! ground-truth generators: DTW, discrete Fréchet, Hausdorff, LCSS, EDR,
//! ERP, and SSPD. All are exact dynamic programs or closed-form geometry —
//! no windowing, pruning, or approximation — and always run in `f64`
//! regardless of the model-side precision.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::roadnet::RoadNetwork;
use crate::trajdata::PathTrajectory;

/// Ordered planar points (meters in a projected frame). Non-empty and
/// finite by construction, which keeps the measures themselves infallible.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSeq(Vec<(f64, f64)>);

impl PointSeq {
    /// Validates and wraps a coordinate list.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::validation("point sequence must be non-empty"));
        }
        if let Some((x, y)) = points.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite coordinate ({x}, {y}) in point sequence"
            )));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for the conventional pairing with `len`.
    pub fn is_empty(&self) -> bool {
        false
    }
}

fn dist(p: (f64, f64), q: (f64, f64)) -> f64 {
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Dynamic time warping with Euclidean ground distance: minimum total
/// pair distance over all monotone warping paths, no window constraint.
pub fn dtw(a: &PointSeq, b: &PointSeq) -> f64 {
    let (a, b) = (a.points(), b.points());
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, &p) in a.iter().enumerate() {
        for (j, &q) in b.iter().enumerate() {
            let d = dist(p, q);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[j],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = d + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Discrete Fréchet distance: minimum over monotone warping paths of the
/// largest pair distance along the path.
pub fn discrete_frechet(a: &PointSeq, b: &PointSeq) -> f64 {
    let (a, b) = (a.points(), b.points());
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, &p) in a.iter().enumerate() {
        for (j, &q) in b.iter().enumerate() {
            let d = dist(p, q);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => d.max(cur[j - 1]),
                (_, 0) => d.max(prev[j]),
                _ => d.max(prev[j].min(cur[j - 1]).min(prev[j - 1])),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Symmetric Hausdorff distance: the larger of the two directed
/// max-over-points min-distance values.
pub fn hausdorff(a: &PointSeq, b: &PointSeq) -> f64 {
    directed_hausdorff(a.points(), b.points()).max(directed_hausdorff(b.points(), a.points()))
}

fn directed_hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter()
        .map(|&p| {
            b.iter()
                .map(|&q| dist(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Longest common subsequence length where points match iff they lie
/// within `eps_m` of each other. Larger means more similar.
pub fn lcss(a: &PointSeq, b: &PointSeq, eps_m: f64) -> Result<usize> {
    check_eps(eps_m)?;
    let (a, b) = (a.points(), b.points());
    let m = b.len();
    let mut prev = vec![0usize; m + 1];
    let mut cur = vec![0usize; m + 1];
    for &p in a {
        for (j, &q) in b.iter().enumerate() {
            cur[j + 1] = if dist(p, q) <= eps_m {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Edit distance on real sequences: unit-cost insert/delete, substitution
/// free iff the pair lies within `eps_m`. Smaller means more similar.
pub fn edr(a: &PointSeq, b: &PointSeq, eps_m: f64) -> Result<usize> {
    check_eps(eps_m)?;
    let (a, b) = (a.points(), b.points());
    let m = b.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for (i, &p) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &q) in b.iter().enumerate() {
            let sub = usize::from(dist(p, q) > eps_m);
            cur[j + 1] = (prev[j] + sub).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

fn check_eps(eps_m: f64) -> Result<()> {
    if !(eps_m > 0.0) {
        return Err(Error::validation(format!(
            "matching threshold must be positive, got {eps_m}"
        )));
    }
    Ok(())
}

/// Edit distance with real penalty: unmatched points pay their distance to
/// the fixed gap point, matched pairs pay their mutual distance.
pub fn erp(a: &PointSeq, b: &PointSeq, gap: (f64, f64)) -> f64 {
    assert!(
        gap.0.is_finite() && gap.1.is_finite(),
        "gap point must be finite, got {gap:?}"
    );
    let (a, b) = (a.points(), b.points());
    let m = b.len();
    // Row 0: delete every prefix of b against the gap point.
    let mut prev = vec![0.0f64; m + 1];
    for j in 0..m {
        prev[j + 1] = prev[j] + dist(b[j], gap);
    }
    let mut cur = vec![0.0f64; m + 1];
    for &p in a {
        cur[0] = prev[0] + dist(p, gap);
        for (j, &q) in b.iter().enumerate() {
            let pair = prev[j] + dist(p, q);
            let drop_a = prev[j + 1] + dist(p, gap);
            let drop_b = cur[j] + dist(q, gap);
            cur[j + 1] = pair.min(drop_a).min(drop_b);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Symmetrized segment-path distance: mean distance from each point of one
/// sequence to the other sequence's polyline, averaged over both
/// directions. A single-point polyline degrades to plain point distance.
pub fn sspd(a: &PointSeq, b: &PointSeq) -> f64 {
    (directed_sspd(a.points(), b.points()) + directed_sspd(b.points(), a.points())) / 2.0
}

fn directed_sspd(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter().map(|&p| point_to_polyline(p, b)).sum::<f64>() / a.len() as f64
}

fn point_to_polyline(p: (f64, f64), line: &[(f64, f64)]) -> f64 {
    if line.len() == 1 {
        return dist(p, line[0]);
    }
    line.windows(2)
        .map(|w| point_to_segment(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Distance from `p` to the closed segment `s0`–`s1` via clamped projection.
fn point_to_segment(p: (f64, f64), s0: (f64, f64), s1: (f64, f64)) -> f64 {
    let (dx, dy) = (s1.0 - s0.0, s1.1 - s0.1);
    let len_sq = dx * dx + dy * dy;
    if len_sq == 0.0 {
        return dist(p, s0);
    }
    let t = (((p.0 - s0.0) * dx + (p.1 - s0.1) * dy) / len_sq).clamp(0.0, 1.0);
    // At t == 1 use the endpoint itself: s0 + 1·d need not reproduce s1
    // bitwise, and vertices of the polyline must be at distance zero.
    let foot = if t == 1.0 {
        s1
    } else {
        (s0.0 + t * dx, s0.1 + t * dy)
    };
    dist(p, foot)
}

/// Converts a path trajectory to the representative-point sequence the
/// measures consume, using the network's per-segment planar coordinates.
pub fn traj_to_pointseq(traj: &PathTrajectory, net: &RoadNetwork) -> Result<PointSeq> {
    let coords = net.coords().ok_or_else(|| {
        Error::unsupported(
            "similarity measures need planar segment coordinates, which this network lacks",
        )
    })?;
    PointSeq::new(traj.steps.iter().map(|s| coords[s.segment]).collect())
}

/// Name tag for one of the seven measures, mostly for CLI dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Dtw,
    Frechet,
    Hausdorff,
    Lcss,
    Edr,
    Erp,
    Sspd,
}

impl Measure {
    pub const ALL: [Measure; 7] = [
        Measure::Dtw,
        Measure::Frechet,
        Measure::Hausdorff,
        Measure::Lcss,
        Measure::Edr,
        Measure::Erp,
        Measure::Sspd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Dtw => "dtw",
            Measure::Frechet => "frechet",
            Measure::Hausdorff => "hausdorff",
            Measure::Lcss => "lcss",
            Measure::Edr => "edr",
            Measure::Erp => "erp",
            Measure::Sspd => "sspd",
        }
    }

    /// True when larger scores mean more similar (only LCSS). All other
    /// measures are distances, where smaller means more similar.
    pub fn is_similarity(self) -> bool {
        matches!(self, Measure::Lcss)
    }

    /// Scores one pair, validating the parameters the measure uses. Count
    /// measures are widened to `f64`.
    pub fn score(
        self,
        a: &PointSeq,
        b: &PointSeq,
        eps_m: f64,
        gap: (f64, f64),
    ) -> Result<f64> {
        Ok(match self {
            Measure::Dtw => dtw(a, b),
            Measure::Frechet => discrete_frechet(a, b),
            Measure::Hausdorff => hausdorff(a, b),
            Measure::Lcss => lcss(a, b, eps_m)? as f64,
            Measure::Edr => edr(a, b, eps_m)? as f64,
            Measure::Erp => {
                if !gap.0.is_finite() || !gap.1.is_finite() {
                    return Err(Error::validation(format!(
                        "gap point must be finite, got {gap:?}"
                    )));
                }
                erp(a, b, gap)
            }
            Measure::Sspd => sspd(a, b),
        })
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown similarity measure `{s}`")))
    }
}
