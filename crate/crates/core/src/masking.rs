//! Key-path / mask-path partitioning of trajectories.
//!
//! Pretraining hides part of each trajectory and reconstructs it. The
//! road-aware strategy keeps steps that carry many raw GPS fixes or ride
//! long segments as visible context ("key") and hides the rest ("mask");
//! a seeded uniform split at a fixed ratio serves as the baseline.

use crate::error::{Error, Result};
use crate::numcore::stream_rng;
use crate::roadnet::RoadNetwork;
use crate::trajdata::PathTrajectory;
use rand::seq::index::sample;

/// RNG stream tag for the random-masking baseline.
const MASK_STREAM: u64 = 0x6d61_736b; // "mask"

/// Partition of a trajectory's step positions into visible and hidden sets.
///
/// Both lists are strictly increasing, disjoint, and together cover
/// `0..steps.len()`. Neither is ever empty: the split functions apply
/// fallbacks so the encoder and the reconstruction loss both have work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSplit {
    /// Positions kept as encoder input, in original order.
    pub key_indices: Vec<usize>,
    /// Positions hidden from the encoder and reconstructed, in original order.
    pub mask_indices: Vec<usize>,
}

/// Dataset-level means that decide which steps count as hot or long.
///
/// Computed once per (training split, network) pair; applying them to
/// held-out data reuses the training-split statistics on purpose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskThresholds {
    /// Mean `gps_points` over every step of the training trajectories.
    pub mean_gps_points: f64,
    /// Mean segment length in meters over the whole network.
    pub mean_length: f64,
}

/// Means of per-step GPS counts and of network segment lengths.
pub fn compute_thresholds(
    dataset: &[PathTrajectory],
    net: &RoadNetwork,
) -> Result<MaskThresholds> {
    if dataset.is_empty() {
        return Err(Error::validation(
            "cannot compute masking thresholds from an empty dataset",
        ));
    }
    let mut total: u64 = 0;
    let mut steps: u64 = 0;
    for t in dataset {
        for s in &t.steps {
            total += u64::from(s.gps_points);
            steps += 1;
        }
    }
    if steps == 0 {
        return Err(Error::validation(
            "masking thresholds need at least one trajectory step",
        ));
    }
    Ok(MaskThresholds {
        mean_gps_points: total as f64 / steps as f64,
        mean_length: net.mean_length(),
    })
}

/// Splits a trajectory by the road-aware rule: a step is key iff its GPS
/// count or its segment length is strictly above the respective mean.
///
/// Fallbacks when the rule degenerates: an empty key set promotes the first
/// and last steps; an empty mask set demotes the single step with the
/// smallest `(gps_points, length)` score (earliest position on ties).
pub fn road_aware_split(
    traj: &PathTrajectory,
    net: &RoadNetwork,
    th: &MaskThresholds,
) -> MaskSplit {
    let mut key = Vec::new();
    let mut mask = Vec::new();
    for (i, s) in traj.steps.iter().enumerate() {
        let hot = f64::from(s.gps_points) > th.mean_gps_points;
        let long = net.feature(s.segment).length_m > th.mean_length;
        if hot || long {
            key.push(i);
        } else {
            mask.push(i);
        }
    }
    apply_fallbacks(traj, net, key, mask)
}

/// Seeded uniform baseline: hides exactly `round(ratio * steps)` positions
/// chosen without replacement, then applies the same fallbacks as
/// [`road_aware_split`]. The network is only consulted by the
/// empty-mask fallback, which scores steps by segment length.
pub fn random_split(
    traj: &PathTrajectory,
    net: &RoadNetwork,
    ratio: f64,
    seed: u64,
) -> MaskSplit {
    assert!(
        (0.0..=1.0).contains(&ratio),
        "mask ratio {ratio} outside [0, 1]"
    );
    let n = traj.steps.len();
    let wanted = (ratio * n as f64).round() as usize;
    let mut rng = stream_rng(seed, MASK_STREAM);
    let mut mask: Vec<usize> = sample(&mut rng, n, wanted.min(n)).into_iter().collect();
    mask.sort_unstable();
    let key = (0..n).filter(|i| mask.binary_search(i).is_err()).collect();
    apply_fallbacks(traj, net, key, mask)
}

/// Restores the both-sides-nonempty invariant. Key fallback runs first, so
/// a two-step trajectory that starts all-mask ends up one key, one mask.
fn apply_fallbacks(
    traj: &PathTrajectory,
    net: &RoadNetwork,
    mut key: Vec<usize>,
    mut mask: Vec<usize>,
) -> MaskSplit {
    let n = traj.steps.len();
    assert!(n >= 2, "masking needs at least two steps, got {n}");
    if key.is_empty() {
        key = vec![0, n - 1];
        mask.retain(|&i| i != 0 && i != n - 1);
    }
    if mask.is_empty() {
        let mut victim = key[0];
        let mut best = step_score(traj, net, victim);
        for &i in &key[1..] {
            let s = step_score(traj, net, i);
            if s.0 < best.0 || (s.0 == best.0 && s.1 < best.1) {
                best = s;
                victim = i;
            }
        }
        key.retain(|&i| i != victim);
        mask.push(victim);
    }
    MaskSplit {
        key_indices: key,
        mask_indices: mask,
    }
}

/// Lexicographic informativeness score used by the empty-mask fallback.
fn step_score(traj: &PathTrajectory, net: &RoadNetwork, i: usize) -> (u32, f64) {
    let s = &traj.steps[i];
    (s.gps_points, net.feature(s.segment).length_m)
}
