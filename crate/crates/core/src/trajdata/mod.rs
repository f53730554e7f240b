//! Trajectory records: the on-disk line format, load-time filtering, user
//! re-indexing, dataset splits, and the synthetic grid generator.

mod synth;

pub use synth::{expected_gps_count, generate_synthetic, GeneratorConfig};

use crate::error::{Error, Result};
use crate::roadnet::{RoadNetwork, SegmentId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Shortest trajectory kept at load time.
pub const MIN_STEPS: usize = 6;
/// Longest trajectory kept; longer records are truncated to this.
pub const MAX_STEPS: usize = 256;

/// One visited segment: which, when (UTC seconds), and how many raw GPS
/// points were snapped onto it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathStep {
    pub segment: SegmentId,
    pub timestamp_s: i64,
    pub gps_points: u32,
}

/// A user's path through the network as a sequence of adjacent segments.
/// `user` is a dense index into the [`UserVocab`] built at load time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathTrajectory {
    pub user: usize,
    pub steps: Vec<PathStep>,
}

impl PathTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.steps.iter().map(|s| s.segment)
    }

    /// Duration from first to last timestamp, in seconds.
    pub fn duration_s(&self) -> i64 {
        match (self.steps.first(), self.steps.last()) {
            (Some(a), Some(b)) => b.timestamp_s - a.timestamp_s,
            _ => 0,
        }
    }
}

/// Maps raw user identifiers from data files to dense `0..|U|` indices in
/// order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserVocab {
    dense: BTreeMap<i64, usize>,
    original: Vec<i64>,
}

impl UserVocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a vocab from the original-id list (checkpoint restore).
    pub fn from_original(original: Vec<i64>) -> Self {
        let dense = original.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        UserVocab { dense, original }
    }

    pub fn get_or_insert(&mut self, raw: i64) -> usize {
        *self.dense.entry(raw).or_insert_with(|| {
            self.original.push(raw);
            self.original.len() - 1
        })
    }

    pub fn dense(&self, raw: i64) -> Option<usize> {
        self.dense.get(&raw).copied()
    }

    pub fn original(&self, dense: usize) -> Option<i64> {
        self.original.get(dense).copied()
    }

    pub fn original_ids(&self) -> &[i64] {
        &self.original
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }
}

/// Per-file load accounting. `loaded + skipped_* == read`; `truncated` counts
/// kept records that lost their tail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub read: usize,
    pub loaded: usize,
    pub skipped_malformed: usize,
    pub skipped_short: usize,
    pub skipped_unknown_segment: usize,
    pub skipped_time_order: usize,
    pub truncated: usize,
}

/// On-disk shape of one record: a JSON object per line with the raw user id
/// and `[segment, timestamp, gps_points]` triples.
#[derive(Serialize, Deserialize)]
struct RawRecord {
    user: i64,
    steps: Vec<(SegmentId, i64, u32)>,
}

/// Reads a trajectory file against a network. Records are dropped (with a
/// counter, never an error) when they are malformed, shorter than
/// [`MIN_STEPS`], reference unknown segments, or have decreasing or negative
/// timestamps; records longer than [`MAX_STEPS`] are truncated and kept.
/// Only an unreadable file is fatal.
pub fn load_trajectories(
    path: &Path,
    net: &RoadNetwork,
) -> Result<(Vec<PathTrajectory>, UserVocab, LoadStats)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut vocab = UserVocab::new();
    let mut stats = LoadStats::default();

    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        stats.read += 1;
        let raw: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) => {
                stats.skipped_malformed += 1;
                continue;
            }
        };
        if raw.steps.len() < MIN_STEPS {
            stats.skipped_short += 1;
            continue;
        }
        let mut steps: Vec<(SegmentId, i64, u32)> = raw.steps;
        if steps.len() > MAX_STEPS {
            steps.truncate(MAX_STEPS);
            stats.truncated += 1;
        }
        if steps.iter().any(|&(seg, _, _)| !net.contains(seg)) {
            stats.skipped_unknown_segment += 1;
            continue;
        }
        if steps[0].1 < 0 || steps.windows(2).any(|w| w[1].1 < w[0].1) {
            stats.skipped_time_order += 1;
            continue;
        }
        let user = vocab.get_or_insert(raw.user);
        out.push(PathTrajectory {
            user,
            steps: steps
                .into_iter()
                .map(|(segment, timestamp_s, gps_points)| PathStep {
                    segment,
                    timestamp_s,
                    gps_points,
                })
                .collect(),
        });
        stats.loaded += 1;
    }
    Ok((out, vocab, stats))
}

/// Writes trajectories in the format [`load_trajectories`] reads, mapping
/// dense user indices back to their original ids.
pub fn save_trajectories(
    trajs: &[PathTrajectory],
    vocab: &UserVocab,
    path: &Path,
) -> Result<()> {
    let mut buf = String::new();
    for t in trajs {
        let user = vocab.original(t.user).ok_or_else(|| {
            Error::validation(format!("user index {} not in vocabulary", t.user))
        })?;
        let raw = RawRecord {
            user,
            steps: t
                .steps
                .iter()
                .map(|s| (s.segment, s.timestamp_s, s.gps_points))
                .collect(),
        };
        buf.push_str(&serde_json::to_string(&raw).expect("record serialization"));
        buf.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Shuffles `0..n` with the seed and cuts it into train/validation/test
/// index lists. Sizes are `floor(ratio * n)` with the remainder handed out
/// by descending fractional part (ties to the leftmost), so e.g.
/// `n=5, [0.8, 0.1, 0.1]` gives sizes `(4, 1, 0)`.
pub fn split_dataset(
    n: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::validation("split ratios must be non-negative"));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("split ratios sum to {total}, expected 1")));
    }

    let mut sizes = [0usize; 3];
    let mut fracs = [0f64; 3];
    for i in 0..3 {
        let exact = ratios[i] * n as f64;
        sizes[i] = exact.floor() as usize;
        fracs[i] = exact - exact.floor();
    }
    let mut remainder = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
    for &i in &order {
        if remainder == 0 {
            break;
        }
        sizes[i] += 1;
        remainder -= 1;
    }

    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = crate::numcore::stream_rng(seed, 0x5117);
    idx.shuffle(&mut rng);

    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok((
        idx[..val_start].to_vec(),
        idx[val_start..test_start].to_vec(),
        idx[test_start..].to_vec(),
    ))
}
