//! Downstream evaluation: top-k overlap, retrieval ranking with
//! downsampled-twin setups, batch embedding, and the classification /
//! regression metric arithmetic shared by the fine-tuning tasks.
//!
//! Every metric is computed in 64-bit floats with ordered reductions, so
//! results do not depend on the parallelism of the embedding step.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::embedding::UserMode;
use crate::error::{Error, Result};
use crate::numcore::{stream_rng, Real, Tensor};
use crate::roadnet::RoadNetwork;
use crate::seq2seq::{infer_representation, Model};
use crate::trajdata::PathTrajectory;

const DOWNSAMPLE_STREAM: u64 = 0x646f_776e; // "down"

/// Mean over queries of `|top-k(pred) ∩ top-k(truth)| / k`. Both lists are
/// read as rankings: only their first `k` entries matter.
///
/// This is the overlap reading of HR@k (not "is the top-1 among the
/// top-k"); it equals 1 exactly when the two top-k sets coincide.
pub fn hit_ratio(truth: &[Vec<usize>], pred: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::validation("hit ratio needs k >= 1"));
    }
    if truth.len() != pred.len() {
        return Err(Error::validation(format!(
            "{} truth lists vs {} predicted lists",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::validation("hit ratio over zero queries is undefined"));
    }
    let mut sum = 0.0f64;
    for (q, (t, p)) in truth.iter().zip(pred).enumerate() {
        if t.len() < k || p.len() < k {
            return Err(Error::validation(format!(
                "query {q}: top-{k} requested but lists hold {} and {} ids",
                t.len(),
                p.len()
            )));
        }
        let t_set: HashSet<usize> = t[..k].iter().copied().collect();
        let hits = p[..k].iter().filter(|id| t_set.contains(id)).count();
        sum += hits as f64 / k as f64;
    }
    Ok(sum / truth.len() as f64)
}

/// Outcome of [`mean_rank`]: queries whose target was absent from the
/// candidate list are counted and excluded rather than failing the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSummary {
    /// Mean 1-based rank over the ranked queries; `None` when every
    /// target was missing.
    pub mean: Option<f64>,
    /// Queries whose target appeared among the candidates.
    pub ranked: usize,
    /// Queries whose target did not.
    pub missing: usize,
}

/// Ranks candidates by score descending, ties broken by candidate id
/// ascending, and averages the 1-based rank of each query's target.
/// `candidates[q]` is the unsorted `(id, score)` list for query `q`.
pub fn mean_rank(targets: &[usize], candidates: &[Vec<(usize, f64)>]) -> Result<RankSummary> {
    if targets.len() != candidates.len() {
        return Err(Error::validation(format!(
            "{} targets vs {} candidate lists",
            targets.len(),
            candidates.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut ranked = 0usize;
    let mut missing = 0usize;
    for (&target, list) in targets.iter().zip(candidates) {
        let mut order: Vec<(usize, f64)> = list.clone();
        sort_descending(&mut order);
        match order.iter().position(|&(id, _)| id == target) {
            Some(pos) => {
                sum += (pos + 1) as f64;
                ranked += 1;
            }
            None => missing += 1,
        }
    }
    Ok(RankSummary {
        mean: (ranked > 0).then(|| sum / ranked as f64),
        ranked,
        missing,
    })
}

/// Score descending, then id ascending — the documented retrieval order.
fn sort_descending(list: &mut [(usize, f64)]) {
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Removes `round(p·n)` interior steps uniformly at random, keeping the
/// endpoints and every survivor's timestamp. The removal count is clamped
/// so at least the two endpoints survive; the output is always a
/// subsequence of the input.
pub fn downsample(traj: &PathTrajectory, p: f64, seed: u64) -> Result<PathTrajectory> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(format!(
            "downsampling rate must lie strictly between 0 and 1, got {p}"
        )));
    }
    let n = traj.steps.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "trajectory has {n} steps; need at least 2 to downsample"
        )));
    }
    let remove = ((p * n as f64).round() as usize).min(n - 2);
    let mut rng = stream_rng(seed, DOWNSAMPLE_STREAM);
    let removed: HashSet<usize> = rand::seq::index::sample(&mut rng, n - 2, remove)
        .into_iter()
        .map(|off| off + 1)
        .collect();
    Ok(PathTrajectory {
        user: traj.user,
        steps: traj
            .steps
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, s)| *s)
            .collect(),
    })
}

/// Embeds every trajectory with [`infer_representation`] and stacks the
/// vectors into one `n x l` matrix, rows in input order. Trajectories are
/// processed in parallel; each runs on its own tape, so the rows are
/// bit-identical to one-at-a-time inference.
pub fn embed_dataset(
    model: &Model,
    net: &RoadNetwork,
    trajs: &[PathTrajectory],
    lambda2: Real,
    mode: UserMode,
) -> Result<Tensor> {
    if trajs.is_empty() {
        return Err(Error::validation("cannot embed an empty trajectory set"));
    }
    let rows: Vec<Result<Tensor>> = trajs
        .par_iter()
        .map(|t| infer_representation(model, net, t, lambda2, mode))
        .collect();
    let l = model.l();
    let mut out = Tensor::zeros(trajs.len(), l);
    for (i, row) in rows.into_iter().enumerate() {
        out.data_mut()[i * l..(i + 1) * l].copy_from_slice(row?.data());
    }
    Ok(out)
}

/// Inner product accumulated in 64-bit regardless of the build's real type.
pub fn inner_product(a: &[Real], b: &[Real]) -> f64 {
    assert_eq!(a.len(), b.len(), "vector widths disagree");
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scores one query row against every database row and returns the full
/// `(row id, score)` ranking, score descending with ties id-ascending.
pub fn rank_by_inner_product(query: &[Real], database: &Tensor) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..database.rows())
        .map(|i| (i, inner_product(query, database.row_slice(i))))
        .collect();
    sort_descending(&mut scored);
    scored
}

/// Most-similar-trajectory retrieval instance: each query's downsampled
/// twin is planted in the database, and retrieval succeeds when the twin
/// comes back first.
pub struct RetrievalSetup {
    /// Query originals, in input order.
    pub queries: Vec<PathTrajectory>,
    /// Twins first — database id `i` is query `i`'s twin, which also makes
    /// the id tie-break resolve exact-duplicate ties toward the twin —
    /// then the base entries.
    pub database: Vec<PathTrajectory>,
    /// Interior-removal rate the twins were built with (0 = exact copies).
    pub p: f64,
}

impl RetrievalSetup {
    /// `p` strictly between 0 and 1 downsamples each query with its own
    /// seed (`seed + query id`); `p == 0` plants exact duplicates.
    pub fn new(
        queries: Vec<PathTrajectory>,
        base: Vec<PathTrajectory>,
        p: f64,
        seed: u64,
    ) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::validation("retrieval needs at least one query"));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::validation(format!(
                "twin downsampling rate must lie in [0, 1), got {p}"
            )));
        }
        let mut database = if p == 0.0 {
            queries.clone()
        } else {
            queries
                .iter()
                .enumerate()
                .map(|(i, q)| downsample(q, p, seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>>>()?
        };
        database.extend(base);
        Ok(Self { queries, database, p })
    }

    /// Database id of the planted twin for `query`.
    pub fn target_of(&self, query: usize) -> usize {
        query
    }
}

/// Single-label classification scores. With one label per row, micro-F1
/// equals plain accuracy; macro-F1 averages per-class F1 over **all**
/// `n_classes`, scoring classes absent from both truth and prediction as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Fraction of rows whose true class sits among the 5 highest-scored
    /// classes (all of them when there are fewer than 5).
    pub recall_at_5: f64,
}

/// `scores` holds one row of per-class scores per example; predictions are
/// the arg-max, ties toward the smaller class id.
pub fn classification_metrics(
    scores: &Tensor,
    truth: &[usize],
    n_classes: usize,
) -> Result<ClassificationMetrics> {
    if n_classes == 0 {
        return Err(Error::validation("need at least one class"));
    }
    if scores.rows() != truth.len() || truth.is_empty() {
        return Err(Error::validation(format!(
            "{} score rows vs {} labels (both must be equal and nonzero)",
            scores.rows(),
            truth.len()
        )));
    }
    if scores.cols() != n_classes {
        return Err(Error::validation(format!(
            "score rows are {}-wide but {n_classes} classes were declared",
            scores.cols()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= n_classes) {
        return Err(Error::validation(format!(
            "label {bad} outside the {n_classes}-class range"
        )));
    }

    let k = n_classes.min(5);
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    let mut top5_hits = 0usize;
    for (i, &t) in truth.iter().enumerate() {
        let row = scores.row_slice(i);
        let pred = argmax_min_id(row);
        if pred == t {
            tp[t] += 1;
        } else {
            fp[pred] += 1;
            fnn[t] += 1;
        }
        let mut order: Vec<(usize, f64)> =
            row.iter().enumerate().map(|(c, &s)| (c, s as f64)).collect();
        sort_descending(&mut order);
        if order[..k].iter().any(|&(c, _)| c == t) {
            top5_hits += 1;
        }
    }

    let n = truth.len() as f64;
    let correct: usize = tp.iter().sum();
    let accuracy = correct as f64 / n;
    let micro_f1 = f1(correct, fp.iter().sum(), fnn.iter().sum());
    let macro_f1 =
        (0..n_classes).map(|c| f1(tp[c], fp[c], fnn[c])).sum::<f64>() / n_classes as f64;
    Ok(ClassificationMetrics {
        accuracy,
        micro_f1,
        macro_f1,
        recall_at_5: top5_hits as f64 / n,
    })
}

fn argmax_min_id(row: &[Real]) -> usize {
    let mut best = 0usize;
    for (c, &s) in row.iter().enumerate().skip(1) {
        if s > row[best] {
            best = c;
        }
    }
    best
}

/// F1 from raw counts with the 0/0 → 0 convention.
fn f1(tp: usize, fp: usize, fnn: usize) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Regression error summary. MAPE is a percentage; zero targets are
/// excluded from it (counted in `mape_excluded`) but still contribute to
/// MAE and RMSE. MAPE is NaN when every target was excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub mape_excluded: usize,
}

pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<RegressionMetrics> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::validation(format!(
            "{} predictions vs {} targets (both must be equal and nonzero)",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    let mut ratio_sum = 0.0f64;
    let mut included = 0usize;
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        abs_sum += d.abs();
        sq_sum += d * d;
        if t != 0.0 {
            ratio_sum += (d / t).abs();
            included += 1;
        }
    }
    let mape = if included > 0 {
        ratio_sum / included as f64 * 100.0
    } else {
        f64::NAN
    };
    Ok(RegressionMetrics {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        mape,
        mape_excluded: pred.len() - included,
    })
}
