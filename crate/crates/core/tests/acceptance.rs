//! Ten end-to-end gates over the whole pipeline, one test per gate, each
//! printing a single `criterion N … PASS/FAIL` line with its measured
//! numbers (visible under `--nocapture`, and in the failure report
//! otherwise). Wall-clock-budgeted gates take a shared lock so parallel
//! test threads cannot inflate each other's timings, and the two gates
//! that need a trained model share one smoke training run.
//!
//! Expected values are never copied from the code under test: similarity
//! measures are compared against brute-force enumeration over all
//! alignments, the masking rule against an independent re-derivation,
//! metric arithmetic against hand-computed cases, gradients against
//! central finite differences.

use std::collections::HashSet;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::Rng;

use trajrep::checkpoint::{load_checkpoint, save_checkpoint};
use trajrep::embedding::{GatStack, StepEmbedder, TimeEncoder, UserMode, UserTable};
use trajrep::evaluation::{
    embed_dataset, hit_ratio, mean_rank, rank_by_inner_product, regression_metrics,
    RetrievalSetup,
};
use trajrep::masking::{compute_thresholds, random_split, road_aware_split, MaskThresholds};
use trajrep::numcore::{grad_check, stream_rng, Real, Tape, Tensor};
use trajrep::roadnet::{RoadNetwork, SegType, SegmentFeatures};
use trajrep::seq2seq::{
    f_time, interval_matrices, BiasInputs, Model, ModelShape, Seq2Seq, TokenVocabulary,
};
use trajrep::simbaselines::{discrete_frechet, dtw, edr, erp, hausdorff, lcss, PointSeq};
use trajrep::training::{
    batch_loss, nsp_targets, pretrain, pretrain_with_masking, sequence_loss, tr_targets,
    EpochLog, MaskStrategy, TrainConfig,
};
use trajrep::trajdata::{
    generate_synthetic, split_dataset, GeneratorConfig, PathStep, PathTrajectory, UserVocab,
};

/// Serializes the wall-clock-budgeted gates; a panic in one must not
/// wedge the rest, so poisoning is ignored.
static GATE: Mutex<()> = Mutex::new(());

fn lock() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the one verdict line for a gate, then enforces it.
fn verdict(id: usize, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("criterion {id:2} ({name}): {tag} - {detail}");
    assert!(ok, "criterion {id} ({name}): {detail}");
}

// ---------------------------------------------------------------------------
// Shared small-world builders
// ---------------------------------------------------------------------------

fn seg(length_m: f64, speed: f64, tt: f64, dir: f64, ty: SegType) -> SegmentFeatures {
    SegmentFeatures {
        length_m,
        max_speed_kmh: speed,
        avg_travel_time_s: tt,
        direction_deg: dir,
        seg_type: ty,
        out_degree: 0,
        in_degree: 0,
    }
}

/// Five segments with deliberately varied attributes, no coordinates.
fn micro_network() -> RoadNetwork {
    let features = vec![
        seg(120.0, 50.0, 13.0, 45.0, SegType::Residential),
        seg(340.0, 80.0, 19.0, 120.0, SegType::Primary),
        seg(80.0, 30.0, 11.0, 200.0, SegType::Service),
        seg(560.0, 100.0, 23.0, 310.0, SegType::Trunk),
        seg(200.0, 60.0, 16.0, 80.0, SegType::Secondary),
    ];
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3), (2, 0)];
    RoadNetwork::new(features, &edges, None).unwrap()
}

/// Three short walks on the micro network, one per user, with GPS counts
/// arranged so the road-aware rule leaves every trajectory with both key
/// and mask steps (asserted where it matters).
fn micro_trajectories() -> Vec<PathTrajectory> {
    let walk = |user: usize, t0: i64, steps: &[(usize, i64, u32)]| PathTrajectory {
        user,
        steps: steps
            .iter()
            .map(|&(segment, dt, gps_points)| PathStep {
                segment,
                timestamp_s: t0 + dt,
                gps_points,
            })
            .collect(),
    };
    vec![
        walk(0, 1_700_000_000, &[(0, 0, 9), (1, 30, 1), (2, 60, 0), (3, 90, 2), (4, 120, 1)]),
        walk(1, 1_700_000_500, &[(2, 0, 0), (3, 25, 7), (4, 55, 1), (0, 80, 3)]),
        walk(
            2,
            1_700_001_000,
            &[(1, 0, 2), (2, 40, 5), (0, 70, 0), (1, 100, 1), (3, 130, 6), (4, 160, 0)],
        ),
    ]
}

/// Linear chain network over the given segment lengths (masking fuzz).
fn chain_network(lengths: &[f64]) -> RoadNetwork {
    let features = lengths
        .iter()
        .map(|&len| seg(len, 50.0, len / 13.9, 0.0, SegType::Residential))
        .collect();
    let edges: Vec<(usize, usize)> =
        (0..lengths.len().saturating_sub(1)).map(|i| (i, i + 1)).collect();
    RoadNetwork::new(features, &edges, None).unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness on a micro configuration
// ---------------------------------------------------------------------------

#[test]
fn c01_gradient_correctness() {
    let _gate = lock();
    let t0 = Instant::now();

    let net = micro_network();
    let trajs = micro_trajectories();
    let th = compute_thresholds(&trajs, &net).unwrap();
    let splits: Vec<_> = trajs.iter().map(|t| road_aware_split(t, &net, &th)).collect();
    for s in &splits {
        assert!(
            !s.key_indices.is_empty() && !s.mask_indices.is_empty(),
            "micro world must exercise both encoder and decoder paths"
        );
    }

    // l = 8 is below the deployment minimum width, so the embedder is
    // assembled from parts with explicit head counts.
    let shape = ModelShape {
        l: 8,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        tie_heads: false,
    };
    // The difference quotient is only trustworthy where the loss is smooth;
    // an init whose pre-activations sit a safe distance from the relu and
    // leaky-relu kinks keeps the 1e-3 step inside one linear piece. This
    // seed measures 5e-8 against a 1e-4 bar (and any step-size artifact
    // vanishes at step 1e-5, which separates kink noise from a real
    // gradient defect).
    let mut rng = stream_rng(26, 1);
    let model = Model {
        embedder: StepEmbedder {
            gat: GatStack::with_heads(8, [2, 2, 1], &mut rng).unwrap(),
            time: TimeEncoder::new(8, &mut rng).unwrap(),
            users: UserTable::new(3, 8, &mut rng),
        },
        seq: Seq2Seq::new(&shape, TokenVocabulary::new(net.n_segments()), &mut rng).unwrap(),
    };
    let points: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let tensors = points.len();
    let scalars: usize = points.iter().map(Tensor::len).sum();

    const LAMBDA1: Real = 0.3;
    const LAMBDA2: Real = 0.5;
    let err = grad_check(
        |tape, vars| {
            let mv = model.rebind(vars);
            let table = mv.embedder.spatial_table(tape, &net);
            let vocab = mv.seq.vocab();
            let mut nsp = Vec::new();
            let mut tr = Vec::new();
            for (traj, split) in trajs.iter().zip(&splits) {
                let embeds = mv
                    .embedder
                    .embed(tape, &net, &table, traj, UserMode::Enabled)
                    .unwrap();
                let key_embeds = embeds.gather_rows(&split.key_indices);
                let start = table.gather_rows(&[net.virtual_id()]);
                let (mt, md) = interval_matrices(traj, &net);
                let enc_bias =
                    BiasInputs::for_encoder(tape, &mt, &md, &split.key_indices, LAMBDA2).unwrap();
                let out = mv.seq.encode(tape, &start, &key_embeds, Some(&enc_bias));
                nsp.push(sequence_loss(
                    &out.nsp_logits,
                    &nsp_targets(traj, &split.key_indices, &vocab),
                ));

                let times: Vec<i64> = split
                    .mask_indices
                    .iter()
                    .map(|&i| traj.steps[i].timestamp_s)
                    .collect();
                let types: Vec<SegType> = split
                    .mask_indices
                    .iter()
                    .map(|&i| net.feature(traj.steps[i].segment).seg_type)
                    .collect();
                let extra = mv.embedder.time.encode_steps(tape, &times, &types);
                let dec_bias = BiasInputs::for_decoder(tape, &mt, &md, LAMBDA2).unwrap();
                let logits = mv.seq.decode(
                    tape,
                    &out.key_states(),
                    &split.key_indices,
                    &split.mask_indices,
                    Some(&extra),
                    Some(&dec_bias),
                );
                tr.push(sequence_loss(&logits, &tr_targets(traj)));
            }
            let nsp = batch_loss(tape, &nsp);
            let tr = batch_loss(tape, &tr);
            nsp.scale(LAMBDA1).add(&tr.scale(1.0 - LAMBDA1))
        },
        &points,
        1e-3,
    );
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient correctness",
        err < 1e-4 && secs < 30.0,
        &format!(
            "{tensors} tensors / {scalars} scalars, max relative error {err:.2e} (< 1e-4), \
             {secs:.1} s (< 30 s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: similarity measures vs alignment-enumeration oracles
// ---------------------------------------------------------------------------

fn euclid(p: (f64, f64), q: (f64, f64)) -> f64 {
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Minimum path-sum of pair distances over every monotone coupling,
/// explored as a full recursion tree (no memoization: every coupling is
/// visited).
fn oracle_dtw(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    fn rec(a: &[(f64, f64)], b: &[(f64, f64)], i: usize, j: usize) -> f64 {
        let d = euclid(a[i], b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            return d;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.len() {
            best = best.min(rec(a, b, i + 1, j));
        }
        if j + 1 < b.len() {
            best = best.min(rec(a, b, i, j + 1));
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            best = best.min(rec(a, b, i + 1, j + 1));
        }
        d + best
    }
    rec(a, b, 0, 0)
}

/// Minimum over monotone couplings of the largest pair distance.
fn oracle_frechet(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    fn rec(a: &[(f64, f64)], b: &[(f64, f64)], i: usize, j: usize) -> f64 {
        let d = euclid(a[i], b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            return d;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.len() {
            best = best.min(rec(a, b, i + 1, j));
        }
        if j + 1 < b.len() {
            best = best.min(rec(a, b, i, j + 1));
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            best = best.min(rec(a, b, i + 1, j + 1));
        }
        d.max(best)
    }
    rec(a, b, 0, 0)
}

/// Largest order-preserving matching whose pairs all lie within `eps`,
/// found by trying every candidate pair at every recursion level.
fn oracle_lcss(a: &[(f64, f64)], b: &[(f64, f64)], eps: f64, ai: usize, bi: usize) -> usize {
    let mut best = 0;
    for i in ai..a.len() {
        for j in bi..b.len() {
            if euclid(a[i], b[j]) <= eps {
                best = best.max(1 + oracle_lcss(a, b, eps, i + 1, j + 1));
            }
        }
    }
    best
}

/// Cheapest edit script over every insert/delete/substitute sequence.
fn oracle_edr(a: &[(f64, f64)], b: &[(f64, f64)], eps: f64, i: usize, j: usize) -> usize {
    if i == a.len() && j == b.len() {
        return 0;
    }
    let mut best = usize::MAX;
    if i < a.len() {
        best = best.min(1 + oracle_edr(a, b, eps, i + 1, j));
    }
    if j < b.len() {
        best = best.min(1 + oracle_edr(a, b, eps, i, j + 1));
    }
    if i < a.len() && j < b.len() {
        let sub = usize::from(euclid(a[i], b[j]) > eps);
        best = best.min(sub + oracle_edr(a, b, eps, i + 1, j + 1));
    }
    best
}

/// Cheapest gap-penalty alignment over every script.
fn oracle_erp(a: &[(f64, f64)], b: &[(f64, f64)], gap: (f64, f64), i: usize, j: usize) -> f64 {
    if i == a.len() && j == b.len() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    if i < a.len() {
        best = best.min(euclid(a[i], gap) + oracle_erp(a, b, gap, i + 1, j));
    }
    if j < b.len() {
        best = best.min(euclid(b[j], gap) + oracle_erp(a, b, gap, i, j + 1));
    }
    if i < a.len() && j < b.len() {
        best = best.min(euclid(a[i], b[j]) + oracle_erp(a, b, gap, i + 1, j + 1));
    }
    best
}

#[test]
fn c02_similarity_measure_exactness() {
    let _gate = lock();
    let t0 = Instant::now();
    const TOL: f64 = 1e-9;

    fn random_seq(rng: &mut rand_chacha::ChaCha8Rng, max_len: usize) -> Vec<(f64, f64)> {
        let n = rng.gen_range(1..=max_len);
        (0..n)
            .map(|_| (rng.gen_range(0.0..1000.0), rng.gen_range(0.0..1000.0)))
            .collect()
    }
    let mut rng = stream_rng(0xACCE, 2);

    let mut worst_real = 0.0f64;
    for pair in 0..200 {
        let a = random_seq(&mut rng, 6);
        let b = random_seq(&mut rng, 6);
        let eps = rng.gen_range(20.0..400.0);
        let gap = (rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0));
        let pa = PointSeq::new(a.clone()).unwrap();
        let pb = PointSeq::new(b.clone()).unwrap();

        for (name, got, want) in [
            ("dtw", dtw(&pa, &pb), oracle_dtw(&a, &b)),
            ("frechet", discrete_frechet(&pa, &pb), oracle_frechet(&a, &b)),
            ("erp", erp(&pa, &pb, gap), oracle_erp(&a, &b, gap, 0, 0)),
        ] {
            let dev = (got - want).abs();
            worst_real = worst_real.max(dev);
            assert!(dev <= TOL, "pair {pair}: {name} {got} vs oracle {want}");
        }
        let l = lcss(&pa, &pb, eps).unwrap();
        let lo = oracle_lcss(&a, &b, eps, 0, 0);
        assert_eq!(l, lo, "pair {pair}: lcss {l} vs oracle {lo}");
        let e = edr(&pa, &pb, eps).unwrap();
        let eo = oracle_edr(&a, &b, eps, 0, 0);
        assert_eq!(e, eo, "pair {pair}: edr {e} vs oracle {eo}");
    }

    let mut dominated = 0usize;
    for _ in 0..1000 {
        let a = random_seq(&mut rng, 12);
        let b = random_seq(&mut rng, 12);
        let pa = PointSeq::new(a).unwrap();
        let pb = PointSeq::new(b).unwrap();
        if hausdorff(&pa, &pb) <= discrete_frechet(&pa, &pb) {
            dominated += 1;
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        2,
        "similarity measure exactness",
        dominated == 1000 && secs < 60.0,
        &format!(
            "200 pairs: lcss/edr exact, dtw/frechet/erp worst deviation {worst_real:.2e} \
             (<= 1e-9); hausdorff <= frechet on {dominated}/1000 fuzzed pairs; {secs:.1} s (< 60 s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: masking invariants and the seven-step showcase
// ---------------------------------------------------------------------------

/// Independent restatement of the road-aware rule and its fallbacks.
fn expected_road_aware(
    traj: &PathTrajectory,
    net: &RoadNetwork,
    th: &MaskThresholds,
) -> (Vec<usize>, Vec<usize>) {
    let n = traj.steps.len();
    let is_key = |i: usize| {
        let s = &traj.steps[i];
        f64::from(s.gps_points) > th.mean_gps_points
            || net.feature(s.segment).length_m > th.mean_length
    };
    let mut key: Vec<usize> = (0..n).filter(|&i| is_key(i)).collect();
    let mut mask: Vec<usize> = (0..n).filter(|&i| !is_key(i)).collect();
    if key.is_empty() {
        key = vec![0, n - 1];
        mask = (1..n - 1).collect();
    }
    if mask.is_empty() {
        let victim = *key
            .iter()
            .min_by(|&&x, &&y| {
                let score = |i: usize| {
                    (traj.steps[i].gps_points, net.feature(traj.steps[i].segment).length_m)
                };
                score(x).partial_cmp(&score(y)).unwrap()
            })
            .unwrap();
        key.retain(|&i| i != victim);
        mask.push(victim);
    }
    (key, mask)
}

fn assert_partition(key: &[usize], mask: &[usize], n: usize) {
    assert!(!key.is_empty() && !mask.is_empty(), "both sides must be nonempty");
    assert!(key.windows(2).all(|w| w[0] < w[1]), "keys not strictly increasing");
    assert!(mask.windows(2).all(|w| w[0] < w[1]), "masks not strictly increasing");
    let mut all: Vec<usize> = key.iter().chain(mask).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..n).collect::<Vec<_>>(), "key/mask must partition 0..{n}");
}

#[test]
fn c03_masking_invariants() {
    let _gate = lock();
    let t0 = Instant::now();

    let mut rng = stream_rng(0x4d41, 3);
    let nets: Vec<RoadNetwork> = (0..8)
        .map(|_| {
            let n = rng.gen_range(5..40);
            let lengths: Vec<f64> = (0..n).map(|_| rng.gen_range(20.0..1000.0)).collect();
            chain_network(&lengths)
        })
        .collect();

    let mut monotone_checked = 0usize;
    for i in 0..10_000 {
        let net = &nets[rng.gen_range(0..nets.len())];
        let n_steps = rng.gen_range(2..40);
        let mut ts = 1_700_000_000i64;
        let steps: Vec<PathStep> = (0..n_steps)
            .map(|_| {
                ts += rng.gen_range(0..120);
                PathStep {
                    segment: rng.gen_range(0..net.n_segments()),
                    timestamp_s: ts,
                    gps_points: rng.gen_range(0..12),
                }
            })
            .collect();
        let traj = PathTrajectory { user: 0, steps };
        let th = MaskThresholds {
            mean_gps_points: rng.gen_range(0.0..12.0),
            mean_length: rng.gen_range(10.0..1000.0),
        };

        let got = road_aware_split(&traj, net, &th);
        assert_partition(&got.key_indices, &got.mask_indices, n_steps);
        let (want_key, want_mask) = expected_road_aware(&traj, net, &th);
        assert_eq!(got.key_indices, want_key, "iteration {i}: key sets disagree");
        assert_eq!(got.mask_indices, want_mask, "iteration {i}: mask sets disagree");

        // The uniform baseline obeys the same partition contract, hides
        // exactly its budget when that is non-degenerate, and is seeded.
        let ratio = match i % 5 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen::<f64>(),
        };
        let seed = rng.gen::<u64>();
        let r1 = random_split(&traj, net, ratio, seed);
        assert_partition(&r1.key_indices, &r1.mask_indices, n_steps);
        assert_eq!(r1, random_split(&traj, net, ratio, seed), "iteration {i}: unseeded");
        let budget = (ratio * n_steps as f64).round() as usize;
        if budget >= 1 && budget <= n_steps - 1 {
            assert_eq!(r1.mask_indices.len(), budget, "iteration {i}: budget missed");
        }

        // Promoting one hidden step above the GPS threshold moves exactly
        // that step; checked only where no fallback fires before or after.
        let nat_key: Vec<usize> = (0..n_steps)
            .filter(|&j| {
                f64::from(traj.steps[j].gps_points) > th.mean_gps_points
                    || net.feature(traj.steps[j].segment).length_m > th.mean_length
            })
            .collect();
        let nat_mask_len = n_steps - nat_key.len();
        if !nat_key.is_empty() && nat_mask_len >= 2 {
            let lift = got.mask_indices[rng.gen_range(0..got.mask_indices.len())];
            let mut boosted = traj.clone();
            boosted.steps[lift].gps_points = th.mean_gps_points.max(0.0) as u32 + 1;
            let after = road_aware_split(&boosted, net, &th);
            let mut want: Vec<usize> = got.key_indices.iter().copied().chain([lift]).collect();
            want.sort_unstable();
            assert_eq!(after.key_indices, want, "iteration {i}: promotion leaked");
            assert_eq!(
                after.mask_indices,
                got.mask_indices.iter().copied().filter(|&j| j != lift).collect::<Vec<_>>(),
                "iteration {i}: promotion disturbed other masks"
            );
            monotone_checked += 1;
        }
    }
    assert!(monotone_checked > 1000, "only {monotone_checked} monotonicity instances");

    // Seven steps covering every role: hot-only, long-only, both, neither,
    // exactly-at-threshold (strict comparison keeps it hidden), and a
    // closing hot step.
    let net = chain_network(&[50.0, 150.0, 120.0, 80.0, 100.0, 99.0, 10.0]);
    let th = MaskThresholds { mean_gps_points: 5.0, mean_length: 100.0 };
    let gps = [9u32, 2, 7, 1, 5, 0, 6];
    let traj = PathTrajectory {
        user: 0,
        steps: (0..7)
            .map(|j| PathStep {
                segment: j,
                timestamp_s: 1_700_000_000 + 60 * j as i64,
                gps_points: gps[j],
            })
            .collect(),
    };
    let showcase = road_aware_split(&traj, &net, &th);
    let showcase_ok =
        showcase.key_indices == [0, 1, 2, 6] && showcase.mask_indices == [3, 4, 5];

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        3,
        "masking invariants",
        showcase_ok && secs < 10.0,
        &format!(
            "10000 fuzzed splits match the re-derivation ({monotone_checked} monotonicity \
             promotions), 7-step showcase keys {:?} masks {:?}, {secs:.1} s (< 10 s)",
            showcase.key_indices, showcase.mask_indices
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: interval dampening endpoints and monotonicity
// ---------------------------------------------------------------------------

#[test]
fn c04_bias_function_values() {
    let at0 = f64::from(f_time(0.0));
    let at60 = f64::from(f_time(60.0));
    let direct60 = 1.0 / (std::f64::consts::E + 1.0).ln();
    let dev0 = (at0 - 1.0).abs();
    let dev60 = (at60 - direct60).abs();

    let mut rng = stream_rng(0xF424, 4);
    let mut args: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1e6)).collect();
    args.sort_by(|a, b| a.partial_cmp(b).unwrap());
    args.dedup();
    let strictly_decreasing = args
        .windows(2)
        .all(|w| f_time(w[0] as Real) > f_time(w[1] as Real));

    verdict(
        4,
        "bias function values",
        dev0 <= 1e-12 && dev60 <= 1e-12 && strictly_decreasing,
        &format!(
            "f_time(0) off by {dev0:.1e}, f_time(60) off by {dev60:.1e} (both <= 1e-12); \
             strictly decreasing across {} distinct arguments",
            args.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: zeroed bias projections reduce to the plain transformer
// ---------------------------------------------------------------------------

#[test]
fn c05_vanilla_transformer_reduction() {
    let net = micro_network();
    let traj = micro_trajectories().remove(2);
    let th = compute_thresholds(&micro_trajectories(), &net).unwrap();
    let split = road_aware_split(&traj, &net, &th);

    let shape = ModelShape {
        l: 16,
        n_heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        tie_heads: true,
    };
    let mut rng = stream_rng(77, 5);
    let mut model = Model::new(&shape, net.n_segments(), 3, &mut rng).unwrap();
    let mut zeroed = 0usize;
    for p in model.params_mut() {
        if p.name.contains(".t_lift.") || p.name.contains(".d_lift.") {
            p.value = Tensor::zeros(p.value.rows(), p.value.cols());
            zeroed += 1;
        }
    }
    // 4 layers x 2 interval kinds x (w1, b1, w2, b2).
    assert_eq!(zeroed, 32, "expected every bias projection tensor to be zeroed");

    let run = |with_bias: bool| -> [Vec<Real>; 4] {
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let table = vars.embedder.spatial_table(&tape, &net);
        let embeds = vars
            .embedder
            .embed(&tape, &net, &table, &traj, UserMode::Enabled)
            .unwrap();
        let keys = embeds.gather_rows(&split.key_indices);
        let start = table.gather_rows(&[net.virtual_id()]);
        let (mt, md) = interval_matrices(&traj, &net);
        let enc_bias = with_bias
            .then(|| BiasInputs::for_encoder(&tape, &mt, &md, &split.key_indices, 0.5).unwrap());
        let out = vars.seq.encode(&tape, &start, &keys, enc_bias.as_ref());

        let times: Vec<i64> =
            split.mask_indices.iter().map(|&i| traj.steps[i].timestamp_s).collect();
        let types: Vec<SegType> = split
            .mask_indices
            .iter()
            .map(|&i| net.feature(traj.steps[i].segment).seg_type)
            .collect();
        let extra = vars.embedder.time.encode_steps(&tape, &times, &types);
        let dec_bias = with_bias.then(|| BiasInputs::for_decoder(&tape, &mt, &md, 0.5).unwrap());
        let logits = vars.seq.decode(
            &tape,
            &out.key_states(),
            &split.key_indices,
            &split.mask_indices,
            Some(&extra),
            dec_bias.as_ref(),
        );
        [
            out.hidden.value().data().to_vec(),
            out.nsp_logits.value().data().to_vec(),
            out.trajectory_vector.value().data().to_vec(),
            logits.value().data().to_vec(),
        ]
    };

    let biased = run(true);
    let plain = run(false);
    let identical = biased == plain;
    let compared: usize = biased.iter().map(Vec::len).sum();
    verdict(
        5,
        "vanilla transformer reduction",
        identical,
        &format!(
            "32 bias projection tensors zeroed; encoder states, next-segment logits, \
             trajectory vector and decoder logits bit-identical ({compared} scalars)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7: one shared smoke training run
// ---------------------------------------------------------------------------

struct SmokeArtifacts {
    net: RoadNetwork,
    train: Vec<PathTrajectory>,
    val: Vec<PathTrajectory>,
    cfg: TrainConfig,
    trained: Model,
    untrained: Model,
    road_logs: Vec<EpochLog>,
    random_logs: Vec<EpochLog>,
    nsp_top1: f64,
    uniform: f64,
    smoke_secs: f64,
}

static ARTIFACTS: OnceLock<SmokeArtifacts> = OnceLock::new();

fn artifacts() -> &'static SmokeArtifacts {
    ARTIFACTS.get_or_init(build_artifacts)
}

/// Fraction of held-out next-segment predictions whose top logit is the
/// true class, under the same splits and bias inputs training used.
fn nsp_top1_accuracy(
    model: &Model,
    net: &RoadNetwork,
    trajs: &[PathTrajectory],
    th: &MaskThresholds,
    lambda2: Real,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in trajs.chunks(64) {
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let table = vars.embedder.spatial_table(&tape, net);
        let vocab = vars.seq.vocab();
        for traj in chunk {
            let split = road_aware_split(traj, net, th);
            let embeds = vars
                .embedder
                .embed(&tape, net, &table, traj, UserMode::Enabled)
                .unwrap();
            let keys = embeds.gather_rows(&split.key_indices);
            let start = table.gather_rows(&[net.virtual_id()]);
            let (mt, md) = interval_matrices(traj, net);
            let bias =
                BiasInputs::for_encoder(&tape, &mt, &md, &split.key_indices, lambda2).unwrap();
            let out = vars.seq.encode(&tape, &start, &keys, Some(&bias));
            let logits = out.nsp_logits.value();
            for (row, &target) in nsp_targets(traj, &split.key_indices, &vocab).iter().enumerate()
            {
                let scores = logits.row_slice(row);
                let mut argmax = 0usize;
                for (c, &s) in scores.iter().enumerate() {
                    if s > scores[argmax] {
                        argmax = c;
                    }
                }
                hits += usize::from(argmax == target);
                total += 1;
            }
        }
    }
    hits as f64 / total as f64
}

fn build_artifacts() -> SmokeArtifacts {
    let t0 = Instant::now();
    let (net, trajs) = generate_synthetic(&GeneratorConfig {
        grid_width: 8,
        grid_height: 8,
        n_trajectories: 2000,
        n_users: 10,
        seed: 7,
    })
    .unwrap();
    let (train_idx, val_idx, test_idx) = split_dataset(trajs.len(), [0.8, 0.2, 0.0], 7).unwrap();
    assert!(test_idx.is_empty());
    let train: Vec<PathTrajectory> = train_idx.iter().map(|&i| trajs[i].clone()).collect();
    let val: Vec<PathTrajectory> = val_idx.iter().map(|&i| trajs[i].clone()).collect();

    let cfg = TrainConfig {
        l: 32,
        n_heads: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        epochs: 10,
        batch_size: 32,
        lr: 1e-3,
        ..TrainConfig::default()
    };

    let dir = tempfile::tempdir().unwrap();
    let ep0 = dir.path().join("epoch0.ckpt");
    let hook_path = ep0.clone();
    let (trained, road_logs) = pretrain(&net, &train, &val, &cfg, |m, log| {
        if log.epoch == 0 {
            let vocab = UserVocab::from_original((0..m.n_users() as i64).collect());
            save_checkpoint(&hook_path, m, &vocab, None)?;
        }
        Ok(())
    })
    .unwrap();
    let (untrained, _) = load_checkpoint(&ep0).unwrap();

    let (_, random_logs) = pretrain_with_masking(
        &net,
        &train,
        &val,
        &cfg,
        MaskStrategy::Random { ratio: 0.9 },
        |_, _| Ok(()),
    )
    .unwrap();

    let th = compute_thresholds(&train, &net).unwrap();
    let nsp_top1 = nsp_top1_accuracy(&trained, &net, &val, &th, cfg.lambda2 as Real);
    let uniform = 1.0 / (net.n_segments() + 3) as f64;

    SmokeArtifacts {
        smoke_secs: t0.elapsed().as_secs_f64(),
        net,
        train,
        val,
        cfg,
        trained,
        untrained,
        road_logs,
        random_logs,
        nsp_top1,
        uniform,
    }
}

#[test]
fn c06_training_smoke() {
    let _gate = lock();
    let a = artifacts();

    let first = a.road_logs.first().unwrap().val.total;
    let last = a.road_logs.last().unwrap().val.total;
    let drop = (first - last) / first;
    let lift = a.nsp_top1 / a.uniform;
    let road_tr = a.road_logs.last().unwrap().val.tr;
    let random_tr = a.random_logs.last().unwrap().val.tr;

    let ok = a.road_logs.len() == a.cfg.epochs + 1
        && drop >= 0.30
        && lift >= 5.0
        && road_tr <= random_tr
        && a.smoke_secs < 480.0;
    verdict(
        6,
        "training smoke",
        ok,
        &format!(
            "val total {first:.4} -> {last:.4} ({:.1}% drop, >= 30%); held-out next-segment \
             top-1 {:.4} = {lift:.1}x uniform {:.5} (>= 5x); road-aware val reconstruction \
             {road_tr:.4} <= random-0.9 {random_tr:.4}; smoke build {:.0} s (< 480 s)",
            drop * 100.0,
            a.nsp_top1,
            a.uniform,
            a.smoke_secs
        ),
    );
}

#[test]
fn c07_retrieval_sanity() {
    let _gate = lock();
    let a = artifacts();
    let t0 = Instant::now();
    let lambda2 = a.cfg.lambda2 as Real;

    // 100 queries with pairwise-distinct content (so no two *queries* tie),
    // plus 1000 database entries. A database duplicate of a query is
    // harmless: the planted twin occupies a smaller id and wins the
    // documented id-ascending tie-break.
    let mut seen: HashSet<(usize, Vec<(usize, i64, u32)>)> = HashSet::new();
    let mut queries: Vec<PathTrajectory> = Vec::new();
    for t in &a.val {
        let key = (
            t.user,
            t.steps.iter().map(|s| (s.segment, s.timestamp_s, s.gps_points)).collect(),
        );
        if seen.insert(key) {
            queries.push(t.clone());
            if queries.len() == 100 {
                break;
            }
        }
    }
    assert_eq!(queries.len(), 100, "validation split too small for distinct queries");
    let base: Vec<PathTrajectory> = a.train[..1000].to_vec();

    let rank = |model: &Model, setup: &RetrievalSetup| {
        let qe = embed_dataset(model, &a.net, &setup.queries, lambda2, UserMode::Enabled).unwrap();
        let de = embed_dataset(model, &a.net, &setup.database, lambda2, UserMode::Enabled).unwrap();
        let rankings: Vec<Vec<(usize, f64)>> = (0..setup.queries.len())
            .map(|i| rank_by_inner_product(qe.row_slice(i), &de))
            .collect();
        let targets: Vec<usize> = (0..setup.queries.len()).map(|i| setup.target_of(i)).collect();
        mean_rank(&targets, &rankings).unwrap()
    };

    let exact = RetrievalSetup::new(queries.clone(), base.clone(), 0.0, 99).unwrap();
    assert_eq!(exact.database.len(), 1100);
    let mr_exact = rank(&a.trained, &exact);
    let exact_ok = mr_exact.mean == Some(1.0) && mr_exact.missing == 0;

    let down = RetrievalSetup::new(queries, base, 0.1, 99).unwrap();
    let mr_trained = rank(&a.trained, &down);
    let mr_untrained = rank(&a.untrained, &down);
    let (mt, mu) = (mr_trained.mean.unwrap(), mr_untrained.mean.unwrap());

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        7,
        "retrieval sanity",
        exact_ok && mt < mu && secs < 120.0,
        &format!(
            "exact twins: mean rank {:?} over {} queries (= 1.0); downsampled at 0.1: \
             trained {mt:.2} < untrained {mu:.2}; {secs:.1} s (< 120 s)",
            mr_exact.mean, mr_exact.ranked
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: metric arithmetic on hand-computed cases
// ---------------------------------------------------------------------------

#[test]
fn c08_metric_arithmetic() {
    // Regression: predictions [10, 20] vs targets [8, 25] by hand:
    // absolute errors (2, 5), squared (4, 25), ratios (2/8, 5/25).
    let r = regression_metrics(&[10.0, 20.0], &[8.0, 25.0]).unwrap();
    let mape_hand = (2.0 / 8.0 + 5.0 / 25.0) / 2.0 * 100.0;
    let hand_ok = r.mae == 3.5
        && r.rmse == 14.5f64.sqrt()
        && r.mape == mape_hand
        && (r.mape - 22.5).abs() < 1e-12
        && r.mape_excluded == 0;

    let zero = regression_metrics(&[5.0, 7.0], &[5.0, 7.0]).unwrap();
    let unit = regression_metrics(&[6.0, 8.0], &[5.0, 7.0]).unwrap();
    let edge_ok = zero.mae == 0.0
        && zero.rmse == 0.0
        && zero.mape == 0.0
        && unit.mae == 1.0
        && unit.rmse == 1.0;

    let hr_equal = hit_ratio(&[vec![1, 2, 3]], &[vec![1, 2, 3]], 3).unwrap();
    let hr_disjoint = hit_ratio(&[vec![1, 2, 3]], &[vec![4, 5, 6]], 3).unwrap();
    let hr_overlap = hit_ratio(&[vec![0, 1, 2]], &[vec![0, 2, 3]], 3).unwrap();
    let hr_ok = hr_equal == 1.0 && hr_disjoint == 0.0 && hr_overlap == 2.0 / 3.0;

    let first = mean_rank(
        &[5, 9],
        &[vec![(5, 0.9), (1, 0.5)], vec![(9, 0.8), (2, 0.1)]],
    )
    .unwrap();
    let spread = mean_rank(
        &[0, 1, 2],
        &[
            vec![(0, 0.9), (8, 0.5), (9, 0.4)],
            vec![(7, 0.9), (1, 0.5), (9, 0.4)],
            vec![(7, 0.9), (8, 0.5), (2, 0.4)],
        ],
    )
    .unwrap();
    // Equal scores: the smaller candidate id ranks first, so the target
    // with the larger id lands at rank 2.
    let tie = mean_rank(&[1], &[vec![(0, 0.7), (1, 0.7)]]).unwrap();
    let mr_ok = first.mean == Some(1.0) && spread.mean == Some(2.0) && tie.mean == Some(2.0);

    verdict(
        8,
        "metric arithmetic",
        hand_ok && edge_ok && hr_ok && mr_ok,
        &format!(
            "mae {} rmse {:.6} mape {:.1}%; hit ratios {hr_equal}/{hr_disjoint}/{:.3}; \
             mean ranks 1.0 / 2.0 / tie->2.0 — all exact",
            r.mae, r.rmse, r.mape, hr_overlap
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: checkpoint round trip is bit-exact
// ---------------------------------------------------------------------------

#[test]
fn c09_checkpoint_round_trip() {
    let (net, trajs) = generate_synthetic(&GeneratorConfig {
        grid_width: 6,
        grid_height: 6,
        n_trajectories: 120,
        n_users: 5,
        seed: 123,
    })
    .unwrap();
    let shape = ModelShape {
        l: 16,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        tie_heads: false,
    };
    let mut rng = stream_rng(31, 9);
    let model = Model::new(&shape, net.n_segments(), 5, &mut rng).unwrap();
    let vocab = UserVocab::from_original((0..5).collect());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, &vocab, None).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.shape, shape);
    assert_eq!(meta.n_segments, net.n_segments());

    let subset = &trajs[..100];
    let before = embed_dataset(&model, &net, subset, 0.5, UserMode::Enabled).unwrap();
    let after = embed_dataset(&loaded, &net, subset, 0.5, UserMode::Enabled).unwrap();
    let identical = before.data() == after.data();
    verdict(
        9,
        "checkpoint round trip",
        identical,
        &format!(
            "100 trajectories re-embedded after save/load: {} scalars bit-identical",
            before.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: complexity conformance
// ---------------------------------------------------------------------------

/// Coefficient of determination of the least-squares line through the
/// points; for a simple linear fit this is the squared correlation.
fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    sxy * sxy / (sxx * syy)
}

fn median_secs(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

#[test]
fn c10_complexity_conformance() {
    let _gate = lock();

    // Masking should be linear in total steps: time whole-dataset splits
    // at 1x/2x/4x/8x the base size and fit a line.
    let (net, base) = generate_synthetic(&GeneratorConfig {
        grid_width: 8,
        grid_height: 8,
        n_trajectories: 1500,
        n_users: 8,
        seed: 55,
    })
    .unwrap();
    let th = compute_thresholds(&base, &net).unwrap();
    let base_steps: usize = base.iter().map(PathTrajectory::len).sum();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in [1usize, 2, 4, 8] {
        let dataset: Vec<&PathTrajectory> =
            std::iter::repeat(base.iter()).take(k).flatten().collect();
        let samples: Vec<f64> = (0..5)
            .map(|_| {
                let t = Instant::now();
                let mut sink = 0usize;
                for _ in 0..3 {
                    for traj in &dataset {
                        sink += road_aware_split(traj, &net, &th).key_indices.len();
                    }
                }
                std::hint::black_box(sink);
                t.elapsed().as_secs_f64()
            })
            .collect();
        xs.push((k * base_steps) as f64);
        ys.push(median_secs(samples));
    }
    let r2 = linear_r2(&xs, &ys);

    // The alignment tables should be quadratic: doubling both input
    // lengths multiplies work by four, allowed a factor-of-2 band.
    let mut rng = stream_rng(56, 10);
    let mut seq = |n: usize| -> PointSeq {
        PointSeq::new(
            (0..n)
                .map(|_| (rng.gen_range(0.0..1000.0), rng.gen_range(0.0..1000.0)))
                .collect(),
        )
        .unwrap()
    };
    let (a_short, b_short) = (seq(500), seq(500));
    let (a_long, b_long) = (seq(1000), seq(1000));
    let time_dtw = |a: &PointSeq, b: &PointSeq| {
        median_secs(
            (0..5)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(dtw(a, b));
                    t.elapsed().as_secs_f64()
                })
                .collect(),
        )
    };
    let t_short = time_dtw(&a_short, &b_short);
    let t_long = time_dtw(&a_long, &b_long);
    let ratio = t_long / t_short;

    verdict(
        10,
        "complexity conformance",
        r2 > 0.98 && (2.0..=8.0).contains(&ratio),
        &format!(
            "masking linear fit R^2 {r2:.4} (> 0.98) over {base_steps}..{} total steps; \
             alignment time ratio t(1000)/t(500) = {ratio:.2} (within [2, 8])",
            8 * base_steps
        ),
    );
}
