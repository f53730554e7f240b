//! Pretraining and fine-tuning.
//!
//! Pretraining optimizes two objectives at once on road-aware key/mask
//! splits: the encoder predicts each next key segment (and the end token),
//! the decoder reconstructs every step of the full trajectory. Both are
//! per-trajectory mean cross-entropies averaged over the mini-batch and
//! mixed as `total = λ1·nsp + (1−λ1)·tr`. Fine-tuning puts a linear head
//! on the trajectory vector: cross-entropy for classification, mean
//! squared error on minutes for travel-time estimation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::UserMode;
use crate::error::{Error, Result};
use crate::evaluation::{
    classification_metrics, embed_dataset, regression_metrics, ClassificationMetrics,
    RegressionMetrics,
};
use crate::masking::{compute_thresholds, random_split, road_aware_split, MaskSplit};
use crate::numcore::{
    glorot_uniform, linear, stream_rng, AdamW, Parameter, Real, Tape, Tensor, Var,
};
use crate::roadnet::RoadNetwork;
use crate::seq2seq::{
    interval_matrices, validate_trajectory, BiasInputs, Model, ModelShape, ModelVars,
    TokenVocabulary,
};
use crate::trajdata::PathTrajectory;

const MODEL_STREAM: u64 = 0x696e_6974; // "init"
const SHUFFLE_STREAM: u64 = 0x7368_7566; // "shuf"
const DROPOUT_STREAM: u64 = 0x6472_6f70; // "drop"
const HEAD_STREAM: u64 = 0x6865_6164; // "head"

/// Everything a pretraining run needs, file-loadable and CLI-overridable.
/// The graph-attention head counts are fixed
/// ([`GAT_HEADS`](crate::embedding::GAT_HEADS)) and therefore not part of
/// the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Embedding width shared by every encoder.
    pub l: usize,
    /// Attention heads per encoder/decoder layer.
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Dropout rate on the joint step embeddings during training.
    pub dropout: Real,
    /// Weight of the next-segment loss in the total.
    pub lambda1: Real,
    /// Distance share of the attention bias mix (time gets `1 - lambda2`).
    pub lambda2: Real,
    pub lr: Real,
    pub weight_decay: Real,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share the encoder's prediction head with the decoder.
    pub tie_heads: bool,
    /// Give decoder mask rows their step's time encoding.
    pub decoder_mask_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l: 128,
            n_heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            dropout: 0.1,
            lambda1: 0.1,
            lambda2: 0.5,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            seed: 7,
            tie_heads: true,
            decoder_mask_time: true,
        }
    }
}

impl TrainConfig {
    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            l: self.l,
            n_heads: self.n_heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            tie_heads: self.tie_heads,
        }
    }

    /// Field-level checks with readable messages; structural constraints
    /// (divisibility of `l`, layer counts) stay with the model constructors.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::validation(format!(
                "lambda1 must lie in [0, 1], got {}",
                self.lambda1
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda2) {
            return Err(Error::validation(format!(
                "lambda2 must lie in [0, 1], got {}",
                self.lambda2
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        if self.l == 0 {
            return Err(Error::validation("embedding width must be positive"));
        }
        Ok(())
    }

    /// Sets one field from its config-file spelling. Unknown keys and
    /// unparsable values are validation errors naming the key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::validation(format!("cannot parse {key} value {value:?}"))
            })
        }
        match key {
            "l" => self.l = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "tie_heads" => self.tie_heads = parse(key, value)?,
            "decoder_mask_time" => self.decoder_mask_time = parse(key, value)?,
            _ => return Err(Error::validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file over the defaults. `#` starts a
    /// comment, blank lines are skipped, any bad line fails with its number.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            cfg.apply(key.trim(), value).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The file format of [`TrainConfig::from_file`], keys in fixed order.
    pub fn dump(&self) -> String {
        format!(
            "l = {}\n\
             n_heads = {}\n\
             encoder_layers = {}\n\
             decoder_layers = {}\n\
             dropout = {}\n\
             lambda1 = {}\n\
             lambda2 = {}\n\
             lr = {}\n\
             weight_decay = {}\n\
             batch_size = {}\n\
             epochs = {}\n\
             seed = {}\n\
             tie_heads = {}\n\
             decoder_mask_time = {}\n",
            self.l,
            self.n_heads,
            self.encoder_layers,
            self.decoder_layers,
            self.dropout,
            self.lambda1,
            self.lambda2,
            self.lr,
            self.weight_decay,
            self.batch_size,
            self.epochs,
            self.seed,
            self.tie_heads,
            self.decoder_mask_time,
        )
    }
}

/// Fine-tuning knobs; the model architecture comes from the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub lr: Real,
    pub weight_decay: Real,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Attention-bias mix for the forward passes (travel-time estimation
    /// overrides this to 1: distance bias only).
    pub lambda2: Real,
    /// Train only the head, leaving the pretrained encoder untouched.
    pub freeze_encoder: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 30,
            seed: 7,
            lambda2: 0.5,
            freeze_encoder: false,
        }
    }
}

/// The two pretraining losses and their mix, always 64-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub nsp: f64,
    pub tr: f64,
    pub total: f64,
}

impl LossReport {
    /// `total = λ1·nsp + (1−λ1)·tr`, computed here and nowhere else so the
    /// identity holds exactly in every report.
    pub fn new(nsp: f64, tr: f64, lambda1: f64) -> Self {
        LossReport {
            nsp,
            tr,
            total: lambda1 * nsp + (1.0 - lambda1) * tr,
        }
    }
}

/// One line of the pretraining log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 0 is the untrained baseline; training epochs count from 1.
    pub epoch: usize,
    /// Mean training loss of the epoch's batches (absent at epoch 0).
    pub train: Option<LossReport>,
    /// Validation loss after the epoch.
    pub val: LossReport,
}

/// Next-segment targets aligned with the encoder's prediction positions
/// `(start, keys…)`: each key's segment, then the end token.
pub fn nsp_targets(traj: &PathTrajectory, key_idx: &[usize], vocab: &TokenVocabulary) -> Vec<usize> {
    key_idx
        .iter()
        .map(|&i| traj.steps[i].segment)
        .chain([vocab.end()])
        .collect()
}

/// Reconstruction targets: every step's segment, key and mask alike.
pub fn tr_targets(traj: &PathTrajectory) -> Vec<usize> {
    traj.steps.iter().map(|s| s.segment).collect()
}

/// Mean cross-entropy over all rows of one trajectory's logits.
pub fn sequence_loss(logits: &Var, targets: &[usize]) -> Var {
    logits.cross_entropy(targets, &vec![true; targets.len()])
}

/// Equal-weight mean of per-trajectory losses: every trajectory counts the
/// same regardless of its length.
pub fn batch_loss(tape: &Tape, per_trajectory: &[Var]) -> Var {
    assert!(!per_trajectory.is_empty(), "batch loss over an empty batch");
    tape.concat_rows(per_trajectory).mean()
}

/// Divergence guard: a non-finite loss aborts with enough context to find
/// the step that blew up.
fn guard_finite(total: f64, epoch: usize, batch: usize, lr: Real) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::integrity(format!(
            "non-finite loss {total} at epoch {epoch}, batch {batch} (lr {lr}); \
             lower the learning rate or check the input data"
        )))
    }
}

/// Both objectives of one trajectory on an already-bound tape. Returns the
/// `(nsp, tr)` scalar pair. `dropout > 0` perturbs the joint embeddings
/// (training only).
#[allow(clippy::too_many_arguments)]
fn trajectory_losses(
    tape: &Tape,
    vars: &ModelVars,
    net: &RoadNetwork,
    table: &Var,
    traj: &PathTrajectory,
    split: &MaskSplit,
    cfg: &TrainConfig,
    dropout: Real,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let mut embeds = vars.embedder.embed(tape, net, table, traj, UserMode::Enabled)?;
    if dropout > 0.0 {
        embeds = embeds.dropout(dropout, rng);
    }
    let key_idx = &split.key_indices;
    let mask_idx = &split.mask_indices;
    let key_embeds = embeds.gather_rows(key_idx);
    let start = table.gather_rows(&[net.virtual_id()]);
    let (mt, md) = interval_matrices(traj, net);
    let enc_bias = BiasInputs::for_encoder(tape, &mt, &md, key_idx, cfg.lambda2)?;
    let out = vars.seq.encode(tape, &start, &key_embeds, Some(&enc_bias));

    let vocab = vars.seq.vocab();
    let nsp = sequence_loss(&out.nsp_logits, &nsp_targets(traj, key_idx, &vocab));

    let mask_extra = if cfg.decoder_mask_time && !mask_idx.is_empty() {
        let times: Vec<i64> = mask_idx.iter().map(|&i| traj.steps[i].timestamp_s).collect();
        let types: Vec<_> = mask_idx
            .iter()
            .map(|&i| net.feature(traj.steps[i].segment).seg_type)
            .collect();
        Some(vars.embedder.time.encode_steps(tape, &times, &types))
    } else {
        None
    };
    let dec_bias = BiasInputs::for_decoder(tape, &mt, &md, cfg.lambda2)?;
    let logits = vars.seq.decode(
        tape,
        &out.key_states(),
        key_idx,
        mask_idx,
        mask_extra.as_ref(),
        Some(&dec_bias),
    );
    let tr = sequence_loss(&logits, &tr_targets(traj));
    Ok((nsp, tr))
}

/// Runs one batch forward and returns the mean losses as tape scalars
/// (`nsp`, `tr`) ready for mixing and backward.
#[allow(clippy::too_many_arguments)]
fn batch_losses(
    tape: &Tape,
    vars: &ModelVars,
    net: &RoadNetwork,
    batch: &[usize],
    trajs: &[PathTrajectory],
    splits: &[MaskSplit],
    cfg: &TrainConfig,
    dropout: Real,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let table = vars.embedder.spatial_table(tape, net);
    let mut nsp = Vec::with_capacity(batch.len());
    let mut tr = Vec::with_capacity(batch.len());
    for &i in batch {
        let (a, b) = trajectory_losses(
            tape, vars, net, &table, &trajs[i], &splits[i], cfg, dropout, rng,
        )?;
        nsp.push(a);
        tr.push(b);
    }
    Ok((batch_loss(tape, &nsp), batch_loss(tape, &tr)))
}

/// Mean validation loss over a whole split, evaluated without dropout in
/// batch-sized chunks (each chunk on a fresh tape, ordered reduction).
fn eval_split(
    net: &RoadNetwork,
    model: &Model,
    trajs: &[PathTrajectory],
    splits: &[MaskSplit],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let mut rng = stream_rng(cfg.seed, DROPOUT_STREAM); // untouched at rate 0
    let mut nsp_sum = 0.0f64;
    let mut tr_sum = 0.0f64;
    let all: Vec<usize> = (0..trajs.len()).collect();
    for chunk in all.chunks(cfg.batch_size.max(1)) {
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let table = vars.embedder.spatial_table(&tape, net);
        for &i in chunk {
            let (a, b) = trajectory_losses(
                &tape, &vars, net, &table, &trajs[i], &splits[i], cfg, 0.0, &mut rng,
            )?;
            nsp_sum += a.value().item() as f64;
            tr_sum += b.value().item() as f64;
        }
    }
    let n = trajs.len() as f64;
    Ok(LossReport::new(nsp_sum / n, tr_sum / n, cfg.lambda1 as f64))
}

/// How pretraining decides which steps of each trajectory stay visible.
///
/// The road-aware rule is the default; the seeded uniform baseline exists
/// so ablations can hold everything else fixed while swapping only the
/// masking decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskStrategy {
    /// Keep hot-or-long steps visible, thresholds from the training split.
    RoadAware,
    /// Hide a fixed fraction of each trajectory, chosen uniformly per
    /// trajectory from the config seed.
    Random {
        /// Fraction of steps to hide, in `[0, 1]`.
        ratio: f64,
    },
}

/// Pretrains a fresh model on `train`, reporting validation loss before
/// training and after every epoch. Deterministic for a fixed config: one
/// optimizer step at a time, ordered reductions throughout.
///
/// `on_epoch` fires once per log entry (including the epoch-0 baseline);
/// checkpoint writing hooks in there. Masking thresholds come from the
/// training split only, and each trajectory's road-aware split is fixed
/// for the whole run.
pub fn pretrain(
    net: &RoadNetwork,
    train: &[PathTrajectory],
    val: &[PathTrajectory],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&Model, &EpochLog) -> Result<()>,
) -> Result<(Model, Vec<EpochLog>)> {
    pretrain_with_masking(net, train, val, cfg, MaskStrategy::RoadAware, on_epoch)
}

/// [`pretrain`] with an explicit [`MaskStrategy`]; everything else —
/// initialization, shuffling, optimizer schedule — is identical, so two
/// runs differing only in `strategy` are a controlled comparison.
pub fn pretrain_with_masking(
    net: &RoadNetwork,
    train: &[PathTrajectory],
    val: &[PathTrajectory],
    cfg: &TrainConfig,
    strategy: MaskStrategy,
    mut on_epoch: impl FnMut(&Model, &EpochLog) -> Result<()>,
) -> Result<(Model, Vec<EpochLog>)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation(
            "pretraining needs non-empty training and validation splits",
        ));
    }
    if let MaskStrategy::Random { ratio } = strategy {
        if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
            return Err(Error::validation(format!(
                "masking ratio must lie in [0, 1], got {ratio}"
            )));
        }
    }
    for t in train.iter().chain(val) {
        validate_trajectory(net, t)?;
    }

    let n_users = train
        .iter()
        .chain(val)
        .map(|t| t.user + 1)
        .max()
        .expect("splits are non-empty");
    let mut init_rng = stream_rng(cfg.seed, MODEL_STREAM);
    let mut model = Model::new(&cfg.model_shape(), net.n_segments(), n_users, &mut init_rng)?;

    let thresholds = match strategy {
        MaskStrategy::RoadAware => Some(compute_thresholds(train, net)?),
        MaskStrategy::Random { .. } => None,
    };
    let split_one = |traj: &PathTrajectory, index: usize| match strategy {
        MaskStrategy::RoadAware => {
            road_aware_split(traj, net, thresholds.as_ref().expect("computed above"))
        }
        MaskStrategy::Random { ratio } => {
            random_split(traj, net, ratio, cfg.seed.wrapping_add(index as u64))
        }
    };
    let train_splits: Vec<MaskSplit> =
        train.iter().enumerate().map(|(i, t)| split_one(t, i)).collect();
    let val_splits: Vec<MaskSplit> = val
        .iter()
        .enumerate()
        .map(|(i, t)| split_one(t, train.len() + i))
        .collect();

    let mut opt = AdamW::new(cfg.lr);
    opt.weight_decay = cfg.weight_decay;

    let mut logs = Vec::with_capacity(cfg.epochs + 1);
    let baseline = EpochLog {
        epoch: 0,
        train: None,
        val: eval_split(net, &model, val, &val_splits, cfg)?,
    };
    on_epoch(&model, &baseline)?;
    logs.push(baseline);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = stream_rng(cfg.seed, SHUFFLE_STREAM.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = stream_rng(cfg.seed, DROPOUT_STREAM.wrapping_add(epoch as u64));

        let mut nsp_sum = 0.0f64;
        let mut tr_sum = 0.0f64;
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let (nsp, tr) = batch_losses(
                &tape,
                &vars,
                net,
                batch,
                train,
                &train_splits,
                cfg,
                cfg.dropout,
                &mut dropout_rng,
            )?;
            let total = nsp.scale(cfg.lambda1).add(&tr.scale(1.0 - cfg.lambda1));
            guard_finite(total.value().item() as f64, epoch, batch_id, opt.lr)?;
            total.backward();

            for p in model.params_mut() {
                p.zero_grad();
            }
            model.harvest(&vars);
            opt.step(model.params_mut());

            nsp_sum += nsp.value().item() as f64 * batch.len() as f64;
            tr_sum += tr.value().item() as f64 * batch.len() as f64;
        }

        let n = train.len() as f64;
        let log = EpochLog {
            epoch,
            train: Some(LossReport::new(nsp_sum / n, tr_sum / n, cfg.lambda1 as f64)),
            val: eval_split(net, &model, val, &val_splits, cfg)?,
        };
        on_epoch(&model, &log)?;
        logs.push(log);
    }
    Ok((model, logs))
}

/// The trajectory vector on an already-bound tape: the full-keys encoder
/// pass fine-tuning backpropagates through.
fn trajectory_vector_var(
    tape: &Tape,
    vars: &ModelVars,
    net: &RoadNetwork,
    table: &Var,
    traj: &PathTrajectory,
    lambda2: Real,
    mode: UserMode,
) -> Result<Var> {
    validate_trajectory(net, traj)?;
    let embeds = vars.embedder.embed(tape, net, table, traj, mode)?;
    let start = table.gather_rows(&[net.virtual_id()]);
    let (mt, md) = interval_matrices(traj, net);
    let all: Vec<usize> = (0..traj.steps.len()).collect();
    let bias = BiasInputs::for_encoder(tape, &mt, &md, &all, lambda2)?;
    Ok(vars.seq.encode(tape, &start, &embeds, Some(&bias)).trajectory_vector)
}

/// Scores a dataset against a linear head in 64-bit: `X·W + b` row by row.
fn head_scores(embeds: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let k = w.cols();
    let mut out = Tensor::zeros(embeds.rows(), k);
    for i in 0..embeds.rows() {
        let row = embeds.row_slice(i);
        for j in 0..k {
            let mut s = b.data()[j] as f64;
            for (d, &x) in row.iter().enumerate() {
                s += x as f64 * w[(d, j)] as f64;
            }
            out.data_mut()[i * k + j] = s as Real;
        }
    }
    out
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trained head plus test metrics of a classification fine-tune.
#[derive(Debug)]
pub struct ClassifierOutcome {
    pub metrics: ClassificationMetrics,
    /// Mean training cross-entropy per epoch.
    pub train_loss: Vec<f64>,
}

/// Fine-tunes the model (in place) plus a fresh linear head on labeled
/// trajectories and evaluates on the held-out set. Pass
/// [`UserMode::Disabled`] when the labels are the user ids themselves,
/// otherwise the user table hands the answer to the head.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classification(
    model: &mut Model,
    net: &RoadNetwork,
    train: &[PathTrajectory],
    train_labels: &[usize],
    test: &[PathTrajectory],
    test_labels: &[usize],
    n_classes: usize,
    mode: UserMode,
    cfg: &FineTuneConfig,
) -> Result<ClassifierOutcome> {
    if n_classes < 2 {
        return Err(Error::validation(format!(
            "classification needs at least 2 classes, got {n_classes}"
        )));
    }
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::validation("one label per trajectory, on both splits"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::validation("classification needs non-empty splits"));
    }
    if let Some(&bad) = train_labels.iter().chain(test_labels).find(|&&c| c >= n_classes) {
        return Err(Error::validation(format!(
            "label {bad} outside the {n_classes}-class range"
        )));
    }

    let l = model.l();
    let mut head_rng = stream_rng(cfg.seed, HEAD_STREAM);
    let mut head_w = Parameter::new("cls.head_w", glorot_uniform(l, n_classes, &mut head_rng));
    let mut head_b = Parameter::new("cls.head_b", Tensor::zeros(1, n_classes));

    let mut opt = AdamW::new(cfg.lr);
    opt.weight_decay = cfg.weight_decay;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = stream_rng(cfg.seed, SHUFFLE_STREAM.wrapping_add(epoch as u64));
        let mut loss_sum = 0.0f64;
        for (batch_id, batch) in
            shuffled_batches(train.len(), cfg.batch_size, &mut rng).iter().enumerate()
        {
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let w = tape.leaf(head_w.value.clone());
            let b = tape.leaf(head_b.value.clone());
            let table = vars.embedder.spatial_table(&tape, net);
            let rows = batch
                .iter()
                .map(|&i| {
                    trajectory_vector_var(&tape, &vars, net, &table, &train[i], cfg.lambda2, mode)
                })
                .collect::<Result<Vec<Var>>>()?;
            let logits = linear(&tape.concat_rows(&rows), &w, &b);
            let targets: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let loss = logits.cross_entropy(&targets, &vec![true; targets.len()]);
            guard_finite(loss.value().item() as f64, epoch, batch_id, opt.lr)?;
            loss.backward();

            head_w.zero_grad();
            head_b.zero_grad();
            head_w.accumulate_grad(&w.grad());
            head_b.accumulate_grad(&b.grad());
            if cfg.freeze_encoder {
                opt.step([&mut head_w, &mut head_b]);
            } else {
                for p in model.params_mut() {
                    p.zero_grad();
                }
                model.harvest(&vars);
                let mut params = model.params_mut();
                params.push(&mut head_w);
                params.push(&mut head_b);
                opt.step(params);
            }
            loss_sum += loss.value().item() as f64 * batch.len() as f64;
        }
        train_loss.push(loss_sum / train.len() as f64);
    }

    let embeds = embed_dataset(model, net, test, cfg.lambda2, mode)?;
    let scores = head_scores(&embeds, &head_w.value, &head_b.value);
    Ok(ClassifierOutcome {
        metrics: classification_metrics(&scores, test_labels, n_classes)?,
        train_loss,
    })
}

/// A copy whose every timestamp is the departure time. Travel-time inputs
/// go through this first, so nothing after step 0's clock reading can leak
/// the answer — predictions are bitwise invariant to any rearrangement of
/// the later timestamps.
pub fn strip_times(traj: &PathTrajectory) -> PathTrajectory {
    let departure = traj.steps.first().map_or(0, |s| s.timestamp_s);
    PathTrajectory {
        user: traj.user,
        steps: traj
            .steps
            .iter()
            .map(|s| crate::trajdata::PathStep {
                timestamp_s: departure,
                ..*s
            })
            .collect(),
    }
}

/// Travel time in minutes: the regression target.
pub fn travel_minutes(traj: &PathTrajectory) -> f64 {
    traj.duration_s() as f64 / 60.0
}

/// Trained head plus test metrics of a travel-time fine-tune.
#[derive(Debug)]
pub struct RegressorOutcome {
    pub metrics: RegressionMetrics,
    /// Mean training squared error (minutes²) per epoch.
    pub train_loss: Vec<f64>,
    /// Test-set predictions in minutes, row per trajectory.
    pub predictions: Vec<f64>,
}

/// Fine-tunes for travel-time estimation: inputs keep only the departure
/// time (see [`strip_times`]), the attention bias runs distance-only
/// (`λ2 = 1`), and a 1-wide head regresses minutes under squared error.
pub fn finetune_tte(
    model: &mut Model,
    net: &RoadNetwork,
    train: &[PathTrajectory],
    test: &[PathTrajectory],
    mode: UserMode,
    cfg: &FineTuneConfig,
) -> Result<RegressorOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::validation("travel-time estimation needs non-empty splits"));
    }
    let stripped_train: Vec<PathTrajectory> = train.iter().map(strip_times).collect();
    let stripped_test: Vec<PathTrajectory> = test.iter().map(strip_times).collect();
    let train_targets: Vec<f64> = train.iter().map(travel_minutes).collect();
    let test_targets: Vec<f64> = test.iter().map(travel_minutes).collect();
    let lambda2 = 1.0; // distance bias only: time intervals are stripped

    let l = model.l();
    let mut head_rng = stream_rng(cfg.seed, HEAD_STREAM);
    let mut head_w = Parameter::new("tte.head_w", glorot_uniform(l, 1, &mut head_rng));
    let mut head_b = Parameter::new("tte.head_b", Tensor::zeros(1, 1));

    let mut opt = AdamW::new(cfg.lr);
    opt.weight_decay = cfg.weight_decay;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = stream_rng(cfg.seed, SHUFFLE_STREAM.wrapping_add(epoch as u64));
        let mut loss_sum = 0.0f64;
        for (batch_id, batch) in
            shuffled_batches(train.len(), cfg.batch_size, &mut rng).iter().enumerate()
        {
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let w = tape.leaf(head_w.value.clone());
            let b = tape.leaf(head_b.value.clone());
            let table = vars.embedder.spatial_table(&tape, net);
            let rows = batch
                .iter()
                .map(|&i| {
                    trajectory_vector_var(
                        &tape,
                        &vars,
                        net,
                        &table,
                        &stripped_train[i],
                        lambda2,
                        mode,
                    )
                })
                .collect::<Result<Vec<Var>>>()?;
            let pred = linear(&tape.concat_rows(&rows), &w, &b);
            let target = tape.constant(Tensor::new(
                batch.len(),
                1,
                batch.iter().map(|&i| train_targets[i] as Real).collect(),
            ));
            let diff = pred.sub(&target);
            let loss = diff.mul(&diff).mean();
            guard_finite(loss.value().item() as f64, epoch, batch_id, opt.lr)?;
            loss.backward();

            head_w.zero_grad();
            head_b.zero_grad();
            head_w.accumulate_grad(&w.grad());
            head_b.accumulate_grad(&b.grad());
            if cfg.freeze_encoder {
                opt.step([&mut head_w, &mut head_b]);
            } else {
                for p in model.params_mut() {
                    p.zero_grad();
                }
                model.harvest(&vars);
                let mut params = model.params_mut();
                params.push(&mut head_w);
                params.push(&mut head_b);
                opt.step(params);
            }
            loss_sum += loss.value().item() as f64 * batch.len() as f64;
        }
        train_loss.push(loss_sum / train.len() as f64);
    }

    let embeds = embed_dataset(model, net, &stripped_test, lambda2, mode)?;
    let scores = head_scores(&embeds, &head_w.value, &head_b.value);
    let predictions: Vec<f64> = (0..scores.rows()).map(|i| scores[(i, 0)] as f64).collect();
    Ok(RegressorOutcome {
        metrics: regression_metrics(&predictions, &test_targets)?,
        train_loss,
        predictions,
    })
}
