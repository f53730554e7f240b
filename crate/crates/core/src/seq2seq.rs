//! The sequence model over embedded trajectory steps: a causal encoder
//! reads `(start, key steps…, extract)` and predicts each next key
//! segment, a bidirectional decoder reads the restored full-length
//! sequence and reconstructs every step's segment. Both stacks add a
//! learned attention bias derived from pairwise time and travel-distance
//! intervals, so attention can favor steps that are close in time or
//! space rather than merely close in sequence position.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{StepEmbedder, StepEmbedderVars, UserMode};
use crate::error::{Error, Result};
use crate::numcore::{
    glorot_uniform, linear, normal_init, take_var, Parameter, Real, Tape, Tensor, Var,
};
use crate::roadnet::RoadNetwork;
use crate::trajdata::PathTrajectory;

/// Natural-log base of the interval dampening curves.
const E: Real = std::f64::consts::E as Real;

/// Fill for blocked attention logits; underflows to zero weight after the
/// row-max shift inside softmax.
const BLOCKED: Real = -1e30;

/// Epsilon inside the layer-norm variance square root.
const LN_EPS: Real = 1e-5;

/// Sequence-token classes appended after the real segment ids.
pub const RESERVED_CLASSES: usize = 3;

/// Correlation weight of a time interval in seconds: `1/ln(e + minutes)`.
/// Close in time means a weight near 1; the weight decays slowly toward 0.
pub fn f_time(seconds: Real) -> Real {
    assert!(seconds >= 0.0, "intervals are absolute differences, got {seconds}");
    1.0 / (E + seconds / 60.0).ln()
}

/// Correlation weight of a travel distance in meters: `1/ln(e + kilometers)`.
pub fn f_dist(meters: Real) -> Real {
    assert!(meters >= 0.0, "intervals are absolute differences, got {meters}");
    1.0 / (E + meters / 1000.0).ln()
}

/// Pairwise step intervals of one trajectory: `|t_i - t_j|` in seconds and
/// the travel length in meters. The travel length between steps `i < j` is
/// half of each endpoint segment plus the full segments strictly between,
/// which keeps the matrix symmetric with a zero diagonal.
pub fn interval_matrices(traj: &PathTrajectory, net: &RoadNetwork) -> (Tensor, Tensor) {
    let n = traj.steps.len();
    let lengths: Vec<Real> = traj
        .steps
        .iter()
        .map(|s| net.feature(s.segment).length_m as Real)
        .collect();
    let mut prefix = vec![0.0; n + 1];
    for (i, &len) in lengths.iter().enumerate() {
        prefix[i + 1] = prefix[i] + len;
    }
    let mut mt = Tensor::zeros(n, n);
    let mut md = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (lo, hi) = (i.min(j), i.max(j));
            let between = prefix[hi] - prefix[lo + 1];
            mt.data_mut()[i * n + j] =
                (traj.steps[i].timestamp_s - traj.steps[j].timestamp_s).abs() as Real;
            md.data_mut()[i * n + j] = between + (lengths[lo] + lengths[hi]) / 2.0;
        }
    }
    (mt, md)
}

/// Fixed sinusoidal position rows: column pair `2k, 2k+1` holds the sine
/// and cosine of `pos / 10000^(2k/l)`.
pub fn positional_encoding(n: usize, l: usize) -> Tensor {
    assert!(l > 0 && l % 2 == 0, "positional encoding needs an even width, got {l}");
    let mut pe = Tensor::zeros(n, l);
    for p in 0..n {
        for k in 0..l / 2 {
            let angle = p as Real / (10000.0 as Real).powf(2.0 * k as Real / l as Real);
            pe.data_mut()[p * l + 2 * k] = angle.sin();
            pe.data_mut()[p * l + 2 * k + 1] = angle.cos();
        }
    }
    pe
}

/// Per-trajectory attention-bias ingredients, built once per tape and
/// shared by every layer: the dampened interval values flattened to one
/// column (one scalar per ordered token pair, so a layer can lift them all
/// in a single affine pass), the time/distance mixing fraction, and the
/// virtual-token zeroing flags.
pub struct BiasInputs {
    ft_flat: Var,
    fd_flat: Var,
    lambda2: Real,
    zeroed: Option<Rc<Vec<bool>>>,
    n: usize,
}

impl BiasInputs {
    /// `mt` (seconds) and `md` (meters) are the square pairwise matrices of
    /// the token layout. `virtual_positions` lists tokens whose bias rows
    /// and columns are forced to zero: they carry no timestamp or place, so
    /// no interval relates them to anything.
    pub fn new(
        tape: &Tape,
        mt: &Tensor,
        md: &Tensor,
        lambda2: Real,
        virtual_positions: &[usize],
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda2) {
            return Err(Error::validation(format!(
                "interval mixing fraction must lie in [0, 1], got {lambda2}"
            )));
        }
        let [n, cols] = mt.shape();
        assert_eq!(n, cols, "interval matrices must be square, got {:?}", mt.shape());
        assert_eq!(
            mt.shape(),
            md.shape(),
            "time and distance matrices disagree: {:?} vs {:?}",
            mt.shape(),
            md.shape()
        );
        let ft: Vec<Real> = mt.data().iter().map(|&m| f_time(m)).collect();
        let fd: Vec<Real> = md.data().iter().map(|&m| f_dist(m)).collect();
        let zeroed = if virtual_positions.is_empty() {
            None
        } else {
            let mut flags = vec![false; n * n];
            for &p in virtual_positions {
                assert!(p < n, "virtual position {p} outside {n} tokens");
                for k in 0..n {
                    flags[p * n + k] = true;
                    flags[k * n + p] = true;
                }
            }
            Some(Rc::new(flags))
        };
        Ok(Self {
            ft_flat: tape.constant(Tensor::new(n * n, 1, ft)),
            fd_flat: tape.constant(Tensor::new(n * n, 1, fd)),
            lambda2,
            zeroed,
            n,
        })
    }

    /// Bias for the encoder layout `(start, keys…, extract)`: the key/key
    /// block of the full interval matrices shifted one position right and
    /// down, with the two sequence tokens zeroed.
    pub fn for_encoder(
        tape: &Tape,
        mt_full: &Tensor,
        md_full: &Tensor,
        key_idx: &[usize],
        lambda2: Real,
    ) -> Result<Self> {
        let m = key_idx.len() + 2;
        let mut mt = Tensor::zeros(m, m);
        let mut md = Tensor::zeros(m, m);
        for (a, &i) in key_idx.iter().enumerate() {
            for (b, &j) in key_idx.iter().enumerate() {
                mt.data_mut()[(a + 1) * m + b + 1] = mt_full[(i, j)];
                md.data_mut()[(a + 1) * m + b + 1] = md_full[(i, j)];
            }
        }
        Self::new(tape, &mt, &md, lambda2, &[0, m - 1])
    }

    /// Bias for the decoder, which sees every real step and no sequence
    /// tokens: the full matrices as they are.
    pub fn for_decoder(
        tape: &Tape,
        mt_full: &Tensor,
        md_full: &Tensor,
        lambda2: Real,
    ) -> Result<Self> {
        Self::new(tape, mt_full, md_full, lambda2, &[])
    }

    pub fn token_count(&self) -> usize {
        self.n
    }
}

/// Two-stage affine map lifting one dampened interval scalar through an
/// `l/2`-wide hidden row back to a scalar bias entry; applied to all token
/// pairs at once as an `(n², 1)` column.
#[derive(Debug)]
struct BiasLift {
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
}

impl BiasLift {
    fn new(prefix: &str, l: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: Parameter::new(format!("{prefix}.w1"), glorot_uniform(1, l / 2, rng)),
            b1: Parameter::new(format!("{prefix}.b1"), Tensor::zeros(1, l / 2)),
            w2: Parameter::new(format!("{prefix}.w2"), glorot_uniform(l / 2, 1, rng)),
            b2: Parameter::new(format!("{prefix}.b2"), Tensor::zeros(1, 1)),
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn bind(&self, tape: &Tape) -> BiasLiftVars {
        BiasLiftVars {
            w1: tape.leaf(self.w1.value.clone()),
            b1: tape.leaf(self.b1.value.clone()),
            w2: tape.leaf(self.w2.value.clone()),
            b2: tape.leaf(self.b2.value.clone()),
        }
    }

    fn harvest(&mut self, vars: &BiasLiftVars) {
        self.w1.accumulate_grad(&vars.w1.grad());
        self.b1.accumulate_grad(&vars.b1.grad());
        self.w2.accumulate_grad(&vars.w2.grad());
        self.b2.accumulate_grad(&vars.b2.grad());
    }

    fn rebind(&self, vars: &[Var], at: &mut usize) -> BiasLiftVars {
        BiasLiftVars {
            w1: take_var(vars, at),
            b1: take_var(vars, at),
            w2: take_var(vars, at),
            b2: take_var(vars, at),
        }
    }
}

struct BiasLiftVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BiasLiftVars {
    fn apply(&self, flat: &Var) -> Var {
        linear(&linear(flat, &self.w1, &self.b1), &self.w2, &self.b2)
    }
}

/// One attention head's projections. Heads keep separate weight matrices
/// so each projects straight from the shared input row.
#[derive(Debug)]
struct AttnHead {
    wq: Parameter,
    bq: Parameter,
    wk: Parameter,
    bk: Parameter,
    wv: Parameter,
    bv: Parameter,
}

impl AttnHead {
    fn new(prefix: &str, l: usize, dh: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Parameter::new(format!("{prefix}.wq"), glorot_uniform(l, dh, rng)),
            bq: Parameter::new(format!("{prefix}.bq"), Tensor::zeros(1, dh)),
            wk: Parameter::new(format!("{prefix}.wk"), glorot_uniform(l, dh, rng)),
            bk: Parameter::new(format!("{prefix}.bk"), Tensor::zeros(1, dh)),
            wv: Parameter::new(format!("{prefix}.wv"), glorot_uniform(l, dh, rng)),
            bv: Parameter::new(format!("{prefix}.bv"), Tensor::zeros(1, dh)),
        }
    }
}

struct AttnHeadVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
}

/// One residual block: multi-head self-attention (optionally causal,
/// optionally interval-biased), then a 4x feed-forward expansion, each
/// followed by add-and-normalize. The interval lifts are per layer and
/// shared across its heads.
#[derive(Debug)]
struct TransformerLayer {
    heads: Vec<AttnHead>,
    wo: Parameter,
    bo: Parameter,
    ff1_w: Parameter,
    ff1_b: Parameter,
    ff2_w: Parameter,
    ff2_b: Parameter,
    ln1_g: Parameter,
    ln1_b: Parameter,
    ln2_g: Parameter,
    ln2_b: Parameter,
    t_lift: BiasLift,
    d_lift: BiasLift,
    l: usize,
}

impl TransformerLayer {
    fn new(prefix: &str, l: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let dh = l / n_heads;
        let heads = (0..n_heads)
            .map(|h| AttnHead::new(&format!("{prefix}.h{h}"), l, dh, rng))
            .collect();
        Self {
            heads,
            wo: Parameter::new(format!("{prefix}.wo"), glorot_uniform(l, l, rng)),
            bo: Parameter::new(format!("{prefix}.bo"), Tensor::zeros(1, l)),
            ff1_w: Parameter::new(format!("{prefix}.ff1_w"), glorot_uniform(l, 4 * l, rng)),
            ff1_b: Parameter::new(format!("{prefix}.ff1_b"), Tensor::zeros(1, 4 * l)),
            ff2_w: Parameter::new(format!("{prefix}.ff2_w"), glorot_uniform(4 * l, l, rng)),
            ff2_b: Parameter::new(format!("{prefix}.ff2_b"), Tensor::zeros(1, l)),
            ln1_g: Parameter::new(format!("{prefix}.ln1_g"), Tensor::full(1, l, 1.0)),
            ln1_b: Parameter::new(format!("{prefix}.ln1_b"), Tensor::zeros(1, l)),
            ln2_g: Parameter::new(format!("{prefix}.ln2_g"), Tensor::full(1, l, 1.0)),
            ln2_b: Parameter::new(format!("{prefix}.ln2_b"), Tensor::zeros(1, l)),
            t_lift: BiasLift::new(&format!("{prefix}.t_lift"), l, rng),
            d_lift: BiasLift::new(&format!("{prefix}.d_lift"), l, rng),
            l,
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut p = Vec::new();
        for h in &self.heads {
            p.extend([&h.wq, &h.bq, &h.wk, &h.bk, &h.wv, &h.bv]);
        }
        p.extend([
            &self.wo, &self.bo, &self.ff1_w, &self.ff1_b, &self.ff2_w, &self.ff2_b, &self.ln1_g,
            &self.ln1_b, &self.ln2_g, &self.ln2_b,
        ]);
        p.extend(self.t_lift.params());
        p.extend(self.d_lift.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p: Vec<&mut Parameter> = Vec::new();
        for h in &mut self.heads {
            p.extend([&mut h.wq, &mut h.bq, &mut h.wk, &mut h.bk, &mut h.wv, &mut h.bv]);
        }
        p.extend([
            &mut self.wo,
            &mut self.bo,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]);
        p.extend(self.t_lift.params_mut());
        p.extend(self.d_lift.params_mut());
        p
    }

    fn bind(&self, tape: &Tape) -> TransformerLayerVars {
        TransformerLayerVars {
            heads: self
                .heads
                .iter()
                .map(|h| AttnHeadVars {
                    wq: tape.leaf(h.wq.value.clone()),
                    bq: tape.leaf(h.bq.value.clone()),
                    wk: tape.leaf(h.wk.value.clone()),
                    bk: tape.leaf(h.bk.value.clone()),
                    wv: tape.leaf(h.wv.value.clone()),
                    bv: tape.leaf(h.bv.value.clone()),
                })
                .collect(),
            wo: tape.leaf(self.wo.value.clone()),
            bo: tape.leaf(self.bo.value.clone()),
            ff1_w: tape.leaf(self.ff1_w.value.clone()),
            ff1_b: tape.leaf(self.ff1_b.value.clone()),
            ff2_w: tape.leaf(self.ff2_w.value.clone()),
            ff2_b: tape.leaf(self.ff2_b.value.clone()),
            ln1_g: tape.leaf(self.ln1_g.value.clone()),
            ln1_b: tape.leaf(self.ln1_b.value.clone()),
            ln2_g: tape.leaf(self.ln2_g.value.clone()),
            ln2_b: tape.leaf(self.ln2_b.value.clone()),
            t_lift: self.t_lift.bind(tape),
            d_lift: self.d_lift.bind(tape),
            l: self.l,
        }
    }

    fn harvest(&mut self, vars: &TransformerLayerVars) {
        for (h, hv) in self.heads.iter_mut().zip(&vars.heads) {
            h.wq.accumulate_grad(&hv.wq.grad());
            h.bq.accumulate_grad(&hv.bq.grad());
            h.wk.accumulate_grad(&hv.wk.grad());
            h.bk.accumulate_grad(&hv.bk.grad());
            h.wv.accumulate_grad(&hv.wv.grad());
            h.bv.accumulate_grad(&hv.bv.grad());
        }
        self.wo.accumulate_grad(&vars.wo.grad());
        self.bo.accumulate_grad(&vars.bo.grad());
        self.ff1_w.accumulate_grad(&vars.ff1_w.grad());
        self.ff1_b.accumulate_grad(&vars.ff1_b.grad());
        self.ff2_w.accumulate_grad(&vars.ff2_w.grad());
        self.ff2_b.accumulate_grad(&vars.ff2_b.grad());
        self.ln1_g.accumulate_grad(&vars.ln1_g.grad());
        self.ln1_b.accumulate_grad(&vars.ln1_b.grad());
        self.ln2_g.accumulate_grad(&vars.ln2_g.grad());
        self.ln2_b.accumulate_grad(&vars.ln2_b.grad());
        self.t_lift.harvest(&vars.t_lift);
        self.d_lift.harvest(&vars.d_lift);
    }

    fn rebind(&self, vars: &[Var], at: &mut usize) -> TransformerLayerVars {
        TransformerLayerVars {
            heads: self
                .heads
                .iter()
                .map(|_| AttnHeadVars {
                    wq: take_var(vars, at),
                    bq: take_var(vars, at),
                    wk: take_var(vars, at),
                    bk: take_var(vars, at),
                    wv: take_var(vars, at),
                    bv: take_var(vars, at),
                })
                .collect(),
            wo: take_var(vars, at),
            bo: take_var(vars, at),
            ff1_w: take_var(vars, at),
            ff1_b: take_var(vars, at),
            ff2_w: take_var(vars, at),
            ff2_b: take_var(vars, at),
            ln1_g: take_var(vars, at),
            ln1_b: take_var(vars, at),
            ln2_g: take_var(vars, at),
            ln2_b: take_var(vars, at),
            t_lift: self.t_lift.rebind(vars, at),
            d_lift: self.d_lift.rebind(vars, at),
            l: self.l,
        }
    }
}

struct TransformerLayerVars {
    heads: Vec<AttnHeadVars>,
    wo: Var,
    bo: Var,
    ff1_w: Var,
    ff1_b: Var,
    ff2_w: Var,
    ff2_b: Var,
    ln1_g: Var,
    ln1_b: Var,
    ln2_g: Var,
    ln2_b: Var,
    t_lift: BiasLiftVars,
    d_lift: BiasLiftVars,
    l: usize,
}

impl TransformerLayerVars {
    /// The two lifted bias matrices of this layer, virtual rows/columns
    /// already zeroed. Split out so tests can pin the mixing endpoints.
    fn lifted(&self, bias: &BiasInputs) -> (Var, Var) {
        let n = bias.n;
        let at = self.t_lift.apply(&bias.ft_flat).reshape(n, n);
        let ad = self.d_lift.apply(&bias.fd_flat).reshape(n, n);
        match &bias.zeroed {
            Some(flags) => (at.masked_fill(flags, 0.0), ad.masked_fill(flags, 0.0)),
            None => (at, ad),
        }
    }

    /// The mixed additive attention bias `(1-λ2)·time + λ2·distance`.
    fn combined_bias(&self, bias: &BiasInputs) -> Var {
        let (at, ad) = self.lifted(bias);
        at.scale(1.0 - bias.lambda2).add(&ad.scale(bias.lambda2))
    }

    fn forward(&self, x: &Var, causal: Option<&Rc<Vec<bool>>>, bias: Option<&BiasInputs>) -> Var {
        let n = x.shape()[0];
        assert_eq!(x.shape()[1], self.l, "input width disagrees with the layer");
        let bias_mat = bias.map(|b| {
            assert_eq!(b.n, n, "bias built for {} tokens, input has {n}", b.n);
            self.combined_bias(b)
        });
        let dh = self.l / self.heads.len();
        let inv_sqrt = 1.0 / (dh as Real).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = linear(x, &head.wq, &head.bq);
            let k = linear(x, &head.wk, &head.bk);
            let v = linear(x, &head.wv, &head.bv);
            let mut logits = q.matmul(&k.transpose()).scale(inv_sqrt);
            if let Some(b) = &bias_mat {
                logits = logits.add(b);
            }
            if let Some(blocked) = causal {
                // The fill overwrites whatever the bias added, so blocked
                // positions stay blocked.
                logits = logits.masked_fill(blocked, BLOCKED);
            }
            outs.push(logits.softmax_rows().matmul(&v));
        }
        let mut it = outs.into_iter();
        let first = it.next().expect("a layer has at least one head");
        let cat = it.fold(first, |acc, h| acc.concat_cols(&h));
        let attended = linear(&cat, &self.wo, &self.bo);
        let x1 = x.add(&attended).layer_norm(&self.ln1_g, &self.ln1_b, LN_EPS);
        let ff = linear(
            &linear(&x1, &self.ff1_w, &self.ff1_b).relu(),
            &self.ff2_w,
            &self.ff2_b,
        );
        x1.add(&ff).layer_norm(&self.ln2_g, &self.ln2_b, LN_EPS)
    }
}

/// Row-major flags blocking attention from position `i` to any `j > i`.
fn causal_blocked(n: usize) -> Rc<Vec<bool>> {
    let mut flags = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            flags[i * n + j] = true;
        }
    }
    Rc::new(flags)
}

/// Class-id layout for sequence prediction: the `|V|` real segments
/// followed by the three sequence tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenVocabulary {
    pub n_segments: usize,
}

impl TokenVocabulary {
    pub fn new(n_segments: usize) -> Self {
        Self { n_segments }
    }

    /// Total class count `|V| + 3`.
    pub fn size(&self) -> usize {
        self.n_segments + RESERVED_CLASSES
    }

    /// Start-of-sequence token; shares the virtual graph node's spatial row.
    pub fn start(&self) -> usize {
        self.n_segments
    }

    /// End-of-sequence class; appears only as a prediction target.
    pub fn end(&self) -> usize {
        self.n_segments + 1
    }

    /// Whole-trajectory readout token; never a prediction target.
    pub fn extract(&self) -> usize {
        self.n_segments + 2
    }
}

/// Width and depth knobs for [`Seq2Seq::new`] and [`Model::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Shared embedding width `l`.
    pub l: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Share one output logits head between encoder and decoder.
    pub tie_heads: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            l: 128,
            n_heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            tie_heads: true,
        }
    }
}

/// Causal encoder over key steps plus bidirectional reconstruction decoder,
/// with the shared token machinery (readout/mask embeddings, logits heads).
pub struct Seq2Seq {
    vocab: TokenVocabulary,
    l: usize,
    encoder: Vec<TransformerLayer>,
    decoder: Vec<TransformerLayer>,
    /// Input row of the readout token appended after the key steps.
    extract_embed: Parameter,
    /// Stand-in input row for masked steps in the decoder.
    mask_embed: Parameter,
    head_w: Parameter,
    head_b: Parameter,
    /// Separate decoder logits head when the heads are untied.
    dec_head: Option<(Parameter, Parameter)>,
}

impl Seq2Seq {
    pub fn new(shape: &ModelShape, vocab: TokenVocabulary, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ModelShape {
            l,
            n_heads,
            encoder_layers,
            decoder_layers,
            tie_heads,
        } = *shape;
        if l == 0 || l % 2 != 0 {
            return Err(Error::validation(format!(
                "embedding width must be a positive even number, got {l}"
            )));
        }
        if n_heads == 0 || l % n_heads != 0 {
            return Err(Error::validation(format!(
                "head count {n_heads} must divide the embedding width {l}"
            )));
        }
        if encoder_layers == 0 || decoder_layers == 0 {
            return Err(Error::validation(
                "encoder and decoder need at least one layer each",
            ));
        }
        if vocab.n_segments == 0 {
            return Err(Error::validation("vocabulary needs at least one segment"));
        }
        let encoder = (0..encoder_layers)
            .map(|i| TransformerLayer::new(&format!("enc{i}"), l, n_heads, rng))
            .collect();
        let decoder = (0..decoder_layers)
            .map(|i| TransformerLayer::new(&format!("dec{i}"), l, n_heads, rng))
            .collect();
        let c = vocab.size();
        let head_w = Parameter::new("seq.head_w", glorot_uniform(l, c, rng));
        let head_b = Parameter::new("seq.head_b", Tensor::zeros(1, c));
        let dec_head = if tie_heads {
            None
        } else {
            Some((
                Parameter::new("seq.dec_head_w", glorot_uniform(l, c, rng)),
                Parameter::new("seq.dec_head_b", Tensor::zeros(1, c)),
            ))
        };
        Ok(Self {
            vocab,
            l,
            encoder,
            decoder,
            extract_embed: Parameter::new("seq.extract", normal_init(1, l, 0.02, rng)),
            mask_embed: Parameter::new("seq.mask", normal_init(1, l, 0.02, rng)),
            head_w,
            head_b,
            dec_head,
        })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn vocab(&self) -> TokenVocabulary {
        self.vocab
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p: Vec<&Parameter> = Vec::new();
        for layer in self.encoder.iter().chain(&self.decoder) {
            p.extend(layer.params());
        }
        p.extend([&self.extract_embed, &self.mask_embed, &self.head_w, &self.head_b]);
        if let Some((w, b)) = &self.dec_head {
            p.extend([w, b]);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p: Vec<&mut Parameter> = Vec::new();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            p.extend(layer.params_mut());
        }
        p.extend([
            &mut self.extract_embed,
            &mut self.mask_embed,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        if let Some((w, b)) = &mut self.dec_head {
            p.extend([w, b]);
        }
        p
    }

    pub fn bind(&self, tape: &Tape) -> Seq2SeqVars {
        Seq2SeqVars {
            vocab: self.vocab,
            l: self.l,
            encoder: self.encoder.iter().map(|la| la.bind(tape)).collect(),
            decoder: self.decoder.iter().map(|la| la.bind(tape)).collect(),
            extract_embed: tape.leaf(self.extract_embed.value.clone()),
            mask_embed: tape.leaf(self.mask_embed.value.clone()),
            head_w: tape.leaf(self.head_w.value.clone()),
            head_b: tape.leaf(self.head_b.value.clone()),
            dec_head: self
                .dec_head
                .as_ref()
                .map(|(w, b)| (tape.leaf(w.value.clone()), tape.leaf(b.value.clone()))),
        }
    }

    pub fn harvest(&mut self, vars: &Seq2SeqVars) {
        for (layer, lv) in self.encoder.iter_mut().zip(&vars.encoder) {
            layer.harvest(lv);
        }
        for (layer, lv) in self.decoder.iter_mut().zip(&vars.decoder) {
            layer.harvest(lv);
        }
        self.extract_embed.accumulate_grad(&vars.extract_embed.grad());
        self.mask_embed.accumulate_grad(&vars.mask_embed.grad());
        self.head_w.accumulate_grad(&vars.head_w.grad());
        self.head_b.accumulate_grad(&vars.head_b.grad());
        if let (Some((w, b)), Some((wv, bv))) = (&mut self.dec_head, &vars.dec_head) {
            w.accumulate_grad(&wv.grad());
            b.accumulate_grad(&bv.grad());
        }
    }

    /// Rebuilds the tape bindings from an externally supplied leaf list in
    /// `params()` order (finite-difference harness support).
    pub fn rebind(&self, vars: &[Var], at: &mut usize) -> Seq2SeqVars {
        Seq2SeqVars {
            vocab: self.vocab,
            l: self.l,
            encoder: self.encoder.iter().map(|la| la.rebind(vars, at)).collect(),
            decoder: self.decoder.iter().map(|la| la.rebind(vars, at)).collect(),
            extract_embed: take_var(vars, at),
            mask_embed: take_var(vars, at),
            head_w: take_var(vars, at),
            head_b: take_var(vars, at),
            dec_head: self
                .dec_head
                .as_ref()
                .map(|_| (take_var(vars, at), take_var(vars, at))),
        }
    }
}

pub struct Seq2SeqVars {
    vocab: TokenVocabulary,
    l: usize,
    encoder: Vec<TransformerLayerVars>,
    decoder: Vec<TransformerLayerVars>,
    extract_embed: Var,
    mask_embed: Var,
    head_w: Var,
    head_b: Var,
    dec_head: Option<(Var, Var)>,
}

/// Per-token encoder states plus the two readouts trained on them.
pub struct EncoderOutput {
    /// One row per input token `(start, keys…, extract)`.
    pub hidden: Var,
    /// Class logits predicting each next key step, aligned with the targets
    /// `(keys…, end)`. The extract row takes no part.
    pub nsp_logits: Var,
    /// The extract-token row: the trajectory representation.
    pub trajectory_vector: Var,
}

impl EncoderOutput {
    /// Encoder states of the key steps only (start/extract rows dropped).
    pub fn key_states(&self) -> Var {
        let n = self.hidden.shape()[0];
        self.hidden.gather_rows(&(1..n - 1).collect::<Vec<usize>>())
    }
}

impl Seq2SeqVars {
    pub fn vocab(&self) -> TokenVocabulary {
        self.vocab
    }

    /// Runs the causal encoder over `(start, keys…, extract)`. `start_row`
    /// is the virtual node's spatial row; `key_embeds` holds one joint
    /// embedding per key step in trajectory order.
    pub fn encode(
        &self,
        tape: &Tape,
        start_row: &Var,
        key_embeds: &Var,
        bias: Option<&BiasInputs>,
    ) -> EncoderOutput {
        let n_k = key_embeds.shape()[0];
        assert!(n_k > 0, "key set is empty; masking fallbacks guarantee at least one key");
        assert_eq!(start_row.shape(), [1, self.l], "start row must be 1x{}", self.l);
        assert_eq!(key_embeds.shape()[1], self.l, "key embeddings must be {}-wide", self.l);
        let n = n_k + 2;
        let tokens = tape.concat_rows(&[
            start_row.clone(),
            key_embeds.clone(),
            self.extract_embed.clone(),
        ]);
        let mut x = tokens.add(&tape.constant(positional_encoding(n, self.l)));
        let blocked = causal_blocked(n);
        for layer in &self.encoder {
            x = layer.forward(&x, Some(&blocked), bias);
        }
        let predict_rows: Vec<usize> = (0..=n_k).collect();
        let nsp_logits = linear(&x.gather_rows(&predict_rows), &self.head_w, &self.head_b);
        let trajectory_vector = x.gather_rows(&[n_k + 1]);
        EncoderOutput {
            hidden: x,
            nsp_logits,
            trajectory_vector,
        }
    }

    /// Builds the decoder input: encoder states stand at key positions
    /// exactly as produced; each mask position gets the learned mask row
    /// plus its original position's encoding plus optional extra rows (the
    /// step's time encoding, when enabled).
    pub fn assemble_decoder_input(
        &self,
        tape: &Tape,
        key_states: &Var,
        key_idx: &[usize],
        mask_idx: &[usize],
        mask_extra: Option<&Var>,
    ) -> Var {
        assert_eq!(
            key_states.shape(),
            [key_idx.len(), self.l],
            "one encoder state per key position"
        );
        let perm = unshuffle_permutation(key_idx, mask_idx);
        let n = perm.len();
        let combined = if mask_idx.is_empty() {
            assert!(mask_extra.is_none(), "extra rows supplied without mask positions");
            key_states.clone()
        } else {
            let pe = positional_encoding(n, self.l);
            let mut pe_rows = Tensor::zeros(mask_idx.len(), self.l);
            for (r, &p) in mask_idx.iter().enumerate() {
                pe_rows.data_mut()[r * self.l..(r + 1) * self.l].copy_from_slice(pe.row_slice(p));
            }
            let mut mask_rows = self
                .mask_embed
                .gather_rows(&vec![0; mask_idx.len()])
                .add(&tape.constant(pe_rows));
            if let Some(extra) = mask_extra {
                assert_eq!(
                    extra.shape(),
                    [mask_idx.len(), self.l],
                    "one extra row per mask position"
                );
                mask_rows = mask_rows.add(extra);
            }
            tape.concat_rows(&[key_states.clone(), mask_rows])
        };
        combined.gather_rows(&perm)
    }

    /// Bidirectional reconstruction over the restored order: class logits
    /// for every position of the full trajectory.
    pub fn decode(
        &self,
        tape: &Tape,
        key_states: &Var,
        key_idx: &[usize],
        mask_idx: &[usize],
        mask_extra: Option<&Var>,
        bias: Option<&BiasInputs>,
    ) -> Var {
        let mut x = self.assemble_decoder_input(tape, key_states, key_idx, mask_idx, mask_extra);
        for layer in &self.decoder {
            x = layer.forward(&x, None, bias);
        }
        let (w, b) = match &self.dec_head {
            Some((w, b)) => (w, b),
            None => (&self.head_w, &self.head_b),
        };
        linear(&x, w, b)
    }
}

/// Inverts a key/mask split: entry `t` is the row of original step `t`
/// inside `keys ++ masks`, so gathering with the result restores trajectory
/// order. Panics unless the two index lists partition `0..n`.
pub fn unshuffle_permutation(key_idx: &[usize], mask_idx: &[usize]) -> Vec<usize> {
    let n = key_idx.len() + mask_idx.len();
    let mut perm = vec![usize::MAX; n];
    for (row, &t) in key_idx.iter().enumerate() {
        assert!(
            t < n && perm[t] == usize::MAX,
            "key/mask positions must partition 0..{n}"
        );
        perm[t] = row;
    }
    for (row, &t) in mask_idx.iter().enumerate() {
        assert!(
            t < n && perm[t] == usize::MAX,
            "key/mask positions must partition 0..{n}"
        );
        perm[t] = key_idx.len() + row;
    }
    perm
}

/// The full trainable network: per-step embedders plus the sequence model.
pub struct Model {
    pub embedder: StepEmbedder,
    pub seq: Seq2Seq,
}

impl Model {
    /// `n_segments` and `n_users` size the vocabulary and the user table to
    /// the dataset at hand.
    pub fn new(
        shape: &ModelShape,
        n_segments: usize,
        n_users: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            embedder: StepEmbedder::new(shape.l, n_users, rng)?,
            seq: Seq2Seq::new(shape, TokenVocabulary::new(n_segments), rng)?,
        })
    }

    pub fn l(&self) -> usize {
        self.embedder.l()
    }

    /// Recovers the architecture knobs this model was built with
    /// (serialization support).
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            l: self.seq.l,
            n_heads: self.seq.encoder[0].heads.len(),
            encoder_layers: self.seq.encoder.len(),
            decoder_layers: self.seq.decoder.len(),
            tie_heads: self.seq.dec_head.is_none(),
        }
    }

    /// Rows of the user table: the dense user-id range this model accepts.
    pub fn n_users(&self) -> usize {
        self.embedder.users.table.value.rows()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.embedder.params();
        p.extend(self.seq.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.embedder.params_mut();
        p.extend(self.seq.params_mut());
        p
    }

    pub fn bind(&self, tape: &Tape) -> ModelVars {
        ModelVars {
            embedder: self.embedder.bind(tape),
            seq: self.seq.bind(tape),
        }
    }

    pub fn harvest(&mut self, vars: &ModelVars) {
        self.embedder.harvest(&vars.embedder);
        self.seq.harvest(&vars.seq);
    }

    /// Rebuilds the tape bindings from an externally supplied leaf list in
    /// `params()` order (finite-difference harness support). `vars` must
    /// hold one leaf per parameter, shapes matching.
    pub fn rebind(&self, vars: &[Var]) -> ModelVars {
        let mut at = 0;
        let out = ModelVars {
            embedder: self.embedder.rebind(vars, &mut at),
            seq: self.seq.rebind(vars, &mut at),
        };
        assert_eq!(at, vars.len(), "leaf list length disagrees with params()");
        out
    }
}

pub struct ModelVars {
    pub embedder: StepEmbedderVars,
    pub seq: Seq2SeqVars,
}

/// Checks the data invariants the sequence model relies on: at least two
/// steps, all segments inside the network, timestamps never decreasing.
pub fn validate_trajectory(net: &RoadNetwork, traj: &PathTrajectory) -> Result<()> {
    if traj.steps.len() < 2 {
        return Err(Error::validation(format!(
            "trajectory has {} steps; need at least 2",
            traj.steps.len()
        )));
    }
    for (i, s) in traj.steps.iter().enumerate() {
        if s.segment >= net.n_segments() {
            return Err(Error::validation(format!(
                "step {i} rides segment {} outside the {}-segment network",
                s.segment,
                net.n_segments()
            )));
        }
    }
    for w in traj.steps.windows(2) {
        if w[1].timestamp_s < w[0].timestamp_s {
            return Err(Error::validation(format!(
                "timestamps go backwards: {} then {}",
                w[0].timestamp_s, w[1].timestamp_s
            )));
        }
    }
    Ok(())
}

/// Encodes a complete trajectory (every step treated as a key) and returns
/// the extract-token row. This is the deployment path: no masking and no
/// decoder involved.
pub fn infer_representation(
    model: &Model,
    net: &RoadNetwork,
    traj: &PathTrajectory,
    lambda2: Real,
    mode: UserMode,
) -> Result<Tensor> {
    validate_trajectory(net, traj)?;
    assert_eq!(
        model.seq.vocab().n_segments,
        net.n_segments(),
        "model vocabulary sized for a different network"
    );
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let table = vars.embedder.spatial_table(&tape, net);
    let embeds = vars.embedder.embed(&tape, net, &table, traj, mode)?;
    let start = table.gather_rows(&[net.virtual_id()]);
    let (mt, md) = interval_matrices(traj, net);
    let all: Vec<usize> = (0..traj.steps.len()).collect();
    let bias = BiasInputs::for_encoder(&tape, &mt, &md, &all, lambda2)?;
    let out = vars.seq.encode(&tape, &start, &embeds, Some(&bias));
    Ok(out.trajectory_vector.value())
}
