//! Per-step joint embeddings: spatial + temporal + user, summed.
//!
//! Each trajectory step is embedded as `x_i = h_i + t_i + u_i`, where
//! `h_i` comes from a 3-layer graph-attention encoder over the road
//! network (virtual node included), `t_i` from a calendar-field time
//! encoder fused with the segment type, and `u_i` from a per-user table.
//! Everything here runs on the autodiff tape so pretraining reaches all
//! three encoders end to end.

use std::rc::Rc;

use chrono::{DateTime, Datelike, Timelike};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{
    glorot_uniform, linear, normal_init, take_var, Parameter, Real, Tape, Tensor, Var,
};
use crate::roadnet::{initial_feature_matrix, FeatureStats, RoadNetwork, SegType, FEATURE_DIM};
use crate::trajdata::PathTrajectory;

/// Head counts of the three graph-attention layers.
pub const GAT_HEADS: [usize; 3] = [8, 16, 1];

/// Attention slope below zero for the graph-attention logits.
const ATTN_LEAK: Real = 0.2;

/// Fill for blocked attention entries; large enough that the exponential
/// underflows to exactly zero after the row-max shift.
const BLOCKED: Real = -1e30;

/// Decomposes a UTC timestamp into the normalized 6-field calendar vector
/// `[hour/23, minute/59, second/59, (year-2000)/100, (month-1)/11,
/// (day-1)/30]`. Bounded inputs keep the downstream affine maps tame.
pub fn time_vector(t: i64) -> [Real; 6] {
    assert!(t >= 0, "timestamps are non-negative by load-time contract");
    let dt = DateTime::from_timestamp(t, 0).expect("in-range unix timestamp");
    [
        dt.hour() as Real / 23.0,
        dt.minute() as Real / 59.0,
        dt.second() as Real / 59.0,
        (dt.year() as Real - 2000.0) / 100.0,
        (dt.month() as Real - 1.0) / 11.0,
        (dt.day() as Real - 1.0) / 30.0,
    ]
}

/// How the head outputs of one attention layer are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Combine {
    Concat,
    Average,
}

/// One attention head: a projection and the two halves of the attention
/// vector (one scored against the aggregating node, one against the
/// neighbor supplying the message).
#[derive(Debug)]
pub struct GatHead {
    pub w: Parameter,
    pub a_self: Parameter,
    pub a_neigh: Parameter,
}

#[derive(Debug)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    combine: Combine,
}

impl GatLayer {
    fn new(
        prefix: &str,
        d_in: usize,
        n_heads: usize,
        d_out: usize,
        combine: Combine,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let heads = (0..n_heads)
            .map(|h| GatHead {
                w: Parameter::new(format!("{prefix}.h{h}.w"), glorot_uniform(d_in, d_out, rng)),
                a_self: Parameter::new(
                    format!("{prefix}.h{h}.a_self"),
                    glorot_uniform(d_out, 1, rng),
                ),
                a_neigh: Parameter::new(
                    format!("{prefix}.h{h}.a_neigh"),
                    glorot_uniform(d_out, 1, rng),
                ),
            })
            .collect();
        Self { heads, combine }
    }
}

pub struct GatHeadVars {
    pub w: Var,
    pub a_self: Var,
    pub a_neigh: Var,
}

pub struct GatLayerVars {
    pub heads: Vec<GatHeadVars>,
    combine: Combine,
}

impl GatLayerVars {
    /// Masked multi-head attention over node rows: logits are the leaky
    /// outer sum of per-node scores, blocked pairs underflow to zero
    /// weight, and heads are concatenated or averaged per the layer role.
    pub fn forward(&self, tape: &Tape, x: &Var, blocked: &Rc<Vec<bool>>) -> Var {
        let n = x.shape()[0];
        let ones_row = tape.constant(Tensor::full(1, n, 1.0));
        let ones_col = tape.constant(Tensor::full(n, 1, 1.0));
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let hw = x.matmul(&head.w);
            let s_self = hw.matmul(&head.a_self);
            let s_neigh = hw.matmul(&head.a_neigh);
            let logits = s_self
                .matmul(&ones_row)
                .add(&ones_col.matmul(&s_neigh.transpose()))
                .leaky_relu(ATTN_LEAK)
                .masked_fill(blocked, BLOCKED);
            outs.push(logits.softmax_rows().matmul(&hw));
        }
        match self.combine {
            Combine::Concat => {
                let mut it = outs.into_iter();
                let first = it.next().expect("at least one head");
                it.fold(first, |acc, o| acc.concat_cols(&o))
            }
            Combine::Average => {
                let k = self.heads.len();
                let mut it = outs.into_iter();
                let first = it.next().expect("at least one head");
                it.fold(first, |acc, o| acc.add(&o)).scale(1.0 / k as Real)
            }
        }
    }
}

/// The spatial encoder: three attention layers with head counts
/// [`GAT_HEADS`], hidden width `l` throughout, heads concatenated in the
/// first two layers and averaged in the last.
pub struct GatStack {
    pub layers: Vec<GatLayer>,
    l: usize,
}

impl GatStack {
    /// `l` must be a positive multiple of 16 so both concatenating layers
    /// split it evenly across their default head counts.
    pub fn new(l: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if l == 0 || l % 16 != 0 {
            return Err(Error::validation(format!(
                "embedding width must be a positive multiple of 16, got {l}"
            )));
        }
        Self::with_heads(l, GAT_HEADS, rng)
    }

    /// Same stack with explicit per-layer head counts; the concatenating
    /// layers (the first two) must split `l` evenly. Small configurations
    /// for exhaustive numeric tests go through here.
    pub fn with_heads(l: usize, heads: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self> {
        if l == 0 || heads.contains(&0) || l % heads[0] != 0 || l % heads[1] != 0 {
            return Err(Error::validation(format!(
                "head counts {heads:?} must be positive and split width {l} evenly"
            )));
        }
        let dims = [FEATURE_DIM, l, l];
        let layers = (0..3)
            .map(|i| {
                // Concatenating layers split the width across heads; the
                // averaging layer keeps every head at full width.
                let combine = if i == 2 { Combine::Average } else { Combine::Concat };
                let d_out = if combine == Combine::Average { l } else { l / heads[i] };
                GatLayer::new(&format!("spatial.l{i}"), dims[i], heads[i], d_out, combine, rng)
            })
            .collect();
        Ok(Self { layers, l })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|layer| layer.heads.iter())
            .flat_map(|h| [&h.w, &h.a_self, &h.a_neigh])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|layer| layer.heads.iter_mut())
            .flat_map(|h| [&mut h.w, &mut h.a_self, &mut h.a_neigh])
            .collect()
    }

    pub fn bind(&self, tape: &Tape) -> GatStackVars {
        GatStackVars {
            layers: self
                .layers
                .iter()
                .map(|layer| GatLayerVars {
                    heads: layer
                        .heads
                        .iter()
                        .map(|h| GatHeadVars {
                            w: tape.leaf(h.w.value.clone()),
                            a_self: tape.leaf(h.a_self.value.clone()),
                            a_neigh: tape.leaf(h.a_neigh.value.clone()),
                        })
                        .collect(),
                    combine: layer.combine,
                })
                .collect(),
        }
    }

    /// Pulls tape gradients back into the owned parameters after backward.
    pub fn harvest(&mut self, vars: &GatStackVars) {
        for (layer, lv) in self.layers.iter_mut().zip(&vars.layers) {
            for (h, hv) in layer.heads.iter_mut().zip(&lv.heads) {
                h.w.accumulate_grad(&hv.w.grad());
                h.a_self.accumulate_grad(&hv.a_self.grad());
                h.a_neigh.accumulate_grad(&hv.a_neigh.grad());
            }
        }
    }

    /// Rebuilds the tape bindings from an externally supplied leaf list in
    /// `params()` order (finite-difference harness support).
    pub fn rebind(&self, vars: &[Var], at: &mut usize) -> GatStackVars {
        GatStackVars {
            layers: self
                .layers
                .iter()
                .map(|layer| GatLayerVars {
                    heads: layer
                        .heads
                        .iter()
                        .map(|_| GatHeadVars {
                            w: take_var(vars, at),
                            a_self: take_var(vars, at),
                            a_neigh: take_var(vars, at),
                        })
                        .collect(),
                    combine: layer.combine,
                })
                .collect(),
        }
    }
}

pub struct GatStackVars {
    pub layers: Vec<GatLayerVars>,
}

impl GatStackVars {
    /// Embeds every node of the network, virtual node last, by running the
    /// three attention layers over the raw per-segment feature rows.
    pub fn spatial_table(&self, tape: &Tape, net: &RoadNetwork) -> Var {
        let stats = FeatureStats::from_network(net);
        let mut x = tape.constant(initial_feature_matrix(net, &stats));
        let blocked = attention_block_mask(net);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, &x, &blocked);
            if i + 1 < self.layers.len() {
                x = x.elu();
            }
        }
        x
    }
}

/// Row-major (|V|+1)² mask; `true` blocks the attention pair. A real node
/// attends to its in-neighbors and itself; the virtual node attends to
/// every real node and itself, and no real node attends back to it, which
/// keeps real receptive fields purely road-local.
fn attention_block_mask(net: &RoadNetwork) -> Rc<Vec<bool>> {
    let nv = net.n_segments();
    let n = nv + 1;
    let mut blocked = vec![true; n * n];
    for i in 0..nv {
        blocked[i * n + i] = false;
        for &j in net.in_neighbors(i) {
            blocked[i * n + j] = false;
        }
    }
    for j in 0..n {
        blocked[nv * n + j] = false;
    }
    Rc::new(blocked)
}

/// Calendar-field time encoder fused with the segment type: the periodic
/// half runs one affine map through `sin`, the plain half stays affine,
/// and a final map mixes both with the type row.
pub struct TimeEncoder {
    l: usize,
    pub fc1_w: Parameter,
    pub fc1_b: Parameter,
    pub fc2_w: Parameter,
    pub fc2_b: Parameter,
    pub type_table: Parameter,
    pub fuse_w: Parameter,
    pub fuse_b: Parameter,
}

impl TimeEncoder {
    /// `l` must be a positive multiple of 4: each affine half produces
    /// `l/4` features and the type row fills the second `l/2`.
    pub fn new(l: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if l == 0 || l % 4 != 0 {
            return Err(Error::validation(format!(
                "time encoding width must be a positive multiple of 4, got {l}"
            )));
        }
        let quarter = l / 4;
        let half = l / 2;
        Ok(Self {
            l,
            fc1_w: Parameter::new("time.fc1.w", glorot_uniform(6, quarter, rng)),
            fc1_b: Parameter::new("time.fc1.b", Tensor::zeros(1, quarter)),
            fc2_w: Parameter::new("time.fc2.w", glorot_uniform(6, quarter, rng)),
            fc2_b: Parameter::new("time.fc2.b", Tensor::zeros(1, quarter)),
            type_table: Parameter::new(
                "time.types",
                normal_init(SegType::COUNT, half, 0.02, rng),
            ),
            fuse_w: Parameter::new("time.fuse.w", glorot_uniform(l, l, rng)),
            fuse_b: Parameter::new("time.fuse.b", Tensor::zeros(1, l)),
        })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
            &self.type_table,
            &self.fuse_w,
            &self.fuse_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.type_table,
            &mut self.fuse_w,
            &mut self.fuse_b,
        ]
    }

    pub fn bind(&self, tape: &Tape) -> TimeEncoderVars {
        TimeEncoderVars {
            l: self.l,
            fc1_w: tape.leaf(self.fc1_w.value.clone()),
            fc1_b: tape.leaf(self.fc1_b.value.clone()),
            fc2_w: tape.leaf(self.fc2_w.value.clone()),
            fc2_b: tape.leaf(self.fc2_b.value.clone()),
            type_table: tape.leaf(self.type_table.value.clone()),
            fuse_w: tape.leaf(self.fuse_w.value.clone()),
            fuse_b: tape.leaf(self.fuse_b.value.clone()),
        }
    }

    pub fn harvest(&mut self, vars: &TimeEncoderVars) {
        self.fc1_w.accumulate_grad(&vars.fc1_w.grad());
        self.fc1_b.accumulate_grad(&vars.fc1_b.grad());
        self.fc2_w.accumulate_grad(&vars.fc2_w.grad());
        self.fc2_b.accumulate_grad(&vars.fc2_b.grad());
        self.type_table.accumulate_grad(&vars.type_table.grad());
        self.fuse_w.accumulate_grad(&vars.fuse_w.grad());
        self.fuse_b.accumulate_grad(&vars.fuse_b.grad());
    }

    /// Rebuilds the tape bindings from an externally supplied leaf list in
    /// `params()` order (finite-difference harness support).
    pub fn rebind(&self, vars: &[Var], at: &mut usize) -> TimeEncoderVars {
        TimeEncoderVars {
            l: self.l,
            fc1_w: take_var(vars, at),
            fc1_b: take_var(vars, at),
            fc2_w: take_var(vars, at),
            fc2_b: take_var(vars, at),
            type_table: take_var(vars, at),
            fuse_w: take_var(vars, at),
            fuse_b: take_var(vars, at),
        }
    }
}

pub struct TimeEncoderVars {
    pub l: usize,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub type_table: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

impl TimeEncoderVars {
    /// Encodes a batch of (timestamp, segment type) steps as rows.
    pub fn encode_steps(&self, tape: &Tape, times: &[i64], types: &[SegType]) -> Var {
        assert_eq!(times.len(), types.len(), "one segment type per timestamp");
        let rows: Vec<Vec<Real>> = times.iter().map(|&t| time_vector(t).to_vec()).collect();
        let v = tape.constant(Tensor::from_rows(&rows));
        let plain = linear(&v, &self.fc1_w, &self.fc1_b);
        let periodic = linear(&v, &self.fc2_w, &self.fc2_b).sin();
        let type_idx: Vec<usize> = types.iter().map(|t| t.index()).collect();
        let e_type = self.type_table.gather_rows(&type_idx);
        let cat = plain.concat_cols(&periodic).concat_cols(&e_type);
        linear(&cat, &self.fuse_w, &self.fuse_b)
    }

    /// Single-step convenience used by tests and inference plumbing.
    pub fn encode_one(&self, tape: &Tape, t: i64, seg_type: SegType) -> Var {
        self.encode_steps(tape, &[t], &[seg_type])
    }
}

/// Learned per-user rows.
pub struct UserTable {
    pub table: Parameter,
}

impl UserTable {
    pub fn new(n_users: usize, l: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: Parameter::new("users.table", normal_init(n_users, l, 0.02, rng)),
        }
    }

    pub fn n_users(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn bind(&self, tape: &Tape) -> Var {
        tape.leaf(self.table.value.clone())
    }

    pub fn harvest(&mut self, var: &Var) {
        self.table.accumulate_grad(&var.grad());
    }

    /// Counterpart of [`UserTable::bind`] over an external leaf list.
    pub fn rebind(&self, vars: &[Var], at: &mut usize) -> Var {
        take_var(vars, at)
    }
}

/// How the user term of the joint embedding is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserMode {
    /// Look the user up; an id outside the table is a validation error.
    Enabled,
    /// Contribute an exact zero row (used when user identity would leak
    /// the downstream label).
    Disabled,
    /// Look the user up, falling back to a zero row for unknown ids
    /// (inference on users never seen in training).
    ZeroIfUnknown,
}

/// The additive joint embedding for every step of one trajectory:
/// spatial row of the step's segment + time encoding + user row.
/// Position information is deliberately absent; the sequence model adds
/// its own positional signal.
pub fn joint_embed(
    tape: &Tape,
    net: &RoadNetwork,
    spatial_table: &Var,
    time: &TimeEncoderVars,
    users: &Var,
    traj: &PathTrajectory,
    mode: UserMode,
) -> Result<Var> {
    let l = spatial_table.shape()[1];
    assert_eq!(time.l, l, "time encoder width disagrees with spatial table");
    assert_eq!(users.shape()[1], l, "user table width disagrees");
    let n = traj.steps.len();
    let segs: Vec<usize> = traj.steps.iter().map(|s| s.segment).collect();
    let times: Vec<i64> = traj.steps.iter().map(|s| s.timestamp_s).collect();
    let types: Vec<SegType> = segs.iter().map(|&s| net.feature(s).seg_type).collect();

    let spatial = spatial_table.gather_rows(&segs);
    let temporal = time.encode_steps(tape, &times, &types);
    let known = traj.user < users.shape()[0];
    let user = match (mode, known) {
        (UserMode::Disabled, _) | (UserMode::ZeroIfUnknown, false) => {
            tape.constant(Tensor::zeros(n, l))
        }
        (UserMode::Enabled, false) => {
            return Err(Error::validation(format!(
                "user id {} outside the {}-row user table",
                traj.user,
                users.shape()[0]
            )))
        }
        (_, true) => users.gather_rows(&vec![traj.user; n]),
    };
    Ok(spatial.add(&temporal).add(&user))
}

/// Bundle of the three encoders with a shared width.
pub struct StepEmbedder {
    pub gat: GatStack,
    pub time: TimeEncoder,
    pub users: UserTable,
}

impl StepEmbedder {
    pub fn new(l: usize, n_users: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            gat: GatStack::new(l, rng)?,
            time: TimeEncoder::new(l, rng)?,
            users: UserTable::new(n_users, l, rng),
        })
    }

    pub fn l(&self) -> usize {
        self.gat.l
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.gat.params();
        p.extend(self.time.params());
        p.push(&self.users.table);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.gat.params_mut();
        p.extend(self.time.params_mut());
        p.push(&mut self.users.table);
        p
    }

    pub fn bind(&self, tape: &Tape) -> StepEmbedderVars {
        StepEmbedderVars {
            gat: self.gat.bind(tape),
            time: self.time.bind(tape),
            users: self.users.bind(tape),
        }
    }

    pub fn harvest(&mut self, vars: &StepEmbedderVars) {
        self.gat.harvest(&vars.gat);
        self.time.harvest(&vars.time);
        self.users.harvest(&vars.users);
    }

    /// Rebuilds the tape bindings from an externally supplied leaf list in
    /// `params()` order (finite-difference harness support).
    pub fn rebind(&self, vars: &[Var], at: &mut usize) -> StepEmbedderVars {
        StepEmbedderVars {
            gat: self.gat.rebind(vars, at),
            time: self.time.rebind(vars, at),
            users: self.users.rebind(vars, at),
        }
    }
}

pub struct StepEmbedderVars {
    pub gat: GatStackVars,
    pub time: TimeEncoderVars,
    pub users: Var,
}

impl StepEmbedderVars {
    pub fn spatial_table(&self, tape: &Tape, net: &RoadNetwork) -> Var {
        self.gat.spatial_table(tape, net)
    }

    pub fn embed(
        &self,
        tape: &Tape,
        net: &RoadNetwork,
        spatial_table: &Var,
        traj: &PathTrajectory,
        mode: UserMode,
    ) -> Result<Var> {
        joint_embed(tape, net, spatial_table, &self.time, &self.users, traj, mode)
    }
}
