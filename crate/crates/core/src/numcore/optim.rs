//! Named parameters, initializers, and decoupled-weight-decay Adam.

use super::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A trainable tensor with its gradient and Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape[0], shape[1]),
            m: Tensor::zeros(shape[0], shape[1]),
            v: Tensor::zeros(shape[0], shape[1]),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }

    /// Adds a gradient contribution (shape-checked).
    pub fn accumulate_grad(&mut self, delta: &Tensor) {
        assert_eq!(
            self.grad.shape(),
            delta.shape(),
            "grad shape mismatch for {}: {:?} vs {:?}",
            self.name,
            self.grad.shape(),
            delta.shape()
        );
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    pub fn grad_norm(&self) -> Real {
        self.grad.sq_norm().sqrt()
    }
}

/// Adam with decoupled weight decay and bias correction.
///
/// The update from original values `p` is
/// `p - lr * mhat / (sqrt(vhat) + eps) - lr * weight_decay * p`.
/// Parameters whose gradient is identically zero this step are left
/// untouched (no decay, no moment update), so untouched embedding rows do
/// not drift.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    step: u64,
}

impl AdamW {
    pub fn new(lr: Real) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in the iterator.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            if p.grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let n = p.value.len();
            for i in 0..n {
                let g = p.grad.data()[i];
                let m = self.beta1 * p.m.data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.v.data()[i] + (1.0 - self.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                let old = p.value.data()[i];
                p.value.data_mut()[i] =
                    old - self.lr * mhat / (vhat.sqrt() + self.eps) - self.lr * self.weight_decay * old;
            }
        }
    }
}

/// Deterministic per-purpose RNG: mixes a master seed with a stream tag so
/// different pipeline stages draw independent, reproducible streams.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)); rows are fan-in.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound) as Real)
            .collect(),
    )
}

/// Normal(0, std) via Box-Muller; used for embedding tables.
pub fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
                let u2: f64 = rng.gen();
                ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std) as Real
            })
            .collect(),
    )
}
