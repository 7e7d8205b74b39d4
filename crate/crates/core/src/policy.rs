//! Permutation-invariant actor-critic over target sets.
//!
//! One self-attention block relates every target to every other, a pooling
//! layer aggregates the per-target latents into a single vector (multi-head
//! attention against a learned seed query, or a plain mean for the ablation),
//! and affine heads produce a diagonal Gaussian over viewpoint displacements
//! plus a scalar value estimate. Forward and reverse passes are written out
//! explicitly so training needs no autodiff framework; the reverse pass is
//! checked against finite differences in the tests.
//!
//! Checkpoints use a little-endian binary layout: an 8-byte magic, u32
//! version, pooling kind, d_in, d_h, d_enc and head count, three f64 input
//! conditioning constants (input scale, log-std clamp bounds), a u64
//! parameter count, then every tensor as row-major f64 in declaration order
//! (SAB value/query/key projections per head, SAB output maps, the pooling
//! seed, pooling value/key projections, pooling output maps, action head,
//! value vector). Affine tensors carry the bias as their last column.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PolicyConfig;
use crate::env::{ActionBounds, TargetObservation, ViewpointAction};

/// Observation feature width: planar position and velocity, facing encoded
/// as sin/cos, two entropies, the classified flag.
pub const OBS_DIM: usize = 9;
/// Action dimension: x and y displacement plus yaw increment.
pub const ACTION_DIM: usize = 3;

const HALF_LN_TWO_PI: f64 = 0.9189385332046727;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Which aggregation the trunk uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Multi-head attention against a learned seed query.
    Attention,
    /// Mean of the per-target latents (ablation).
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDims {
    pub d_in: usize,
    pub d_h: usize,
    pub d_enc: usize,
    pub heads: usize,
}

impl PolicyDims {
    pub fn from_config(cfg: &PolicyConfig) -> Self {
        Self {
            d_in: OBS_DIM,
            d_h: cfg.d_h,
            d_enc: cfg.d_enc,
            heads: cfg.heads,
        }
    }

    fn sab_proj_len(&self) -> usize {
        self.d_h * (self.d_in + 1)
    }

    fn sab_out_len(&self) -> usize {
        self.d_enc * (self.d_h + 1)
    }

    fn pma_proj_len(&self) -> usize {
        self.d_h * (self.d_enc + 1)
    }

    fn pma_out_len(&self) -> usize {
        self.d_enc * (self.d_h + 1)
    }

    fn action_len(&self) -> usize {
        2 * ACTION_DIM * (self.d_enc + 1)
    }
}

/// Base offsets of every tensor group in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    sab_v: usize,
    sab_q: usize,
    sab_k: usize,
    sab_out: usize,
    pma_seed: usize,
    pma_v: usize,
    pma_k: usize,
    pma_out: usize,
    action: usize,
    value: usize,
    total: usize,
}

impl Layout {
    fn new(d: &PolicyDims) -> Self {
        let h = d.heads;
        let mut off = 0usize;
        let sab_v = off;
        off += h * d.sab_proj_len();
        let sab_q = off;
        off += h * d.sab_proj_len();
        let sab_k = off;
        off += h * d.sab_proj_len();
        let sab_out = off;
        off += h * d.sab_out_len();
        let pma_seed = off;
        off += d.d_h;
        let pma_v = off;
        off += h * d.pma_proj_len();
        let pma_k = off;
        off += h * d.pma_proj_len();
        let pma_out = off;
        off += h * d.pma_out_len();
        let action = off;
        off += d.action_len();
        let value = off;
        off += d.d_enc;
        Self {
            sab_v,
            sab_q,
            sab_k,
            sab_out,
            pma_seed,
            pma_v,
            pma_k,
            pma_out,
            action,
            value,
            total: off,
        }
    }
}

/// All learnable weights in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub pooling: Pooling,
    /// Scale applied to relative position features.
    pub input_scale: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    layout: Layout,
    data: Vec<f64>,
}

/// Gradients flowing into the network outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadGrads {
    pub d_mu: [f64; ACTION_DIM],
    pub d_log_std: [f64; ACTION_DIM],
    pub d_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub mu: [f64; ACTION_DIM],
    pub log_std: [f64; ACTION_DIM],
    pub value: f64,
}

/// Cached intermediate values of one forward pass; reusable across calls.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    m: usize,
    features: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    lambda1: Vec<f64>,
    attended: Vec<f64>,
    pre1: Vec<f64>,
    e1: Vec<f64>,
    pma_k: Vec<f64>,
    pma_v: Vec<f64>,
    lambda2: Vec<f64>,
    pooled: Vec<f64>,
    pre2: Vec<f64>,
    e2: Vec<f64>,
    head_raw: [f64; 2 * ACTION_DIM],
}

impl Activations {
    pub fn set_size(&mut self, dims: &PolicyDims, m: usize) {
        let h = dims.heads;
        self.m = m;
        self.features.resize(m * dims.d_in, 0.0);
        self.q.resize(h * m * dims.d_h, 0.0);
        self.k.resize(h * m * dims.d_h, 0.0);
        self.v.resize(h * m * dims.d_h, 0.0);
        self.lambda1.resize(h * m * m, 0.0);
        self.attended.resize(h * m * dims.d_h, 0.0);
        self.pre1.resize(m * dims.d_enc, 0.0);
        self.e1.resize(m * dims.d_enc, 0.0);
        self.pma_k.resize(h * m * dims.d_h, 0.0);
        self.pma_v.resize(h * m * dims.d_h, 0.0);
        self.lambda2.resize(h * m, 0.0);
        self.pooled.resize(h * dims.d_h, 0.0);
        self.pre2.resize(dims.d_enc, 0.0);
        self.e2.resize(dims.d_enc, 0.0);
    }

    pub fn set_cardinality(&self) -> usize {
        self.m
    }

    pub fn pooled_latent(&self) -> &[f64] {
        &self.e2
    }

    /// Attention weights of SAB head `h` for query element `i`.
    pub fn sab_weights(&self, h: usize, i: usize) -> &[f64] {
        &self.lambda1[(h * self.m + i) * self.m..(h * self.m + i + 1) * self.m]
    }

    /// Attention weights of the pooling head `h`.
    pub fn pma_weights(&self, h: usize) -> &[f64] {
        &self.lambda2[h * self.m..(h + 1) * self.m]
    }
}

/// y = W [x; 1] for a row-major W of shape out x (in + 1).
fn affine(w: &[f64], in_dim: usize, x: &[f64], y: &mut [f64]) {
    let cols = in_dim + 1;
    for (r, out) in y.iter_mut().enumerate() {
        let row = &w[r * cols..r * cols + cols];
        let mut acc = row[in_dim];
        for c in 0..in_dim {
            acc += row[c] * x[c];
        }
        *out = acc;
    }
}

/// Accumulate dW and optionally dx for y = W [x; 1].
fn affine_backward(
    w: &[f64],
    gw: &mut [f64],
    in_dim: usize,
    x: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
) {
    let cols = in_dim + 1;
    for (r, &g) in dy.iter().enumerate() {
        let row = &w[r * cols..r * cols + cols];
        let grow = &mut gw[r * cols..r * cols + cols];
        for c in 0..in_dim {
            grow[c] += g * x[c];
        }
        grow[in_dim] += g;
        if let Some(dx) = dx.as_deref_mut() {
            for c in 0..in_dim {
                dx[c] += row[c] * g;
            }
        }
    }
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Map one observation to its feature row.
fn featurize_one(o: &TargetObservation, scale: f64, out: &mut [f64]) {
    out[0] = o.rel_position.x * scale;
    out[1] = o.rel_position.y * scale;
    out[2] = o.rel_velocity.x;
    out[3] = o.rel_velocity.y;
    out[4] = o.rel_facing.sin();
    out[5] = o.rel_facing.cos();
    out[6] = o.belief_entropy;
    out[7] = o.measurement_entropy;
    out[8] = if o.classified { 1.0 } else { 0.0 };
}

impl PolicyParams {
    /// Fresh network: Xavier-uniform affine weights with zero biases, a
    /// normal seed scaled by 1/sqrt(d_h), and the log-std bias at its
    /// configured initial value.
    pub fn init<R: Rng>(cfg: &PolicyConfig, pooling: Pooling, rng: &mut R) -> Self {
        let dims = PolicyDims::from_config(cfg);
        let layout = Layout::new(&dims);
        let mut params = Self {
            dims,
            pooling,
            input_scale: cfg.input_scale,
            log_std_min: cfg.log_std_min,
            log_std_max: cfg.log_std_max,
            layout,
            data: vec![0.0; layout.total],
        };

        let init_affine = |data: &mut [f64], out_dim: usize, in_dim: usize, rng: &mut R| {
            let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let cols = in_dim + 1;
            for r in 0..out_dim {
                for c in 0..in_dim {
                    data[r * cols + c] = rng.gen_range(-limit..limit);
                }
                data[r * cols + in_dim] = 0.0;
            }
        };

        let d = params.dims;
        for h in 0..d.heads {
            let base = layout.sab_v + h * d.sab_proj_len();
            init_affine(&mut params.data[base..base + d.sab_proj_len()], d.d_h, d.d_in, rng);
        }
        for h in 0..d.heads {
            let base = layout.sab_q + h * d.sab_proj_len();
            init_affine(&mut params.data[base..base + d.sab_proj_len()], d.d_h, d.d_in, rng);
        }
        for h in 0..d.heads {
            let base = layout.sab_k + h * d.sab_proj_len();
            init_affine(&mut params.data[base..base + d.sab_proj_len()], d.d_h, d.d_in, rng);
        }
        for h in 0..d.heads {
            let base = layout.sab_out + h * d.sab_out_len();
            init_affine(&mut params.data[base..base + d.sab_out_len()], d.d_enc, d.d_h, rng);
        }
        let seed_scale = 1.0 / (d.d_h as f64).sqrt();
        for i in 0..d.d_h {
            let n: f64 = rng.sample(StandardNormal);
            params.data[layout.pma_seed + i] = n * seed_scale;
        }
        for h in 0..d.heads {
            let base = layout.pma_v + h * d.pma_proj_len();
            init_affine(&mut params.data[base..base + d.pma_proj_len()], d.d_h, d.d_enc, rng);
        }
        for h in 0..d.heads {
            let base = layout.pma_k + h * d.pma_proj_len();
            init_affine(&mut params.data[base..base + d.pma_proj_len()], d.d_h, d.d_enc, rng);
        }
        for h in 0..d.heads {
            let base = layout.pma_out + h * d.pma_out_len();
            init_affine(&mut params.data[base..base + d.pma_out_len()], d.d_enc, d.d_h, rng);
        }
        init_affine(
            &mut params.data[layout.action..layout.action + d.action_len()],
            2 * ACTION_DIM,
            d.d_enc,
            rng,
        );
        // Bias the log-std rows to the configured initial exploration level.
        let cols = d.d_enc + 1;
        for r in ACTION_DIM..2 * ACTION_DIM {
            params.data[layout.action + r * cols + d.d_enc] = cfg.log_std_init;
        }
        let vlimit = (6.0 / (d.d_enc + 1) as f64).sqrt();
        for i in 0..d.d_enc {
            params.data[layout.value + i] = rng.gen_range(-vlimit..vlimit);
        }
        params
    }

    pub fn zeros(cfg: &PolicyConfig, pooling: Pooling) -> Self {
        let dims = PolicyDims::from_config(cfg);
        let layout = Layout::new(&dims);
        Self {
            dims,
            pooling,
            input_scale: cfg.input_scale,
            log_std_min: cfg.log_std_min,
            log_std_max: cfg.log_std_max,
            layout,
            data: vec![0.0; layout.total],
        }
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Named tensors with their slices, in checkpoint declaration order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let d = &self.dims;
        let l = &self.layout;
        let mut out = Vec::new();
        for h in 0..d.heads {
            let base = l.sab_v + h * d.sab_proj_len();
            out.push((format!("sab_v[{h}]"), &self.data[base..base + d.sab_proj_len()]));
        }
        for h in 0..d.heads {
            let base = l.sab_q + h * d.sab_proj_len();
            out.push((format!("sab_q[{h}]"), &self.data[base..base + d.sab_proj_len()]));
        }
        for h in 0..d.heads {
            let base = l.sab_k + h * d.sab_proj_len();
            out.push((format!("sab_k[{h}]"), &self.data[base..base + d.sab_proj_len()]));
        }
        for h in 0..d.heads {
            let base = l.sab_out + h * d.sab_out_len();
            out.push((format!("sab_out[{h}]"), &self.data[base..base + d.sab_out_len()]));
        }
        out.push(("pma_seed".into(), &self.data[l.pma_seed..l.pma_seed + d.d_h]));
        for h in 0..d.heads {
            let base = l.pma_v + h * d.pma_proj_len();
            out.push((format!("pma_v[{h}]"), &self.data[base..base + d.pma_proj_len()]));
        }
        for h in 0..d.heads {
            let base = l.pma_k + h * d.pma_proj_len();
            out.push((format!("pma_k[{h}]"), &self.data[base..base + d.pma_proj_len()]));
        }
        for h in 0..d.heads {
            let base = l.pma_out + h * d.pma_out_len();
            out.push((format!("pma_out[{h}]"), &self.data[base..base + d.pma_out_len()]));
        }
        out.push((
            "action_head".into(),
            &self.data[l.action..l.action + d.action_len()],
        ));
        out.push(("value_head".into(), &self.data[l.value..l.value + d.d_enc]));
        out
    }

    fn sab_v(&self, h: usize) -> &[f64] {
        let base = self.layout.sab_v + h * self.dims.sab_proj_len();
        &self.data[base..base + self.dims.sab_proj_len()]
    }

    fn sab_q(&self, h: usize) -> &[f64] {
        let base = self.layout.sab_q + h * self.dims.sab_proj_len();
        &self.data[base..base + self.dims.sab_proj_len()]
    }

    fn sab_k(&self, h: usize) -> &[f64] {
        let base = self.layout.sab_k + h * self.dims.sab_proj_len();
        &self.data[base..base + self.dims.sab_proj_len()]
    }

    fn sab_out(&self, h: usize) -> &[f64] {
        let base = self.layout.sab_out + h * self.dims.sab_out_len();
        &self.data[base..base + self.dims.sab_out_len()]
    }

    fn pma_seed(&self) -> &[f64] {
        &self.data[self.layout.pma_seed..self.layout.pma_seed + self.dims.d_h]
    }

    fn pma_v(&self, h: usize) -> &[f64] {
        let base = self.layout.pma_v + h * self.dims.pma_proj_len();
        &self.data[base..base + self.dims.pma_proj_len()]
    }

    fn pma_k(&self, h: usize) -> &[f64] {
        let base = self.layout.pma_k + h * self.dims.pma_proj_len();
        &self.data[base..base + self.dims.pma_proj_len()]
    }

    fn pma_out(&self, h: usize) -> &[f64] {
        let base = self.layout.pma_out + h * self.dims.pma_out_len();
        &self.data[base..base + self.dims.pma_out_len()]
    }

    fn action_head(&self) -> &[f64] {
        &self.data[self.layout.action..self.layout.action + self.dims.action_len()]
    }

    fn value_head(&self) -> &[f64] {
        &self.data[self.layout.value..self.layout.value + self.dims.d_enc]
    }

    fn sab_stage(&self, acts: &mut Activations) {
        let d = &self.dims;
        let m = acts.m;
        let inv_sqrt = 1.0 / (d.d_h as f64).sqrt();
        for h in 0..d.heads {
            for i in 0..m {
                let x = &acts.features[i * d.d_in..(i + 1) * d.d_in];
                let base = (h * m + i) * d.d_h;
                affine(self.sab_q(h), d.d_in, x, &mut acts.q[base..base + d.d_h]);
                affine(self.sab_k(h), d.d_in, x, &mut acts.k[base..base + d.d_h]);
                affine(self.sab_v(h), d.d_in, x, &mut acts.v[base..base + d.d_h]);
            }
        }
        for h in 0..d.heads {
            for i in 0..m {
                let qi = &acts.q[(h * m + i) * d.d_h..(h * m + i + 1) * d.d_h];
                let row = &mut acts.lambda1[(h * m + i) * m..(h * m + i + 1) * m];
                for j in 0..m {
                    let kj = &acts.k[(h * m + j) * d.d_h..(h * m + j + 1) * d.d_h];
                    let mut s = 0.0;
                    for t in 0..d.d_h {
                        s += qi[t] * kj[t];
                    }
                    row[j] = s * inv_sqrt;
                }
                softmax_in_place(row);
                let att = (h * m + i) * d.d_h;
                acts.attended[att..att + d.d_h].fill(0.0);
                for j in 0..m {
                    let w = acts.lambda1[(h * m + i) * m + j];
                    let vj = (h * m + j) * d.d_h;
                    for t in 0..d.d_h {
                        acts.attended[att + t] += w * acts.v[vj + t];
                    }
                }
            }
        }
        let mut head_out = vec![0.0; d.d_enc];
        for i in 0..m {
            let pre = &mut acts.pre1[i * d.d_enc..(i + 1) * d.d_enc];
            pre.fill(0.0);
            for h in 0..d.heads {
                let att = (h * m + i) * d.d_h;
                affine(
                    self.sab_out(h),
                    d.d_h,
                    &acts.attended[att..att + d.d_h],
                    &mut head_out,
                );
                for t in 0..d.d_enc {
                    pre[t] += head_out[t];
                }
            }
            for t in 0..d.d_enc {
                acts.e1[i * d.d_enc + t] = pre[t].max(0.0);
            }
        }
    }

    fn pool_stage(&self, acts: &mut Activations) {
        let d = &self.dims;
        let m = acts.m;
        match self.pooling {
            Pooling::Attention => {
                let inv_sqrt = 1.0 / (d.d_h as f64).sqrt();
                let seed = self.pma_seed().to_vec();
                for h in 0..d.heads {
                    for j in 0..m {
                        let e = &acts.e1[j * d.d_enc..(j + 1) * d.d_enc];
                        let base = (h * m + j) * d.d_h;
                        affine(self.pma_k(h), d.d_enc, e, &mut acts.pma_k[base..base + d.d_h]);
                        affine(self.pma_v(h), d.d_enc, e, &mut acts.pma_v[base..base + d.d_h]);
                    }
                    let row = &mut acts.lambda2[h * m..(h + 1) * m];
                    for j in 0..m {
                        let kj = &acts.pma_k[(h * m + j) * d.d_h..(h * m + j + 1) * d.d_h];
                        let mut s = 0.0;
                        for t in 0..d.d_h {
                            s += seed[t] * kj[t];
                        }
                        row[j] = s * inv_sqrt;
                    }
                    softmax_in_place(row);
                    let pooled = &mut acts.pooled[h * d.d_h..(h + 1) * d.d_h];
                    pooled.fill(0.0);
                    for j in 0..m {
                        let w = acts.lambda2[h * m + j];
                        let vj = (h * m + j) * d.d_h;
                        for t in 0..d.d_h {
                            pooled[t] += w * acts.pma_v[vj + t];
                        }
                    }
                }
                acts.pre2.fill(0.0);
                let mut head_out = vec![0.0; d.d_enc];
                for h in 0..d.heads {
                    affine(
                        self.pma_out(h),
                        d.d_h,
                        &acts.pooled[h * d.d_h..(h + 1) * d.d_h],
                        &mut head_out,
                    );
                    for t in 0..d.d_enc {
                        acts.pre2[t] += head_out[t];
                    }
                }
                for t in 0..d.d_enc {
                    acts.e2[t] = acts.pre2[t].max(0.0);
                }
            }
            Pooling::Mean => {
                acts.e2.fill(0.0);
                for i in 0..m {
                    for t in 0..d.d_enc {
                        acts.e2[t] += acts.e1[i * d.d_enc + t];
                    }
                }
                let inv = 1.0 / m as f64;
                for t in 0..d.d_enc {
                    acts.e2[t] *= inv;
                }
            }
        }
    }

    fn heads_stage(&self, acts: &mut Activations) -> PolicyOutput {
        let d = &self.dims;
        let mut raw = [0.0; 2 * ACTION_DIM];
        affine(self.action_head(), d.d_enc, &acts.e2, &mut raw);
        acts.head_raw = raw;
        let mut mu = [0.0; ACTION_DIM];
        let mut log_std = [0.0; ACTION_DIM];
        for a in 0..ACTION_DIM {
            mu[a] = raw[a];
            log_std[a] = raw[ACTION_DIM + a].clamp(self.log_std_min, self.log_std_max);
        }
        let mut value = 0.0;
        let vhead = self.value_head();
        for t in 0..d.d_enc {
            value += vhead[t] * acts.e2[t];
        }
        PolicyOutput { mu, log_std, value }
    }

    /// Full forward pass over a non-empty observation set.
    pub fn forward_into(
        &self,
        obs: &[TargetObservation],
        acts: &mut Activations,
    ) -> PolicyOutput {
        assert!(!obs.is_empty(), "observation set must be non-empty");
        acts.set_size(&self.dims, obs.len());
        for (i, o) in obs.iter().enumerate() {
            featurize_one(
                o,
                self.input_scale,
                &mut acts.features[i * self.dims.d_in..(i + 1) * self.dims.d_in],
            );
        }
        self.sab_stage(acts);
        self.pool_stage(acts);
        self.heads_stage(acts)
    }

    pub fn forward(&self, obs: &[TargetObservation]) -> (PolicyOutput, Activations) {
        let mut acts = Activations::default();
        let out = self.forward_into(obs, &mut acts);
        (out, acts)
    }

    /// Reverse pass: accumulate parameter gradients for the given output
    /// gradients into `grads` (same layout as the parameter vector).
    pub fn backward(&self, acts: &Activations, upstream: &HeadGrads, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.data.len());
        let d = self.dims;
        let l = self.layout;
        let m = acts.m;
        let inv_sqrt = 1.0 / (d.d_h as f64).sqrt();

        // Heads.
        let mut d_raw = [0.0; 2 * ACTION_DIM];
        for a in 0..ACTION_DIM {
            d_raw[a] = upstream.d_mu[a];
            let raw = acts.head_raw[ACTION_DIM + a];
            d_raw[ACTION_DIM + a] =
                if raw > self.log_std_min && raw < self.log_std_max {
                    upstream.d_log_std[a]
                } else {
                    0.0
                };
        }
        let mut d_e2 = vec![0.0; d.d_enc];
        let vhead = self.value_head();
        for t in 0..d.d_enc {
            d_e2[t] = upstream.d_value * vhead[t];
            grads[l.value + t] += upstream.d_value * acts.e2[t];
        }
        affine_backward(
            self.action_head(),
            &mut grads[l.action..l.action + d.action_len()],
            d.d_enc,
            &acts.e2,
            &d_raw,
            Some(&mut d_e2),
        );

        let mut d_e1 = vec![0.0; m * d.d_enc];
        match self.pooling {
            Pooling::Attention => {
                let mut d_pre2 = vec![0.0; d.d_enc];
                for t in 0..d.d_enc {
                    d_pre2[t] = if acts.pre2[t] > 0.0 { d_e2[t] } else { 0.0 };
                }
                let seed = self.pma_seed();
                let mut d_pooled = vec![0.0; d.d_h];
                let mut d_lambda = vec![0.0; m];
                let mut d_pk = vec![0.0; d.d_h];
                let mut d_pv = vec![0.0; d.d_h];
                for h in 0..d.heads {
                    d_pooled.fill(0.0);
                    affine_backward(
                        self.pma_out(h),
                        &mut grads[l.pma_out + h * d.pma_out_len()
                            ..l.pma_out + (h + 1) * d.pma_out_len()],
                        d.d_h,
                        &acts.pooled[h * d.d_h..(h + 1) * d.d_h],
                        &d_pre2,
                        Some(&mut d_pooled),
                    );
                    // lambda2 and pooled values.
                    let lam = &acts.lambda2[h * m..(h + 1) * m];
                    let mut dot = 0.0;
                    for j in 0..m {
                        let vj = &acts.pma_v[(h * m + j) * d.d_h..(h * m + j + 1) * d.d_h];
                        let mut g = 0.0;
                        for t in 0..d.d_h {
                            g += d_pooled[t] * vj[t];
                        }
                        d_lambda[j] = g;
                        dot += lam[j] * g;
                    }
                    for j in 0..m {
                        let d_score = lam[j] * (d_lambda[j] - dot);
                        let kj = &acts.pma_k[(h * m + j) * d.d_h..(h * m + j + 1) * d.d_h];
                        for t in 0..d.d_h {
                            grads[l.pma_seed + t] += d_score * kj[t] * inv_sqrt;
                            d_pk[t] = d_score * seed[t] * inv_sqrt;
                            d_pv[t] = lam[j] * d_pooled[t];
                        }
                        let e = &acts.e1[j * d.d_enc..(j + 1) * d.d_enc];
                        affine_backward(
                            self.pma_k(h),
                            &mut grads[l.pma_k + h * d.pma_proj_len()
                                ..l.pma_k + (h + 1) * d.pma_proj_len()],
                            d.d_enc,
                            e,
                            &d_pk,
                            Some(&mut d_e1[j * d.d_enc..(j + 1) * d.d_enc]),
                        );
                        affine_backward(
                            self.pma_v(h),
                            &mut grads[l.pma_v + h * d.pma_proj_len()
                                ..l.pma_v + (h + 1) * d.pma_proj_len()],
                            d.d_enc,
                            e,
                            &d_pv,
                            Some(&mut d_e1[j * d.d_enc..(j + 1) * d.d_enc]),
                        );
                    }
                }
            }
            Pooling::Mean => {
                let inv = 1.0 / m as f64;
                for i in 0..m {
                    for t in 0..d.d_enc {
                        d_e1[i * d.d_enc + t] = d_e2[t] * inv;
                    }
                }
            }
        }

        // SAB backward.
        let mut d_pre1 = vec![0.0; m * d.d_enc];
        for i in 0..m {
            for t in 0..d.d_enc {
                d_pre1[i * d.d_enc + t] = if acts.pre1[i * d.d_enc + t] > 0.0 {
                    d_e1[i * d.d_enc + t]
                } else {
                    0.0
                };
            }
        }
        let mut d_att = vec![0.0; m * d.d_h];
        let mut d_q = vec![0.0; m * d.d_h];
        let mut d_k = vec![0.0; m * d.d_h];
        let mut d_v = vec![0.0; m * d.d_h];
        let mut d_lambda = vec![0.0; m];
        for h in 0..d.heads {
            d_att.fill(0.0);
            d_q.fill(0.0);
            d_k.fill(0.0);
            d_v.fill(0.0);
            for i in 0..m {
                affine_backward(
                    self.sab_out(h),
                    &mut grads
                        [l.sab_out + h * d.sab_out_len()..l.sab_out + (h + 1) * d.sab_out_len()],
                    d.d_h,
                    &acts.attended[(h * m + i) * d.d_h..(h * m + i + 1) * d.d_h],
                    &d_pre1[i * d.d_enc..(i + 1) * d.d_enc],
                    Some(&mut d_att[i * d.d_h..(i + 1) * d.d_h]),
                );
            }
            for i in 0..m {
                let lam = &acts.lambda1[(h * m + i) * m..(h * m + i + 1) * m];
                let da = &d_att[i * d.d_h..(i + 1) * d.d_h];
                let mut dot = 0.0;
                for j in 0..m {
                    let vj = &acts.v[(h * m + j) * d.d_h..(h * m + j + 1) * d.d_h];
                    let mut g = 0.0;
                    for t in 0..d.d_h {
                        g += da[t] * vj[t];
                    }
                    d_lambda[j] = g;
                    dot += lam[j] * g;
                    for t in 0..d.d_h {
                        d_v[j * d.d_h + t] += lam[j] * da[t];
                    }
                }
                let qi = &acts.q[(h * m + i) * d.d_h..(h * m + i + 1) * d.d_h];
                for j in 0..m {
                    let d_score = lam[j] * (d_lambda[j] - dot);
                    let kj = &acts.k[(h * m + j) * d.d_h..(h * m + j + 1) * d.d_h];
                    for t in 0..d.d_h {
                        d_q[i * d.d_h + t] += d_score * kj[t] * inv_sqrt;
                        d_k[j * d.d_h + t] += d_score * qi[t] * inv_sqrt;
                    }
                }
            }
            for i in 0..m {
                let x = &acts.features[i * d.d_in..(i + 1) * d.d_in];
                affine_backward(
                    self.sab_q(h),
                    &mut grads
                        [l.sab_q + h * d.sab_proj_len()..l.sab_q + (h + 1) * d.sab_proj_len()],
                    d.d_in,
                    x,
                    &d_q[i * d.d_h..(i + 1) * d.d_h],
                    None,
                );
                affine_backward(
                    self.sab_k(h),
                    &mut grads
                        [l.sab_k + h * d.sab_proj_len()..l.sab_k + (h + 1) * d.sab_proj_len()],
                    d.d_in,
                    x,
                    &d_k[i * d.d_h..(i + 1) * d.d_h],
                    None,
                );
                affine_backward(
                    self.sab_v(h),
                    &mut grads
                        [l.sab_v + h * d.sab_proj_len()..l.sab_v + (h + 1) * d.sab_proj_len()],
                    d.d_in,
                    x,
                    &d_v[i * d.d_h..(i + 1) * d.d_h],
                    None,
                );
            }
        }
    }

    // --- checkpoint io ---

    const MAGIC: &'static [u8; 8] = b"VNTGPOL1";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.data.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        let pool: u32 = match self.pooling {
            Pooling::Attention => 0,
            Pooling::Mean => 1,
        };
        out.extend_from_slice(&pool.to_le_bytes());
        for v in [
            self.dims.d_in as u32,
            self.dims.d_h as u32,
            self.dims.d_enc as u32,
            self.dims.heads as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.input_scale, self.log_std_min, self.log_std_max] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *cursor + n > bytes.len() {
                return Err(CheckpointError::Format("truncated checkpoint".into()));
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        let magic = take(&mut cursor, 8)?;
        if magic != Self::MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let read_u32 = |cursor: &mut usize| -> Result<u32, CheckpointError> {
            let s = take(cursor, 4)?;
            Ok(u32::from_le_bytes(s.try_into().unwrap()))
        };
        let read_f64 = |cursor: &mut usize| -> Result<f64, CheckpointError> {
            let s = take(cursor, 8)?;
            Ok(f64::from_le_bytes(s.try_into().unwrap()))
        };
        let version = read_u32(&mut cursor)?;
        if version != Self::VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let pooling = match read_u32(&mut cursor)? {
            0 => Pooling::Attention,
            1 => Pooling::Mean,
            other => {
                return Err(CheckpointError::Format(format!(
                    "unknown pooling kind {other}"
                )))
            }
        };
        let d_in = read_u32(&mut cursor)? as usize;
        let d_h = read_u32(&mut cursor)? as usize;
        let d_enc = read_u32(&mut cursor)? as usize;
        let heads = read_u32(&mut cursor)? as usize;
        if d_in != OBS_DIM {
            return Err(CheckpointError::Format(format!(
                "unsupported input width {d_in}"
            )));
        }
        let input_scale = read_f64(&mut cursor)?;
        let log_std_min = read_f64(&mut cursor)?;
        let log_std_max = read_f64(&mut cursor)?;
        let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let dims = PolicyDims {
            d_in,
            d_h,
            d_enc,
            heads,
        };
        let layout = Layout::new(&dims);
        if count != layout.total {
            return Err(CheckpointError::Format(format!(
                "parameter count {count} does not match dims (expected {})",
                layout.total
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(read_f64(&mut cursor)?);
        }
        if cursor != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self {
            dims,
            pooling,
            input_scale,
            log_std_min,
            log_std_max,
            layout,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Per-target latents of the self-attention block.
pub fn sab_forward(obs: &[TargetObservation], params: &PolicyParams) -> Vec<Vec<f64>> {
    assert!(!obs.is_empty(), "observation set must be non-empty");
    let mut acts = Activations::default();
    acts.set_size(&params.dims, obs.len());
    for (i, o) in obs.iter().enumerate() {
        featurize_one(
            o,
            params.input_scale,
            &mut acts.features[i * params.dims.d_in..(i + 1) * params.dims.d_in],
        );
    }
    params.sab_stage(&mut acts);
    (0..obs.len())
        .map(|i| acts.e1[i * params.dims.d_enc..(i + 1) * params.dims.d_enc].to_vec())
        .collect()
}

/// Pool a latent set into a single vector with the params' pooling layer.
pub fn pma_forward(latents: &[Vec<f64>], params: &PolicyParams) -> Vec<f64> {
    assert!(!latents.is_empty(), "latent set must be non-empty");
    let mut acts = Activations::default();
    acts.set_size(&params.dims, latents.len());
    for (i, e) in latents.iter().enumerate() {
        acts.e1[i * params.dims.d_enc..(i + 1) * params.dims.d_enc].copy_from_slice(e);
    }
    params.pool_stage(&mut acts);
    acts.e2.clone()
}

/// Action distribution parameters and value from a pooled latent.
pub fn heads_forward(e2: &[f64], params: &PolicyParams) -> PolicyOutput {
    let mut acts = Activations::default();
    acts.set_size(&params.dims, 1);
    acts.e2.copy_from_slice(e2);
    params.heads_stage(&mut acts)
}

/// Result of sampling the squashed Gaussian policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAction {
    pub action: ViewpointAction,
    /// Pre-squash Gaussian sample, stored for likelihood evaluation.
    pub presquash: [f64; ACTION_DIM],
    pub log_prob: f64,
}

/// ln(1 - tanh(z)^2), evaluated stably for large |z|.
fn ln_one_minus_tanh_sq(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z.abs() - (-2.0 * z.abs()).exp().ln_1p())
}

/// Log density of the pre-squash sample under the diagonal Gaussian, plus the
/// tanh change-of-variables correction (constant bound scaling omitted; it
/// cancels in likelihood ratios).
pub fn action_log_prob(
    presquash: &[f64; ACTION_DIM],
    mu: &[f64; ACTION_DIM],
    log_std: &[f64; ACTION_DIM],
) -> f64 {
    let mut lp = 0.0;
    for a in 0..ACTION_DIM {
        let std = log_std[a].exp();
        let t = (presquash[a] - mu[a]) / std;
        lp += -log_std[a] - HALF_LN_TWO_PI - 0.5 * t * t;
        lp -= ln_one_minus_tanh_sq(presquash[a]);
    }
    lp
}

fn squash(presquash: &[f64; ACTION_DIM], bounds: &ActionBounds) -> ViewpointAction {
    ViewpointAction {
        delta_position: crate::geom::Vec2::new(
            bounds.pos * presquash[0].tanh(),
            bounds.pos * presquash[1].tanh(),
        ),
        delta_yaw: bounds.yaw * presquash[2].tanh(),
    }
}

/// Draw an action from the squashed Gaussian.
pub fn sample_action<R: Rng>(
    mu: &[f64; ACTION_DIM],
    log_std: &[f64; ACTION_DIM],
    bounds: &ActionBounds,
    rng: &mut R,
) -> SampledAction {
    let mut presquash = [0.0; ACTION_DIM];
    for a in 0..ACTION_DIM {
        let eps: f64 = rng.sample(StandardNormal);
        presquash[a] = mu[a] + log_std[a].exp() * eps;
    }
    SampledAction {
        action: squash(&presquash, bounds),
        presquash,
        log_prob: action_log_prob(&presquash, mu, log_std),
    }
}

/// Deterministic policy action: the squashed distribution mean.
pub fn deterministic_action(mu: &[f64; ACTION_DIM], bounds: &ActionBounds) -> ViewpointAction {
    squash(mu, bounds)
}

/// Closed-form entropy of the diagonal Gaussian (pre-squash).
pub fn gaussian_entropy(log_std: &[f64; ACTION_DIM]) -> f64 {
    let c = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    log_std.iter().map(|ls| ls + c).sum()
}

/// Closed-form KL(old || new) between diagonal Gaussians (pre-squash).
pub fn gaussian_kl(
    mu_old: &[f64; ACTION_DIM],
    log_std_old: &[f64; ACTION_DIM],
    mu_new: &[f64; ACTION_DIM],
    log_std_new: &[f64; ACTION_DIM],
) -> f64 {
    let mut kl = 0.0;
    for a in 0..ACTION_DIM {
        let vo = (2.0 * log_std_old[a]).exp();
        let vn = (2.0 * log_std_new[a]).exp();
        let dm = mu_old[a] - mu_new[a];
        kl += log_std_new[a] - log_std_old[a] + (vo + dm * dm) / (2.0 * vn) - 0.5;
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig {
            d_h: 4,
            d_enc: 8,
            heads: 2,
            ..PolicyConfig::default()
        }
    }

    fn obs(seed: u64, m: usize) -> Vec<TargetObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| TargetObservation {
                rel_position: Vec2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)),
                rel_velocity: Vec2::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)),
                rel_facing: rng.gen_range(-3.0..3.0),
                belief_entropy: rng.gen_range(0.0..1.0),
                measurement_entropy: rng.gen_range(0.0..1.0),
                classified: rng.gen_bool(0.3),
            })
            .collect()
    }

    fn params(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::init(&PolicyConfig::default(), Pooling::Attention, &mut rng)
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let p = params(1);
        let o = obs(2, 1);
        let (_, acts) = p.forward(&o);
        for h in 0..p.dims.heads {
            assert_eq!(acts.sab_weights(h, 0), &[1.0]);
            assert_eq!(acts.pma_weights(h), &[1.0]);
        }
    }

    #[test]
    fn duplicated_observations_share_latents() {
        let p = params(3);
        let mut o = obs(4, 3);
        o[1] = o[0];
        let latents = sab_forward(&o, &p);
        assert_eq!(latents[0], latents[1]);
    }

    #[test]
    fn two_element_swap_is_bitwise_equivariant() {
        let p = params(5);
        let o = obs(6, 2);
        let fwd = sab_forward(&o, &p);
        let swapped = sab_forward(&[o[1], o[0]], &p);
        assert_eq!(fwd[0], swapped[1]);
        assert_eq!(fwd[1], swapped[0]);
        // Pooled outputs identical bitwise for the two-element swap.
        let (a, _) = p.forward(&o);
        let (b, _) = p.forward(&[o[1], o[0]]);
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn identical_latents_pool_to_exact_uniform_weights() {
        let p = params(7);
        let one = obs(8, 1);
        let latent = sab_forward(&one, &p).pop().unwrap();
        for m in [2usize, 3, 5, 8] {
            let latents = vec![latent.clone(); m];
            let mut acts = Activations::default();
            acts.set_size(&p.dims, m);
            for (i, e) in latents.iter().enumerate() {
                acts.e1[i * p.dims.d_enc..(i + 1) * p.dims.d_enc].copy_from_slice(e);
            }
            p.pool_stage(&mut acts);
            for h in 0..p.dims.heads {
                for &w in acts.pma_weights(h) {
                    assert_eq!(w, 1.0 / m as f64);
                }
            }
        }
    }

    #[test]
    fn pma_of_single_latent_matches_pooled_value() {
        let p = params(9);
        let o = obs(10, 1);
        let latents = sab_forward(&o, &p);
        let pooled = pma_forward(&latents, &p);
        let (out, acts) = p.forward(&o);
        assert_eq!(pooled, acts.pooled_latent());
        let heads = heads_forward(&pooled, &p);
        assert_eq!(heads.mu, out.mu);
        assert_eq!(heads.value, out.value);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let p = params(11);
        let o = obs(12, 7);
        let (_, acts) = p.forward(&o);
        for h in 0..p.dims.heads {
            for i in 0..o.len() {
                let row = acts.sab_weights(h, i);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
            let sum: f64 = acts.pma_weights(h).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_bias_outputs() {
        let mut p = PolicyParams::zeros(&small_cfg(), Pooling::Attention);
        // Write known biases into the action head.
        let cols = p.dims.d_enc + 1;
        let base = p.layout.action;
        let biases = [0.3, -0.2, 0.1, -9.0, 0.0, 1.0];
        for (r, b) in biases.iter().enumerate() {
            p.data[base + r * cols + p.dims.d_enc] = *b;
        }
        let out = heads_forward(&vec![0.5; p.dims.d_enc], &p);
        assert_eq!(out.mu, [0.3, -0.2, 0.1]);
        // Raw log-std -9 clamps to the -5 floor.
        assert_eq!(out.log_std[0], -5.0);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn value_head_is_linear() {
        let p = params(13);
        let e2: Vec<f64> = (0..p.dims.d_enc).map(|i| 0.1 * i as f64 - 1.0).collect();
        let doubled: Vec<f64> = e2.iter().map(|v| 2.0 * v).collect();
        let a = heads_forward(&e2, &p).value;
        let b = heads_forward(&doubled, &p).value;
        assert!((b - 2.0 * a).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn sample_action_respects_bounds_and_degenerates() {
        let bounds = ActionBounds { pos: 0.5, yaw: 0.26 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mu = [0.7, -1.2, 0.4];
        let log_std = [-0.5, -0.5, -0.5];
        for _ in 0..100_000 {
            let s = sample_action(&mu, &log_std, &bounds, &mut rng);
            assert!(s.action.delta_position.x.abs() <= bounds.pos);
            assert!(s.action.delta_position.y.abs() <= bounds.pos);
            assert!(s.action.delta_yaw.abs() <= bounds.yaw);
        }
        // Vanishing sigma collapses to the squashed mean.
        let tight = [-60.0, -60.0, -60.0];
        let s = sample_action(&mu, &tight, &bounds, &mut rng);
        let det = deterministic_action(&mu, &bounds);
        assert!((s.action.delta_position.x - det.delta_position.x).abs() < 1e-9);
        assert!((s.action.delta_yaw - det.delta_yaw).abs() < 1e-9);
    }

    #[test]
    fn log_prob_at_mean_has_zero_correction() {
        let z = [0.0; ACTION_DIM];
        let mu = [0.0; ACTION_DIM];
        let log_std = [-0.5, 0.3, -1.0];
        let expected: f64 = log_std.iter().map(|ls| -ls - HALF_LN_TWO_PI).sum();
        assert!((action_log_prob(&z, &mu, &log_std) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_prob_is_finite_for_large_samples() {
        let z = [30.0, -45.0, 60.0];
        let mu = [0.0; ACTION_DIM];
        let log_std = [1.0; ACTION_DIM];
        assert!(action_log_prob(&z, &mu, &log_std).is_finite());
    }

    #[test]
    fn forward_is_deterministic_and_handles_large_sets() {
        let p = params(17);
        let o = obs(18, 100);
        let (a, _) = p.forward(&o);
        let (b, _) = p.forward(&o);
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.log_std, b.log_std);
        assert_eq!(a.value, b.value);
        assert!(a.mu.iter().all(|v| v.is_finite()));
        assert!(a.value.is_finite());
    }

    fn fd_check(pooling: Pooling) {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = PolicyParams::init(&small_cfg(), pooling, &mut rng);
        let o = obs(24, 3);
        let upstream = HeadGrads {
            d_mu: [0.7, -1.1, 0.4],
            d_log_std: [0.9, 0.2, -0.6],
            d_value: 1.3,
        };
        let loss = |p: &PolicyParams| {
            let (out, _) = p.forward(&o);
            let mut l = upstream.d_value * out.value;
            for a in 0..ACTION_DIM {
                l += upstream.d_mu[a] * out.mu[a] + upstream.d_log_std[a] * out.log_std[a];
            }
            l
        };
        let (_, acts) = p.forward(&o);
        let mut grads = vec![0.0; p.num_params()];
        p.backward(&acts, &upstream, &mut grads);

        let h = 1e-5;
        for idx in 0..p.num_params() {
            let saved = p.data[idx];
            p.data[idx] = saved + h;
            let up = loss(&p);
            p.data[idx] = saved - h;
            let down = loss(&p);
            p.data[idx] = saved;
            let fd = (up - down) / (2.0 * h);
            let denom = grads[idx].abs().max(fd.abs()).max(1.0);
            assert!(
                (grads[idx] - fd).abs() / denom < 1e-4,
                "param {idx}: analytic {} vs fd {}",
                grads[idx],
                fd
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_attention() {
        fd_check(Pooling::Attention);
    }

    #[test]
    fn gradients_match_finite_differences_mean() {
        fd_check(Pooling::Mean);
    }

    #[test]
    fn value_gradient_is_pooled_latent() {
        let p = params(29);
        let o = obs(30, 4);
        let (_, acts) = p.forward(&o);
        let mut grads = vec![0.0; p.num_params()];
        p.backward(
            &acts,
            &HeadGrads {
                d_value: 1.0,
                ..HeadGrads::default()
            },
            &mut grads,
        );
        let vslice = &grads[p.layout.value..p.layout.value + p.dims.d_enc];
        assert_eq!(vslice, acts.pooled_latent());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = params(31);
        let o = obs(32, 5);
        let (_, acts) = p.forward(&o);
        let mut grads = vec![0.0; p.num_params()];
        p.backward(&acts, &HeadGrads::default(), &mut grads);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let p = params(37);
        let bytes = p.to_bytes();
        let q = PolicyParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes, q.to_bytes());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(PolicyParams::from_bytes(b"not a checkpoint").is_err());
        let p = params(38);
        let mut bytes = p.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(PolicyParams::from_bytes(&bytes).is_err());
    }

    #[test]
    fn entropy_matches_closed_form() {
        let log_std = [-0.5, 0.2, -1.3];
        let expected: f64 = log_std
            .iter()
            .map(|ls| ls + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()))
            .sum();
        assert!((gaussian_entropy(&log_std) - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let mu = [0.3, -0.4, 0.0];
        let ls = [-0.5, 0.1, -1.0];
        assert!(gaussian_kl(&mu, &ls, &mu, &ls).abs() < 1e-15);
        assert!(gaussian_kl(&mu, &ls, &[0.4, -0.4, 0.0], &ls) > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn permutation_invariance(seed in 0u64..1000, m in 1usize..=40) {
            let p = params(101);
            let o = obs(seed, m);
            let (base, _) = p.forward(&o);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let mut permuted = o.clone();
            for i in (1..permuted.len()).rev() {
                let j = rng.gen_range(0..=i);
                permuted.swap(i, j);
            }
            let (out, _) = p.forward(&permuted);
            for a in 0..ACTION_DIM {
                prop_assert!((base.mu[a] - out.mu[a]).abs() < 1e-12);
                prop_assert!((base.log_std[a] - out.log_std[a]).abs() < 1e-12);
            }
            prop_assert!((base.value - out.value).abs() < 1e-12);
        }
    }
}
