//! Temporal pooling: plain statistics, attentive statistics, channel- and
//! context-dependent attentive statistics, and self-attentive (mean only).
//!
//! Each layer has a graph form (`*_var`, used inside the models so gradients
//! flow) and an array form that builds a throwaway graph and validates shapes.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

/// Guard added to every variance before the square root.
pub const POOL_EPS: f64 = 1e-6;

/// Concatenated mean and standard deviation, `2D` values.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledVector {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl PooledVector {
    pub fn dim(&self) -> usize {
        self.mean.len() + self.std.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.mean.iter().chain(self.std.iter()).copied().collect()
    }

    fn from_row(row: &Array2<f64>) -> Self {
        let d = row.ncols() / 2;
        let flat = row.row(0);
        Self {
            mean: flat.slice(ndarray::s![..d]).to_owned(),
            std: flat.slice(ndarray::s![d..]).to_owned(),
        }
    }
}

/// Single-head scorer `e_t = score^T tanh(proj^T h_t + bias)` shared by
/// attentive statistics pooling and self-attentive pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `D x A`.
    pub proj: Array2<f64>,
    /// `1 x A`.
    pub bias: Array2<f64>,
    /// `A x 1`.
    pub score: Array2<f64>,
}

impl AttentionParams {
    pub fn random(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        let c = 1.0 / (hidden as f64).sqrt();
        Self {
            proj: Array2::from_shape_fn((dim, hidden), |_| rng.gen_range(-b..b)),
            bias: Array2::from_shape_fn((1, hidden), |_| rng.gen_range(-b..b)),
            score: Array2::from_shape_fn((hidden, 1), |_| rng.gen_range(-c..c)),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        let a = self.proj.ncols();
        if self.proj.nrows() != dim || self.bias.dim() != (1, a) || self.score.dim() != (a, 1) {
            return Err(Error::invalid(format!(
                "attention params {:?}/{:?}/{:?} do not fit input dim {dim}",
                self.proj.dim(),
                self.bias.dim(),
                self.score.dim()
            )));
        }
        Ok(())
    }
}

/// Channel-wise scorer over `[h_t; mean(H); std(H)]`:
/// `e_t = out^T tanh(proj^T [h_t; ctx] + bias) + out_bias`, one score per
/// channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    /// `3D x A`.
    pub proj: Array2<f64>,
    /// `1 x A`.
    pub bias: Array2<f64>,
    /// `A x D`.
    pub out: Array2<f64>,
    /// `1 x D`.
    pub out_bias: Array2<f64>,
}

impl ChannelAttentionParams {
    pub fn random(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (3.0 * dim as f64).sqrt();
        let c = 1.0 / (hidden as f64).sqrt();
        Self {
            proj: Array2::from_shape_fn((3 * dim, hidden), |_| rng.gen_range(-b..b)),
            bias: Array2::from_shape_fn((1, hidden), |_| rng.gen_range(-b..b)),
            out: Array2::from_shape_fn((hidden, dim), |_| rng.gen_range(-c..c)),
            out_bias: Array2::from_shape_fn((1, dim), |_| rng.gen_range(-c..c)),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        let a = self.proj.ncols();
        if self.proj.nrows() != 3 * dim
            || self.bias.dim() != (1, a)
            || self.out.dim() != (a, dim)
            || self.out_bias.dim() != (1, dim)
        {
            return Err(Error::invalid(format!(
                "channel attention params do not fit input dim {dim}"
            )));
        }
        Ok(())
    }
}

/// Graph handles for an [`AttentionParams`] set.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub proj: Var,
    pub bias: Var,
    pub score: Var,
}

impl AttentionVars {
    pub fn from_store(g: &mut Graph, store: &ParamStore, prefix: &str) -> Self {
        Self {
            proj: g.param(store, &format!("{prefix}.proj")),
            bias: g.param(store, &format!("{prefix}.bias")),
            score: g.param(store, &format!("{prefix}.score")),
        }
    }

    pub fn from_params(g: &mut Graph, p: &AttentionParams) -> Self {
        Self {
            proj: g.input(p.proj.clone()),
            bias: g.input(p.bias.clone()),
            score: g.input(p.score.clone()),
        }
    }
}

/// Graph handles for a [`ChannelAttentionParams`] set.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionVars {
    pub proj: Var,
    pub bias: Var,
    pub out: Var,
    pub out_bias: Var,
}

impl ChannelAttentionVars {
    pub fn from_store(g: &mut Graph, store: &ParamStore, prefix: &str) -> Self {
        Self {
            proj: g.param(store, &format!("{prefix}.proj")),
            bias: g.param(store, &format!("{prefix}.bias")),
            out: g.param(store, &format!("{prefix}.out")),
            out_bias: g.param(store, &format!("{prefix}.out_bias")),
        }
    }

    pub fn from_params(g: &mut Graph, p: &ChannelAttentionParams) -> Self {
        Self {
            proj: g.input(p.proj.clone()),
            bias: g.input(p.bias.clone()),
            out: g.input(p.out.clone()),
            out_bias: g.input(p.out_bias.clone()),
        }
    }
}

/// `1 x 2D` mean and standard deviation over time.
pub fn stats_pool_var(g: &mut Graph, h: Var) -> Var {
    let t = g.shape(h).0;
    let mean = g.mean_rows(h);
    let rep = g.repeat_rows(mean, t);
    let centred = g.sub(h, rep);
    let sq = g.square(centred);
    let var = g.mean_rows(sq);
    let var = g.add_scalar(var, POOL_EPS);
    let std = g.sqrt(var);
    g.concat_cols(&[mean, std])
}

/// Weighted mean and standard deviation for a `T x 1` weight column.
fn weighted_stats(g: &mut Graph, h: Var, alpha: Var) -> Var {
    let t = g.shape(h).0;
    let at = g.transpose(alpha);
    let mean = g.matmul(at, h);
    let rep = g.repeat_rows(mean, t);
    let centred = g.sub(h, rep);
    let sq = g.square(centred);
    let var = g.matmul(at, sq);
    let var = g.add_scalar(var, POOL_EPS);
    let std = g.sqrt(var);
    g.concat_cols(&[mean, std])
}

/// Per-frame attention weights, `T x 1`, summing to one.
pub fn attention_weights_var(g: &mut Graph, h: Var, p: AttentionVars) -> Var {
    let z = g.matmul(h, p.proj);
    let z = g.add_row(z, p.bias);
    let z = g.tanh(z);
    let e = g.matmul(z, p.score);
    g.softmax_cols(e)
}

pub fn attentive_stats_pool_var(g: &mut Graph, h: Var, p: AttentionVars) -> Var {
    let alpha = attention_weights_var(g, h, p);
    weighted_stats(g, h, alpha)
}

/// Weighted mean only, `1 x D`.
pub fn self_attentive_pool_var(g: &mut Graph, h: Var, p: AttentionVars) -> Var {
    let alpha = attention_weights_var(g, h, p);
    let at = g.transpose(alpha);
    g.matmul(at, h)
}

/// Per-(frame, channel) weights, `T x D`; every column sums to one.
pub fn channel_weights_var(g: &mut Graph, h: Var, p: ChannelAttentionVars) -> Var {
    let t = g.shape(h).0;
    let ctx = stats_pool_var(g, h);
    let ctx = g.repeat_rows(ctx, t);
    let joined = g.concat_cols(&[h, ctx]);
    let z = g.matmul(joined, p.proj);
    let z = g.add_row(z, p.bias);
    let z = g.tanh(z);
    let e = g.matmul(z, p.out);
    let e = g.add_row(e, p.out_bias);
    g.softmax_cols(e)
}

pub fn channel_context_stats_pool_var(g: &mut Graph, h: Var, p: ChannelAttentionVars) -> Var {
    let t = g.shape(h).0;
    let alpha = channel_weights_var(g, h, p);
    let weighted = g.mul(alpha, h);
    let mean = g.sum_rows(weighted);
    let rep = g.repeat_rows(mean, t);
    let centred = g.sub(h, rep);
    let sq = g.square(centred);
    let wsq = g.mul(alpha, sq);
    let var = g.sum_rows(wsq);
    let var = g.add_scalar(var, POOL_EPS);
    let std = g.sqrt(var);
    g.concat_cols(&[mean, std])
}

fn check_frames(h: &Array2<f64>) -> Result<()> {
    if h.nrows() == 0 || h.ncols() == 0 {
        return Err(Error::invalid("pooling needs at least one frame and one dimension"));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("frame sequence contains non-finite values"));
    }
    Ok(())
}

pub fn stats_pool(h: &Array2<f64>) -> Result<PooledVector> {
    check_frames(h)?;
    let mut g = Graph::new();
    let hv = g.input(h.clone());
    let out = stats_pool_var(&mut g, hv);
    Ok(PooledVector::from_row(g.value(out)))
}

pub fn attentive_stats_pool(h: &Array2<f64>, p: &AttentionParams) -> Result<PooledVector> {
    check_frames(h)?;
    p.check(h.ncols())?;
    let mut g = Graph::new();
    let hv = g.input(h.clone());
    let pv = AttentionVars::from_params(&mut g, p);
    let out = attentive_stats_pool_var(&mut g, hv, pv);
    Ok(PooledVector::from_row(g.value(out)))
}

/// Attention distribution over frames.
pub fn attention_weights(h: &Array2<f64>, p: &AttentionParams) -> Result<Array1<f64>> {
    check_frames(h)?;
    p.check(h.ncols())?;
    let mut g = Graph::new();
    let hv = g.input(h.clone());
    let pv = AttentionVars::from_params(&mut g, p);
    let a = attention_weights_var(&mut g, hv, pv);
    Ok(g.value(a).column(0).to_owned())
}

pub fn channel_context_stats_pool(h: &Array2<f64>, p: &ChannelAttentionParams) -> Result<PooledVector> {
    check_frames(h)?;
    p.check(h.ncols())?;
    let mut g = Graph::new();
    let hv = g.input(h.clone());
    let pv = ChannelAttentionVars::from_params(&mut g, p);
    let out = channel_context_stats_pool_var(&mut g, hv, pv);
    Ok(PooledVector::from_row(g.value(out)))
}

/// Per-channel attention distributions, `T x D`.
pub fn channel_weights(h: &Array2<f64>, p: &ChannelAttentionParams) -> Result<Array2<f64>> {
    check_frames(h)?;
    p.check(h.ncols())?;
    let mut g = Graph::new();
    let hv = g.input(h.clone());
    let pv = ChannelAttentionVars::from_params(&mut g, p);
    let a = channel_weights_var(&mut g, hv, pv);
    Ok(g.value(a).clone())
}

pub fn self_attentive_pool(h: &Array2<f64>, p: &AttentionParams) -> Result<Array1<f64>> {
    check_frames(h)?;
    p.check(h.ncols())?;
    let mut g = Graph::new();
    let hv = g.input(h.clone());
    let pv = AttentionVars::from_params(&mut g, p);
    let out = self_attentive_pool_var(&mut g, hv, pv);
    Ok(g.value(out).row(0).to_owned())
}
