//! Conformer encoder with multi-layer feature aggregation: every block's
//! output is kept, the outputs are concatenated along the feature axis and
//! layer-normalised, then attentive statistics pooling and an affine map give
//! the embedding.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{affine, layer_norm, linear, LN_EPS};
use super::ConformerConfig;
use crate::error::{Error, Result};
use crate::pooling::{attentive_stats_pool_var, AttentionVars};
use crate::tensor::{Graph, Init, ParamStore, Var};

/// Frequency stride and padding of the convolutional front end.
const FREQ_STRIDE: usize = 2;
const FREQ_PAD: usize = 1;
const SUB_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Conformer {
    pub cfg: ConformerConfig,
}

impl Conformer {
    pub fn new(cfg: ConformerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Width of the front end's frequency axis after striding.
    pub fn sub_freq_bins(&self) -> usize {
        (self.cfg.input_dim + 2 * FREQ_PAD - SUB_KERNEL) / FREQ_STRIDE + 1
    }

    /// Frames after the front end, or `None` if the input is too short.
    pub fn sub_frames(&self, t_len: usize) -> Option<usize> {
        (t_len >= SUB_KERNEL).then(|| (t_len - SUB_KERNEL) / self.cfg.subsample_factor + 1)
    }

    /// Width of the aggregated (concatenated) representation.
    pub fn mfa_dim(&self) -> usize {
        self.cfg.n_layers * self.cfg.model_dim
    }

    /// Closed-form parameter total, classification head excluded.
    pub fn count_params(&self) -> usize {
        let c = &self.cfg;
        let d = c.model_dim;
        let front = SUB_KERNEL * SUB_KERNEL * d + d + self.sub_freq_bins() * d * d + d;
        let ff = 2 * d + (d * c.ff_units + c.ff_units) + (c.ff_units * d + d);
        let mhsa = 2 * d + 4 * (d * d + d) + d * d + 2 * d;
        let conv = 2 * d + (d * 2 * d + 2 * d) + (c.conv_kernel * d + d) + 2 * d + (d * d + d);
        let block = 2 * ff + mhsa + conv + 2 * d;
        let l = self.mfa_dim();
        let a = c.pool_attention_dim;
        let pool = l * a + a + a;
        front + c.n_layers * block + 2 * l + pool + 2 * l * c.embed_dim + c.embed_dim
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.cfg;
        let d = c.model_dim;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let patch = SUB_KERNEL * SUB_KERNEL;
        init.linear("sub.conv", patch, d);
        init.linear("sub.out", self.sub_freq_bins() * d, d);
        for i in 0..c.n_layers {
            let p = format!("blocks.{i}");
            for ff in ["ff1", "ff2"] {
                init.affine(&format!("{p}.{ff}.ln"), d);
                init.linear(&format!("{p}.{ff}.w1"), d, c.ff_units);
                init.linear(&format!("{p}.{ff}.w2"), c.ff_units, d);
            }
            init.affine(&format!("{p}.mhsa.ln"), d);
            for proj in ["q", "k", "v", "out"] {
                init.linear(&format!("{p}.mhsa.{proj}"), d, d);
            }
            init.uniform(format!("{p}.mhsa.pos.w"), d, d, d);
            init.uniform(format!("{p}.mhsa.pos_bias_u"), 1, d, d);
            init.uniform(format!("{p}.mhsa.pos_bias_v"), 1, d, d);
            init.affine(&format!("{p}.conv.ln"), d);
            init.linear(&format!("{p}.conv.pw1"), d, 2 * d);
            init.uniform(format!("{p}.conv.dw.w"), c.conv_kernel, d, c.conv_kernel);
            init.zeros(format!("{p}.conv.dw.b"), 1, d);
            init.affine(&format!("{p}.conv.bn"), d);
            init.linear(&format!("{p}.conv.pw2"), d, d);
            init.affine(&format!("{p}.final_ln"), d);
        }
        let l = self.mfa_dim();
        init.affine("mfa_norm", l);
        init.uniform("pool.proj", l, c.pool_attention_dim, l);
        init.zeros("pool.bias", 1, c.pool_attention_dim);
        init.uniform("pool.score", c.pool_attention_dim, 1, c.pool_attention_dim);
        init.linear("embed", 2 * l, c.embed_dim);
        store
    }

    fn check_input(&self, feats: &Array2<f64>) -> Result<()> {
        if feats.ncols() != self.cfg.input_dim {
            return Err(Error::invalid(format!(
                "expected {} feature bins, got {}",
                self.cfg.input_dim,
                feats.ncols()
            )));
        }
        if self.sub_frames(feats.nrows()).is_none() {
            return Err(Error::invalid(format!(
                "{} frames is shorter than the {SUB_KERNEL}-frame front end",
                feats.nrows()
            )));
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        Ok(())
    }

    /// 3x3 convolution (time stride `subsample_factor`, frequency stride 2),
    /// ReLU, then a linear map of the flattened channels-by-bins to the model
    /// width. `T x F -> T' x D`.
    pub fn subsample(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let (t_len, f_len) = g.shape(x);
        let st = self.cfg.subsample_factor;
        let t_out = self.sub_frames(t_len).expect("checked input length");
        let f_out = self.sub_freq_bins();
        let mut idx = Vec::with_capacity(t_out * f_out * SUB_KERNEL * SUB_KERNEL);
        for t in 0..t_out {
            for f in 0..f_out {
                for a in 0..SUB_KERNEL {
                    for b in 0..SUB_KERNEL {
                        let src_t = t * st + a;
                        let src_f = (f * FREQ_STRIDE + b) as isize - FREQ_PAD as isize;
                        idx.push((src_f >= 0 && (src_f as usize) < f_len).then(|| src_t * f_len + src_f as usize));
                    }
                }
            }
        }
        let patches = g.gather(x, idx, (t_out * f_out, SUB_KERNEL * SUB_KERNEL));
        let h = linear(g, p, "sub.conv", patches);
        let h = g.relu(h);
        let h = g.reshape(h, (t_out, f_out * self.cfg.model_dim));
        linear(g, p, "sub.out", h)
    }

    /// Runs the front end and every block, returning each block's output.
    pub fn encode_layers(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Vec<Var> {
        let mut h = self.subsample(g, p, x);
        let mut outs = Vec::with_capacity(self.cfg.n_layers);
        for i in 0..self.cfg.n_layers {
            h = conformer_block_forward(g, p, &format!("blocks.{i}"), h, self.cfg.n_heads);
            outs.push(h);
        }
        outs
    }

    /// Full pipeline to a `1 x embed_dim` node.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let outs = self.encode_layers(g, p, x);
        self.head(g, p, &outs)
    }

    /// Aggregation, pooling and projection over the per-block outputs.
    pub fn head(&self, g: &mut Graph, p: &ParamStore, outs: &[Var]) -> Var {
        let cat = g.concat_cols(outs);
        let cat = layer_norm(g, p, "mfa_norm", cat);
        let att = AttentionVars::from_store(g, p, "pool");
        let pooled = attentive_stats_pool_var(g, cat, att);
        linear(g, p, "embed", pooled)
    }

    /// Validated forward pass on a `T x input_dim` feature matrix.
    pub fn forward_checked(&self, g: &mut Graph, p: &ParamStore, feats: &Array2<f64>) -> Result<Var> {
        self.check_input(feats)?;
        let x = g.input(feats.clone());
        Ok(self.forward(g, p, x))
    }
}

/// One conformer block: half-step feed-forward, relative-position multi-head
/// self-attention, convolution module, half-step feed-forward, layer norm.
pub fn conformer_block_forward(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var, n_heads: usize) -> Var {
    let ff1 = feed_forward(g, p, &format!("{prefix}.ff1"), x);
    let ff1 = g.scale(ff1, 0.5);
    let x = g.add(x, ff1);
    let att = self_attention(g, p, &format!("{prefix}.mhsa"), x, n_heads);
    let x = g.add(x, att);
    let conv = conv_module(g, p, &format!("{prefix}.conv"), x);
    let x = g.add(x, conv);
    let ff2 = feed_forward(g, p, &format!("{prefix}.ff2"), x);
    let ff2 = g.scale(ff2, 0.5);
    let x = g.add(x, ff2);
    layer_norm(g, p, &format!("{prefix}.final_ln"), x)
}

fn feed_forward(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Var {
    let h = layer_norm(g, p, &format!("{prefix}.ln"), x);
    let h = linear(g, p, &format!("{prefix}.w1"), h);
    let h = g.swish(h);
    linear(g, p, &format!("{prefix}.w2"), h)
}

/// Sinusoidal encodings of relative distances `T-1, T-2, ..., -(T-1)`.
pub fn relative_positions(t_len: usize, dim: usize) -> Array2<f64> {
    let rows = 2 * t_len - 1;
    Array2::from_shape_fn((rows, dim), |(r, c)| {
        let dist = (t_len as f64 - 1.0) - r as f64;
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
        if c % 2 == 0 {
            (dist * freq).sin()
        } else {
            (dist * freq).cos()
        }
    })
}

/// Relative-position multi-head self-attention: the score of query `i` on
/// key `j` is `(q_i + u) . k_j + (q_i + v) . p_{i-j}`, scaled by the head
/// width.
fn self_attention(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var, n_heads: usize) -> Var {
    let (t_len, d) = g.shape(x);
    let dk = d / n_heads;
    let h = layer_norm(g, p, &format!("{prefix}.ln"), x);
    let q = linear(g, p, &format!("{prefix}.q"), h);
    let k = linear(g, p, &format!("{prefix}.k"), h);
    let v = linear(g, p, &format!("{prefix}.v"), h);
    let pe = g.input(relative_positions(t_len, d));
    let wpos = g.param(p, &format!("{prefix}.pos.w"));
    let pos = g.matmul(pe, wpos);
    let u = g.param(p, &format!("{prefix}.pos_bias_u"));
    let vb = g.param(p, &format!("{prefix}.pos_bias_v"));

    let span = 2 * t_len - 1;
    let shift: Vec<Option<usize>> = (0..t_len)
        .flat_map(|i| (0..t_len).map(move |j| Some(i * span + (t_len - 1 - i + j))))
        .collect();
    let scale = 1.0 / (dk as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let (a, b) = (hd * dk, (hd + 1) * dk);
        let qh = g.slice_cols(q, a, b);
        let kh = g.slice_cols(k, a, b);
        let vh = g.slice_cols(v, a, b);
        let ph = g.slice_cols(pos, a, b);
        let uh = g.slice_cols(u, a, b);
        let vbh = g.slice_cols(vb, a, b);

        let qu = g.add_row(qh, uh);
        let kt = g.transpose(kh);
        let content = g.matmul(qu, kt);
        let qv = g.add_row(qh, vbh);
        let pt = g.transpose(ph);
        let full = g.matmul(qv, pt);
        let position = g.gather(full, shift.clone(), (t_len, t_len));
        let scores = g.add(content, position);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh));
    }
    let ctx = g.concat_cols(&heads);
    linear(g, p, &format!("{prefix}.out"), ctx)
}

/// Pointwise conv with GLU, depthwise conv, batch norm, swish, pointwise conv.
fn conv_module(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Var {
    let d = g.shape(x).1;
    let h = layer_norm(g, p, &format!("{prefix}.ln"), x);
    let h = linear(g, p, &format!("{prefix}.pw1"), h);
    let lin = g.slice_cols(h, 0, d);
    let gate = g.slice_cols(h, d, 2 * d);
    let gate = g.sigmoid(gate);
    let h = g.mul(lin, gate);
    let w = g.param(p, &format!("{prefix}.dw.w"));
    let b = g.param(p, &format!("{prefix}.dw.b"));
    let h = g.depthwise_conv(h, w);
    let h = g.add_row(h, b);
    let h = affine(g, p, &format!("{prefix}.bn"), h);
    let h = g.swish(h);
    linear(g, p, &format!("{prefix}.pw2"), h)
}

/// Feature-axis concatenation of per-layer outputs, in layer order.
pub fn concat_layers(outputs: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::invalid("need at least one layer output"))?;
    if outputs.iter().any(|o| o.dim() != first.dim()) {
        return Err(Error::invalid("layer outputs must share T and D"));
    }
    let views: Vec<_> = outputs.iter().map(|o| o.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(1), &views).expect("shapes checked"))
}

/// Concatenation followed by per-frame layer normalisation (unit affine).
pub fn mfa_concat(outputs: &[Array2<f64>]) -> Result<Array2<f64>> {
    let cat = concat_layers(outputs)?;
    let mut g = Graph::new();
    let x = g.input(cat);
    let y = g.layer_norm(x, LN_EPS);
    Ok(g.value(y).clone())
}

/// Array-level block forward with shape validation.
pub fn conformer_block(p: &ParamStore, prefix: &str, x: &Array2<f64>, n_heads: usize) -> Result<Array2<f64>> {
    let gamma = p
        .get(&format!("{prefix}.final_ln.gamma"))
        .ok_or_else(|| Error::invalid(format!("no block parameters under `{prefix}`")))?;
    let d = gamma.ncols();
    if x.ncols() != d || x.nrows() == 0 {
        return Err(Error::invalid(format!(
            "block input must be T x {d}, got {} x {}",
            x.nrows(),
            x.ncols()
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::invalid(format!("{n_heads} heads do not divide width {d}")));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = conformer_block_forward(&mut g, p, prefix, xv, n_heads);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::gradcheck::{check_input_grad, check_param_grads, jitter, random_matrix};
    use crate::tensor::fd;

    fn tiny() -> ConformerConfig {
        ConformerConfig {
            n_layers: 2,
            model_dim: 8,
            n_heads: 2,
            ff_units: 16,
            conv_kernel: 3,
            embed_dim: 4,
            input_dim: 6,
            subsample_factor: 2,
            pool_attention_dim: 4,
        }
    }

    #[test]
    fn paper_count_is_close_to_reported() {
        let n = Conformer::new(ConformerConfig::paper()).unwrap().count_params();
        assert_eq!(n, 50_750_720);
        let rel = (n as f64 - 51.28e6).abs() / 51.28e6;
        assert!(rel < 0.02, "{n} is {rel:.4} away");
    }

    #[test]
    fn analytic_count_matches_initialised_store() {
        for cfg in [tiny(), ConformerConfig::desk(), ConformerConfig::desk().deeper()] {
            let m = Conformer::new(cfg).unwrap();
            assert_eq!(m.init_params(1).n_scalars(), m.count_params());
        }
    }

    #[test]
    fn init_is_reproducible() {
        let m = Conformer::new(tiny()).unwrap();
        assert_eq!(m.init_params(7), m.init_params(7));
        assert_ne!(m.init_params(7), m.init_params(8));
    }

    #[test]
    fn zero_input_with_silent_branches_gives_zero() {
        let m = Conformer::new(tiny()).unwrap();
        let mut p = m.init_params(3);
        for name in ["ff1.w2", "ff2.w2", "mhsa.out", "conv.pw2"] {
            for part in ["w", "b"] {
                p.get_mut(&format!("blocks.0.{name}.{part}")).unwrap().fill(0.0);
            }
        }
        let y = conformer_block(&p, "blocks.0", &Array2::zeros((5, 8)), 2).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn block_preserves_shape_and_rejects_bad_width() {
        let m = Conformer::new(tiny()).unwrap();
        let p = m.init_params(3);
        for t in [1, 4, 9] {
            let x = random_matrix(t, 8, t as u64);
            assert_eq!(conformer_block(&p, "blocks.1", &x, 2).unwrap().dim(), (t, 8));
        }
        assert!(conformer_block(&p, "blocks.1", &Array2::zeros((4, 7)), 2).is_err());
        assert!(conformer_block(&p, "blocks.9", &Array2::zeros((4, 8)), 2).is_err());
    }

    #[test]
    fn relative_table_centre_row_is_distance_zero() {
        let pe = relative_positions(4, 6);
        assert_eq!(pe.nrows(), 7);
        for c in 0..6 {
            let expect = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe[[3, c]], expect);
        }
        // row 0 is distance +3, row 6 is distance -3
        assert!((pe[[0, 0]] - 3f64.sin()).abs() < 1e-12);
        assert!((pe[[6, 0]] + 3f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let m = Conformer::new(tiny()).unwrap();
        let p = jitter(&m.init_params(5), 0.1, 6);
        let x = random_matrix(5, 8, 11);
        let r = random_matrix(5, 8, 12);
        let build = |g: &mut Graph, p: &ParamStore, x: Var| {
            let y = conformer_block_forward(g, p, "blocks.0", x, 2);
            let rv = g.input(r.clone());
            let prod = g.mul(y, rv);
            g.sum_all(prod)
        };
        assert!(check_input_grad(&p, &x, 1e-4, &build) <= 1e-4);
        let worst = check_param_grads(&p, &x, 3, 1e-4, &build, Some("blocks.0."));
        assert!(worst <= 1e-4, "worst {worst}");
    }

    #[test]
    fn block_jvp_matches_directional_difference() {
        let m = Conformer::new(tiny()).unwrap();
        let p = jitter(&m.init_params(5), 0.1, 6);
        let x = random_matrix(5, 8, 21);
        let v = random_matrix(5, 8, 22);
        let r = random_matrix(5, 8, 23);
        let project = |y: &Array2<f64>| (y * &r).sum();
        // J v via the adjoint: <r, J v> = <J^T r, v>
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = conformer_block_forward(&mut g, &p, "blocks.0", xv, 2);
        let grads = g.backward_with(y, r.clone());
        let analytic = (grads.wrt(xv).unwrap() * &v).sum();
        let h = 1e-4;
        let plus = project(&conformer_block(&p, "blocks.0", &(&x + &(&v * h)), 2).unwrap());
        let minus = project(&conformer_block(&p, "blocks.0", &(&x - &(&v * h)), 2).unwrap());
        let numeric = (plus - minus) / (2.0 * h);
        assert!(fd::rel_err(analytic, numeric) <= 1e-4);
    }

    #[test]
    fn mfa_concat_orders_layers_then_normalises() {
        let a = Array2::from_shape_vec((3, 2), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Array2::from_shape_vec((3, 2), vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let cat = concat_layers(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.row(0).to_vec(), vec![1., 2., 7., 8.]);
        let normed = mfa_concat(&[a.clone(), b]).unwrap();
        for row in normed.rows() {
            assert!(row.sum().abs() < 1e-9);
            let var = row.mapv(|v| v * v).sum() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
        // single layer: just the normalisation
        let one = mfa_concat(&[a]).unwrap();
        assert!((one[[0, 0]] + 1.0).abs() < 1e-4 && (one[[0, 1]] - 1.0).abs() < 1e-4);
        assert!(mfa_concat(&[]).is_err());
        assert!(concat_layers(&[Array2::zeros((3, 2)), Array2::zeros((4, 2))]).is_err());
    }

    #[test]
    fn paper_width_aggregates_to_3072() {
        let outs = vec![Array2::<f64>::zeros((2, 512)); 6];
        assert_eq!(mfa_concat(&outs).unwrap().ncols(), 3072);
        assert_eq!(Conformer::new(ConformerConfig::paper()).unwrap().mfa_dim(), 3072);
    }

    #[test]
    fn every_layer_output_reaches_the_embedding() {
        let m = Conformer::new(tiny()).unwrap();
        let p = jitter(&m.init_params(9), 0.1, 10);
        let x = random_matrix(12, 6, 13);
        let embed_with = |bump: Option<usize>| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let mut outs = m.encode_layers(&mut g, &p, xv);
            if let Some(i) = bump {
                let mut delta = Array2::zeros(g.shape(outs[i]));
                delta[[0, 0]] = 0.5;
                let d = g.input(delta);
                outs[i] = g.add(outs[i], d);
            }
            let e = m.head(&mut g, &p, &outs);
            g.value(e).clone()
        };
        let base = embed_with(None);
        for i in 0..2 {
            let moved = embed_with(Some(i));
            assert!((&moved - &base).iter().any(|d| d.abs() > 1e-9), "layer {i} is dead");
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let m = Conformer::new(tiny()).unwrap();
        let p = jitter(&m.init_params(14), 0.1, 15);
        let x = random_matrix(9, 6, 16);
        let r = random_matrix(1, 4, 17);
        let build = |g: &mut Graph, p: &ParamStore, x: Var| {
            let e = m.forward(g, p, x);
            let rv = g.input(r.clone());
            let prod = g.mul(e, rv);
            g.sum_all(prod)
        };
        assert!(check_input_grad(&p, &x, 1e-4, &build) <= 1e-4);
        let worst = check_param_grads(&p, &x, 2, 1e-4, &build, None);
        assert!(worst <= 1e-4, "worst {worst}");
    }

    #[test]
    fn desk_embedding_has_declared_size_for_any_length() {
        let m = Conformer::new(ConformerConfig::desk()).unwrap();
        let p = m.init_params(1);
        for t in [3, 20, 57] {
            let x = random_matrix(t, 80, t as u64);
            let mut g = Graph::new();
            let e = m.forward_checked(&mut g, &p, &x).unwrap();
            let v = g.value(e);
            assert_eq!(v.dim(), (1, 16));
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let mut g = Graph::new();
        assert!(m.forward_checked(&mut g, &p, &Array2::zeros((2, 80))).is_err());
        assert!(m.forward_checked(&mut g, &p, &Array2::zeros((20, 40))).is_err());
    }
}
