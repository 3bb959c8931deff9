//! ECAPA-style TDNN: a convolutional stem, SE-Res2Net blocks with a
//! cumulative residual (each block sees the stem output plus every earlier
//! block's output), aggregation of all block outputs, and channel- and
//! context-dependent statistics pooling.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{affine, conv1d, linear};
use super::EcapaConfig;
use crate::error::{Error, Result};
use crate::pooling::{channel_context_stats_pool_var, ChannelAttentionVars};
use crate::tensor::{Graph, Init, ParamStore, Var};

const STEM_KERNEL: usize = 5;
const RES2_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Ecapa {
    pub cfg: EcapaConfig,
}

impl Ecapa {
    pub fn new(cfg: EcapaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn group_width(&self) -> usize {
        self.cfg.channels / self.cfg.res2net_scale
    }

    pub fn count_params(&self) -> usize {
        let c = &self.cfg;
        let ch = c.channels;
        let w = self.group_width();
        // conv + batch-norm affine
        let conv_bn = |k: usize, cin: usize, cout: usize| k * cin * cout + cout + 2 * cout;
        let stem = conv_bn(STEM_KERNEL, c.input_dim, ch);
        let block = 2 * conv_bn(1, ch, ch)
            + (c.res2net_scale - 1) * conv_bn(RES2_KERNEL, w, w)
            + (ch * c.se_bottleneck + c.se_bottleneck)
            + (c.se_bottleneck * ch + ch);
        let mfa = conv_bn(1, c.n_blocks * ch, c.mfa_channels);
        let m = c.mfa_channels;
        let a = c.attention_channels;
        let pool = 3 * m * a + a + a * m + m;
        let embed = 2 * m * c.embed_dim + c.embed_dim;
        stem + c.n_blocks * block + mfa + pool + embed
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.cfg;
        let ch = c.channels;
        let w = self.group_width();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let conv_bn = |init: &mut Init<'_, _>, prefix: &str, k: usize, cin: usize, cout: usize| {
            init.linear(&format!("{prefix}.conv"), k * cin, cout);
            init.affine(&format!("{prefix}.bn"), cout);
        };
        conv_bn(&mut init, "stem", STEM_KERNEL, c.input_dim, ch);
        for b in 0..c.n_blocks {
            let p = format!("blocks.{b}");
            conv_bn(&mut init, &format!("{p}.tdnn1"), 1, ch, ch);
            for j in 1..c.res2net_scale {
                conv_bn(&mut init, &format!("{p}.res2.{j}"), RES2_KERNEL, w, w);
            }
            conv_bn(&mut init, &format!("{p}.tdnn2"), 1, ch, ch);
            init.linear(&format!("{p}.se.down"), ch, c.se_bottleneck);
            init.linear(&format!("{p}.se.up"), c.se_bottleneck, ch);
        }
        conv_bn(&mut init, "mfa", 1, c.n_blocks * ch, c.mfa_channels);
        let m = c.mfa_channels;
        let a = c.attention_channels;
        init.uniform("pool.proj", 3 * m, a, 3 * m);
        init.zeros("pool.bias", 1, a);
        init.uniform("pool.out", a, m, a);
        init.zeros("pool.out_bias", 1, m);
        init.linear("embed", 2 * m, c.embed_dim);
        store
    }

    /// Forward pass to a `1 x embed_dim` node.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let stem = conv_relu_bn(g, p, "stem", x, STEM_KERNEL, 1);
        let mut acc = stem;
        let mut outs = Vec::with_capacity(self.cfg.n_blocks);
        for b in 0..self.cfg.n_blocks {
            let y = self.block(g, p, b, acc);
            outs.push(y);
            acc = g.add(acc, y);
        }
        let cat = g.concat_cols(&outs);
        let h = conv_relu_bn(g, p, "mfa", cat, 1, 1);
        let att = ChannelAttentionVars::from_store(g, p, "pool");
        let pooled = channel_context_stats_pool_var(g, h, att);
        linear(g, p, "embed", pooled)
    }

    /// SE-Res2Net block with its own identity shortcut.
    fn block(&self, g: &mut Graph, p: &ParamStore, b: usize, x: Var) -> Var {
        let prefix = format!("blocks.{b}");
        let dilation = self.cfg.dilation(b);
        let w = self.group_width();
        let h = conv_relu_bn(g, p, &format!("{prefix}.tdnn1"), x, 1, 1);
        let mut parts = Vec::with_capacity(self.cfg.res2net_scale);
        parts.push(g.slice_cols(h, 0, w));
        let mut prev: Option<Var> = None;
        for j in 1..self.cfg.res2net_scale {
            let xj = g.slice_cols(h, j * w, (j + 1) * w);
            let inp = match prev {
                Some(y) => g.add(xj, y),
                None => xj,
            };
            let y = conv_relu_bn(g, p, &format!("{prefix}.res2.{j}"), inp, RES2_KERNEL, dilation);
            parts.push(y);
            prev = Some(y);
        }
        let h = g.concat_cols(&parts);
        let h = conv_relu_bn(g, p, &format!("{prefix}.tdnn2"), h, 1, 1);
        let h = squeeze_excite(g, p, &format!("{prefix}.se"), h);
        g.add(h, x)
    }

    pub fn forward_checked(&self, g: &mut Graph, p: &ParamStore, feats: &Array2<f64>) -> Result<Var> {
        if feats.ncols() != self.cfg.input_dim {
            return Err(Error::invalid(format!(
                "expected {} feature bins, got {}",
                self.cfg.input_dim,
                feats.ncols()
            )));
        }
        if feats.nrows() == 0 {
            return Err(Error::invalid("empty feature matrix"));
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        let x = g.input(feats.clone());
        Ok(self.forward(g, p, x))
    }
}

fn conv_relu_bn(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var, k: usize, dilation: usize) -> Var {
    let h = conv1d(g, p, &format!("{prefix}.conv"), x, k, dilation);
    let h = g.relu(h);
    affine(g, p, &format!("{prefix}.bn"), h)
}

fn squeeze_excite(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Var {
    let s = g.mean_rows(x);
    let s = linear(g, p, &format!("{prefix}.down"), s);
    let s = g.relu(s);
    let s = linear(g, p, &format!("{prefix}.up"), s);
    let s = g.sigmoid(s);
    g.mul_row(x, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::gradcheck::{check_input_grad, check_param_grads, jitter, random_matrix};

    fn tiny() -> EcapaConfig {
        EcapaConfig {
            channels: 8,
            n_blocks: 3,
            embed_dim: 4,
            input_dim: 5,
            res2net_scale: 4,
            se_bottleneck: 4,
            mfa_channels: 6,
            attention_channels: 4,
        }
    }

    fn embed(m: &Ecapa, p: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let e = m.forward_checked(&mut g, p, x).unwrap();
        g.value(e).clone()
    }

    #[test]
    fn paper_count_is_close_to_reported() {
        let n = Ecapa::new(EcapaConfig::paper()).unwrap().count_params();
        assert_eq!(n, 14_850_688);
        assert!((n as f64 - 14.85e6).abs() / 14.85e6 < 0.02);
    }

    #[test]
    fn analytic_count_matches_initialised_store() {
        for cfg in [tiny(), EcapaConfig::desk()] {
            let m = Ecapa::new(cfg).unwrap();
            assert_eq!(m.init_params(2).n_scalars(), m.count_params());
        }
    }

    #[test]
    fn desk_embedding_is_finite_with_declared_size() {
        let m = Ecapa::new(EcapaConfig::desk()).unwrap();
        let p = m.init_params(1);
        for t in [1, 10, 33] {
            let e = embed(&m, &p, &random_matrix(t, 20, t as u64));
            assert_eq!(e.dim(), (1, 8));
            assert!(e.iter().all(|v| v.is_finite()));
        }
        let mut g = Graph::new();
        assert!(m.forward_checked(&mut g, &p, &Array2::zeros((10, 19))).is_err());
        assert!(m.forward_checked(&mut g, &p, &Array2::zeros((0, 20))).is_err());
    }

    #[test]
    fn deterministic_for_fixed_params() {
        let m = Ecapa::new(tiny()).unwrap();
        let p = m.init_params(4);
        let x = random_matrix(12, 5, 3);
        assert_eq!(embed(&m, &p, &x), embed(&m, &p, &x));
    }

    #[test]
    fn last_block_feeds_the_aggregation() {
        let m = Ecapa::new(tiny()).unwrap();
        let p = jitter(&m.init_params(4), 0.1, 5);
        let x = random_matrix(12, 5, 6);
        let base = embed(&m, &p, &x);
        let mut cut = p.clone();
        for part in ["w", "b"] {
            cut.get_mut(&format!("blocks.2.tdnn2.conv.{part}")).unwrap().fill(0.0);
        }
        let moved = embed(&m, &cut, &x);
        assert!((&moved - &base).iter().any(|d| d.abs() > 1e-9));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let m = Ecapa::new(tiny()).unwrap();
        let p = jitter(&m.init_params(7), 0.1, 8);
        let x = random_matrix(11, 5, 9);
        let r = random_matrix(1, 4, 10);
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
}
