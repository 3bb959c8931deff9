//! Additive angular margin softmax.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
    pub n_classes: usize,
    pub embed_dim: usize,
}

impl AamConfig {
    /// Margin 0.3, scale 30.
    pub fn new(n_classes: usize, embed_dim: usize) -> Self {
        Self {
            margin: 0.3,
            scale: 30.0,
            n_classes,
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::invalid(format!("margin {} outside [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid(format!("scale {} must be positive", self.scale)));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("AAM softmax needs at least 2 classes"));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(())
    }
}

/// Margin and scale as they appear in training configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AamParams {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamParams {
    fn default() -> Self {
        Self {
            margin: 0.3,
            scale: 30.0,
        }
    }
}

/// Scaled margin logits `s * cos(theta_j [+ m])` for row-wise embeddings
/// `emb` (B x E) against class weights `weights` (C x E).
pub fn aam_logits(g: &mut Graph, emb: Var, weights: Var, labels: &[usize], margin: f64, scale: f64) -> Var {
    let e = g.l2_normalize_rows(emb, NORM_EPS);
    let w = g.l2_normalize_rows(weights, NORM_EPS);
    let wt = g.transpose(w);
    let cos = g.matmul(e, wt);
    let cos = g.arc_margin(cos, labels, margin);
    g.scale(cos, scale)
}

/// Mean cross-entropy loss node and the logits it was computed from.
pub fn aam_loss_var(g: &mut Graph, emb: Var, weights: Var, labels: &[usize], margin: f64, scale: f64) -> (Var, Var) {
    let logits = aam_logits(g, emb, weights, labels, margin, scale);
    (g.cross_entropy(logits, labels), logits)
}

fn check_inputs(emb: &Array2<f64>, labels: &[usize], weights: &Array2<f64>, cfg: &AamConfig) -> Result<()> {
    cfg.validate()?;
    if weights.dim() != (cfg.n_classes, cfg.embed_dim) {
        return Err(Error::invalid(format!(
            "class weights are {:?}, expected ({}, {})",
            weights.dim(),
            cfg.n_classes,
            cfg.embed_dim
        )));
    }
    if emb.ncols() != cfg.embed_dim {
        return Err(Error::invalid(format!(
            "embeddings have width {}, expected {}",
            emb.ncols(),
            cfg.embed_dim
        )));
    }
    if emb.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "{} embeddings but {} labels",
            emb.nrows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cfg.n_classes) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            cfg.n_classes
        )));
    }
    Ok(())
}

/// Loss and logits for a batch of embeddings.
pub fn aam_softmax_loss(
    emb: &Array2<f64>,
    labels: &[usize],
    weights: &Array2<f64>,
    cfg: &AamConfig,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(emb, labels, weights, cfg)?;
    let mut g = Graph::new();
    let e = g.input(emb.clone());
    let w = g.input(weights.clone());
    let (loss, logits) = aam_loss_var(&mut g, e, w, labels, cfg.margin, cfg.scale);
    Ok((g.value(loss)[[0, 0]], g.value(logits).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::gradcheck::random_matrix;
    use crate::tensor::fd::gradient;
    use proptest::prelude::*;

    /// Direct evaluation: scaled cosine softmax with the margin added to the
    /// true-class angle.
    fn reference_loss(emb: &Array2<f64>, labels: &[usize], w: &Array2<f64>, m: f64, s: f64) -> f64 {
        let norm = |v: ndarray::ArrayView1<f64>| v.dot(&v).sqrt();
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let e = emb.row(b);
            let logits: Vec<f64> = (0..w.nrows())
                .map(|j| {
                    let c = e.dot(&w.row(j)) / (norm(e) * norm(w.row(j)));
                    if j == y {
                        s * (c.clamp(-1.0, 1.0).acos() + m).cos()
                    } else {
                        s * c
                    }
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - logits[y];
        }
        total / labels.len() as f64
    }

    #[test]
    fn aligned_two_class_case() {
        let emb = ndarray::array![[2.0, 0.0]];
        let w = ndarray::array![[1.0, 0.0], [0.6, 0.8]];
        let cfg = AamConfig::new(2, 2);
        let (loss, logits) = aam_softmax_loss(&emb, &[0], &w, &cfg).unwrap();
        let expect = (1.0 + (30.0 * 0.6 - 30.0 * 0.3f64.cos()).exp()).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        assert!((logits[[0, 0]] - 30.0 * 0.3f64.cos()).abs() < 1e-9);
        assert!((logits[[0, 1]] - 18.0).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_evaluation() {
        let emb = random_matrix(6, 8, 1);
        let w = random_matrix(5, 8, 2);
        let labels = [0, 4, 2, 2, 1, 3];
        let cfg = AamConfig::new(5, 8);
        let (loss, _) = aam_softmax_loss(&emb, &labels, &w, &cfg).unwrap();
        assert!((loss - reference_loss(&emb, &labels, &w, 0.3, 30.0)).abs() < 1e-9);
    }

    #[test]
    fn zero_margin_is_scaled_cosine_softmax() {
        let emb = random_matrix(4, 8, 3);
        let w = random_matrix(5, 8, 4);
        let labels = [1, 0, 4, 3];
        let cfg = AamConfig {
            margin: 0.0,
            ..AamConfig::new(5, 8)
        };
        let (loss, _) = aam_softmax_loss(&emb, &labels, &w, &cfg).unwrap();
        assert!((loss - reference_loss(&emb, &labels, &w, 0.0, 30.0)).abs() < 1e-6);
    }

    #[test]
    fn invalid_inputs() {
        let emb = random_matrix(2, 4, 5);
        let w = random_matrix(3, 4, 6);
        let cfg = AamConfig::new(3, 4);
        assert!(matches!(
            aam_softmax_loss(&emb, &[0, 3], &w, &cfg),
            Err(Error::InvalidArgument(_))
        ));
        assert!(aam_softmax_loss(&emb, &[0], &w, &cfg).is_err());
        assert!(aam_softmax_loss(&emb, &[0, 1], &random_matrix(3, 5, 7), &cfg).is_err());
        for bad in [
            AamConfig {
                margin: 1.6,
                ..cfg.clone()
            },
            AamConfig {
                margin: -0.1,
                ..cfg.clone()
            },
            AamConfig {
                scale: 0.0,
                ..cfg.clone()
            },
            AamConfig {
                n_classes: 1,
                ..cfg.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn logits_stay_monotone_past_pi() {
        // true-class angle near pi: cos(theta + m) would turn back up
        let w = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let cfg = AamConfig {
            margin: 0.5,
            ..AamConfig::new(2, 2)
        };
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let theta = std::f64::consts::PI * k as f64 / 40.0;
            let emb = ndarray::array![[theta.cos(), theta.sin()]];
            let (_, logits) = aam_softmax_loss(&emb, &[0], &w, &cfg).unwrap();
            assert!(logits[[0, 0]] <= prev + 1e-12, "not monotone at theta = {theta}");
            assert!(logits[[0, 0]].is_finite());
            prev = logits[[0, 0]];
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let emb = random_matrix(4, 8, 8);
        let w = random_matrix(5, 8, 9);
        let labels = [3, 0, 1, 4];
        let cfg = AamConfig::new(5, 8);
        let mut g = Graph::new();
        let e = g.input(emb.clone());
        let wv = g.input(w.clone());
        let (loss, _) = aam_loss_var(&mut g, e, wv, &labels, cfg.margin, cfg.scale);
        let grads = g.backward(loss);
        let h = 1e-6;
        let num_e = gradient(&emb, h, |x| aam_softmax_loss(x, &labels, &w, &cfg).unwrap().0);
        let num_w = gradient(&w, h, |x| aam_softmax_loss(&emb, &labels, x, &cfg).unwrap().0);
        for (analytic, numeric) in [(grads.wrt(e).unwrap(), num_e), (grads.wrt(wv).unwrap(), num_w)] {
            let floor = analytic.fold(0.0f64, |m, v| m.max(v.abs())) * 1e-4;
            for (a, n) in analytic.iter().zip(&numeric) {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-8);
                assert!(err <= 1e-4, "analytic {a} numeric {n}");
            }
        }
    }

    proptest! {
        #[test]
        fn invariant_to_embedding_scale(seed in 0u64..1000, c in 0.01f64..100.0) {
            let emb = random_matrix(3, 6, seed);
            let w = random_matrix(4, 6, seed + 1);
            let labels = [0, 3, 1];
            let cfg = AamConfig::new(4, 6);
            let (a, _) = aam_softmax_loss(&emb, &labels, &w, &cfg).unwrap();
            let (b, _) = aam_softmax_loss(&(&emb * c), &labels, &w, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn zero_margin_equivalence(seed in 0u64..1000) {
            let emb = random_matrix(3, 5, seed);
            let w = random_matrix(4, 5, seed + 7);
            let labels = [2, 1, 0];
            let cfg = AamConfig { margin: 0.0, ..AamConfig::new(4, 5) };
            let (a, _) = aam_softmax_loss(&emb, &labels, &w, &cfg).unwrap();
            prop_assert!((a - reference_loss(&emb, &labels, &w, 0.0, 30.0)).abs() < 1e-6);
        }
    }
}
