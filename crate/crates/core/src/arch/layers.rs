//! Building blocks shared by both extractors.

use crate::tensor::{Graph, ParamStore, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x W + b` with parameters `prefix.w`, `prefix.b`.
pub(crate) fn linear(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = g.param(p, &format!("{prefix}.w"));
    let b = g.param(p, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Per-channel scale and shift (`prefix.gamma`, `prefix.beta`). Batch norm
/// runs with frozen unit statistics, so at inference it is exactly this.
pub(crate) fn affine(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Var {
    let gamma = g.param(p, &format!("{prefix}.gamma"));
    let beta = g.param(p, &format!("{prefix}.beta"));
    let y = g.mul_row(x, gamma);
    g.add_row(y, beta)
}

pub(crate) fn layer_norm(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    affine(g, p, prefix, n)
}

/// Gather indices turning a `T x C` sequence into `T x (K C)` windows for a
/// "same"-padded 1-D convolution with kernel `k` and dilation `dilation`.
pub(crate) fn conv1d_index(t_len: usize, c: usize, k: usize, dilation: usize) -> Vec<Option<usize>> {
    let half = (k - 1) / 2 * dilation;
    let mut idx = Vec::with_capacity(t_len * k * c);
    for t in 0..t_len {
        for j in 0..k {
            let src = (t + j * dilation) as isize - half as isize;
            for ch in 0..c {
                idx.push((src >= 0 && (src as usize) < t_len).then(|| src as usize * c + ch));
            }
        }
    }
    idx
}

/// 1-D convolution over time; weight `prefix.w` is `(k C_in) x C_out`.
pub(crate) fn conv1d(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var, k: usize, dilation: usize) -> Var {
    if k == 1 {
        return linear(g, p, prefix, x);
    }
    let (t_len, c) = g.shape(x);
    let cols = g.gather(x, conv1d_index(t_len, c, k, dilation), (t_len, k * c));
    linear(g, p, prefix, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn conv1d_windows_are_zero_padded() {
        // T=3, C=1, k=3, dilation 1: rows [0,x0,x1], [x0,x1,x2], [x1,x2,0]
        let idx = conv1d_index(3, 1, 3, 1);
        assert_eq!(
            idx,
            vec![
                None,
                Some(0),
                Some(1),
                Some(0),
                Some(1),
                Some(2),
                Some(1),
                Some(2),
                None
            ]
        );
        // dilation 2 reaches two frames away
        let idx = conv1d_index(3, 1, 3, 2);
        assert_eq!(idx[3..6], [None, Some(1), None]);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut store = ParamStore::new();
        let w = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        store.insert("c.w", w);
        store.insert("c.b", Array2::from_elem((1, 1), 0.5));
        let mut g = Graph::new();
        let x = g.input(Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = conv1d(&mut g, &store, "c", x, 3, 1);
        let expect = [
            0.5 + 2.0 + 6.0,
            0.5 + 1.0 + 4.0 + 9.0,
            0.5 + 2.0 + 6.0 + 12.0,
            0.5 + 3.0 + 8.0,
        ];
        for (t, e) in expect.iter().enumerate() {
            assert_eq!(g.value(y)[[t, 0]], *e);
        }
    }
}
