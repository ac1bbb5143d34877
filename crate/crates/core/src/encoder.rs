//! Piecewise convolutional sentence encoder.

use std::ops::Range;

use relext_autograd::{Graph, Var};

use crate::error::{Error, Result};
use crate::featurizer::FeaturizedInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Window width `u`, odd.
    pub kernel_width: usize,
    /// Number of kernels `p`.
    pub kernels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { kernel_width: 3, kernels: 230 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_width < 3 || self.kernel_width % 2 == 0 || self.kernels == 0 {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }

    /// Length of the sentence representation, `3p`.
    pub fn output_dim(&self) -> usize {
        3 * self.kernels
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    /// `(u·d) × p`; row `j·d + c` holds window offset `j`, feature `c`.
    pub weight: Var,
    pub bias: Var,
}

/// `C[t, k] = ⟨X[t − half .. t + half], W_k⟩ + b_k` with zero rows padding
/// both ends.
pub fn convolve(g: &mut Graph, x: Var, conv: &ConvVars, kernel_width: usize) -> Result<Var> {
    let windows = g.unfold(x, kernel_width)?;
    let c = g.matmul(windows, conv.weight)?;
    Ok(g.add_row_bias(c, conv.bias)?)
}

/// The three pooling pieces over real positions `0..len`: `[0, h]`,
/// `(h, t]`, `(t, len)`, with `h ≤ t` after swapping. An empty middle
/// piece pools the boundary position `t`; an empty last piece stays empty.
pub fn segments(head: usize, tail: usize, len: usize) -> [Range<usize>; 3] {
    let (h, t) = if head <= tail { (head, tail) } else { (tail, head) };
    let len = len.max(t + 1);
    let middle = if t > h { h + 1..t + 1 } else { t..t + 1 };
    [0..h + 1, middle, t + 1..len]
}

/// Per-piece, per-kernel max of `C` followed by `tanh`. Pad rows never
/// enter a piece. Output is `[piece0 kernels.., piece1 .., piece2 ..]`.
pub fn piecewise_max_pool(g: &mut Graph, c: Var, f: &FeaturizedInstance) -> Result<Var> {
    let pieces = segments(f.head, f.tail, f.len);
    let pooled = g.segment_max_pool(c, &pieces)?;
    Ok(g.tanh(pooled)?)
}

/// Sentence representation `h` (3p) from input matrix `X`.
pub fn encode(g: &mut Graph, x: Var, conv: &ConvVars, kernel_width: usize, f: &FeaturizedInstance) -> Result<Var> {
    let c = convolve(g, x, conv, kernel_width)?;
    piecewise_max_pool(g, c, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use relext_autograd::Tensor;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn feat(head: usize, tail: usize, len: usize, l: usize) -> FeaturizedInstance {
        FeaturizedInstance {
            word_ids: vec![0; l],
            head_pos_ids: vec![0; l],
            tail_pos_ids: vec![0; l],
            head,
            tail,
            len,
        }
    }

    fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], u: usize) -> Vec<Vec<f64>> {
        let (l, d) = (x.rows(), x.cols());
        let half = (u - 1) / 2;
        (0..l)
            .map(|t| {
                (0..w.cols())
                    .map(|k| {
                        let mut acc = b[k];
                        for j in 0..u {
                            let src = t as i64 + j as i64 - half as i64;
                            if src < 0 || src >= l as i64 {
                                continue;
                            }
                            for c in 0..d {
                                acc += x.at(src as usize, c) * w.at(j * d + c, k);
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn convolution_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (l, d, u, p) in [(7, 4, 3, 5), (5, 2, 5, 3), (9, 3, 3, 1)] {
            let x = random(&mut rng, l, d);
            let w = random(&mut rng, u * d, p);
            let b: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let conv = ConvVars { weight: g.constant(w.clone()), bias: g.constant(Tensor::vector(b.clone())) };
            let c = convolve(&mut g, xv, &conv, u).unwrap();
            let expect = conv_oracle(&x, &w, &b, u);
            for t in 0..l {
                for k in 0..p {
                    assert!((g.value(c).at(t, k) - expect[t][k]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_map() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = ConvVars { weight: g.constant(random(&mut rng, 9, 2)), bias: g.constant(Tensor::zeros(&[2])) };
        let c = convolve(&mut g, x, &conv, 3).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_one_selector_copies_a_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 5, 3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sel = Tensor::matrix(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        let conv = ConvVars { weight: g.constant(sel), bias: g.constant(Tensor::zeros(&[1])) };
        let c = convolve(&mut g, xv, &conv, 1).unwrap();
        let col: Vec<f64> = (0..5).map(|t| x.at(t, 1)).collect();
        assert_eq!(g.value(c).data(), &col[..]);
    }

    #[test]
    fn segment_boundaries() {
        assert_eq!(segments(0, 5, 6), [0..1, 1..6, 6..6]);
        assert_eq!(segments(4, 1, 8), [0..2, 2..5, 5..8]);
        assert_eq!(segments(2, 3, 5), [0..3, 3..4, 4..5]);
        assert_eq!(segments(0, 0, 1), [0..1, 0..1, 1..1]);
    }

    fn pool(c: &Tensor, f: &FeaturizedInstance) -> Vec<f64> {
        let mut g = Graph::new();
        let cv = g.constant(c.clone());
        let h = piecewise_max_pool(&mut g, cv, f).unwrap();
        g.value(h).data().to_vec()
    }

    #[test]
    fn constant_map_pools_to_tanh_everywhere() {
        let c = Tensor::filled(&[6, 4], 0.7);
        let h = pool(&c, &feat(1, 3, 6, 6));
        assert!(h.iter().all(|&v| (v - 0.7f64.tanh()).abs() < 1e-15));
    }

    #[test]
    fn entities_at_ends_first_piece_is_position_zero() {
        let c = Tensor::matrix(4, 1, vec![-0.5, 2.0, 3.0, 1.0]).unwrap();
        let h = pool(&c, &feat(0, 3, 4, 4));
        assert_eq!(h, vec![(-0.5f64).tanh(), 3f64.tanh(), 0.0]);
    }

    #[test]
    fn pads_never_win() {
        let c = Tensor::matrix(5, 1, vec![0.1, 0.2, 0.3, 9.0, 9.0]).unwrap();
        let h = pool(&c, &feat(0, 1, 3, 5));
        assert_eq!(h, vec![0.1f64.tanh(), 0.2f64.tanh(), 0.3f64.tanh()]);
    }

    #[test]
    fn pooling_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let l = rng.gen_range(3..12);
            let len = rng.gen_range(2..=l);
            let a = rng.gen_range(0..len);
            let b = rng.gen_range(0..len);
            let c = random(&mut rng, l, 3);
            let h = pool(&c, &feat(a, b, len, l));
            let (lo, hi) = (a.min(b), a.max(b));
            for k in 0..3 {
                let max_over = |rows: Vec<usize>| {
                    if rows.is_empty() {
                        0.0
                    } else {
                        rows.iter().map(|&r| c.at(r, k)).fold(f64::NEG_INFINITY, f64::max).tanh()
                    }
                };
                let first = max_over((0..=lo).collect());
                let middle = if hi > lo { max_over((lo + 1..=hi).collect()) } else { max_over(vec![hi]) };
                let last = max_over((hi + 1..len).collect());
                assert_eq!(h[k], first);
                assert_eq!(h[3 + k], middle);
                assert_eq!(h[6 + k], last);
            }
        }
    }

    #[test]
    fn gradient_reaches_only_piece_winners() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random(&mut rng, 8, 4);
        let f = feat(2, 5, 7, 8);
        let mut g = Graph::new();
        let cv = g.leaf(c.clone());
        let h = piecewise_max_pool(&mut g, cv, &f).unwrap();
        let s = g.sum(h).unwrap();
        let grads = g.backward(s).unwrap();
        let gc = grads.get(cv).unwrap();
        let winners: Vec<usize> = g.pool_routing().into_iter().flatten().collect();
        let nonzero = gc.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, winners.len());
        for (flat, w) in g.pool_routing().iter().enumerate() {
            if let Some(row) = w {
                assert!(gc.at(*row, flat % 4) != 0.0);
            }
        }
        assert!(gc.row(7).iter().all(|v| *v == 0.0));
    }
}
