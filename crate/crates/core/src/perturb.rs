//! Norm-constrained perturbation directions shared by the instance- and
//! bag-level regularizers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use relext_autograd::Tensor;

use crate::error::Result;

/// Gradients with a smaller L2 norm count as flat.
pub const FLAT_GRADIENT: f64 = 1e-12;

/// A perturbation and whether its estimate hit a flat gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub flat: bool,
}

/// Zeroes every element at flat index `>= active`.
pub fn mask_tail(t: &mut Tensor, active: usize) {
    for v in t.data_mut().iter_mut().skip(active) {
        *v = 0.0;
    }
}

/// `radius · g / ‖g‖₂`, or `None` when `‖g‖₂ < FLAT_GRADIENT`.
pub fn scale_to_radius(g: &Tensor, radius: f64) -> Option<Tensor> {
    let norm = g.l2_norm();
    (norm >= FLAT_GRADIENT).then(|| g.scaled(radius / norm))
}

/// Gaussian direction of unit norm supported on the first `active` elements.
pub fn random_direction(shape: &[usize], active: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let active = active.min(t.len()).max(1);
    for v in t.data_mut().iter_mut().take(active) {
        *v = rng.sample(StandardNormal);
    }
    let norm = t.l2_norm();
    t.scaled(1.0 / norm)
}

/// Power iteration for the dominant curvature direction of a divergence
/// around zero: `iterations` times, evaluate the gradient at `xi · d` and
/// renormalize. Elements past `active` are masked out of every gradient.
/// Returns the unit direction and whether a flat gradient cut it short, in
/// which case the last direction is kept.
pub fn power_iteration<F>(start: Tensor, xi: f64, iterations: usize, active: usize, mut grad_at: F) -> Result<(Tensor, bool)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut d = start;
    for _ in 0..iterations {
        let mut g = grad_at(&d.scaled(xi))?;
        mask_tail(&mut g, active);
        match scale_to_radius(&g, 1.0) {
            Some(next) => d = next,
            None => return Ok((d, true)),
        }
    }
    Ok((d, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fgm_arithmetic() {
        let d = scale_to_radius(&Tensor::vector(vec![3.0, 4.0]), 1.0).unwrap();
        assert!((d.data()[0] - 0.6).abs() < 1e-15 && (d.data()[1] - 0.8).abs() < 1e-15);
        assert!(scale_to_radius(&Tensor::vector(vec![1e-13, 0.0]), 1.0).is_none());
    }

    #[test]
    fn random_direction_is_unit_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = random_direction(&[4, 3], 6, &mut rng);
        assert!((d.l2_norm() - 1.0).abs() < 1e-12);
        assert!(d.data()[6..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flat_gradient_keeps_last_direction() {
        let start = Tensor::vector(vec![0.0, 1.0]);
        let (d, flat) = power_iteration(start.clone(), 1e-6, 3, 2, |_| Ok(Tensor::zeros(&[2]))).unwrap();
        assert!(flat);
        assert_eq!(d, start);
    }
}
