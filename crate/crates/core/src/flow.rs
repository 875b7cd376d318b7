//! Rectified-flow interpolant, logit-normal timestep sampling, and the
//! flow-matching training loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One training point on the straight-line path between noise and data.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub v_t: Tensor,
}

/// Logit-normal distribution over timesteps: t = sigmoid(z), z ~ N(loc, scale^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepDist {
    pub loc: f64,
    pub scale: f64,
}

impl Default for TimestepDist {
    fn default() -> Self {
        TimestepDist { loc: 0.0, scale: 1.0 }
    }
}

impl TimestepDist {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "timestep scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sample_timestep<R: Rng>(dist: &TimestepDist, rng: &mut R) -> f64 {
    let z = Normal::new(dist.loc, dist.scale).expect("validated scale").sample(rng);
    sigmoid(z)
}

/// Clamp t away from the endpoints for SDE-coupled code paths (the drift has
/// a 1/(2t) term). Pure FM training uses unclamped draws.
pub fn clamp_timestep(t: f64) -> f64 {
    t.clamp(1e-3, 1.0 - 1e-3)
}

/// Build the interpolant x_t = t*x0 + (1-t)*x1 and its velocity x0 - x1.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<FlowSample> {
    x0.same_shape(x1)?;
    let x_t = x0.zip(x1, |a, b| t * a + (1.0 - t) * b)?;
    let v_t = x0.sub(x1)?;
    Ok(FlowSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t,
        x_t,
        v_t,
    })
}

/// Mean squared error between predicted and target velocity.
pub fn fm_loss(v_pred: &Tensor, v_target: &Tensor) -> Result<f64> {
    v_pred.same_shape(v_target)?;
    let n = v_pred.len() as f64;
    Ok(v_pred.sub(v_target)?.sum_sq() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    #[test]
    fn interpolant_endpoints() {
        let x0 = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let x1 = Tensor::from_vec(vec![0.5, 0.0, -1.0]);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap().x_t, x0);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap().x_t, x1);
    }

    #[test]
    fn interpolant_hand_value() {
        let s = interpolate(
            &Tensor::from_vec(vec![2.0]),
            &Tensor::from_vec(vec![0.0]),
            0.25,
        )
        .unwrap();
        assert_eq!(s.x_t.data, vec![0.5]);
        assert_eq!(s.v_t.data, vec![2.0]);
    }

    #[test]
    fn interpolant_shape_mismatch() {
        let x0 = Tensor::from_vec(vec![1.0]);
        let x1 = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(interpolate(&x0, &x1, 0.5).is_err());
    }

    #[test]
    fn interpolant_affine_in_t() {
        // second finite difference over equally spaced t is zero
        let x0 = Tensor::from_vec(vec![1.3, -0.7]);
        let x1 = Tensor::from_vec(vec![0.2, 2.5]);
        for &(a, b, c) in &[(0.1, 0.2, 0.3), (0.25, 0.5, 0.75)] {
            let fa = interpolate(&x0, &x1, a).unwrap().x_t;
            let fb = interpolate(&x0, &x1, b).unwrap().x_t;
            let fc = interpolate(&x0, &x1, c).unwrap().x_t;
            for i in 0..fa.len() {
                let second = fa.data[i] - 2.0 * fb.data[i] + fc.data[i];
                assert!(second.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fm_loss_values() {
        let a = Tensor::from_vec(vec![1.0, 1.0]);
        let z = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(fm_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(fm_loss(&a, &z).unwrap(), 1.0);
        // quadratic homogeneity
        let c = 3.0;
        let scaled = a.scale(c);
        assert!((fm_loss(&scaled, &z).unwrap() - c * c * fm_loss(&a, &z).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_gradient_matches_finite_differences() {
        let v_target = Tensor::from_vec(vec![0.3, -1.1, 0.0, 2.0]);
        let v_pred = Tensor::from_vec(vec![1.0, 0.5, -0.2, 0.7]);
        let n = v_pred.len() as f64;
        let h = 1e-6;
        for i in 0..v_pred.len() {
            let analytic = 2.0 * (v_pred.data[i] - v_target.data[i]) / n;
            let mut plus = v_pred.clone();
            plus.data[i] += h;
            let mut minus = v_pred.clone();
            minus.data[i] -= h;
            let fd =
                (fm_loss(&plus, &v_target).unwrap() - fm_loss(&minus, &v_target).unwrap()) / (2.0 * h);
            assert!(
                ((analytic - fd) / analytic.abs().max(1e-12)).abs() < 1e-6,
                "i={i} analytic={analytic} fd={fd}"
            );
        }
    }

    #[test]
    fn timestep_draws_in_open_interval() {
        let dist = TimestepDist::default();
        let mut rng = seed_rng(1);
        for _ in 0..1000 {
            let t = sample_timestep(&dist, &mut rng);
            assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn timestep_tiny_scale_concentrates_at_half() {
        let dist = TimestepDist { loc: 0.0, scale: 1e-12 };
        let mut rng = seed_rng(2);
        for _ in 0..100 {
            assert!((sample_timestep(&dist, &mut rng) - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn timestep_median_monte_carlo() {
        // median of sigmoid(N(0,1)) is 0.5 by symmetry
        let dist = TimestepDist::default();
        let mut rng = seed_rng(3);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_timestep(&dist, &mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = draws[draws.len() / 2];
        assert!((median - 0.5).abs() < 0.01, "median {median}");
    }
}
