//! Closed-form Bayesian cubature for fitted models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpModel, PathKind};
use crate::kernels::KernelFamily;

/// Posterior of the task integrals, caller task order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubatureResult {
    pub mu_hat: Vec<f64>,
    /// Row-major `L × L`.
    pub sigma: Vec<f64>,
    /// `(χᵀμ̂, χᵀΣχ)` when weights were supplied.
    pub projection: Option<(f64, f64)>,
}

impl CubatureResult {
    pub fn num_tasks(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn sigma_diag(&self) -> Vec<f64> {
        let l = self.num_tasks();
        (0..l).map(|i| self.sigma[i * l + i]).collect()
    }
}

fn require_normalized(model: &GpModel) -> Result<()> {
    if model.family() == KernelFamily::SeDense {
        return Err(Error::NotIntegralNormalized);
    }
    Ok(())
}

fn clip_variance(v: f64, what: &str) -> f64 {
    if v < 0.0 {
        if v < -1e-12 {
            log::warn!("clipping negative {what} {v:e} to zero");
        }
        0.0
    } else {
        v
    }
}

/// `μ̂ = 1ᵀy/n` and `σ² = γ' − γ'² n / λ̃₀` with `γ' = γ R₁₁`.
pub fn single_task_cubature(model: &GpModel) -> Result<(f64, f64)> {
    require_normalized(model)?;
    if model.num_tasks() != 1 {
        return Err(Error::InvalidParameter("single-task cubature needs exactly one task".into()));
    }
    let y = model.observations(0)?;
    let n = y.len() as f64;
    let mu = y.iter().sum::<f64>() / n;
    let s = model.solved()?;
    let g = model.hyper().gamma * model.hyper().task_gram()?.get(0, 0);
    let ones_kinv_ones = match (model.path(), s.solver.lambda0()) {
        (PathKind::Fast, Some(l0)) => n / l0,
        _ => s.solver.projections()?.0[0],
    };
    Ok((mu, clip_variance(g - g * g * ones_kinv_ones, "integral variance")))
}

/// `μ̂ = τ + γ R Eᵀc` and `Σ = γR − γ² R Π R` with `Π = EᵀK̃⁻¹E`.
pub fn multitask_cubature(model: &GpModel, chi: Option<&[f64]>) -> Result<CubatureResult> {
    require_normalized(model)?;
    let l = model.num_tasks();
    if let Some(c) = chi {
        if c.len() != l {
            return Err(Error::LengthMismatch { expected: l, got: c.len() });
        }
    }
    let s = model.solved()?;
    let gamma = model.hyper().gamma;
    let r_user = model.hyper().task_gram()?;
    let order = model.order();
    let r = DMatrix::from_fn(l, l, |i, j| r_user.get(order[i], order[j]));
    let (pi, _) = s.solver.projections()?;
    let pi = DMatrix::from_row_slice(l, l, &pi);

    let mut sums = vec![0.0; l];
    let mut off = 0;
    for (k, &u) in order.iter().enumerate() {
        let n = model.observations(u)?.len();
        sums[k] = s.coef[off..off + n].iter().sum();
        off += n;
    }
    let mu_int = DVector::from_column_slice(&s.tau) + gamma * &r * DVector::from_column_slice(&sums);
    let sig_int = gamma * &r - gamma * gamma * &r * pi * &r;

    let mut mu_hat = vec![0.0; l];
    let mut sigma = vec![0.0; l * l];
    for i in 0..l {
        mu_hat[order[i]] = mu_int[i];
        for j in 0..l {
            sigma[order[i] * l + order[j]] = 0.5 * (sig_int[(i, j)] + sig_int[(j, i)]);
        }
    }
    for i in 0..l {
        sigma[i * l + i] = clip_variance(sigma[i * l + i], "integral variance");
    }
    let projection = chi.map(|c| {
        let m: f64 = c.iter().zip(&mu_hat).map(|(a, b)| a * b).sum();
        let mut v = 0.0;
        for i in 0..l {
            for j in 0..l {
                v += c[i] * sigma[i * l + j] * c[j];
            }
        }
        (m, v)
    });
    Ok(CubatureResult { mu_hat, sigma, projection })
}

/// `ωᵀΣω + (ωᵀμ̂ − χᵀμ̂)²`.
pub fn weights_mse(omega: &[f64], mu: &[f64], sigma: &[f64], chi: &[f64]) -> f64 {
    let l = mu.len();
    let mut q = 0.0;
    for i in 0..l {
        for j in 0..l {
            q += omega[i] * sigma[i * l + j] * omega[j];
        }
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bias = dot(omega, mu) - dot(chi, mu);
    q + bias * bias
}

/// MSE-optimal task weights `ω = (χᵀμ̂)(Σ + μ̂μ̂ᵀ)⁻¹μ̂` and the attained
/// minimum `(χᵀμ̂)²(1 − μ̂ᵀ(Σ + μ̂μ̂ᵀ)⁻¹μ̂)`.
pub fn optimal_weights(mu: &[f64], sigma: &[f64], chi: &[f64]) -> Result<(Vec<f64>, f64)> {
    let l = mu.len();
    if sigma.len() != l * l || chi.len() != l {
        return Err(Error::LengthMismatch { expected: l, got: chi.len() });
    }
    let m = DVector::from_column_slice(mu);
    let a = DMatrix::from_row_slice(l, l, sigma) + &m * m.transpose();
    let dir = a.lu().solve(&m).ok_or(Error::SingularSystem(l))?;
    if dir.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(l));
    }
    let cm: f64 = chi.iter().zip(mu).map(|(a, b)| a * b).sum();
    let omega: Vec<f64> = dir.iter().map(|v| cm * v).collect();
    let mse = cm * cm * (1.0 - m.dot(&dir));
    Ok((omega, mse))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimal_weights_examples() {
        let (w, mse) = optimal_weights(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && w[1].abs() < 1e-15);
        assert!((mse - 0.5).abs() < 1e-15);
        assert!((weights_mse(&w, &[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0]) - mse).abs() < 1e-15);
        let (w, mse) = optimal_weights(&[1.0, 2.0], &[1.0, 0.2, 0.2, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(w, vec![0.0, 0.0]);
        assert_eq!(mse, 0.0);
    }
}
