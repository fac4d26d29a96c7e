//! Effective ranks of a singular spectrum.
//!
//! With `p_i = σ_iᵞ / Σ_j σ_jᵞ`:
//!
//! - entropy rank: `exp(-Σ p_i ln p_i)`, the dispersion of the spectrum;
//! - stable rank: `Σ σ_iᵞ / σ_1ᵞ`, the concentration in the leading direction.
//!
//! For `γ = 1` the stable rank never exceeds the entropy rank.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::spectral::decompose;
use crate::Matrix;

pub const DEFAULT_GAMMA: f64 = 1.0;

fn validate(sigma: &[f64], gamma: f64) -> Result<()> {
    ensure!(
        gamma.is_finite() && gamma > 0.0,
        "gamma must be a positive finite number, got {gamma}"
    );
    ensure!(!sigma.is_empty(), "spectrum is empty");
    ensure!(
        sigma.iter().all(|s| s.is_finite() && *s >= 0.0),
        "spectrum must be finite and non-negative"
    );
    ensure!(
        sigma.windows(2).all(|p| p[0] >= p[1]),
        "spectrum must be sorted in descending order"
    );
    if sigma[0] == 0.0 {
        return Err(Error::DegenerateSpectrum(format!(
            "all {} singular values are zero",
            sigma.len()
        )));
    }
    Ok(())
}

/// `(σ_i / σ_1)ᵞ`; dividing by the leading value first keeps large exponents finite.
fn relative_powers(sigma: &[f64], gamma: f64) -> impl Iterator<Item = f64> + '_ {
    let lead = sigma[0];
    sigma.iter().map(move |&s| (s / lead).powf(gamma))
}

/// Entropy rank of a descending non-negative spectrum.
pub fn entropy_rank(sigma: &[f64], gamma: f64) -> Result<f64> {
    validate(sigma, gamma)?;
    let weights: Vec<f64> = relative_powers(sigma, gamma).collect();
    let total: f64 = weights.iter().sum();
    let entropy: f64 = weights
        .iter()
        .map(|w| w / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

/// Stable rank of a descending non-negative spectrum.
pub fn stable_rank(sigma: &[f64], gamma: f64) -> Result<f64> {
    validate(sigma, gamma)?;
    let lead = sigma[0].powf(gamma);
    // Summing raw powers before dividing keeps integer-valued cases exact.
    let total: f64 = sigma.iter().map(|s| s.powf(gamma)).sum();
    if total.is_finite() && lead.is_finite() && lead > 0.0 {
        Ok(total / lead)
    } else {
        Ok(relative_powers(sigma, gamma).sum())
    }
}

/// Both effective ranks of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub entropy_rank: f64,
    pub stable_rank: f64,
    pub gamma: f64,
    pub k: usize,
}

impl RankReport {
    pub fn from_spectrum(sigma: &[f64], gamma: f64) -> Result<Self> {
        Ok(Self {
            entropy_rank: entropy_rank(sigma, gamma)?,
            stable_rank: stable_rank(sigma, gamma)?,
            gamma,
            k: sigma.len(),
        })
    }

    /// Stable rank ≤ entropy rank (+ `tol`); meaningful for `γ = 1`.
    pub fn satisfies_ordering(&self, tol: f64) -> bool {
        self.stable_rank <= self.entropy_rank + tol
    }
}

pub fn rank_report(w: &Matrix, gamma: f64) -> Result<RankReport> {
    let f = decompose(w)?;
    RankReport::from_spectrum(f.sigma(), gamma)
}
