//! Discrepancy statistics, dynamic weights, the margin loss, and the
//! likelihood-map transform used at inference.

use serde::{Deserialize, Serialize};

use crate::error::{HdmError, Result};
use crate::grid::Grid;

/// Lower bound applied to distances and means before dividing or raising to a
/// negative power.
pub const MIN_DISTANCE: f64 = 1e-6;

/// Running means of the normal and anomalous discrepancies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistStats {
    pub mu_n: f64,
    pub mu_a: f64,
    pub decay: f64,
    pub count_n: u64,
    pub count_a: u64,
}

impl DistStats {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(HdmError::param(format!("decay {decay} outside (0, 1)")));
        }
        Ok(DistStats {
            mu_n: 1.0,
            mu_a: 1.0,
            decay,
            count_n: 0,
            count_a: 0,
        })
    }
}

fn ema(mu: f64, count: u64, batch: &[f64], decay: f64) -> f64 {
    let mean = batch.iter().sum::<f64>() / batch.len() as f64;
    let next = if count == 0 { mean } else { decay * mu + (1.0 - decay) * mean };
    next.max(MIN_DISTANCE)
}

/// EMA update; the first batch of a class initializes its mean and an empty
/// list leaves it alone.
pub fn update_stats(stats: &DistStats, d_normals: &[f64], d_anomalies: &[f64]) -> Result<DistStats> {
    if d_normals.iter().chain(d_anomalies).any(|d| !(*d >= 0.0)) {
        return Err(HdmError::contract("distances must be non-negative"));
    }
    let mut s = stats.clone();
    if !d_normals.is_empty() {
        s.mu_n = ema(s.mu_n, s.count_n, d_normals, s.decay);
        s.count_n += 1;
    }
    if !d_anomalies.is_empty() {
        s.mu_a = ema(s.mu_a, s.count_a, d_anomalies, s.decay);
        s.count_a += 1;
    }
    Ok(s)
}

fn check_weight_args(d: f64, mu: f64, gamma: f64) -> Result<()> {
    if !(mu > 0.0) {
        return Err(HdmError::contract(format!("mean discrepancy {mu} must be positive")));
    }
    if !(gamma > 0.0) {
        return Err(HdmError::param(format!("gamma {gamma} must be positive")));
    }
    if !(d >= 0.0) {
        return Err(HdmError::contract(format!("distance {d} must be non-negative")));
    }
    Ok(())
}

/// `(d / μ_n)^γ`.
pub fn weight_normal(d: f64, mu_n: f64, gamma: f64) -> Result<f64> {
    check_weight_args(d, mu_n, gamma)?;
    Ok((d / mu_n).powf(gamma))
}

/// `(d / μ_a)^(−γ)` with `d` clamped to [`MIN_DISTANCE`].
pub fn weight_anomaly(d: f64, mu_a: f64, gamma: f64) -> Result<f64> {
    check_weight_args(d, mu_a, gamma)?;
    Ok((d.max(MIN_DISTANCE) / mu_a).powf(-gamma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PomLoss {
    pub value: f64,
    pub grad_normal: Vec<f64>,
    pub grad_anomaly: Vec<f64>,
}

/// `Σ_i ω(d_n[i]) · d_n[i] · (1 − d_a[i] / max(d_n[i], d_a[i]))`.
///
/// The weight is differentiated too. At a tie the max belongs to `d_n`.
pub fn pom_loss(d_n: &[f64], d_a: &[f64], stats: &DistStats, gamma: f64) -> Result<PomLoss> {
    if d_n.len() != d_a.len() {
        return Err(HdmError::contract(format!("{} normal vs {} anomalous distances", d_n.len(), d_a.len())));
    }
    let mu = stats.mu_n.max(MIN_DISTANCE);
    let mut out = PomLoss {
        value: 0.0,
        grad_normal: vec![0.0; d_n.len()],
        grad_anomaly: vec![0.0; d_n.len()],
    };
    for (i, (&n, &a)) in d_n.iter().zip(d_a).enumerate() {
        let w = weight_normal(n, mu, gamma)?;
        if !(a >= 0.0) {
            return Err(HdmError::contract("distances must be non-negative"));
        }
        if n >= a && n > 0.0 {
            // ω (n − a) on this branch
            out.value += w * (n - a);
            out.grad_normal[i] = gamma * w / n * (n - a) + w;
            out.grad_anomaly[i] = -w;
        }
    }
    Ok(out)
}

/// Mean and scale of per-pixel negative log-likelihoods on normal data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub mean: f64,
    pub scale: f64,
}

impl MapStats {
    pub fn fit(maps: &[Grid]) -> Result<Self> {
        let n: usize = maps.iter().map(Grid::len).sum();
        if n == 0 {
            return Err(HdmError::param("no maps to fit"));
        }
        let mean = maps.iter().map(Grid::sum).sum::<f64>() / n as f64;
        let var = maps.iter().flat_map(|m| m.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(MapStats {
            mean,
            scale: var.sqrt().max(MIN_DISTANCE),
        })
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Standardized negative log-likelihood → discrepancy `softplus(z)` → weight
/// `(d / ln 2)^γ` → probability `ω / (1 + ω)`. Higher means more anomalous and
/// the map at the normal mean goes to 0.5.
pub fn evidence_map(logp: &Grid, stats: &MapStats, gamma: f64) -> Result<Grid> {
    if !(stats.scale > 0.0) {
        return Err(HdmError::contract("map scale must be positive"));
    }
    if !logp.is_finite() {
        return Err(HdmError::Numeric("non-finite log-likelihood map".into()));
    }
    let mu = std::f64::consts::LN_2;
    let mut out = Grid::zeros(logp.shape());
    for (o, &lp) in out.data_mut().iter_mut().zip(logp.data()) {
        let d = softplus((-lp - stats.mean) / stats.scale);
        let w = weight_normal(d, mu, gamma)?;
        *o = w / (1.0 + w);
    }
    Ok(out)
}

/// Applies [`evidence_map`] to the teacher and student maps.
pub fn optimize_likelihood_maps(
    logp_e: &Grid,
    logp_a: &Grid,
    stats_e: &MapStats,
    stats_a: &MapStats,
    gamma: f64,
) -> Result<(Grid, Grid)> {
    if logp_e.shape() != logp_a.shape() {
        return Err(HdmError::contract(format!("likelihood maps {} vs {}", logp_e.shape(), logp_a.shape())));
    }
    Ok((evidence_map(logp_e, stats_e, gamma)?, evidence_map(logp_a, stats_a, gamma)?))
}
