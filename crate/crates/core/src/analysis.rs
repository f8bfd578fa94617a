//! Post-hoc analytics over trained runs: readout weight magnitudes, PCA of
//! recorded reservoir trajectories, finite-time divergence probes, and
//! across-seed learning-curve aggregation.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::RunRecord;
use crate::neural::ReadoutParams;
use crate::numkit::{norm, RngStream};
use crate::reservoir::{step_into, ReservoirParams};

/// Mean absolute readout weight per action unit, split into the
/// internal-state block and the observation bypass block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub reservoir_mean_abs: Vec<f64>,
    pub bypass_mean_abs: Vec<f64>,
}

impl WeightStats {
    pub fn reservoir_mean(&self) -> f64 {
        mean(&self.reservoir_mean_abs)
    }

    pub fn bypass_mean(&self) -> f64 {
        mean(&self.bypass_mean_abs)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|w| w.abs()).sum::<f64>() / v.len() as f64
    }
}

pub fn weight_stats(readout: &ReadoutParams) -> WeightStats {
    let n = readout.state_dim;
    let (mut res, mut byp) = (Vec::new(), Vec::new());
    for r in 0..readout.outputs() {
        let row = readout.weights.row(r);
        res.push(mean_abs(&row[..n]));
        byp.push(mean_abs(&row[n..]));
    }
    WeightStats { reservoir_mean_abs: res, bypass_mean_abs: byp }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// `k` orthonormal rows, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Total variance of the centered data (trace of the covariance).
    pub total_variance: f64,
    pub mean: Vec<f64>,
}

impl PcaResult {
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((ci, vi), mi)| ci * (vi - mi)).sum())
            .collect()
    }

    /// Projection of each episode, time order preserved.
    pub fn project_paths(&self, paths: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
        paths.iter().map(|p| p.iter().map(|v| self.project(v)).collect()).collect()
    }

    /// Largest entry of `|C Cᵀ - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.components.len();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let d: f64 = self.components[i].iter().zip(&self.components[j]).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }
}

/// Principal components of the mean-centered sample covariance.
pub fn pca_fit(states: &[Vec<f64>], k: usize) -> Result<PcaResult> {
    let Some(dim) = states.first().map(Vec::len) else {
        return Err(Error::Dimension("PCA needs at least one state".into()));
    };
    if k == 0 || k > dim {
        return Err(Error::Dimension(format!("cannot keep {k} components of {dim}-dimensional data")));
    }
    if states.len() < k + 1 {
        return Err(Error::Dimension(format!("PCA with k={k} needs at least {} states", k + 1)));
    }
    if let Some(bad) = states.iter().find(|s| s.len() != dim) {
        return Err(Error::Dimension(format!("state of length {} among {dim}-dimensional states", bad.len())));
    }
    let n = states.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in states {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for s in states {
        centered.iter_mut().zip(s.iter().zip(&mean)).for_each(|(c, (v, m))| *c = v - m);
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let components = order[..k].iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    let explained_variance = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    Ok(PcaResult { components, explained_variance, total_variance, mean })
}

pub const DIVERGENCE_FLOOR: f64 = -20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Initial separation.
    pub delta0: f64,
    /// Steps over which separation growth is measured.
    pub horizon: usize,
    /// Steps run before perturbing, so the probe starts on the attractor.
    pub washout: usize,
    /// Independent perturbation directions averaged.
    pub trials: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { delta0: 1e-8, horizon: 100, washout: 100, trials: 10 }
    }
}

/// Finite-time Lyapunov proxy: mean over trials of
/// `ln(|x_T - x'_T| / delta0) / T` for two rollouts under the same input.
/// `inputs` is cycled if shorter than the washout plus horizon. Rates are
/// floored at [`DIVERGENCE_FLOOR`].
pub fn divergence_probe(
    params: &ReservoirParams,
    g: f64,
    inputs: &[Vec<f64>],
    cfg: &ProbeConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Dimension("divergence probe needs at least one input".into()));
    }
    if !(cfg.delta0 > 0.0) || cfg.horizon == 0 || cfg.trials == 0 {
        return Err(Error::Config("probe needs delta0 > 0, horizon >= 1 and trials >= 1".into()));
    }
    let n = params.size();
    let input_at = |t: usize| &inputs[t % inputs.len()];
    let mut base = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for t in 0..cfg.washout {
        step_into(params, g, &base, input_at(t), &mut scratch)?;
        std::mem::swap(&mut base, &mut scratch);
    }
    let mut total = 0.0;
    for _ in 0..cfg.trials {
        let mut dir: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let dn = norm(&dir);
        dir.iter_mut().for_each(|v| *v *= cfg.delta0 / dn);
        let mut a = base.clone();
        let mut b: Vec<f64> = base.iter().zip(&dir).map(|(x, d)| x + d).collect();
        let mut sa = vec![0.0; n];
        let mut sb = vec![0.0; n];
        for t in 0..cfg.horizon {
            let u = input_at(cfg.washout + t);
            step_into(params, g, &a, u, &mut sa)?;
            step_into(params, g, &b, u, &mut sb)?;
            std::mem::swap(&mut a, &mut sa);
            std::mem::swap(&mut b, &mut sb);
        }
        let sep: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let rate = if sep > 0.0 { (sep / cfg.delta0).ln() / cfg.horizon as f64 } else { DIVERGENCE_FLOOR };
        total += rate.max(DIVERGENCE_FLOOR);
    }
    Ok(total / cfg.trials as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    /// Seed of the record reported as the representative curve.
    pub representative_seed: u64,
    pub representative: Vec<f64>,
}

/// Battery-wise mean and std of the per-battery mean steps across records.
/// The representative curve is the record with the smallest seed.
pub fn aggregate_curves(records: &[RunRecord]) -> Result<CurveTable> {
    let first = records.first().ok_or_else(|| Error::Config("no records to aggregate".into()))?;
    let steps: Vec<u64> = first.batteries.iter().map(|b| b.step).collect();
    for r in records {
        let s: Vec<u64> = r.batteries.iter().map(|b| b.step).collect();
        if s != steps {
            return Err(Error::Config(format!("record for seed {} has a different battery schedule", r.seed)));
        }
    }
    let n = records.len() as f64;
    let mut mean = vec![0.0; steps.len()];
    let mut std = vec![0.0; steps.len()];
    for i in 0..steps.len() {
        let m = records.iter().map(|r| r.batteries[i].mean_steps).sum::<f64>() / n;
        let v = records.iter().map(|r| (r.batteries[i].mean_steps - m).powi(2)).sum::<f64>() / n;
        mean[i] = m;
        std[i] = v.sqrt();
    }
    let rep = records.iter().min_by_key(|r| r.seed).unwrap_or(first);
    Ok(CurveTable {
        steps,
        mean,
        std,
        representative_seed: rep.seed,
        representative: rep.batteries.iter().map(|b| b.mean_steps).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::DenseMatrix;
    use crate::reservoir::{init_reservoir, ReservoirConfig};

    #[test]
    fn zero_readout_stats() {
        let s = weight_stats(&ReadoutParams::zeros(2, 4, 5));
        assert_eq!(s.reservoir_mean(), 0.0);
        assert_eq!(s.bypass_mean(), 0.0);
    }

    #[test]
    fn bypass_only_stats() {
        let mut r = ReadoutParams::zeros(2, 4, 5);
        r.weights = DenseMatrix::from_fn(2, 9, |_, c| if c >= 4 { -0.5 } else { 0.0 });
        let s = weight_stats(&r);
        assert_eq!(s.reservoir_mean_abs, vec![0.0, 0.0]);
        assert_eq!(s.bypass_mean_abs, vec![0.5, 0.5]);
    }

    #[test]
    fn line_data_has_one_component() {
        let pts: Vec<Vec<f64>> = (0..50).map(|i| {
            let t = i as f64 * 0.1;
            vec![1.0 + t, 2.0 - 2.0 * t, 0.5 * t]
        }).collect();
        let p = pca_fit(&pts, 2).unwrap();
        assert!(p.explained_ratio()[0] >= 0.99999);
        assert!(p.orthonormality_error() < 1e-8);
        let origin = p.project(&p.mean);
        assert!(origin.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pca_rejects_bad_k() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]];
        assert!(pca_fit(&pts, 3).is_err());
        assert!(pca_fit(&pts, 0).is_err());
        assert!(pca_fit(&pts[..2], 2).is_err());
    }

    #[test]
    fn no_recurrence_collapses_to_floor() {
        let cfg = ReservoirConfig { size: 32, ..ReservoirConfig::default() };
        let p = init_reservoir(&cfg, &mut RngStream::new(1)).unwrap();
        let rate = divergence_probe(&p, 0.0, &[vec![0.3; 5]], &ProbeConfig::default(), &mut RngStream::new(2)).unwrap();
        assert_eq!(rate, DIVERGENCE_FLOOR);
    }
}
