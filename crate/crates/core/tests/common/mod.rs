//! Oracles shared by the numeric tests and the acceptance suite.

#![allow(dead_code)]

use cbrl_core::neural::{MlpParams, ParamSet, ReadoutParams};
use cbrl_core::numkit::{DenseMatrix, RngStream};
use nalgebra::DMatrix;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute floor below which a derivative counts as zero; central
/// differences at `FD_STEP` carry round-off well under this.
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Largest eigenvalue modulus from nalgebra's real Schur decomposition.
pub fn oracle_radius(m: &DenseMatrix) -> f64 {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    d.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn fd_close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= FD_REL_TOL * analytic.abs().max(numeric.abs()) || err <= FD_ABS_FLOOR
}

/// Central differences of `loss` over every entry of every parameter slice.
pub fn fd_param_grads<P: ParamSet + Clone>(params: &P, loss: impl Fn(&P) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut probe = params.clone();
    let sizes: Vec<usize> = params.param_slices().iter().map(|s| s.len()).collect();
    for (si, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.param_slices()[si][k];
            probe.param_slices_mut()[si][k] = orig + FD_STEP;
            let up = loss(&probe);
            probe.param_slices_mut()[si][k] = orig - FD_STEP;
            let down = loss(&probe);
            probe.param_slices_mut()[si][k] = orig;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

pub fn random_vec(n: usize, lo: f64, hi: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

fn compare(analytic: &[f64], numeric: &[f64], what: &str) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("{what}: {} analytic vs {} numeric entries", analytic.len(), numeric.len()));
    }
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if !fd_close(*a, *n) {
            return Err(format!("{what} entry {i}: analytic {a:e} vs finite difference {n:e}"));
        }
    }
    Ok(())
}

/// `L = c . net(v)` checked over every parameter and input component.
pub fn check_mlp_gradients(net: &MlpParams, v: &[f64], c: &[f64], label: &str) -> Result<(), String> {
    let (_, cache) = net.forward(v).map_err(|e| e.to_string())?;
    let (grads, input_grad) = net.backward(&cache, c).map_err(|e| e.to_string())?;
    let f = |p: &MlpParams, x: &[f64]| -> f64 { p.output(x).unwrap().iter().zip(c).map(|(o, w)| o * w).sum() };
    compare(&grads.flat_params(), &fd_param_grads(net, |p| f(p, v)), &format!("{label} parameters"))?;
    let numeric: Vec<f64> = (0..v.len())
        .map(|i| {
            let mut up = v.to_vec();
            let mut down = v.to_vec();
            up[i] += FD_STEP;
            down[i] -= FD_STEP;
            (f(net, &up) - f(net, &down)) / (2.0 * FD_STEP)
        })
        .collect();
    compare(&input_grad, &numeric, &format!("{label} inputs"))
}

/// `L = c . readout(x, u)` checked over every weight.
pub fn check_readout_gradients(
    readout: &ReadoutParams,
    x: &[f64],
    u: &[f64],
    c: &[f64],
    label: &str,
) -> Result<(), String> {
    let analytic = readout.backward(x, u, c).map_err(|e| e.to_string())?;
    let loss = |p: &ReadoutParams| -> f64 { p.forward(x, u).unwrap().iter().zip(c).map(|(a, w)| a * w).sum() };
    compare(analytic.as_slice(), &fd_param_grads(readout, loss), label)
}
