//! Echo state network reservoir: sparse recurrent weights normalized to unit
//! spectral radius, scaled at run time by `g`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numkit::{dot, estimate_spectral_radius, CompressedRows, DenseMatrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReservoirConfig {
    /// Reservoir units.
    pub size: usize,
    /// Input dimension.
    pub inputs: usize,
    /// Recurrent connection probability.
    pub connectivity: f64,
    /// Spectral-radius scale.
    pub g: f64,
    /// Input weights are uniform in `[-input_scale, input_scale]`.
    pub input_scale: f64,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self { size: 256, inputs: 5, connectivity: 0.1, g: 2.2, input_scale: 0.5 }
    }
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.inputs == 0 {
            return Err(Error::Config("reservoir size and input dimension must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.connectivity) {
            return Err(Error::Config(format!("connectivity {} outside [0, 1]", self.connectivity)));
        }
        if !(self.g >= 0.0) || !self.g.is_finite() {
            return Err(Error::Config(format!("g = {} must be finite and >= 0", self.g)));
        }
        if !(self.input_scale >= 0.0) {
            return Err(Error::Config("input_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReservoirParams {
    /// Unit spectral radius.
    pub recurrent: DenseMatrix,
    pub input: DenseMatrix,
    /// Spectral radius of the matrix before normalization.
    pub raw_radius: f64,
    sparse: CompressedRows,
}

impl ReservoirParams {
    pub fn from_parts(recurrent: DenseMatrix, input: DenseMatrix) -> Result<Self> {
        if !recurrent.is_square() || input.rows() != recurrent.rows() {
            return Err(Error::Dimension("reservoir weight shapes do not agree".into()));
        }
        let sparse = CompressedRows::from_dense(&recurrent);
        Ok(Self { recurrent, input, raw_radius: 1.0, sparse })
    }

    pub fn size(&self) -> usize {
        self.recurrent.rows()
    }

    pub fn inputs(&self) -> usize {
        self.input.cols()
    }

    /// Order-sensitive FNV digest of all weights, recorded alongside run
    /// snapshots so a regenerated reservoir can be checked.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.recurrent.as_slice().iter().chain(self.input.as_slice()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        format!("{h:016x}")
    }
}

/// Reservoir activation vector, every component in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReservoirState(pub Vec<f64>);

impl ReservoirState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn draw_recurrent(n: usize, p: f64, rng: &mut RngStream) -> DenseMatrix {
    // value drawn first so the stream position does not depend on the mask
    DenseMatrix::from_fn(n, n, |_, _| {
        let v = rng.uniform(-1.0, 1.0);
        if rng.bernoulli(p) {
            v
        } else {
            0.0
        }
    })
}

pub fn init_reservoir(cfg: &ReservoirConfig, rng: &mut RngStream) -> Result<ReservoirParams> {
    cfg.validate()?;
    let n = cfg.size;
    let mut w = draw_recurrent(n, cfg.connectivity, rng);
    let mut rho = estimate_spectral_radius(&w)?;
    if rho == 0.0 {
        w = draw_recurrent(n, cfg.connectivity, rng);
        rho = estimate_spectral_radius(&w)?;
        if rho == 0.0 {
            return Err(Error::Numeric(format!(
                "recurrent draw with N_x={n}, p={} has zero spectral radius twice",
                cfg.connectivity
            )));
        }
    }
    w.scale(1.0 / rho);
    let s = cfg.input_scale;
    let input = DenseMatrix::from_fn(n, cfg.inputs, |_, _| rng.uniform(-s, s));
    let mut params = ReservoirParams::from_parts(w, input)?;
    params.raw_radius = rho;
    Ok(params)
}

pub fn reset_state(cfg: &ReservoirConfig) -> ReservoirState {
    ReservoirState(vec![0.0; cfg.size])
}

/// `x = tanh(g * W_rec * x_prev + W_in * u)`
pub fn reservoir_step(
    params: &ReservoirParams,
    g: f64,
    prev: &ReservoirState,
    u: &[f64],
) -> Result<ReservoirState> {
    let mut out = vec![0.0; params.size()];
    step_into(params, g, prev.as_slice(), u, &mut out)?;
    Ok(ReservoirState(out))
}

/// Allocation-free variant of [`reservoir_step`].
pub fn step_into(params: &ReservoirParams, g: f64, prev: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
    check_len("reservoir state", prev.len(), params.size())?;
    check_len("reservoir input", u.len(), params.inputs())?;
    check_len("reservoir output", out.len(), params.size())?;
    params.sparse.matvec_into(prev, out);
    for (i, o) in out.iter_mut().enumerate() {
        *o = (g * *o + dot(params.input.row(i), u)).tanh();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize, connectivity: f64, g: f64) -> ReservoirConfig {
        ReservoirConfig { size, inputs: 5, connectivity, g, input_scale: 0.5 }
    }

    #[test]
    fn dense_two_unit_reservoir_has_unit_radius() {
        let p = init_reservoir(&cfg(2, 1.0, 1.0), &mut RngStream::new(4)).unwrap();
        let rho = estimate_spectral_radius(&p.recurrent).unwrap();
        assert!((rho - 1.0).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_matrices() {
        let a = init_reservoir(&cfg(32, 0.2, 1.0), &mut RngStream::new(9)).unwrap();
        let b = init_reservoir(&cfg(32, 0.2, 1.0), &mut RngStream::new(9)).unwrap();
        assert_eq!(a.recurrent, b.recurrent);
        assert_eq!(a.input, b.input);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn input_weights_in_range() {
        let p = init_reservoir(&cfg(64, 0.1, 1.0), &mut RngStream::new(1)).unwrap();
        assert!(p.input.as_slice().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn empty_connectivity_errors() {
        let err = init_reservoir(&cfg(4, 0.0, 1.0), &mut RngStream::new(1)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(cfg(0, 0.1, 1.0).validate().is_err());
        assert!(cfg(4, 1.5, 1.0).validate().is_err());
        assert!(cfg(4, 0.1, -1.0).validate().is_err());
    }

    #[test]
    fn zero_gain_zero_input_gives_zero_state() {
        let c = cfg(16, 0.3, 0.0);
        let p = init_reservoir(&c, &mut RngStream::new(2)).unwrap();
        let prev = ReservoirState(vec![0.7; 16]);
        let x = reservoir_step(&p, 0.0, &prev, &[0.0; 5]).unwrap();
        assert!(x.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gain_ignores_previous_state() {
        let c = cfg(16, 0.3, 0.0);
        let p = init_reservoir(&c, &mut RngStream::new(2)).unwrap();
        let u = [0.2, 0.8, 0.4, 0.6, 0.9];
        let a = reservoir_step(&p, 0.0, &ReservoirState(vec![0.9; 16]), &u).unwrap();
        let b = reservoir_step(&p, 0.0, &ReservoirState(vec![-0.3; 16]), &u).unwrap();
        assert_eq!(a, b);
        let want: Vec<f64> = p.input.matvec(&u).unwrap().iter().map(|v| v.tanh()).collect();
        assert_eq!(a.0, want);
    }

    #[test]
    fn reset_is_zero_and_stays_zero() {
        let c = cfg(4, 1.0, 0.0);
        assert_eq!(reset_state(&c).0, vec![0.0; 4]);
        assert_eq!(reset_state(&c), reset_state(&c));
        let p = init_reservoir(&c, &mut RngStream::new(5)).unwrap();
        let x = reservoir_step(&p, 0.0, &reset_state(&c), &[0.0; 5]).unwrap();
        assert_eq!(x.0, vec![0.0; 4]);
    }

    #[test]
    fn step_checks_dimensions() {
        let c = cfg(8, 0.5, 1.0);
        let p = init_reservoir(&c, &mut RngStream::new(5)).unwrap();
        assert!(reservoir_step(&p, 1.0, &ReservoirState(vec![0.0; 7]), &[0.0; 5]).is_err());
        assert!(reservoir_step(&p, 1.0, &reset_state(&c), &[0.0; 4]).is_err());
    }
}
