//! Random-number streams, a small row-major matrix type and spectral-radius
//! estimation.
//!
//! Streams are derived from a root seed and a text label only, never from
//! how much of the parent has been consumed, so per-purpose streams stay
//! identical no matter which order runs are scheduled in.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const POWER_MAX_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-10;
const QR_MAX_ITERS: usize = 60;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seeded ChaCha8 stream. Cloning copies the position in the sequence.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `(self.seed, label)`.
    pub fn derive(&self, label: &str) -> RngStream {
        assert!(!label.is_empty(), "stream label must be nonempty");
        let child = splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes())));
        RngStream::new(child)
    }

    /// Child stream keyed by a label and an index, e.g. one per test battery.
    pub fn derive_indexed(&self, label: &str, index: u64) -> RngStream {
        let base = self.derive(label);
        RngStream::new(splitmix64(base.seed ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        std * self.standard_normal()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }
}

/// Same as [`RngStream::derive`], spelled as a free function.
pub fn derive_stream(root: &RngStream, label: &str) -> RngStream {
    root.derive(label)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Row-major dense matrix of finite `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len("matvec input", x.len(), self.cols)?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn transpose_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len("transpose_matvec input", y.len(), self.rows)?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(yr, self.row(r), &mut out);
        }
        Ok(out)
    }
}

/// Dot product with four partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

/// `y += k * x`
#[inline]
pub fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Compressed-row copy of a matrix, used for repeated products with sparse
/// reservoirs.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedRows {
    rows: usize,
    cols: usize,
    row_start: Vec<usize>,
    col_index: Vec<usize>,
    values: Vec<f64>,
}

impl CompressedRows {
    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut row_start = Vec::with_capacity(m.rows() + 1);
        let mut col_index = Vec::new();
        let mut values = Vec::new();
        row_start.push(0);
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_index.push(c);
                    values.push(v);
                }
            }
            row_start.push(values.len());
        }
        Self { rows: m.rows(), cols: m.cols(), row_start, col_index, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `out = self * x`
    #[inline]
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let (s, e) = (self.row_start[r], self.row_start[r + 1]);
            let mut acc = 0.0;
            for k in s..e {
                acc += self.values[k] * x[self.col_index[k]];
            }
            *o = acc;
        }
    }
}

/// Largest eigenvalue magnitude of a square matrix.
///
/// Runs two-vector subspace iteration so that a dominant complex-conjugate
/// pair is captured as well as a dominant real eigenvalue. The iteration
/// stops once successive estimates differ by less than 1e-10 (relative) and
/// the Ritz residual confirms an invariant subspace; otherwise the full
/// spectrum is computed with Hessenberg reduction and shifted QR.
pub fn estimate_spectral_radius(m: &DenseMatrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    if n == 0 || m.is_zero() {
        return Ok(0.0);
    }
    if n <= 2 {
        return dense_spectral_radius(m);
    }
    match subspace_power_iteration(m) {
        Some(rho) => Ok(rho),
        None => dense_spectral_radius(m),
    }
}

fn orthonormalize(a: &mut [f64], b: &mut [f64]) -> bool {
    let na = norm(a);
    if na == 0.0 {
        return false;
    }
    a.iter_mut().for_each(|v| *v /= na);
    let proj = dot(a, b);
    axpy(-proj, a, b);
    let nb = norm(b);
    if nb == 0.0 {
        return false;
    }
    b.iter_mut().for_each(|v| *v /= nb);
    true
}

fn ritz_radius(h: [[f64; 2]; 2]) -> f64 {
    let tr = h[0][0] + h[1][1];
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    let disc = 0.25 * tr * tr - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (0.5 * tr + s).abs().max((0.5 * tr - s).abs())
    } else {
        det.abs().sqrt()
    }
}

fn subspace_power_iteration(m: &DenseMatrix) -> Option<f64> {
    let n = m.rows();
    let op = CompressedRows::from_dense(m);
    let mut init = RngStream::new(0x5EED_5EED);
    let mut q1: Vec<f64> = (0..n).map(|_| init.uniform(-1.0, 1.0)).collect();
    let mut q2: Vec<f64> = (0..n).map(|_| init.uniform(-1.0, 1.0)).collect();
    if !orthonormalize(&mut q1, &mut q2) {
        return None;
    }
    let mut z1 = vec![0.0; n];
    let mut z2 = vec![0.0; n];
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        op.matvec_into(&q1, &mut z1);
        op.matvec_into(&q2, &mut z2);
        let h = [[dot(&q1, &z1), dot(&q1, &z2)], [dot(&q2, &z1), dot(&q2, &z2)]];
        let rho = ritz_radius(h);
        if !rho.is_finite() {
            return None;
        }
        if (rho - prev).abs() < POWER_TOL * rho.max(f64::MIN_POSITIVE) {
            // residual of A Q - Q H
            let mut res = 0.0;
            for i in 0..n {
                let r1 = z1[i] - q1[i] * h[0][0] - q2[i] * h[1][0];
                let r2 = z2[i] - q1[i] * h[0][1] - q2[i] * h[1][1];
                res += r1 * r1 + r2 * r2;
            }
            if res.sqrt() <= 1e-8 * rho {
                return Some(rho);
            }
        }
        prev = rho;
        std::mem::swap(&mut q1, &mut z1);
        std::mem::swap(&mut q2, &mut z2);
        if !orthonormalize(&mut q1, &mut q2) {
            return None;
        }
    }
    None
}

/// Spectral radius from the full eigenvalue set.
pub fn dense_spectral_radius(m: &DenseMatrix) -> Result<f64> {
    let eig = eigenvalues(m)?;
    Ok(eig.iter().map(|&(re, im)| re.hypot(im)).fold(0.0, f64::max))
}

/// All eigenvalues `(re, im)` of a square matrix via elimination to upper
/// Hessenberg form followed by Francis double-shift QR.
pub fn eigenvalues(m: &DenseMatrix) -> Result<Vec<(f64, f64)>> {
    if !m.is_square() {
        return Err(Error::Dimension("eigenvalues need a square matrix".into()));
    }
    let mut a = m.clone();
    to_hessenberg(&mut a);
    hessenberg_qr(&mut a)
}

fn to_hessenberg(a: &mut DenseMatrix) {
    let n = a.rows();
    if n < 3 {
        return;
    }
    for m in 1..n - 1 {
        let mut x: f64 = 0.0;
        let mut piv = m;
        for j in m..n {
            if a.get(j, m - 1).abs() > x.abs() {
                x = a.get(j, m - 1);
                piv = j;
            }
        }
        if piv != m {
            for j in (m - 1)..n {
                let t = a.get(piv, j);
                a.set(piv, j, a.get(m, j));
                a.set(m, j, t);
            }
            for i in 0..n {
                let t = a.get(i, piv);
                a.set(i, piv, a.get(i, m));
                a.set(i, m, t);
            }
        }
        if x != 0.0 {
            for i in (m + 1)..n {
                let mut y = a.get(i, m - 1);
                if y != 0.0 {
                    y /= x;
                    a.set(i, m - 1, y);
                    for j in m..n {
                        let v = a.get(i, j) - y * a.get(m, j);
                        a.set(i, j, v);
                    }
                    for j in 0..n {
                        let v = a.get(j, m) + y * a.get(j, i);
                        a.set(j, m, v);
                    }
                }
            }
        }
    }
    for i in 2..n {
        for j in 0..i - 1 {
            a.set(i, j, 0.0);
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

fn hessenberg_qr(h: &mut DenseMatrix) -> Result<Vec<(f64, f64)>> {
    let n = h.rows() as isize;
    let mut wr = vec![0.0; n as usize];
    let mut wi = vec![0.0; n as usize];
    macro_rules! a {
        ($i:expr, $j:expr) => {
            h.data[($i as usize) * (n as usize) + ($j as usize)]
        };
    }
    let mut anorm = 0.0;
    for i in 0..n {
        for j in (i - 1).max(0)..n {
            anorm += a!(i, j).abs();
        }
    }
    let mut nn = n - 1;
    let mut t = 0.0;
    let (mut p, mut q, mut r) = (0.0f64, 0.0f64, 0.0f64);
    while nn >= 0 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l >= 1 {
                let mut s = a!(l - 1, l - 1).abs() + a!(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a!(l, l - 1).abs() + s == s {
                    a!(l, l - 1) = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a!(nn, nn);
            if l == nn {
                wr[nn as usize] = x + t;
                wi[nn as usize] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = a!(nn - 1, nn - 1);
            let mut w = a!(nn, nn - 1) * a!(nn - 1, nn);
            if l == nn - 1 {
                p = 0.5 * (y - x);
                q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                let (i0, i1) = ((nn - 1) as usize, nn as usize);
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[i0] = x + z;
                    wr[i1] = x + z;
                    if z != 0.0 {
                        wr[i1] = x - w / z;
                    }
                    wi[i0] = 0.0;
                    wi[i1] = 0.0;
                } else {
                    wr[i0] = x + p;
                    wr[i1] = x + p;
                    wi[i0] = -z;
                    wi[i1] = z;
                }
                nn -= 2;
                break;
            }
            if its == QR_MAX_ITERS {
                return Err(Error::Numeric("shifted QR failed to converge".into()));
            }
            if its > 0 && its % 10 == 0 {
                // exceptional shift
                t += x;
                for i in 0..=nn {
                    a!(i, i) -= x;
                }
                let s = a!(nn, nn - 1).abs() + a!(nn - 1, nn - 2).abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            let mut m = nn - 2;
            while m >= l {
                let z = a!(m, m);
                r = x - z;
                let s = y - z;
                p = (r * s - w) / a!(m + 1, m) + a!(m, m + 1);
                q = a!(m + 1, m + 1) - z - r - s;
                r = a!(m + 2, m + 1);
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a!(m, m - 1).abs() * (q.abs() + r.abs());
                let v = p.abs() * (a!(m - 1, m - 1).abs() + z.abs() + a!(m + 1, m + 1).abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in (m + 2)..=nn {
                a!(i, i - 2) = 0.0;
                if i != m + 2 {
                    a!(i, i - 3) = 0.0;
                }
            }
            let mut k = m;
            while k < nn {
                if k != m {
                    p = a!(k, k - 1);
                    q = a!(k + 1, k - 1);
                    r = 0.0;
                    if k != nn - 1 {
                        r = a!(k + 2, k - 1);
                    }
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a!(k, k - 1) = -a!(k, k - 1);
                        }
                    } else {
                        a!(k, k - 1) = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nn {
                        p = a!(k, j) + q * a!(k + 1, j);
                        if k != nn - 1 {
                            p += r * a!(k + 2, j);
                            a!(k + 2, j) -= p * z;
                        }
                        a!(k + 1, j) -= p * y;
                        a!(k, j) -= p * x;
                    }
                    let mmin = if nn < k + 3 { nn } else { k + 3 };
                    for i in l..=mmin {
                        p = x * a!(i, k) + y * a!(i, k + 1);
                        if k != nn - 1 {
                            p += z * a!(i, k + 2);
                            a!(i, k + 2) -= p * r;
                        }
                        a!(i, k + 1) -= p * q;
                        a!(i, k) -= p;
                    }
                }
                k += 1;
            }
            if l >= nn - 1 {
                break;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_radius_is_one() {
        let r = estimate_spectral_radius(&DenseMatrix::identity(3)).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_radius() {
        let r = estimate_spectral_radius(&DenseMatrix::diagonal(&[2.0, -5.0, 0.1])).unwrap();
        assert!((r - 5.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn zero_matrix_radius_is_zero() {
        assert_eq!(estimate_spectral_radius(&DenseMatrix::zeros(4, 4)).unwrap(), 0.0);
    }

    #[test]
    fn non_square_is_dimension_error() {
        let err = estimate_spectral_radius(&DenseMatrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn rotation_has_unit_radius() {
        // pure rotation: eigenvalues e^{±iπ/3}, power iteration on one vector never settles
        let (c, s) = ((std::f64::consts::PI / 3.0).cos(), (std::f64::consts::PI / 3.0).sin());
        let mut m = DenseMatrix::zeros(3, 3);
        m.set(0, 0, c);
        m.set(0, 1, -s);
        m.set(1, 0, s);
        m.set(1, 1, c);
        m.set(2, 2, 0.5);
        let r = estimate_spectral_radius(&m).unwrap();
        assert!((r - 1.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn qr_eigenvalues_of_companion_matrix() {
        // x^3 - 6x^2 + 11x - 6 = (x-1)(x-2)(x-3)
        let m = DenseMatrix::new(3, 3, vec![6.0, -11.0, 6.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let mut eig: Vec<f64> = eigenvalues(&m).unwrap().into_iter().map(|(re, _)| re).collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, want) in eig.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn same_label_same_sequence() {
        let root = RngStream::new(7);
        let mut a = derive_stream(&root, "env");
        let mut b = derive_stream(&root, "env");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn labels_and_seeds_separate_streams() {
        let first = |seed: u64, label: &str| RngStream::new(seed).derive(label).next_u64();
        assert_ne!(first(7, "env"), first(7, "init"));
        assert_ne!(first(7, "env"), first(8, "env"));
    }

    #[test]
    fn derive_ignores_parent_consumption() {
        let mut root = RngStream::new(3);
        let before = root.derive("x").next_u64();
        for _ in 0..10 {
            root.next_u64();
        }
        assert_eq!(before, root.derive("x").next_u64());
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn compressed_rows_match_dense() {
        let mut rng = RngStream::new(11);
        let m = DenseMatrix::from_fn(7, 5, |_, _| {
            if rng.bernoulli(0.4) {
                rng.uniform(-1.0, 1.0)
            } else {
                0.0
            }
        });
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let mut out = vec![0.0; 7];
        CompressedRows::from_dense(&m).matvec_into(&x, &mut out);
        let dense = m.matvec(&x).unwrap();
        for (a, b) in out.iter().zip(dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
