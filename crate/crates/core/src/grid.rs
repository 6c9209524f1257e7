//! Periodic grids and their discrete Fourier transforms.
//!
//! Spectral coefficients are normalised so that `f(x) = Σ_k f̂_k e^{ik·x}`;
//! with this convention `‖f‖²_{L²} = |box| Σ_k |f̂_k|²`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Spectrum = Vec<Complex64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension must be 1, 2 or 3 (got {0})")]
    Dims(usize),
    #[error("points per dimension must be a power of two >= 16 (got {0})")]
    Points(usize),
    #[error("domain length must be positive and finite (got {0})")]
    Length(f64),
    #[error("dealias fraction must lie in (0, 1] (got {0})")]
    Dealias(f64),
    #[error("expected {expected} entries per dimension list, got {got}")]
    Shape { expected: usize, got: usize },
}

/// Box geometry: points and length per dimension plus the dealiasing fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<usize>,
    lengths: Vec<f64>,
    dealias: f64,
}

impl Grid {
    pub fn new(points: Vec<usize>, lengths: Vec<f64>, dealias: f64) -> Result<Self, GridError> {
        let dims = points.len();
        if !(1..=3).contains(&dims) {
            return Err(GridError::Dims(dims));
        }
        if lengths.len() != dims {
            return Err(GridError::Shape {
                expected: dims,
                got: lengths.len(),
            });
        }
        for &n in &points {
            if n < 16 || !n.is_power_of_two() {
                return Err(GridError::Points(n));
            }
        }
        for &l in &lengths {
            if !(l > 0.0) || !l.is_finite() {
                return Err(GridError::Length(l));
            }
        }
        if !(dealias > 0.0 && dealias <= 1.0) {
            return Err(GridError::Dealias(dealias));
        }
        Ok(Self {
            points,
            lengths,
            dealias,
        })
    }

    /// Cubic box with `n` points and side `length` in each of `dims` dimensions.
    pub fn cubic(dims: usize, n: usize, length: f64, dealias: f64) -> Result<Self, GridError> {
        Self::new(vec![n; dims], vec![length; dims], dealias)
    }

    pub fn dims(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn dealias(&self) -> f64 {
        self.dealias
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn spacing(&self, d: usize) -> f64 {
        self.lengths[d] / self.points[d] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dims()).map(|d| self.spacing(d)).fold(f64::INFINITY, f64::min)
    }

    /// Smallest non-zero lattice wavenumber `2π/L`.
    pub fn k_min(&self) -> f64 {
        self.lengths.iter().map(|l| 2.0 * PI / l).fold(f64::INFINITY, f64::min)
    }

    /// Largest lattice radius (corner of the unaliased box).
    pub fn k_max(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.lengths)
            .map(|(&n, &l)| {
                let k = 2.0 * PI / l * (n / 2) as f64;
                k * k
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Largest wavenumber kept by the dealiasing mask along the shortest axis.
    pub fn k_dealiased(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.lengths)
            .map(|(&n, &l)| 2.0 * PI / l * (self.dealias * (n / 2) as f64))
            .fold(f64::INFINITY, f64::min)
    }

    /// Signed integer wavenumber of FFT index `i` along an axis of length `n`.
    #[inline]
    pub fn signed_index(i: usize, n: usize) -> i64 {
        if i <= n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    }

    /// Multi-index of a flat row-major position (first axis slowest).
    pub fn unravel(&self, mut flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for d in (0..self.dims()).rev() {
            idx[d] = flat % self.points[d];
            flat /= self.points[d];
        }
        idx
    }

    pub fn coordinate(&self, flat: usize) -> [f64; 3] {
        let idx = self.unravel(flat);
        let mut x = [0.0; 3];
        for d in 0..self.dims() {
            x[d] = idx[d] as f64 * self.spacing(d);
        }
        x
    }
}

/// Tiled transpose of a `rows × cols` row-major block.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Per-mode wavenumber tables and FFT plans for one [`Grid`].
#[derive(Clone)]
pub struct Spectral {
    grid: Grid,
    /// `k[d][m]`: component `d` of the wavevector at flat mode `m`.
    k: Vec<Vec<f64>>,
    /// Wavevector used for odd derivatives (zero on Nyquist planes).
    k_odd: Vec<Vec<f64>>,
    k2: Vec<f64>,
    keep: Vec<bool>,
    neg: Vec<usize>,
    plans_fwd: Vec<Arc<dyn Fft<f64>>>,
    plans_inv: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: &Grid) -> Self {
        let dims = grid.dims();
        let len = grid.len();
        let mut k = vec![vec![0.0; len]; dims];
        let mut k_odd = vec![vec![0.0; len]; dims];
        let mut k2 = vec![0.0; len];
        let mut keep = vec![true; len];
        for m in 0..len {
            let idx = grid.unravel(m);
            for d in 0..dims {
                let n = grid.points[d];
                let s = Grid::signed_index(idx[d], n);
                let kd = 2.0 * PI / grid.lengths[d] * s as f64;
                k[d][m] = kd;
                k_odd[d][m] = if idx[d] == n / 2 { 0.0 } else { kd };
                k2[m] += kd * kd;
                if (s.unsigned_abs() as f64) >= grid.dealias * (n / 2) as f64 {
                    keep[m] = false;
                }
            }
        }
        let neg = (0..len)
            .map(|m| {
                let idx = grid.unravel(m);
                let mut flat = 0;
                for d in 0..dims {
                    let n = grid.points[d];
                    flat = flat * n + (n - idx[d]) % n;
                }
                flat
            })
            .collect();
        let mut planner = FftPlanner::new();
        let plans_fwd = grid.points.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let plans_inv = grid.points.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            grid: grid.clone(),
            k,
            k_odd,
            k2,
            keep,
            neg,
            plans_fwd,
            plans_inv,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.k2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k2.is_empty()
    }

    pub fn k(&self, d: usize) -> &[f64] {
        &self.k[d]
    }

    pub fn k2(&self) -> &[f64] {
        &self.k2
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn radius(&self, m: usize) -> f64 {
        self.k2[m].sqrt()
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let dims = self.grid.dims();
        let pts = &self.grid.points;
        let zero = Complex64::new(0.0, 0.0);
        let mut scratch: Vec<Complex64> = Vec::new();
        let mut lines: Vec<Complex64> = Vec::new();
        for d in 0..dims {
            let n = pts[d];
            let plan = if inverse { &self.plans_inv[d] } else { &self.plans_fwd[d] };
            scratch.resize(plan.get_inplace_scratch_len(), zero);
            let stride: usize = pts[d + 1..].iter().product();
            if stride == 1 {
                plan.process_with_scratch(data, &mut scratch);
                continue;
            }
            // gather every line along axis d contiguously, transform as one batch, scatter back
            let outer: usize = pts[..d].iter().product();
            lines.resize(data.len(), zero);
            for o in 0..outer {
                let base = o * n * stride;
                transpose(&data[base..base + n * stride], &mut lines[base..base + n * stride], n, stride);
            }
            plan.process_with_scratch(&mut lines, &mut scratch);
            for o in 0..outer {
                let base = o * n * stride;
                transpose(&lines[base..base + n * stride], &mut data[base..base + n * stride], stride, n);
            }
        }
    }

    /// Flat index of the mode `−k` for every mode `k`.
    pub fn negated(&self) -> &[usize] {
        &self.neg
    }

    /// Forward transforms of two real fields with one complex FFT.
    pub fn forward_pair(&self, f: &[f64], g: &[f64]) -> (Spectrum, Spectrum) {
        let mut data: Spectrum = f.iter().zip(g).map(|(&a, &b)| Complex64::new(a, b)).collect();
        self.transform(&mut data, false);
        let scale = 0.5 / self.len() as f64;
        let mut a = vec![Complex64::new(0.0, 0.0); data.len()];
        let mut b = a.clone();
        for m in 0..data.len() {
            let z = data[m];
            let w = data[self.neg[m]].conj();
            a[m] = (z + w) * scale;
            // (z − w) / 2i
            let d = z - w;
            b[m] = Complex64::new(d.im, -d.re) * scale;
        }
        (a, b)
    }

    /// Inverse transforms of two Hermitian spectra with one complex FFT.
    pub fn inverse_pair(&self, a: &[Complex64], b: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let mut data: Spectrum = a.iter().zip(b).map(|(x, y)| x + Complex64::new(-y.im, y.re)).collect();
        self.transform(&mut data, true);
        (data.iter().map(|z| z.re).collect(), data.iter().map(|z| z.im).collect())
    }

    /// Inverse transforms of many Hermitian spectra, two per FFT.
    pub fn inverse_many(&self, specs: &[&[Complex64]]) -> Vec<Vec<f64>> {
        let parts: Vec<Vec<Vec<f64>>> = specs
            .par_chunks(2)
            .map(|pair| {
                if pair.len() == 2 {
                    let (x, y) = self.inverse_pair(pair[0], pair[1]);
                    vec![x, y]
                } else {
                    vec![self.inverse(pair[0])]
                }
            })
            .collect();
        parts.into_iter().flatten().collect()
    }

    /// Forward transforms of many real fields, two per FFT.
    pub fn forward_many(&self, fields: &[&[f64]]) -> Vec<Spectrum> {
        let parts: Vec<Vec<Spectrum>> = fields
            .par_chunks(2)
            .map(|pair| {
                if pair.len() == 2 {
                    let (x, y) = self.forward_pair(pair[0], pair[1]);
                    vec![x, y]
                } else {
                    vec![self.forward(pair[0])]
                }
            })
            .collect();
        parts.into_iter().flatten().collect()
    }

    /// Physical real field to normalised spectral coefficients.
    pub fn forward(&self, field: &[f64]) -> Spectrum {
        let mut data: Spectrum = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, false);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
        data
    }

    pub fn forward_complex(&self, field: &[Complex64]) -> Spectrum {
        let mut data = field.to_vec();
        self.transform(&mut data, false);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
        data
    }

    /// Inverse transform keeping the full complex result.
    pub fn inverse_complex(&self, spec: &[Complex64]) -> Vec<Complex64> {
        let mut data = spec.to_vec();
        self.transform(&mut data, true);
        data
    }

    /// Inverse transform returning the real part.
    pub fn inverse(&self, spec: &[Complex64]) -> Vec<f64> {
        self.inverse_complex(spec).into_iter().map(|c| c.re).collect()
    }

    /// Largest imaginary residue of the inverse transform relative to the field's max norm.
    pub fn imaginary_residue(&self, spec: &[Complex64]) -> f64 {
        let data = self.inverse_complex(spec);
        let re = data.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
        let im = data.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        if re == 0.0 {
            im
        } else {
            im / re
        }
    }

    /// Spectral partial derivative `∂_d`.
    pub fn derivative(&self, spec: &[Complex64], d: usize) -> Spectrum {
        spec.iter()
            .zip(&self.k_odd[d])
            .map(|(v, &kd)| Complex64::new(-kd * v.im, kd * v.re))
            .collect()
    }

    /// Second derivative `∂_a∂_b`.
    pub fn second_derivative(&self, spec: &[Complex64], a: usize, b: usize) -> Spectrum {
        let (ka, kb) = if a == b { (&self.k[a], &self.k[b]) } else { (&self.k_odd[a], &self.k_odd[b]) };
        spec.iter()
            .zip(ka.iter().zip(kb))
            .map(|(v, (&x, &y))| -(x * y) * v)
            .collect()
    }

    pub fn laplacian(&self, spec: &[Complex64]) -> Spectrum {
        spec.iter().zip(&self.k2).map(|(v, &k2)| -k2 * v).collect()
    }

    /// Divergence of a spectral vector field.
    pub fn divergence(&self, comps: &[Spectrum]) -> Spectrum {
        let mut out = vec![Complex64::new(0.0, 0.0); self.len()];
        for (d, c) in comps.iter().enumerate() {
            for ((o, v), &kd) in out.iter_mut().zip(c).zip(&self.k_odd[d]) {
                *o += Complex64::new(-kd * v.im, kd * v.re);
            }
        }
        out
    }

    /// Zero every mode outside the dealiasing box.
    pub fn dealias_in_place(&self, spec: &mut [Complex64]) {
        for (v, &k) in spec.iter_mut().zip(&self.keep) {
            if !k {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Energy (sum of squared coefficients) carried by the dealiased band.
    pub fn dealias_band_energy(&self, spec: &[Complex64]) -> f64 {
        spec.iter()
            .zip(&self.keep)
            .filter(|(_, &k)| !k)
            .map(|(v, _)| v.norm_sqr())
            .sum()
    }

    /// `‖f‖_{L²}` from spectral coefficients (fixed-order sum).
    pub fn l2_norm(&self, spec: &[Complex64]) -> f64 {
        (self.grid.volume() * spec.iter().map(|v| v.norm_sqr()).sum::<f64>()).sqrt()
    }

    /// Index of the zero mode.
    pub const MEAN: usize = 0;
}
