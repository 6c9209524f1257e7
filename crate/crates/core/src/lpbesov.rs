//! Homogeneous Littlewood-Paley blocks and Besov norms on the Fourier lattice.
//!
//! The radial bump is `φ(r) = S(r) − S(2r)` where `S` is a smooth low-pass
//! profile equal to one on `[0, 3/2]` and zero on `[8/3, ∞)`. Then `φ` is
//! supported in `[3/4, 8/3]`, equals one on `[4/3, 3/2]`, and the dyadic
//! sum `Σ_q φ(2^{-q} r)` telescopes to one for every `r > 0`.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{Grid, Spectral};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("low/high threshold q0 = {q0} outside block range [{q_min}, {q_max}]")]
    ThresholdOutOfRange { q0: i32, q_min: i32, q_max: i32 },
    #[error("field leaks {leak:e} of its energy outside the annulus of block {q}")]
    NotInAnnulus { q: i32, leak: f64 },
    #[error("field is zero")]
    ZeroField,
}

/// Smooth radial bump supported in `[3/4, 8/3]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnnulusBump;

impl AnnulusBump {
    pub const INNER: f64 = 0.75;
    pub const OUTER: f64 = 8.0 / 3.0;
    /// Where the low-pass profile starts to fall off.
    const KNEE: f64 = 1.5;

    #[inline]
    fn theta(x: f64) -> f64 {
        if x > 0.0 {
            (-1.0 / x).exp()
        } else {
            0.0
        }
    }

    #[inline]
    fn blend(x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let a = Self::theta(x);
        a / (a + Self::theta(1.0 - x))
    }

    /// Low-pass profile: 1 on `[0, 3/2]`, 0 on `[8/3, ∞)`.
    #[inline]
    pub fn low_pass(&self, r: f64) -> f64 {
        Self::blend((Self::OUTER - r) / (Self::OUTER - Self::KNEE))
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        if r <= Self::INNER || r >= Self::OUTER {
            return 0.0;
        }
        self.low_pass(r) - self.low_pass(2.0 * r)
    }

    /// `Σ_q φ(2^{-q} r)` over every `q` whose annulus contains `r`.
    pub fn dyadic_sum(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let q_lo = (r * 3.0 / 8.0).log2().floor() as i32;
        (q_lo - 1..=q_lo + 3).map(|q| self.eval(r * (-q as f64).exp2())).sum()
    }

    /// Support of `φ` measured on a fine sample grid: `(min, max)` radius where `φ > 0`.
    pub fn measured_support(&self) -> (f64, f64) {
        let n = 200_000;
        let (a, b) = (0.5, 3.0);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..=n {
            let r = a + (b - a) * i as f64 / n as f64;
            if self.eval(r) > 0.0 {
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        (lo, hi)
    }
}

/// Summability index `r` of `Ḃ^s_{2,r}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Summability {
    One,
    Infinity,
}

/// Regularity indices of a Besov (or hybrid Besov) norm with `p = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BesovIndex {
    pub s: f64,
    /// High-frequency exponent of a hybrid norm.
    pub t: Option<f64>,
    pub r: Summability,
}

impl BesovIndex {
    pub fn homogeneous(s: f64, r: Summability) -> Self {
        Self { s, t: None, r }
    }

    pub fn hybrid(s: f64, t: f64) -> Self {
        Self {
            s,
            t: Some(t),
            r: Summability::One,
        }
    }
}

/// Blockwise `L²` norms `‖Δ̇_q f‖` for `q = q_min..=q_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockNorms {
    pub q_min: i32,
    pub norms: Vec<f64>,
}

impl BlockNorms {
    pub fn iter(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.norms.iter().enumerate().map(move |(i, &n)| (self.q_min + i as i32, n))
    }

    pub fn get(&self, q: i32) -> f64 {
        let i = q - self.q_min;
        if i < 0 || i as usize >= self.norms.len() {
            0.0
        } else {
            self.norms[i as usize]
        }
    }

    /// `Σ_q 2^{qs}‖Δ̇_q f‖` (r = 1) or `sup_q` (r = ∞).
    pub fn besov(&self, s: f64, r: Summability) -> f64 {
        self.weighted(s, r, |_| true)
    }

    /// Low-frequency part `Σ_{q ≤ q0}`.
    pub fn low(&self, s: f64, q0: i32) -> f64 {
        self.weighted(s, Summability::One, |q| q <= q0)
    }

    /// High-frequency part `Σ_{q > q0}`.
    pub fn high(&self, s: f64, q0: i32) -> f64 {
        self.weighted(s, Summability::One, |q| q > q0)
    }

    pub fn low_sup(&self, s: f64, q0: i32) -> f64 {
        self.weighted(s, Summability::Infinity, |q| q <= q0)
    }

    pub fn hybrid(&self, s: f64, t: f64, q0: i32) -> f64 {
        self.low(s, q0) + self.high(t, q0)
    }

    fn weighted(&self, s: f64, r: Summability, keep: impl Fn(i32) -> bool) -> f64 {
        let terms = self.iter().filter(|(q, _)| keep(*q)).map(|(q, n)| (q as f64 * s).exp2() * n);
        match r {
            Summability::One => terms.sum(),
            Summability::Infinity => terms.fold(0.0, f64::max),
        }
    }

    /// Blockwise norms of a tuple from the norms of its members: `(Σ_i ‖Δ̇_q f_i‖²)^{1/2}`.
    pub fn root_sum_square(parts: &[&BlockNorms]) -> BlockNorms {
        let q_min = parts[0].q_min;
        let len = parts[0].norms.len();
        assert!(parts.iter().all(|p| p.q_min == q_min && p.norms.len() == len));
        BlockNorms {
            q_min,
            norms: (0..len).map(|i| parts.iter().map(|p| p.norms[i].powi(2)).sum::<f64>().sqrt()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ModeWeights {
    /// Lower of the (at most two) blocks whose annulus contains this mode.
    q: i32,
    w_lo: f64,
    w_hi: f64,
}

/// `(q_min, q_max)`: every block whose open annulus meets `[k_min, k_max]` of the grid.
pub fn block_range(grid: &Grid) -> (i32, i32) {
    let q_min = (grid.k_min() / AnnulusBump::OUTER).log2().floor() as i32 + 1;
    let q_max = (grid.k_max() / AnnulusBump::INNER).log2().ceil() as i32 - 1;
    (q_min, q_max)
}

/// Dyadic blocks adapted to one Fourier lattice.
#[derive(Debug, Clone)]
pub struct DyadicDecomposition {
    pub q_min: i32,
    pub q_max: i32,
    pub q0: i32,
    bump: AnnulusBump,
    radius: Vec<f64>,
    weights: Vec<ModeWeights>,
    volume: f64,
    k_min: f64,
    k_max: f64,
}

impl DyadicDecomposition {
    pub fn new(spectral: &Spectral, q0: i32) -> Result<Self, LpError> {
        let grid = spectral.grid();
        let k_min = grid.k_min();
        let k_max = grid.k_max();
        let (q_min, q_max) = block_range(grid);
        if q0 < q_min || q0 > q_max {
            return Err(LpError::ThresholdOutOfRange { q0, q_min, q_max });
        }
        let bump = AnnulusBump;
        let radius: Vec<f64> = (0..spectral.len()).map(|m| spectral.radius(m)).collect();
        let weights = radius
            .iter()
            .map(|&r| {
                if r == 0.0 {
                    return ModeWeights {
                        q: 0,
                        w_lo: 0.0,
                        w_hi: 0.0,
                    };
                }
                let q = (r / AnnulusBump::OUTER).log2().floor() as i32 + 1;
                ModeWeights {
                    q,
                    w_lo: bump.eval(r * (-q as f64).exp2()),
                    w_hi: bump.eval(r * (-(q + 1) as f64).exp2()),
                }
            })
            .collect();
        Ok(Self {
            q_min,
            q_max,
            q0,
            bump,
            radius,
            weights,
            volume: grid.volume(),
            k_min,
            k_max,
        })
    }

    pub fn bump(&self) -> &AnnulusBump {
        &self.bump
    }

    pub fn num_blocks(&self) -> usize {
        (self.q_max - self.q_min + 1) as usize
    }

    pub fn in_range(&self, q: i32) -> bool {
        q >= self.q_min && q <= self.q_max
    }

    /// Blocks whose whole annulus lies inside the lattice radii `[k_min, k_max]`.
    pub fn resolved_blocks(&self) -> Vec<i32> {
        (self.q_min..=self.q_max)
            .filter(|&q| {
                let s = (q as f64).exp2();
                AnnulusBump::INNER * s >= self.k_min && AnnulusBump::OUTER * s <= self.k_max
            })
            .collect()
    }

    /// Weight of block `q` on mode `m`.
    #[inline]
    pub fn weight(&self, m: usize, q: i32) -> f64 {
        let w = &self.weights[m];
        if q == w.q {
            w.w_lo
        } else if q == w.q + 1 {
            w.w_hi
        } else {
            0.0
        }
    }

    /// Largest `|Σ_q φ(2^{-q}|k|) − 1|` over non-zero lattice modes, using only in-range blocks.
    pub fn partition_residual(&self) -> f64 {
        self.radius
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(m, _)| {
                let w = &self.weights[m];
                let mut s = 0.0;
                if self.in_range(w.q) {
                    s += w.w_lo;
                }
                if self.in_range(w.q + 1) {
                    s += w.w_hi;
                }
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `Δ̇_q f`. Out-of-range `q` yields the zero field.
    pub fn block_project(&self, field: &[Complex64], q: i32) -> Vec<Complex64> {
        if !self.in_range(q) {
            return vec![Complex64::new(0.0, 0.0); field.len()];
        }
        field.iter().enumerate().map(|(m, v)| self.weight(m, q) * v).collect()
    }

    /// `(Σ_{q ≤ q0} Δ̇_q f, Σ_{q > q0} Δ̇_q f)`.
    pub fn low_high_split(&self, field: &[Complex64], q0: i32) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut low = vec![Complex64::new(0.0, 0.0); field.len()];
        let mut high = low.clone();
        for (m, v) in field.iter().enumerate() {
            let w = &self.weights[m];
            for (q, wt) in [(w.q, w.w_lo), (w.q + 1, w.w_hi)] {
                if wt == 0.0 || !self.in_range(q) {
                    continue;
                }
                if q <= q0 {
                    low[m] += wt * v;
                } else {
                    high[m] += wt * v;
                }
            }
        }
        (low, high)
    }

    /// Blockwise `L²` norms of the tuple `comps`, optionally of `|D|^deriv` applied to it.
    pub fn block_norms(&self, comps: &[&[Complex64]], deriv: f64) -> BlockNorms {
        let mut sq = vec![0.0; self.num_blocks()];
        for comp in comps {
            for (m, v) in comp.iter().enumerate() {
                let r = self.radius[m];
                if r == 0.0 {
                    continue;
                }
                let e = v.norm_sqr();
                if e == 0.0 {
                    continue;
                }
                let e = if deriv == 0.0 {
                    e
                } else if deriv == 1.0 {
                    e * r * r
                } else {
                    e * r.powf(2.0 * deriv)
                };
                let w = &self.weights[m];
                let i = w.q - self.q_min;
                if i >= 0 && (i as usize) < sq.len() {
                    sq[i as usize] += w.w_lo * w.w_lo * e;
                }
                let j = i + 1;
                if j >= 0 && (j as usize) < sq.len() {
                    sq[j as usize] += w.w_hi * w.w_hi * e;
                }
            }
        }
        BlockNorms {
            q_min: self.q_min,
            norms: sq.into_iter().map(|s| (self.volume * s).sqrt()).collect(),
        }
    }

    pub fn besov_norm(&self, field: &[Complex64], index: BesovIndex) -> f64 {
        let b = self.block_norms(&[field], 0.0);
        match index.t {
            Some(t) => b.hybrid(index.s, t, self.q0),
            None => b.besov(index.s, index.r),
        }
    }

    pub fn hybrid_norm(&self, field: &[Complex64], s: f64, t: f64, q0: i32) -> f64 {
        self.block_norms(&[field], 0.0).hybrid(s, t, q0)
    }

    /// `‖∇f‖ / (2^q ‖f‖)` for a field spectrally supported in block `q`'s annulus.
    pub fn bernstein_check(&self, field: &[Complex64], q: i32) -> Result<f64, LpError> {
        let scale = (q as f64).exp2();
        let (lo, hi) = (AnnulusBump::INNER * scale, AnnulusBump::OUTER * scale);
        let mut inside = 0.0;
        let mut outside = 0.0;
        let mut grad = 0.0;
        for (m, v) in field.iter().enumerate() {
            let e = v.norm_sqr();
            let r = self.radius[m];
            if r > lo && r < hi {
                inside += e;
                grad += e * r * r;
            } else {
                outside += e;
            }
        }
        let total = inside + outside;
        if total == 0.0 {
            return Err(LpError::ZeroField);
        }
        let leak = outside / total;
        if leak > 1e-10 {
            return Err(LpError::NotInAnnulus { q, leak });
        }
        Ok((grad / inside).sqrt() / scale)
    }
}
