//! Translation-invariant operators on periodic lattices.
//!
//! On a torus with constant coefficients `E` is diagonal in the plane-wave
//! basis with symbol
//!
//! ```text
//! λ(θ) = Σ_j g^{jj} [4 sin²(θ_j/2)/a_j² + A_j² cos²(θ_j/2)] + c
//! ```
//!
//! and every function of `E` is a convolution whose column is obtained with
//! one multidimensional FFT.

use crate::background::{BackgroundGeometry, GeometryKind, LatticeSpace, SiteField};
use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct HomogeneousTorus {
    pub dim: usize,
    pub n: usize,
    pub spacing: Vec<f64>,
    pub metric_diag: Vec<f64>,
    pub a: Vec<f64>,
    pub c: f64,
    pub mu: f64,
}

impl HomogeneousTorus {
    pub fn new(geometry: &BackgroundGeometry, lattice: &LatticeSpace) -> Result<Self> {
        if geometry.kind != GeometryKind::FlatTorus {
            return Err(Error::Unsupported("spectral methods need a torus".into()));
        }
        let (a, c) = match (&geometry.covector_a, &geometry.scalar_c) {
            (SiteField::Constant(a), SiteField::Constant(c)) => (a.clone(), *c),
            _ => return Err(Error::Unsupported("spectral methods need constant A and c".into())),
        };
        Ok(HomogeneousTorus {
            dim: lattice.dim,
            n: lattice.sites_per_axis,
            spacing: lattice.spacing.clone(),
            metric_diag: lattice.metric_diag.clone(),
            a,
            c,
            mu: lattice.volume_weight[0],
        })
    }

    /// Same lattice with a different constant `c`.
    pub fn with_c(&self, c: f64) -> Self {
        HomogeneousTorus { c, ..self.clone() }
    }

    pub fn site_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    fn mode(&self, idx: usize) -> Vec<usize> {
        let mut k = vec![0; self.dim];
        let mut r = idx;
        for j in (0..self.dim).rev() {
            k[j] = r % self.n;
            r /= self.n;
        }
        k
    }

    /// Symbol of `E` at the integer mode vector `k`.
    pub fn symbol(&self, k: &[usize]) -> f64 {
        let mut s = self.c;
        for j in 0..self.dim {
            let th = 2.0 * PI * k[j] as f64 / self.n as f64;
            let sh = (0.5 * th).sin();
            let ch = (0.5 * th).cos();
            let aj = self.spacing[j];
            s += (4.0 * sh * sh / (aj * aj) + self.a[j] * self.a[j] * ch * ch) / self.metric_diag[j];
        }
        s
    }

    /// All eigenvalues of `E`, indexed like sites.
    pub fn eigenvalues(&self) -> Vec<f64> {
        (0..self.site_count()).map(|i| self.symbol(&self.mode(i))).collect()
    }

    fn check_invertible(&self, ev: &[f64]) -> Result<()> {
        let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::Singular { eigenvalue: min });
        }
        Ok(())
    }

    /// Column `x ↦ F(x, 0)` of the kernel of `h(E)` with respect to `μ`,
    /// where `h` is applied to the symbol.
    pub fn kernel_column(&self, h: impl Fn(f64) -> f64) -> Vec<f64> {
        let n_total = self.site_count();
        let mut data: Vec<Complex<f64>> =
            self.eigenvalues().into_iter().map(|l| Complex::new(h(l), 0.0)).collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_inverse(self.n);
        // stride through each axis
        let mut line = vec![Complex::new(0.0, 0.0); self.n];
        for axis in 0..self.dim {
            let stride = self.n.pow((self.dim - 1 - axis) as u32);
            for base in 0..n_total {
                if (base / stride) % self.n != 0 {
                    continue;
                }
                for t in 0..self.n {
                    line[t] = data[base + t * stride];
                }
                fft.process(&mut line);
                for t in 0..self.n {
                    data[base + t * stride] = line[t];
                }
            }
        }
        let norm = 1.0 / (n_total as f64 * self.mu);
        data.into_iter().map(|z| z.re * norm).collect()
    }

    /// Column of the exact Green kernel `G(x, 0)`.
    pub fn green_column(&self) -> Result<Vec<f64>> {
        self.check_invertible(&self.eigenvalues())?;
        Ok(self.kernel_column(|l| 1.0 / l))
    }

    /// `dG/dc` column, `-G M G`.
    pub fn green_column_dc(&self) -> Result<Vec<f64>> {
        self.check_invertible(&self.eigenvalues())?;
        Ok(self.kernel_column(|l| -1.0 / (l * l)))
    }

    /// `G(x, x)` as a plain spectral sum.
    pub fn green_diagonal(&self) -> Result<f64> {
        let ev = self.eigenvalues();
        self.check_invertible(&ev)?;
        let s: f64 = ev.iter().map(|l| 1.0 / l).sum();
        Ok(s / (ev.len() as f64 * self.mu))
    }

    /// Integer offset of site index `i` relative to the origin, minimal image.
    pub fn offset_of(&self, i: usize) -> Vec<i64> {
        let n = self.n as i64;
        self.mode(i)
            .into_iter()
            .map(|c| {
                let c = c as i64;
                if c > n / 2 {
                    c - n
                } else {
                    c
                }
            })
            .collect()
    }

    /// Site index of an integer offset.
    pub fn index_of(&self, off: &[i64]) -> usize {
        let n = self.n as i64;
        off.iter().fold(0usize, |acc, &d| acc * self.n + d.rem_euclid(n) as usize)
    }

    pub fn sigma_of_offset(&self, off: &[i64]) -> f64 {
        0.5 * off
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                let x = d as f64 * self.spacing[j];
                self.metric_diag[j] * x * x
            })
            .sum::<f64>()
    }
}
