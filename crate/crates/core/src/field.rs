//! Discrete function spaces on a doubly periodic grid.
//!
//! Fields are stored as nodal values at `x_i = i * h_x`, `y_j = j * h_y`,
//! row-major with the x index slowest (`idx = i * ny + j`). Derivatives,
//! the Leray projection and the dealiased trilinear forms are evaluated in
//! Fourier space.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Uniform periodic grid with its FFT plans.
#[derive(Clone)]
pub struct Grid {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    dealias_fraction: f64,
    plans: Arc<Plans>,
}

struct Plans {
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("lx", &self.lx)
            .field("ly", &self.ly)
            .field("dealias_fraction", &self.dealias_fraction)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.lx == other.lx
            && self.ly == other.ly
            && self.dealias_fraction == other.dealias_fraction
    }
}

pub const DEFAULT_DEALIAS: f64 = 2.0 / 3.0;

impl Grid {
    /// Grid with the default 2/3-rule dealiasing.
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Arc<Grid>> {
        Self::with_dealias(nx, ny, lx, ly, DEFAULT_DEALIAS)
    }

    /// Square `n x n` grid on `[0, 2pi)^2`.
    pub fn square(n: usize) -> Result<Arc<Grid>> {
        Self::new(n, n, 2.0 * std::f64::consts::PI, 2.0 * std::f64::consts::PI)
    }

    pub fn with_dealias(
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
        dealias_fraction: f64,
    ) -> Result<Arc<Grid>> {
        if nx == 0 || ny == 0 || nx % 2 != 0 || ny % 2 != 0 {
            return Err(Error::Config(format!(
                "grid cell counts must be positive and even, got {nx} x {ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(Error::Config(format!("domain extents must be positive, got {lx} x {ly}")));
        }
        if !(dealias_fraction > 0.0 && dealias_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "dealias fraction must lie in (0, 1], got {dealias_fraction}"
            )));
        }
        let mut planner = FftPlanner::new();
        let plans = Plans {
            fwd_x: planner.plan_fft_forward(nx),
            inv_x: planner.plan_fft_inverse(nx),
            fwd_y: planner.plan_fft_forward(ny),
            inv_y: planner.plan_fft_inverse(ny),
        };
        Ok(Arc::new(Grid { nx, ny, lx, ly, dealias_fraction, plans: Arc::new(plans) }))
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn lx(&self) -> f64 {
        self.lx
    }
    pub fn ly(&self) -> f64 {
        self.ly
    }
    pub fn dealias_fraction(&self) -> f64 {
        self.dealias_fraction
    }
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }
    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }
    /// Quadrature weight of every node.
    pub fn weight(&self) -> f64 {
        self.hx() * self.hy()
    }
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.hx()
    }
    pub fn y(&self, j: usize) -> f64 {
        j as f64 * self.hy()
    }

    /// Signed integer wavenumber of FFT bin `i` out of `n` (Nyquist is negative).
    fn mode(i: usize, n: usize) -> i64 {
        if i < n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    }

    pub fn mode_x(&self, i: usize) -> i64 {
        Self::mode(i, self.nx)
    }
    pub fn mode_y(&self, j: usize) -> i64 {
        Self::mode(j, self.ny)
    }

    /// Wavenumber used for first derivatives in x; zero on the Nyquist bin.
    pub fn kx(&self, i: usize) -> f64 {
        if 2 * i == self.nx {
            0.0
        } else {
            2.0 * std::f64::consts::PI / self.lx * self.mode_x(i) as f64
        }
    }
    pub fn ky(&self, j: usize) -> f64 {
        if 2 * j == self.ny {
            0.0
        } else {
            2.0 * std::f64::consts::PI / self.ly * self.mode_y(j) as f64
        }
    }

    /// `|k|^2` of the Laplacian symbol (Nyquist bins included).
    pub fn k2(&self, i: usize, j: usize) -> f64 {
        let kx = 2.0 * std::f64::consts::PI / self.lx * self.mode_x(i) as f64;
        let ky = 2.0 * std::f64::consts::PI / self.ly * self.mode_y(j) as f64;
        kx * kx + ky * ky
    }

    /// Whether bin `(i, j)` survives the dealiasing filter.
    pub fn resolved(&self, i: usize, j: usize) -> bool {
        let cx = self.dealias_fraction * self.nx as f64 / 2.0;
        let cy = self.dealias_fraction * self.ny as f64 / 2.0;
        (self.mode_x(i).abs() as f64) < cx && (self.mode_y(j).abs() as f64) < cy
    }

    pub(crate) fn forward(&self, real: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft2(&mut data, false);
        data
    }

    pub(crate) fn inverse(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut data = spec.to_vec();
        self.fft2(&mut data, true);
        let scale = 1.0 / self.len() as f64;
        data.iter().map(|c| c.re * scale).collect()
    }

    fn fft2(&self, data: &mut [Complex64], inverse: bool) {
        let (nx, ny) = (self.nx, self.ny);
        let (along_y, along_x) = if inverse {
            (&self.plans.inv_y, &self.plans.inv_x)
        } else {
            (&self.plans.fwd_y, &self.plans.fwd_x)
        };
        along_y.process(data);
        let mut t = vec![Complex64::default(); nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                t[j * nx + i] = data[i * ny + j];
            }
        }
        along_x.process(&mut t);
        for j in 0..ny {
            for i in 0..nx {
                data[i * ny + j] = t[j * nx + i];
            }
        }
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Dimension(format!("grid mismatch: {self:?} vs {other:?}")))
        }
    }
}

/// Two-component velocity sampled on a [`Grid`].
#[derive(Clone, Debug)]
pub struct VelocityField {
    grid: Arc<Grid>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        let n = grid.len();
        VelocityField { grid: grid.clone(), u1: vec![0.0; n], u2: vec![0.0; n] }
    }

    pub fn from_components(grid: &Arc<Grid>, u1: Vec<f64>, u2: Vec<f64>) -> Result<Self> {
        if u1.len() != grid.len() || u2.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "field arrays of length {}/{} on a grid of {} nodes",
                u1.len(),
                u2.len(),
                grid.len()
            )));
        }
        Ok(VelocityField { grid: grid.clone(), u1, u2 })
    }

    /// Samples `f(x, y) -> (u1, u2)` at every node.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut out = Self::zeros(grid);
        for i in 0..grid.nx() {
            for j in 0..grid.ny() {
                let (a, b) = f(grid.x(i), grid.y(j));
                out.u1[i * grid.ny() + j] = a;
                out.u2[i * grid.ny() + j] = b;
            }
        }
        out
    }

    /// Random trigonometric polynomial with integer wavenumbers `|m| <= max_mode`
    /// in each direction and O(1) coefficients.
    pub fn random_band_limited<R: Rng + ?Sized>(
        grid: &Arc<Grid>,
        max_mode: i64,
        rng: &mut R,
    ) -> Self {
        let mut terms = Vec::new();
        for mx in -max_mode..=max_mode {
            for my in 0..=max_mode {
                if my == 0 && mx < 0 {
                    continue;
                }
                let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                terms.push((mx as f64, my as f64, c));
            }
        }
        let (kx0, ky0) = (2.0 * std::f64::consts::PI / grid.lx(), 2.0 * std::f64::consts::PI / grid.ly());
        Self::from_fn(grid, |x, y| {
            let (mut a, mut b) = (0.0, 0.0);
            for (mx, my, c) in &terms {
                let phase = mx * kx0 * x + my * ky0 * y;
                let (s, co) = phase.sin_cos();
                a += c[0] * co + c[1] * s;
                b += c[2] * co + c[3] * s;
            }
            (a, b)
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn norm_l2(&self) -> f64 {
        inner_l2_unchecked(self, self).sqrt()
    }

    /// Kinetic energy `0.5 * ||u||^2`.
    pub fn energy(&self) -> f64 {
        0.5 * inner_l2_unchecked(self, self)
    }

    pub fn scaled(&self, s: f64) -> Self {
        VelocityField {
            grid: self.grid.clone(),
            u1: self.u1.iter().map(|v| v * s).collect(),
            u2: self.u2.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &VelocityField) -> Result<()> {
        self.grid.check_same(&other.grid)?;
        for (a, b) in self.u1.iter_mut().zip(&other.u1) {
            *a += s * b;
        }
        for (a, b) in self.u2.iter_mut().zip(&other.u2) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &VelocityField) -> Result<VelocityField> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.u1.iter().chain(&self.u2).all(|v| v.is_finite())
    }

    /// Largest pointwise speed.
    pub fn max_speed(&self) -> f64 {
        self.u1
            .iter()
            .zip(&self.u2)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max)
    }

    /// Spectral divergence.
    pub fn divergence(&self) -> ScalarField {
        let g = &self.grid;
        let s = Spectrum::of(self);
        let mut d = vec![Complex64::default(); g.len()];
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                let idx = i * g.ny() + j;
                d[idx] = Complex64::i() * (g.kx(i) * s.c1[idx] + g.ky(j) * s.c2[idx]);
            }
        }
        ScalarField { grid: g.clone(), p: g.inverse(&d) }
    }

    /// Copy with every unresolved Fourier mode removed.
    pub fn dealiased(&self) -> VelocityField {
        let mut s = Spectrum::of(self);
        s.dealias();
        s.to_field()
    }

    /// Trigonometric interpolation onto another grid over the same box.
    /// Modes representable on both grids are kept (Nyquist bins dropped).
    pub fn resample(&self, target: &Arc<Grid>) -> Result<VelocityField> {
        let src = &self.grid;
        if (src.lx() - target.lx()).abs() > 1e-12 * src.lx() || (src.ly() - target.ly()).abs() > 1e-12 * src.ly() {
            return Err(Error::Dimension("resampling requires equal domain extents".into()));
        }
        let s = Spectrum::of(self);
        let mut out = Spectrum::zeros(target);
        let mx = src.nx().min(target.nx()) as i64 / 2;
        let my = src.ny().min(target.ny()) as i64 / 2;
        let scale = target.len() as f64 / src.len() as f64;
        let wrap = |m: i64, n: usize| if m < 0 { (m + n as i64) as usize } else { m as usize };
        for a in -mx + 1..mx {
            for b in -my + 1..my {
                let from = wrap(a, src.nx()) * src.ny() + wrap(b, src.ny());
                let to = wrap(a, target.nx()) * target.ny() + wrap(b, target.ny());
                out.c1[to] = s.c1[from] * scale;
                out.c2[to] = s.c2[from] * scale;
            }
        }
        Ok(out.to_field())
    }
}

/// Scalar (pressure-like) field; [`ScalarField::zero_mean`] removes the mean.
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Arc<Grid>,
    pub p: Vec<f64>,
}

impl ScalarField {
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut p = vec![0.0; grid.len()];
        for i in 0..grid.nx() {
            for j in 0..grid.ny() {
                p[i * grid.ny() + j] = f(grid.x(i), grid.y(j));
            }
        }
        ScalarField { grid: grid.clone(), p }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn mean(&self) -> f64 {
        self.p.iter().sum::<f64>() / self.p.len() as f64
    }

    pub fn zero_mean(mut self) -> Self {
        let m = self.mean();
        self.p.iter_mut().for_each(|v| *v -= m);
        self
    }

    pub fn norm_l2(&self) -> f64 {
        (self.grid.weight() * self.p.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    /// Spectral gradient, returned as a vector field.
    pub fn gradient(&self) -> VelocityField {
        let g = &self.grid;
        let s = g.forward(&self.p);
        let mut dx = vec![Complex64::default(); g.len()];
        let mut dy = vec![Complex64::default(); g.len()];
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                let idx = i * g.ny() + j;
                dx[idx] = Complex64::i() * g.kx(i) * s[idx];
                dy[idx] = Complex64::i() * g.ky(j) * s[idx];
            }
        }
        VelocityField { grid: g.clone(), u1: g.inverse(&dx), u2: g.inverse(&dy) }
    }
}

/// Fourier coefficients of both velocity components.
#[derive(Clone, Debug)]
pub(crate) struct Spectrum {
    pub grid: Arc<Grid>,
    pub c1: Vec<Complex64>,
    pub c2: Vec<Complex64>,
}

impl Spectrum {
    pub fn of(u: &VelocityField) -> Self {
        Spectrum { grid: u.grid.clone(), c1: u.grid.forward(&u.u1), c2: u.grid.forward(&u.u2) }
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        let n = grid.len();
        Spectrum { grid: grid.clone(), c1: vec![Complex64::default(); n], c2: vec![Complex64::default(); n] }
    }

    pub fn to_field(&self) -> VelocityField {
        VelocityField {
            grid: self.grid.clone(),
            u1: self.grid.inverse(&self.c1),
            u2: self.grid.inverse(&self.c2),
        }
    }

    pub fn dealias(&mut self) {
        let g = self.grid.clone();
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                if !g.resolved(i, j) {
                    let idx = i * g.ny() + j;
                    self.c1[idx] = Complex64::default();
                    self.c2[idx] = Complex64::default();
                }
            }
        }
    }

    pub fn leray(&mut self) {
        let g = self.grid.clone();
        for i in 0..g.nx() {
            let kx = g.kx(i);
            for j in 0..g.ny() {
                let ky = g.ky(j);
                let k2 = kx * kx + ky * ky;
                if k2 == 0.0 {
                    continue;
                }
                let idx = i * g.ny() + j;
                let kdotu = (self.c1[idx] * kx + self.c2[idx] * ky) / k2;
                self.c1[idx] -= kdotu * kx;
                self.c2[idx] -= kdotu * ky;
            }
        }
    }

    /// Physical-space gradient `[[du1/dx, du1/dy], [du2/dx, du2/dy]]`.
    pub fn gradient(&self) -> [[Vec<f64>; 2]; 2] {
        let g = &self.grid;
        let n = g.len();
        let mut d = [
            vec![Complex64::default(); n],
            vec![Complex64::default(); n],
            vec![Complex64::default(); n],
            vec![Complex64::default(); n],
        ];
        for i in 0..g.nx() {
            let ikx = Complex64::new(0.0, g.kx(i));
            for j in 0..g.ny() {
                let iky = Complex64::new(0.0, g.ky(j));
                let idx = i * g.ny() + j;
                d[0][idx] = ikx * self.c1[idx];
                d[1][idx] = iky * self.c1[idx];
                d[2][idx] = ikx * self.c2[idx];
                d[3][idx] = iky * self.c2[idx];
            }
        }
        let [a, b, c, e] = d.map(|s| g.inverse(&s));
        [[a, b], [c, e]]
    }
}

/// Velocity gradient tensor `d u_a / d x_b`, stored as `d[a][b]`.
#[derive(Clone, Debug)]
pub struct VelocityGradient {
    grid: Arc<Grid>,
    pub d: [[Vec<f64>; 2]; 2],
}

impl VelocityGradient {
    /// `||grad u||^2 = sum_ab ||d u_a / d x_b||^2`.
    pub fn norm_sq(&self) -> f64 {
        self.grid.weight()
            * self.d.iter().flatten().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
    }

    pub fn inner(&self, other: &VelocityGradient) -> f64 {
        let mut s = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                s += self.d[a][b].iter().zip(&other.d[a][b]).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        s * self.grid.weight()
    }
}

fn inner_l2_unchecked(a: &VelocityField, b: &VelocityField) -> f64 {
    let s1: f64 = a.u1.iter().zip(&b.u1).map(|(x, y)| x * y).sum();
    let s2: f64 = a.u2.iter().zip(&b.u2).map(|(x, y)| x * y).sum();
    (s1 + s2) * a.grid.weight()
}

/// Discrete `L^2` inner product `(a, b)`.
pub fn inner_l2(a: &VelocityField, b: &VelocityField) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    Ok(inner_l2_unchecked(a, b))
}

/// Spectrally exact gradient.
pub fn gradient(a: &VelocityField) -> VelocityGradient {
    VelocityGradient { grid: a.grid.clone(), d: Spectrum::of(a).gradient() }
}

/// `L^2`-orthogonal projection onto discretely divergence-free fields.
pub fn leray_project(a: &VelocityField) -> VelocityField {
    let mut s = Spectrum::of(a);
    s.leray();
    s.to_field()
}

/// A field prepared for repeated trilinear evaluations: dealiased nodal
/// values plus their dealiased gradient.
#[derive(Clone, Debug)]
pub struct Resolved {
    grid: Arc<Grid>,
    pub u: [Vec<f64>; 2],
    pub grad: [[Vec<f64>; 2]; 2],
}

impl Resolved {
    pub fn new(a: &VelocityField) -> Self {
        let mut s = Spectrum::of(a);
        s.dealias();
        let grad = s.gradient();
        let f = s.to_field();
        Resolved { grid: a.grid.clone(), u: [f.u1, f.u2], grad }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Nodal values of `w . grad u` where `w = self`.
    pub fn advect(&self, u: &Resolved) -> [Vec<f64>; 2] {
        let n = self.grid.len();
        let mut out = [vec![0.0; n], vec![0.0; n]];
        for (a, o) in out.iter_mut().enumerate() {
            for (k, ok) in o.iter_mut().enumerate() {
                *ok = self.u[0][k] * u.grad[a][0][k] + self.u[1][k] * u.grad[a][1][k];
            }
        }
        out
    }

    /// Quadrature of a nodal vector against this field.
    pub fn dot(&self, p: &[Vec<f64>; 2]) -> f64 {
        let s: f64 = (0..2)
            .map(|a| p[a].iter().zip(&self.u[a]).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        s * self.grid.weight()
    }

    /// `b(w, u, v) = (w . grad u, v)` with `w = self`.
    pub fn b(&self, u: &Resolved, v: &Resolved) -> f64 {
        v.dot(&self.advect(u))
    }

    /// `b*(w, u, v) = (b(w, u, v) - b(w, v, u)) / 2` with `w = self`.
    pub fn b_star(&self, u: &Resolved, v: &Resolved) -> f64 {
        0.5 * self.b(u, v) - 0.5 * self.b(v, u)
    }
}

fn check3(w: &VelocityField, u: &VelocityField, v: &VelocityField) -> Result<()> {
    w.grid.check_same(&u.grid)?;
    w.grid.check_same(&v.grid)
}

/// Dealiased convective trilinear form `b(w, u, v) = (w . grad u, v)`.
pub fn b_form(w: &VelocityField, u: &VelocityField, v: &VelocityField) -> Result<f64> {
    check3(w, u, v)?;
    Ok(Resolved::new(w).b(&Resolved::new(u), &Resolved::new(v)))
}

/// Explicitly skew-symmetrised trilinear form.
pub fn b_star(w: &VelocityField, u: &VelocityField, v: &VelocityField) -> Result<f64> {
    check3(w, u, v)?;
    Ok(Resolved::new(w).b_star(&Resolved::new(u), &Resolved::new(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn resampling_is_exact_for_band_limited_fields() {
        let coarse = Grid::square(16).unwrap();
        let fine = Grid::square(48).unwrap();
        let f = |x: f64, y: f64| ((3.0 * x).sin() * (2.0 * y).cos(), (x - 5.0 * y).cos());
        let up = VelocityField::from_fn(&coarse, f).resample(&fine).unwrap();
        let want = VelocityField::from_fn(&fine, f);
        assert!(up.sub(&want).unwrap().norm_l2() < 1e-12);
        let down = want.resample(&coarse).unwrap();
        assert!(down.sub(&VelocityField::from_fn(&coarse, f)).unwrap().norm_l2() < 1e-12);
        let other = Grid::new(16, 16, 1.0, 1.0).unwrap();
        assert!(matches!(up.resample(&other), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(15, 16, 1.0, 1.0).is_err());
        assert!(Grid::new(16, 16, 0.0, 1.0).is_err());
        assert!(Grid::with_dealias(16, 16, 1.0, 1.0, 0.0).is_err());
        let g = Grid::square(16).unwrap();
        assert_eq!(g.dealias_fraction(), 2.0 / 3.0);
        assert!((g.weight() - g.hx() * g.hy()).abs() < 1e-15);
    }

    #[test]
    fn sine_norm_matches_closed_form() {
        let g = Grid::square(32).unwrap();
        let u = VelocityField::from_fn(&g, |x, _| (x.sin(), 0.0));
        // int_0^{2pi} int_0^{2pi} sin^2 x dx dy = 2 pi^2
        let v = inner_l2(&u, &u).unwrap();
        assert!((v - 2.0 * PI * PI).abs() < 1e-10);
        // quadrature oracle on a finer midpoint rule agrees
        let n = 2000;
        let h = 2.0 * PI / n as f64;
        let mid: f64 = (0..n).map(|i| ((i as f64 + 0.5) * h).sin().powi(2)).sum::<f64>() * h * 2.0 * PI;
        assert!((mid - v).abs() < 1e-9);
    }

    #[test]
    fn inner_product_is_symmetric_and_rejects_mismatch() {
        let g = Grid::square(16).unwrap();
        let a = VelocityField::random_band_limited(&g, 4, &mut rng(1));
        let b = VelocityField::random_band_limited(&g, 4, &mut rng(2));
        let z = VelocityField::zeros(&g);
        assert_eq!(inner_l2(&z, &a).unwrap(), 0.0);
        assert!((inner_l2(&a, &b).unwrap() - inner_l2(&b, &a).unwrap()).abs() < 1e-12);
        assert!(inner_l2(&a, &a).unwrap() > 0.0);
        let other = Grid::square(32).unwrap();
        assert!(matches!(inner_l2(&a, &VelocityField::zeros(&other)), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_of_constant_and_sine() {
        let g = Grid::square(32).unwrap();
        let c = VelocityField::from_fn(&g, |_, _| (3.0, -1.5));
        let gc = gradient(&c);
        assert!(gc.d.iter().flatten().flatten().all(|v| v.abs() < 1e-12));
        let s = VelocityField::from_fn(&g, |x, _| (x.sin(), 0.0));
        let gs = gradient(&s);
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                let idx = i * g.ny() + j;
                assert!((gs.d[0][0][idx] - g.x(i).cos()).abs() < 1e-12);
                assert!(gs.d[0][1][idx].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_agrees_with_centered_differences_at_second_order() {
        // The spectral derivative is exact; centred differences of the same
        // nodal data converge to it at O(h^2).
        let mut errs = Vec::new();
        let mut hs = Vec::new();
        for n in [32usize, 64, 128] {
            let g = Grid::square(n).unwrap();
            let u = VelocityField::random_band_limited(&g, 3, &mut rng(7));
            let gu = gradient(&u);
            let mut err = 0.0f64;
            for i in 0..n {
                let (ip, im) = ((i + 1) % n, (i + n - 1) % n);
                for j in 0..n {
                    let fd = (u.u1[ip * n + j] - u.u1[im * n + j]) / (2.0 * g.hx());
                    err = err.max((fd - gu.d[0][0][i * n + j]).abs());
                }
            }
            errs.push(err);
            hs.push(g.hx());
        }
        let rate1 = (errs[0] / errs[1]).ln() / (hs[0] / hs[1]).ln();
        let rate2 = (errs[1] / errs[2]).ln() / (hs[1] / hs[2]).ln();
        assert!(rate1 >= 1.9 && rate2 >= 1.9, "rates {rate1} {rate2}");
    }

    #[test]
    fn leray_projection_properties() {
        let g = Grid::square(32).unwrap();
        let a = VelocityField::random_band_limited(&g, 5, &mut rng(3));
        let p = leray_project(&a);
        let div = p.divergence().norm_l2();
        assert!(div <= 1e-10 * gradient(&a).norm_sq().sqrt(), "div {div}");
        let pp = leray_project(&p);
        assert!(pp.sub(&p).unwrap().norm_l2() < 1e-12);
        assert!(p.norm_l2() <= a.norm_l2() + 1e-12);

        let chi = ScalarField::from_fn(&g, |x, y| (2.0 * x).sin() * y.cos() + (x - y).cos());
        let grad = chi.gradient();
        assert!(leray_project(&grad).norm_l2() < 1e-12);
        // orthogonal to gradients
        assert!(inner_l2(&p, &grad).unwrap().abs() < 1e-11);
    }

    #[test]
    fn b_form_basic_identities() {
        let g = Grid::square(32).unwrap();
        let w = VelocityField::random_band_limited(&g, 4, &mut rng(4));
        let v = VelocityField::random_band_limited(&g, 4, &mut rng(5));
        let u = VelocityField::random_band_limited(&g, 4, &mut rng(6));
        let c = VelocityField::from_fn(&g, |_, _| (1.0, 2.0));
        assert!(b_form(&w, &c, &v).unwrap().abs() < 1e-12);
        let b1 = b_form(&w, &u, &v).unwrap();
        let b2 = b_form(&w.scaled(2.5), &u, &v).unwrap();
        assert!((b2 - 2.5 * b1).abs() < 1e-12 * b1.abs().max(1.0));
    }

    #[test]
    fn b_form_matches_nested_loop_quadrature() {
        // Analytic band-limited fields with |m| <= 1: the integrand has
        // |m| <= 3, so a plain nodal sum on 16^2 integrates it exactly.
        let g = Grid::square(16).unwrap();
        let w = |x: f64, y: f64| (x.cos() + 0.5 * y.sin(), (x + y).sin());
        let u = |x: f64, y: f64| (x.sin() * y.cos(), 0.3 * (x - y).cos());
        let du = |x: f64, y: f64| {
            [
                [x.cos() * y.cos(), -x.sin() * y.sin()],
                [-0.3 * (x - y).sin(), 0.3 * (x - y).sin()],
            ]
        };
        let v = |x: f64, y: f64| (y.cos() - 0.2, x.sin() + (2.0 * y).cos());
        let mut oracle = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                let (x, y) = (g.x(i), g.y(j));
                let (w1, w2) = w(x, y);
                let d = du(x, y);
                let (v1, v2) = v(x, y);
                oracle += (w1 * d[0][0] + w2 * d[0][1]) * v1 + (w1 * d[1][0] + w2 * d[1][1]) * v2;
            }
        }
        oracle *= g.weight();
        let got = b_form(
            &VelocityField::from_fn(&g, w),
            &VelocityField::from_fn(&g, u),
            &VelocityField::from_fn(&g, v),
        )
        .unwrap();
        assert!((got - oracle).abs() <= 1e-10 * oracle.abs(), "{got} vs {oracle}");
    }

    #[test]
    fn b_star_is_skew() {
        let g = Grid::square(32).unwrap();
        let w = VelocityField::random_band_limited(&g, 6, &mut rng(8));
        let u = VelocityField::random_band_limited(&g, 6, &mut rng(9));
        let v = VelocityField::random_band_limited(&g, 6, &mut rng(10));
        let scale = w.norm_l2() * gradient(&v).norm_sq();
        assert!(b_star(&w, &v, &v).unwrap().abs() <= 1e-12 * scale);
        let a = b_star(&w, &u, &v).unwrap();
        let b = b_star(&w, &v, &u).unwrap();
        assert!((a + b).abs() < 1e-12 * a.abs().max(1.0));
        let via_b = 0.5 * b_form(&w, &u, &v).unwrap() - 0.5 * b_form(&w, &v, &u).unwrap();
        assert!((a - via_b).abs() <= 1e-13 * a.abs().max(1.0));
    }

    #[test]
    fn trilinear_forms_reject_mismatched_grids() {
        let g = Grid::square(16).unwrap();
        let h = Grid::square(32).unwrap();
        let a = VelocityField::zeros(&g);
        let b = VelocityField::zeros(&h);
        assert!(b_form(&a, &a, &b).is_err());
        assert!(b_star(&a, &b, &a).is_err());
    }
}
