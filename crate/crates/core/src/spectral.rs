//! FFT machinery: 3-d transforms, torus symbol fields, zero-padded free-space
//! convolution with analytically averaged singular cells, and periodic cubic
//! B-spline interpolation of grid fields.
//!
//! Two kernel representations coexist. The torus representation samples the
//! whole-space Fourier symbol on lattice frequencies (zero mode zeroed); it is
//! exact for periodic data but inherits periodization offsets of the slowly
//! decaying kernels. The free-space representation convolves with the true
//! kernel on a doubled grid (Hockney padding); it reproduces direct real-space
//! quadrature to machine precision and is what the modulated-energy module
//! uses throughout.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array3, Axis, Zip};
use num_complex::Complex64;
use once_cell::sync::Lazy;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::potentials::{KernelKind, PotentialSpec};
use crate::util::gauss_legendre;

/// Signed lattice frequency index for mode i of an n-point axis.
#[inline]
pub fn signed_index(i: usize, n: usize) -> i64 {
    if i < n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Lattice frequency in cycles per unit length.
#[inline]
pub fn frequency(i: usize, n: usize, box_size: f64) -> f64 {
    signed_index(i, n) as f64 / box_size
}

/// Planned forward/inverse transforms for one cube size. Inverse is
/// unnormalized: inverse(forward(x)) = n^3 x.
pub struct Fft3 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft3 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft(n, FftDirection::Forward),
            inverse: planner.plan_fft(n, FftDirection::Inverse),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn forward(&self, data: &mut Array3<Complex64>) {
        self.transform(data, &self.forward);
    }

    pub fn inverse(&self, data: &mut Array3<Complex64>) {
        self.transform(data, &self.inverse);
    }

    fn transform(&self, data: &mut Array3<Complex64>, fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        debug_assert_eq!(data.dim(), (n, n, n));
        for axis in 0..3 {
            let fft = fft.clone();
            Zip::from(data.lanes_mut(Axis(axis))).par_for_each(|mut lane| {
                let mut buf: Vec<Complex64> = lane.iter().copied().collect();
                fft.process(&mut buf);
                for (dst, src) in lane.iter_mut().zip(&buf) {
                    *dst = *src;
                }
            });
        }
    }
}

static FFT_PLANS: Lazy<Mutex<HashMap<usize, Arc<Fft3>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

pub fn fft3(n: usize) -> Arc<Fft3> {
    let mut map = FFT_PLANS.lock().unwrap();
    map.entry(n).or_insert_with(|| Arc::new(Fft3::new(n))).clone()
}

/// Which kernel-derived field a convolution uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelField {
    /// g itself
    Value,
    /// component of grad g
    Grad(usize),
    /// Delta g
    Laplacian,
}

/// Whole-space Fourier symbol of g sampled on the lattice, zero mode zeroed.
pub fn torus_symbol_field(spec: &PotentialSpec, n: usize, box_size: f64) -> Array3<f64> {
    let mut out = Array3::zeros((n, n, n));
    let c = spec.fourier_constant();
    let p = spec.s - spec.d as f64;
    for i in 0..n {
        let fi = frequency(i, n, box_size);
        for j in 0..n {
            let fj = frequency(j, n, box_size);
            for k in 0..n {
                let fk = frequency(k, n, box_size);
                let k2 = fi * fi + fj * fj + fk * fk;
                if k2 > 0.0 {
                    out[[i, j, k]] = c * k2.sqrt().powf(p);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// singular-cell averages
// ---------------------------------------------------------------------------

/// Mean of |w|^{-p} over the unit cube [-1/2, 1/2]^3, 0 < p < 3.
/// The cube is split into the 26 boxes around the concentric half cube, each
/// integrated by Gauss-Legendre, and the half-cube contribution follows from
/// self-similarity: I = J / (1 - 2^{p-3}).
pub fn unit_cube_riesz_mean(p: f64) -> f64 {
    assert!(p > 0.0 && p < 3.0, "exponent {p} outside (0, 3)");
    let j = shell_integral(|r2| r2.powf(-p / 2.0));
    j / (1.0 - 2f64.powf(p - 3.0))
}

/// Mean of -ln|w| over the unit cube: I_L = (8 J_L + ln 2) / 7 with J_L the
/// shell integral of -ln|w|.
pub fn unit_cube_log_mean() -> f64 {
    let j = shell_integral(|r2| -0.5 * r2.ln());
    (8.0 * j + std::f64::consts::LN_2) / 7.0
}

/// Integral of f(|w|^2) over the shell [-1/2,1/2]^3 minus [-1/4,1/4]^3.
fn shell_integral(f: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_legendre(24);
    let edges = [(-0.5, -0.25), (-0.25, 0.25), (0.25, 0.5)];
    let mut total = 0.0;
    for (bi, &(ax, bx)) in edges.iter().enumerate() {
        for (bj, &(ay, by)) in edges.iter().enumerate() {
            for (bk, &(az, bz)) in edges.iter().enumerate() {
                if bi == 1 && bj == 1 && bk == 1 {
                    continue;
                }
                let mut acc = 0.0;
                for (&x, &wx) in nodes.iter().zip(&weights) {
                    let px = 0.5 * (bx - ax) * x + 0.5 * (bx + ax);
                    for (&y, &wy) in nodes.iter().zip(&weights) {
                        let py = 0.5 * (by - ay) * y + 0.5 * (by + ay);
                        for (&z, &wz) in nodes.iter().zip(&weights) {
                            let pz = 0.5 * (bz - az) * z + 0.5 * (bz + az);
                            acc += wx * wy * wz * f(px * px + py * py + pz * pz);
                        }
                    }
                }
                total += acc * 0.125 * (bx - ax) * (by - ay) * (bz - az);
            }
        }
    }
    total
}

/// Analytic mean of the kernel field over the singular grid cell of side h.
/// Gradient components average to zero by oddness.
pub fn singular_cell_mean(spec: &PotentialSpec, field: KernelField, h: f64) -> f64 {
    let d = spec.d as f64;
    match (field, spec.kind) {
        (KernelField::Grad(_), _) => 0.0,
        (KernelField::Value, KernelKind::Riesz) => unit_cube_riesz_mean(spec.s) * h.powf(-spec.s),
        (KernelField::Value, KernelKind::Log) => -h.ln() + unit_cube_log_mean(),
        (KernelField::Laplacian, KernelKind::Riesz) => {
            -spec.s * (d - spec.s - 2.0) * unit_cube_riesz_mean(spec.s + 2.0) * h.powf(-spec.s - 2.0)
        }
        (KernelField::Laplacian, KernelKind::Log) => {
            -(d - 2.0) * unit_cube_riesz_mean(2.0) / (h * h)
        }
    }
}

// ---------------------------------------------------------------------------
// free-space convolution on the doubled grid
// ---------------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq, Hash)]
struct KernelKey {
    kind: KernelKind,
    s_bits: u64,
    n: usize,
    box_bits: u64,
    field: KernelField,
}

static KERNEL_SPECTRA: Lazy<Mutex<HashMap<KernelKey, Arc<Array3<Complex64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// DFT of the true kernel sampled on the doubled (2n)^3 grid, with the
/// singular sample replaced by the analytic cell average. Cached per
/// (kernel, field, n, L).
pub fn padded_kernel_spectrum(
    spec: &PotentialSpec,
    n: usize,
    box_size: f64,
    field: KernelField,
) -> Arc<Array3<Complex64>> {
    let key = KernelKey {
        kind: spec.kind,
        s_bits: spec.s.to_bits(),
        n,
        box_bits: box_size.to_bits(),
        field,
    };
    if let Some(hit) = KERNEL_SPECTRA.lock().unwrap().get(&key) {
        return hit.clone();
    }
    let m = 2 * n;
    let h = box_size / n as f64;
    let mut table = Array3::<Complex64>::zeros((m, m, m));
    let center = singular_cell_mean(spec, field, h);
    Zip::indexed(&mut table).par_for_each(|(i, j, k), v| {
        let x = signed_index(i, m) as f64 * h;
        let y = signed_index(j, m) as f64 * h;
        let z = signed_index(k, m) as f64 * h;
        let r2 = x * x + y * y + z * z;
        let val = if r2 == 0.0 {
            center
        } else {
            let r = r2.sqrt();
            match field {
                KernelField::Value => spec.value_unchecked(r),
                KernelField::Grad(c) => spec.gradient_factor(r) * [x, y, z][c],
                KernelField::Laplacian => spec.laplacian_unchecked(r),
            }
        };
        *v = Complex64::new(val, 0.0);
    });
    let fft = fft3(m);
    fft.forward(&mut table);
    let arc = Arc::new(table);
    KERNEL_SPECTRA.lock().unwrap().insert(key, arc.clone());
    arc
}

/// Free-space discrete convolution (K * f)(x_g) = h^3 sum_j K(x_g - y_j) f_j
/// for all grid points, via Hockney zero-padding. Equal to the direct double
/// sum with the same kernel samples, up to FFT roundoff.
pub struct FreeSpaceConv {
    spec: PotentialSpec,
    n: usize,
    box_size: f64,
    fft: Arc<Fft3>,
}

impl FreeSpaceConv {
    pub fn new(spec: PotentialSpec, n: usize, box_size: f64) -> Self {
        Self {
            spec,
            n,
            box_size,
            fft: fft3(2 * n),
        }
    }

    pub fn h(&self) -> f64 {
        self.box_size / self.n as f64
    }

    /// Forward transform of the zero-padded density; reusable across fields.
    pub fn padded_spectrum(&self, values: &Array3<f64>) -> Array3<Complex64> {
        let n = self.n;
        let m = 2 * n;
        assert_eq!(values.dim(), (n, n, n));
        let mut padded = Array3::<Complex64>::zeros((m, m, m));
        padded
            .slice_mut(ndarray::s![..n, ..n, ..n])
            .zip_mut_with(values, |dst, src| *dst = Complex64::new(*src, 0.0));
        self.fft.forward(&mut padded);
        padded
    }

    /// Convolve a single kernel field against a precomputed padded spectrum.
    pub fn convolve_spectrum(
        &self,
        field: KernelField,
        spectrum: &Array3<Complex64>,
    ) -> Array3<f64> {
        let kernel = padded_kernel_spectrum(&self.spec, self.n, self.box_size, field);
        let mut prod = spectrum.clone();
        Zip::from(&mut prod).and(&*kernel).par_for_each(|p, k| *p *= k);
        self.finish(prod)
    }

    /// Accumulate sum_c K_c * f_c in the spectral domain, one inverse pass.
    /// Used for divergence-like combinations such as sum_a d_a g * (v_a f).
    pub fn convolve_sum(
        &self,
        fields: &[KernelField],
        spectra: &[Array3<Complex64>],
    ) -> Array3<f64> {
        assert_eq!(fields.len(), spectra.len());
        let m = 2 * self.n;
        let mut acc = Array3::<Complex64>::zeros((m, m, m));
        for (field, sp) in fields.iter().zip(spectra) {
            let kernel = padded_kernel_spectrum(&self.spec, self.n, self.box_size, *field);
            Zip::from(&mut acc)
                .and(sp)
                .and(&*kernel)
                .par_for_each(|a, s, k| *a += s * k);
        }
        self.finish(acc)
    }

    pub fn convolve(&self, field: KernelField, values: &Array3<f64>) -> Array3<f64> {
        let spectrum = self.padded_spectrum(values);
        self.convolve_spectrum(field, &spectrum)
    }

    fn finish(&self, mut prod: Array3<Complex64>) -> Array3<f64> {
        let n = self.n;
        let m = 2 * n;
        self.fft.inverse(&mut prod);
        let scale = self.h().powi(3) / (m * m * m) as f64;
        let mut out = Array3::zeros((n, n, n));
        out.zip_mut_with(&prod.slice(ndarray::s![..n, ..n, ..n]), |dst, src| {
            *dst = src.re * scale
        });
        out
    }
}

// ---------------------------------------------------------------------------
// periodic cubic B-spline interpolation
// ---------------------------------------------------------------------------

/// Cubic B-spline basis on [-2, 2].
#[inline]
fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Periodic interpolating cubic spline over a grid field. The prefilter
/// divides by the transfer function of B-spline sampling, (4 + 2 cos)/6 per
/// axis, so the spline interpolates the samples exactly and reproduces
/// cubics.
pub struct SplineField3 {
    coeffs: Array3<f64>,
    n: usize,
    box_size: f64,
}

impl SplineField3 {
    pub fn from_values(values: &Array3<f64>, box_size: f64) -> Self {
        let n = values.dim().0;
        assert_eq!(values.dim(), (n, n, n));
        let fft = fft3(n);
        let mut spec: Array3<Complex64> = values.mapv(|v| Complex64::new(v, 0.0));
        fft.forward(&mut spec);
        let transfer: Vec<f64> = (0..n)
            .map(|i| (4.0 + 2.0 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) / 6.0)
            .collect();
        Zip::indexed(&mut spec).par_for_each(|(i, j, k), v| {
            *v /= transfer[i] * transfer[j] * transfer[k];
        });
        fft.inverse(&mut spec);
        let scale = 1.0 / (n * n * n) as f64;
        Self {
            coeffs: spec.mapv(|c| c.re * scale),
            n,
            box_size,
        }
    }

    /// Evaluate at a point in box coordinates (components in [-L/2, L/2));
    /// the field wraps periodically.
    pub fn eval(&self, x: [f64; 3]) -> f64 {
        let n = self.n;
        let h = self.box_size / n as f64;
        let mut base = [0usize; 3];
        let mut w = [[0.0f64; 4]; 3];
        for a in 0..3 {
            let p = (x[a] + 0.5 * self.box_size) / h;
            let i0 = p.floor();
            let u = p - i0;
            base[a] = (i0 as i64).rem_euclid(n as i64) as usize;
            w[a] = [
                bspline3(u + 1.0),
                bspline3(u),
                bspline3(u - 1.0),
                bspline3(u - 2.0),
            ];
        }
        let mut acc = 0.0;
        for (di, &wx) in w[0].iter().enumerate() {
            let i = (base[0] + n + di - 1) % n;
            for (dj, &wy) in w[1].iter().enumerate() {
                let j = (base[1] + n + dj - 1) % n;
                let wxy = wx * wy;
                for (dk, &wz) in w[2].iter().enumerate() {
                    let k = (base[2] + n + dk - 1) % n;
                    acc += wxy * wz * self.coeffs[[i, j, k]];
                }
            }
        }
        acc
    }
}

/// Trilinear interpolation with periodic wrap, in box coordinates. Exact on
/// locally multilinear data; used for user-supplied vector fields.
pub fn trilinear(values: &Array3<f64>, box_size: f64, x: [f64; 3]) -> f64 {
    let n = values.dim().0;
    let h = box_size / n as f64;
    let mut i0 = [0usize; 3];
    let mut fr = [0.0f64; 3];
    for a in 0..3 {
        let p = (x[a] + 0.5 * box_size) / h;
        let f = p.floor();
        fr[a] = p - f;
        i0[a] = (f as i64).rem_euclid(n as i64) as usize;
    }
    let i1 = [(i0[0] + 1) % n, (i0[1] + 1) % n, (i0[2] + 1) % n];
    let mut acc = 0.0;
    for (ci, ii) in [(1.0 - fr[0], i0[0]), (fr[0], i1[0])] {
        for (cj, jj) in [(1.0 - fr[1], i0[1]), (fr[1], i1[1])] {
            for (ck, kk) in [(1.0 - fr[2], i0[2]), (fr[2], i1[2])] {
                acc += ci * cj * ck * values[[ii, jj, kk]];
            }
        }
    }
    acc
}
