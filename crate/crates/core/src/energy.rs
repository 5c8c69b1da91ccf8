//! The modulated energy F_N(x, mu) with diagonal excision, its truncated
//! variant, the smeared negative-Sobolev surrogate, balancing of the
//! lower-bound error terms, and the Laplacian/commutator terms of the
//! stochastic differential inequality satisfied by F_N.
//!
//! All density-coupled terms use free-space kernel convolutions (doubled-grid
//! FFT of the true kernel, singular cell replaced by its analytic mean), so
//! spectral and direct-quadrature routes agree to roundoff. Fields are
//! evaluated at particles by periodic cubic B-spline interpolation;
//! user-supplied vector fields by trilinear interpolation, which reproduces
//! linear data exactly.

use ndarray::{Array3, ArrayView2, Zip};
use num_complex::Complex64;
use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};

use crate::grid::GridDensity;
use crate::potentials::{bump_chi, KernelKind, PotentialSpec, SmearingRadius, TruncationParams};
use crate::spectral::{
    fft3, frequency, singular_cell_mean, trilinear, FreeSpaceConv, KernelField, SplineField3,
};
use crate::util::{gauss_legendre, KahanSum};
use crate::{Error, Result};

/// The three components of F_N; they sum to the total exactly as computed.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub total: f64,
    pub particle_particle: f64,
    pub cross: f64,
    pub mu_mu: f64,
}

/// F_N and its three components, with the smearing diagnostics attached.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModulatedEnergyReport {
    pub total: f64,
    pub particle_particle: f64,
    pub cross: f64,
    pub mu_mu: f64,
    pub eta_used: f64,
    pub sobolev_surrogate: f64,
    pub lower_bound_terms: LowerBoundTerms,
}

/// Error magnitudes of the smearing lower bounds at a given eta, normalized
/// per particle. `local` carries the three terms of the near-origin bound;
/// `global` the two terms of the globally-superharmonic bound with its
/// exponents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LowerBoundTerms {
    pub eta: f64,
    pub local_smearing: f64,
    pub local_self_interaction: f64,
    pub local_density: f64,
    pub global_gamma: f64,
    pub global_lambda: f64,
    pub global_density: f64,
    pub global_self_interaction: f64,
}

impl LowerBoundTerms {
    pub fn local_sum(&self) -> f64 {
        self.local_smearing + self.local_self_interaction + self.local_density
    }

    pub fn global_sum(&self) -> f64 {
        self.global_density + self.global_self_interaction
    }
}

/// How the smearing radius is balanced against N.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EtaMode {
    /// eta = N^{-1/(s+2)}: balances eta^2 against eta^{-s}/N.
    Local,
    /// eta = (||mu||_inf N)^{-1/d}, subject to the admissibility cap of the
    /// globally-superharmonic bound with the configured exponent p
    /// (p = infinity is allowed).
    Global { p: f64 },
}

/// Balanced smearing radius for the given particle count.
pub fn eta_balanced(
    n_particles: usize,
    spec: &PotentialSpec,
    mu_inf: f64,
    mode: EtaMode,
) -> Result<f64> {
    if n_particles == 0 {
        return Err(Error::Domain("eta balancing needs at least one particle".into()));
    }
    let n = n_particles as f64;
    let d = spec.d as f64;
    match mode {
        EtaMode::Local => Ok(n.powf(-1.0 / (spec.s + 2.0))),
        EtaMode::Global { p } => {
            if !(mu_inf > 0.0) {
                return Err(Error::Domain(format!(
                    "global balancing needs mu_inf > 0, got {mu_inf}"
                )));
            }
            if !(p > d / (spec.s + 2.0)) {
                return Err(Error::Domain(format!(
                    "global balancing needs p > d/(s+2) = {}, got {p}",
                    d / (spec.s + 2.0)
                )));
            }
            let eta = (mu_inf * n).powf(-1.0 / d);
            let exponent = if p.is_infinite() {
                (d + 2.0) / d
            } else {
                (d * p - d + 2.0 * p) / (d * (p - 1.0))
            };
            let cap = 2f64.powf(-exponent) * mu_inf.powf(-1.0 / d);
            if eta >= cap {
                let min_n = 2f64.powf(exponent * d).floor() as usize + 1;
                return Err(Error::Domain(format!(
                    "eta = {eta:.6e} violates the cap {cap:.6e}; N >= {min_n} required"
                )));
            }
            Ok(eta)
        }
    }
}

/// The exponents of the globally-superharmonic lower bound,
/// gamma = (2p + sp - s)/(dp + 2p - d), lambda = 2p(d - s)/(dp + 2p - d).
pub fn global_bound_exponents(spec: &PotentialSpec, p: f64) -> (f64, f64) {
    let d = spec.d as f64;
    let s = spec.s;
    if p.is_infinite() {
        ((2.0 + s) / (d + 2.0), 2.0 * (d - s) / (d + 2.0))
    } else {
        let denom = d * p + 2.0 * p - d;
        ((2.0 * p + s * p - s) / denom, 2.0 * p * (d - s) / denom)
    }
}

/// Normalized error magnitudes of the two smearing lower bounds at eta.
pub fn me_lower_bound_terms(
    n_particles: usize,
    spec: &PotentialSpec,
    mu_inf: f64,
    eta: f64,
    p: f64,
) -> LowerBoundTerms {
    let n = n_particles as f64;
    let d = spec.d as f64;
    let s = spec.s;
    let log_eta = if spec.kind == KernelKind::Log { eta.ln().abs() } else { 0.0 };
    let log_coul = if (s - (d - 2.0)).abs() < 1e-12 { eta.ln().abs() } else { 0.0 };
    let (gamma, lambda) = global_bound_exponents(spec, p);
    let log_mu = if spec.kind == KernelKind::Log { mu_inf.ln().abs() } else { 0.0 };
    LowerBoundTerms {
        eta,
        local_smearing: eta * eta,
        local_self_interaction: eta.powf(-s) * (1.0 + log_eta) / n,
        local_density: mu_inf * eta.powf(d - s) * (1.0 + log_eta + log_coul),
        global_gamma: gamma,
        global_lambda: lambda,
        global_density: mu_inf.powf(gamma) * eta.powf(lambda) * (1.0 + log_eta + log_mu),
        global_self_interaction: eta.powf(-s) * (1.0 + log_eta) / n,
    }
}

/// Fourier transform of the uniform probability measure on the unit sphere
/// in d = 3: S(z) = sin(z)/z.
#[inline]
pub fn sphere_transform(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - z * z / 6.0
    } else {
        z.sin() / z
    }
}

/// Precomputed density-coupled fields for repeated evaluations against one
/// snapshot: phi = g * mu, its quadrature against mu, and (lazily) the
/// Laplacian-kernel analogue.
pub struct EnergyContext {
    pub spec: PotentialSpec,
    pub mu: GridDensity,
    pub mu_inf: f64,
    conv: FreeSpaceConv,
    phi_spline: SplineField3,
    mu_mu: f64,
    psi: OnceCell<(SplineField3, f64)>,
}

impl EnergyContext {
    pub fn new(spec: &PotentialSpec, mu: &GridDensity) -> Result<Self> {
        spec.validate()?;
        if spec.d != 3 {
            return Err(Error::Config(
                "grid-coupled energy operations are specialized to d = 3".into(),
            ));
        }
        let conv = FreeSpaceConv::new(*spec, mu.n, mu.box_size);
        let phi = conv.convolve(KernelField::Value, &mu.values);
        let mu_mu = quadrature(&phi, &mu.values, mu.cell_volume());
        let phi_spline = SplineField3::from_values(&phi, mu.box_size);
        Ok(Self {
            spec: *spec,
            mu: mu.clone(),
            mu_inf: mu.lp_norm(f64::INFINITY)?,
            conv,
            phi_spline,
            mu_mu,
            psi: OnceCell::new(),
        })
    }

    fn psi(&self) -> &(SplineField3, f64) {
        self.psi.get_or_init(|| {
            let psi = self.conv.convolve(KernelField::Laplacian, &self.mu.values);
            let psi_mu = quadrature(&psi, &self.mu.values, self.mu.cell_volume());
            (SplineField3::from_values(&psi, self.mu.box_size), psi_mu)
        })
    }

    fn check_positions(&self, positions: ArrayView2<'_, f64>) -> Result<()> {
        if positions.ncols() != 3 {
            return Err(Error::Config("positions must be N x 3".into()));
        }
        for row in positions.rows() {
            if !self.mu.contains([row[0], row[1], row[2]]) {
                return Err(Error::Domain(format!(
                    "particle at ({}, {}, {}) lies outside the box [-{}/2, {}/2)^3",
                    row[0], row[1], row[2], self.mu.box_size, self.mu.box_size
                )));
            }
        }
        if positions.nrows() > 1 {
            let min = crate::sde::min_pairwise_distance(positions);
            if min == 0.0 {
                return Err(Error::Domain("coincident particles".into()));
            }
        }
        Ok(())
    }

    /// The three terms of F_N without the smearing diagnostics; this is the
    /// hot path of the ensemble studies.
    pub fn modulated_energy_terms(&self, positions: ArrayView2<'_, f64>) -> Result<EnergyTerms> {
        self.check_positions(positions)?;
        let n = positions.nrows();
        let pp = pair_sum(positions, |r| self.spec.value_unchecked(r)) / (n * n) as f64;
        let mut cross_acc = KahanSum::new();
        for row in positions.rows() {
            cross_acc.add(self.phi_spline.eval([row[0], row[1], row[2]]));
        }
        let cross = -2.0 * cross_acc.value() / n as f64;
        Ok(EnergyTerms {
            total: pp + cross + self.mu_mu,
            particle_particle: pp,
            cross,
            mu_mu: self.mu_mu,
        })
    }

    /// F_N(x, mu) with the default locally balanced smearing radius.
    pub fn modulated_energy(&self, positions: ArrayView2<'_, f64>) -> Result<ModulatedEnergyReport> {
        let eta = eta_balanced(positions.nrows(), &self.spec, self.mu_inf, EtaMode::Local)?;
        self.modulated_energy_with_eta(positions, eta)
    }

    pub fn modulated_energy_with_eta(
        &self,
        positions: ArrayView2<'_, f64>,
        eta: f64,
    ) -> Result<ModulatedEnergyReport> {
        let terms = self.modulated_energy_terms(positions)?;
        let n = positions.nrows();
        let etas = vec![eta; n];
        let sobolev = self.smeared_sobolev(positions, &etas)?;
        Ok(ModulatedEnergyReport {
            total: terms.total,
            particle_particle: terms.particle_particle,
            cross: terms.cross,
            mu_mu: terms.mu_mu,
            eta_used: eta,
            sobolev_surrogate: sobolev,
            lower_bound_terms: me_lower_bound_terms(
                n,
                &self.spec,
                self.mu_inf,
                eta,
                f64::INFINITY,
            ),
        })
    }

    /// Same three-term structure with the truncated kernel g_(eps).
    pub fn truncated_modulated_energy(
        &self,
        positions: ArrayView2<'_, f64>,
        trunc: &TruncationParams,
    ) -> Result<f64> {
        self.check_positions(positions)?;
        let n = positions.nrows();
        let pp = pair_sum(positions, |r| self.spec.truncated_value(trunc, r)) / (n * n) as f64;
        // g_(eps) = g - g chi(. / eps): the correction kernel is supported in
        // |z| <= eps, so phi_eps = phi - (g chi_eps) * mu via one extra
        // convolution with the compactly supported correction kernel.
        let corr = self.truncation_correction_field(trunc)?;
        let corr_spline = SplineField3::from_values(&corr, self.mu.box_size);
        let mut cross_acc = KahanSum::new();
        for row in positions.rows() {
            let x = [row[0], row[1], row[2]];
            cross_acc.add(self.phi_spline.eval(x) - corr_spline.eval(x));
        }
        let cross = -2.0 * cross_acc.value() / n as f64;
        let mu_mu = self.mu_mu - quadrature(&corr, &self.mu.values, self.mu.cell_volume());
        Ok(pp + cross + mu_mu)
    }

    /// (g chi(. / eps)) * mu on the grid.
    fn truncation_correction_field(&self, trunc: &TruncationParams) -> Result<Array3<f64>> {
        let n = self.mu.n;
        let h = self.mu.h();
        let eps = trunc.epsilon;
        let m = 2 * n;
        let mut table = Array3::<Complex64>::zeros((m, m, m));
        let center = truncation_correction_cell_mean(&self.spec, eps, h);
        Zip::indexed(&mut table).par_for_each(|(i, j, k), v| {
            let x = crate::spectral::signed_index(i, m) as f64 * h;
            let y = crate::spectral::signed_index(j, m) as f64 * h;
            let z = crate::spectral::signed_index(k, m) as f64 * h;
            let r2 = x * x + y * y + z * z;
            let val = if r2 == 0.0 {
                center
            } else {
                let r = r2.sqrt();
                if r >= eps {
                    0.0
                } else {
                    self.spec.value_unchecked(r) * bump_chi(r / eps)
                }
            };
            *v = Complex64::new(val, 0.0);
        });
        let fft = fft3(m);
        fft.forward(&mut table);
        let mut padded = Array3::<Complex64>::zeros((m, m, m));
        padded
            .slice_mut(ndarray::s![..n, ..n, ..n])
            .zip_mut_with(&self.mu.values, |dst, src| *dst = Complex64::new(*src, 0.0));
        fft.forward(&mut padded);
        Zip::from(&mut padded).and(&table).par_for_each(|p, k| *p *= k);
        fft.inverse(&mut padded);
        let scale = h * h * h / (m * m * m) as f64;
        let mut out = Array3::zeros((n, n, n));
        out.zip_mut_with(&padded.slice(ndarray::s![..n, ..n, ..n]), |dst, src| {
            *dst = src.re * scale
        });
        Ok(out)
    }

    /// Fourier-side quadrature of the smeared negative-Sobolev surrogate:
    /// (1/L^3) sum_{k != 0} ghat(xi_k) |nuhat(xi_k)|^2 over the n^3 lattice,
    /// nuhat(xi) = (1/N) sum_i e^{-2 pi i xi . x_i} S(2 pi eta_i |xi|) - muhat(xi).
    pub fn smeared_sobolev(
        &self,
        positions: ArrayView2<'_, f64>,
        etas: &[f64],
    ) -> Result<f64> {
        let n_p = positions.nrows();
        if etas.len() != n_p {
            return Err(Error::Config(format!(
                "{} smearing radii for {} particles",
                etas.len(),
                n_p
            )));
        }
        for &eta in etas {
            SmearingRadius(eta).validated()?;
        }
        let n = self.mu.n;
        let box_size = self.mu.box_size;
        let fft = fft3(n);
        let mut muhat: Array3<Complex64> = self.mu.values.mapv(|v| Complex64::new(v, 0.0));
        fft.forward(&mut muhat);
        // the DFT indexes nodes from the box corner while the atom phases use
        // centered coordinates; the half-box shift is (-1)^{i+j+k} per mode
        Zip::indexed(&mut muhat).par_for_each(|(i, j, k), v| {
            if (i + j + k) % 2 == 1 {
                *v = -*v;
            }
        });
        let h3 = self.mu.cell_volume();
        // per-particle, per-axis phase tables e^{-2 pi i f_j x_a}
        let phases: Vec<[Vec<Complex64>; 3]> = (0..n_p)
            .map(|i| {
                let mut t: [Vec<Complex64>; 3] =
                    [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
                for (axis, tv) in t.iter_mut().enumerate() {
                    for j in 0..n {
                        let f = frequency(j, n, box_size);
                        let arg = -2.0 * std::f64::consts::PI * f * positions[[i, axis]];
                        tv.push(Complex64::new(arg.cos(), arg.sin()));
                    }
                }
                t
            })
            .collect();
        let uniform_eta = etas.windows(2).all(|w| w[0] == w[1]);
        let c = self.spec.fourier_constant();
        let power = self.spec.s - self.spec.d as f64;
        // parallel over leading-index slabs; each slab sums serially and the
        // slab results reduce in index order, so the value is thread-count
        // independent
        use rayon::prelude::*;
        let indices: Vec<usize> = (0..n).collect();
        let chunks: Vec<&[usize]> = indices.chunks(1).collect();
        let slabs: Vec<f64> = chunks
            .par_iter()
            .map(|chunk| {
                let mut acc = KahanSum::new();
                for &i in chunk.iter() {
                    let fi = frequency(i, n, box_size);
                    for j in 0..n {
                        let fj = frequency(j, n, box_size);
                        for k in 0..n {
                            let fk = frequency(k, n, box_size);
                            let k2 = fi * fi + fj * fj + fk * fk;
                            if k2 == 0.0 {
                                continue;
                            }
                            let kmag = k2.sqrt();
                            let ghat = c * kmag.powf(power);
                            let mut atoms = Complex64::new(0.0, 0.0);
                            if uniform_eta {
                                for t in &phases {
                                    atoms += t[0][i] * t[1][j] * t[2][k];
                                }
                                atoms *= sphere_transform(
                                    2.0 * std::f64::consts::PI * etas[0] * kmag,
                                ) / n_p as f64;
                            } else {
                                for (pi, t) in phases.iter().enumerate() {
                                    atoms += t[0][i]
                                        * t[1][j]
                                        * t[2][k]
                                        * sphere_transform(
                                            2.0 * std::f64::consts::PI * etas[pi] * kmag,
                                        );
                                }
                                atoms /= n_p as f64;
                            }
                            let nu = atoms - muhat[[i, j, k]] * h3;
                            acc.add(ghat * nu.norm_sqr());
                        }
                    }
                }
                acc.value()
            })
            .collect();
        // deterministic reduction in slab order
        let mut total = KahanSum::new();
        for s in slabs {
            total.add(s);
        }
        Ok(total.value() / box_size.powi(3))
    }

    /// The Laplacian interaction of the difference measure:
    /// integral of Delta g(x - y) against (mu_N - mu)^{x2} off the diagonal.
    pub fn laplacian_interaction(&self, positions: ArrayView2<'_, f64>) -> Result<f64> {
        self.check_positions(positions)?;
        let n = positions.nrows();
        let pp = pair_sum(positions, |r| self.spec.laplacian_unchecked(r)) / (n * n) as f64;
        let (psi_spline, psi_mu) = self.psi();
        let mut cross_acc = KahanSum::new();
        for row in positions.rows() {
            cross_acc.add(psi_spline.eval([row[0], row[1], row[2]]));
        }
        Ok(pp - 2.0 * cross_acc.value() / n as f64 + *psi_mu)
    }

    /// Precompute the commutator fields for a vector field v given on the
    /// grid, reusable across particle configurations.
    pub fn commutator_fields(&self, v: &[Array3<f64>; 3]) -> Result<CommutatorFields> {
        let n = self.mu.n;
        for c in v {
            if c.dim() != (n, n, n) {
                return Err(Error::Config("vector field shape mismatch".into()));
            }
        }
        let h = self.mu.h();
        let spectrum_mu = self.conv.padded_spectrum(&self.mu.values);
        let grads = [
            self.conv.convolve_spectrum(KernelField::Grad(0), &spectrum_mu),
            self.conv.convolve_spectrum(KernelField::Grad(1), &spectrum_mu),
            self.conv.convolve_spectrum(KernelField::Grad(2), &spectrum_mu),
        ];
        let spectra: Vec<Array3<Complex64>> = (0..3)
            .map(|a| {
                let mut prod = Array3::zeros((n, n, n));
                Zip::from(&mut prod).and(&v[a]).and(&self.mu.values).par_for_each(
                    |dst, &vv, &mv| *dst = vv * mv,
                );
                self.conv.padded_spectrum(&prod)
            })
            .collect();
        let w = self.conv.convolve_sum(
            &[KernelField::Grad(0), KernelField::Grad(1), KernelField::Grad(2)],
            &spectra,
        );
        // diagonal-cell compensation: the continuum integrand
        // (v(x) - v(y)) . grad g has cell mean (div v / 3) <r g'> over the
        // singular cell; <r g'> = -s <g> for Riesz and exactly -1 for log
        let rgprime_mean = match self.spec.kind {
            KernelKind::Riesz => {
                -self.spec.s * singular_cell_mean(&self.spec, KernelField::Value, h)
            }
            KernelKind::Log => -1.0,
        };
        let div_v = divergence_fd(v, h);
        let mut q = Array3::zeros((n, n, n));
        Zip::from(&mut q)
            .and(&v[0])
            .and(&grads[0])
            .par_for_each(|dst, &vv, &gg| *dst = vv * gg);
        Zip::from(&mut q)
            .and(&v[1])
            .and(&grads[1])
            .par_for_each(|dst, &vv, &gg| *dst += vv * gg);
        Zip::from(&mut q)
            .and(&v[2])
            .and(&grads[2])
            .par_for_each(|dst, &vv, &gg| *dst += vv * gg);
        Zip::from(&mut q)
            .and(&w)
            .and(&div_v)
            .and(&self.mu.values)
            .par_for_each(|dst, &ww, &dv, &mv| {
                *dst += -ww + mv * h * h * h * (dv / 3.0) * rgprime_mean;
            });
        let q_mu = quadrature(&q, &self.mu.values, self.mu.cell_volume());
        Ok(CommutatorFields {
            v: v.clone(),
            q_spline: SplineField3::from_values(&q, self.mu.box_size),
            q_mu,
            box_size: self.mu.box_size,
        })
    }

    /// The renormalized commutator
    /// integral of (v(x) - v(y)) . grad g(x - y) against (mu_N - mu)^{x2}
    /// off the diagonal.
    pub fn commutator_integral(
        &self,
        positions: ArrayView2<'_, f64>,
        fields: &CommutatorFields,
    ) -> Result<f64> {
        self.check_positions(positions)?;
        let n = positions.nrows();
        // particle-particle: v at particles by trilinear interpolation
        let vp: Vec<[f64; 3]> = positions
            .rows()
            .into_iter()
            .map(|row| {
                let x = [row[0], row[1], row[2]];
                [
                    trilinear(&fields.v[0], fields.box_size, x),
                    trilinear(&fields.v[1], fields.box_size, x),
                    trilinear(&fields.v[2], fields.box_size, x),
                ]
            })
            .collect();
        let mut pp_acc = KahanSum::new();
        for i in 0..n {
            let xi = [positions[[i, 0]], positions[[i, 1]], positions[[i, 2]]];
            for j in (i + 1)..n {
                let dx = [
                    xi[0] - positions[[j, 0]],
                    xi[1] - positions[[j, 1]],
                    xi[2] - positions[[j, 2]],
                ];
                let r = (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
                let factor = self.spec.gradient_factor(r);
                let dv = [vp[i][0] - vp[j][0], vp[i][1] - vp[j][1], vp[i][2] - vp[j][2]];
                // ordered pairs (i,j) and (j,i) contribute equally
                pp_acc.add(
                    2.0 * factor * (dv[0] * dx[0] + dv[1] * dx[1] + dv[2] * dx[2]),
                );
            }
        }
        let pp = pp_acc.value() / (n * n) as f64;
        let mut cross_acc = KahanSum::new();
        for row in positions.rows() {
            cross_acc.add(fields.q_spline.eval([row[0], row[1], row[2]]));
        }
        let cross = -2.0 * cross_acc.value() / n as f64;
        Ok(pp + cross + fields.q_mu)
    }
}

/// Precomputed grid fields for one vector field v.
pub struct CommutatorFields {
    v: [Array3<f64>; 3],
    q_spline: SplineField3,
    q_mu: f64,
    box_size: f64,
}

/// The coordinate field v(x) = x sampled on the grid.
pub fn identity_field(n: usize, box_size: f64) -> [Array3<f64>; 3] {
    let coord = |i: usize| crate::grid::grid_coord(i, n, box_size);
    [
        Array3::from_shape_fn((n, n, n), |(i, _, _)| coord(i)),
        Array3::from_shape_fn((n, n, n), |(_, j, _)| coord(j)),
        Array3::from_shape_fn((n, n, n), |(_, _, k)| coord(k)),
    ]
}

/// Centered-difference divergence with periodic wrap.
fn divergence_fd(v: &[Array3<f64>; 3], h: f64) -> Array3<f64> {
    let n = v[0].dim().0;
    let mut out = Array3::zeros((n, n, n));
    Zip::indexed(&mut out).par_for_each(|(i, j, k), dst| {
        let ip = (i + 1) % n;
        let im = (i + n - 1) % n;
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        let kp = (k + 1) % n;
        let km = (k + n - 1) % n;
        *dst = (v[0][[ip, j, k]] - v[0][[im, j, k]]
            + v[1][[i, jp, k]] - v[1][[i, jm, k]]
            + v[2][[i, j, kp]] - v[2][[i, j, km]])
            / (2.0 * h);
    });
    out
}

/// Cell mean of g chi(./eps) over the singular cell. Exact for eps <= h/2
/// (support inside the cell) and for eps >= sqrt(3) h (chi = 1 on the cell);
/// the narrow band in between uses the clamped radial formula.
fn truncation_correction_cell_mean(spec: &PotentialSpec, eps: f64, h: f64) -> f64 {
    if eps >= 3f64.sqrt() * h {
        return singular_cell_mean(spec, KernelField::Value, h);
    }
    let (nodes, weights) = gauss_legendre(64);
    let rmax = eps.min(3f64.sqrt() * 0.5 * h);
    let mut acc = 0.0;
    for (&x, &w) in nodes.iter().zip(&weights) {
        let r = 0.5 * rmax * (x + 1.0);
        acc += w * 0.5 * rmax * r * r * spec.value_unchecked(r.max(1e-300)) * bump_chi(r / eps);
    }
    4.0 * std::f64::consts::PI * acc / (h * h * h)
}

fn quadrature(field: &Array3<f64>, mu: &Array3<f64>, cell_volume: f64) -> f64 {
    let mut acc = KahanSum::new();
    Zip::from(field).and(mu).for_each(|f, m| acc.add(f * m));
    acc.value() * cell_volume
}

/// (1/?) sum over ordered pairs i != j of f(|x_i - x_j|); returns the raw sum
/// (caller divides by N^2).
fn pair_sum(positions: ArrayView2<'_, f64>, f: impl Fn(f64) -> f64) -> f64 {
    let n = positions.nrows();
    let mut acc = KahanSum::new();
    for i in 0..n {
        let xi = [positions[[i, 0]], positions[[i, 1]], positions[[i, 2]]];
        for j in (i + 1)..n {
            let dx = [
                xi[0] - positions[[j, 0]],
                xi[1] - positions[[j, 1]],
                xi[2] - positions[[j, 2]],
            ];
            let r = (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
            acc.add(2.0 * f(r));
        }
    }
    acc.value()
}
