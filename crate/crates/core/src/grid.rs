//! Periodic-box discretization of densities, with the initial laws shared by
//! the particle sampler and the PDE solver.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Probability density sampled on an n^3 grid over the centered box
/// [-L/2, L/2)^3, grid point i -> -L/2 + i L/n.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridDensity {
    pub box_size: f64,
    pub n: usize,
    pub values: Array3<f64>,
    pub t: f64,
}

impl GridDensity {
    pub fn new(box_size: f64, n: usize, values: Array3<f64>, t: f64) -> Result<Self> {
        if !(box_size > 0.0) {
            return Err(Error::Config(format!("box size must be positive, got {box_size}")));
        }
        if !n.is_power_of_two() {
            return Err(Error::Config(format!("grid resolution must be a power of two, got {n}")));
        }
        if values.dim() != (n, n, n) {
            return Err(Error::Config(format!(
                "value array shape {:?} does not match n = {n}",
                values.dim()
            )));
        }
        Ok(Self { box_size, n, values, t })
    }

    /// Sample the law at the grid nodes and normalize to exact unit discrete
    /// mass.
    pub fn from_law(law: &InitialLaw, box_size: f64, n: usize) -> Result<Self> {
        law.validate()?;
        let values = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
            let x = [
                grid_coord(i, n, box_size),
                grid_coord(j, n, box_size),
                grid_coord(k, n, box_size),
            ];
            law.density(x)
        });
        let mut density = Self::new(box_size, n, values, 0.0)?;
        let mass = density.mass();
        if !(mass > 0.0) {
            return Err(Error::Domain(
                "initial law has no mass on the grid (zero support)".into(),
            ));
        }
        density.values.mapv_inplace(|v| v / mass);
        Ok(density)
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.box_size / self.n as f64
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        let h = self.h();
        h * h * h
    }

    pub fn coord(&self, i: usize) -> f64 {
        grid_coord(i, self.n, self.box_size)
    }

    pub fn mass(&self) -> f64 {
        self.values.sum() * self.cell_volume()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest |value| on the six boundary faces relative to the global max;
    /// monitors contamination of the periodic representation.
    pub fn boundary_contamination(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                for &face in &[
                    self.values[[0, i, j]],
                    self.values[[i, 0, j]],
                    self.values[[i, j, 0]],
                ] {
                    worst = worst.max(face.abs());
                }
            }
        }
        worst / self.max_value().abs().max(f64::MIN_POSITIVE)
    }

    /// Grid quadrature of the L^p norm; p = infinity gives the max norm.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if p < 1.0 {
            return Err(Error::Domain(format!("L^p norm requires p >= 1, got {p}")));
        }
        if p.is_infinite() {
            return Ok(self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        let sum: f64 = self.values.iter().map(|v| v.abs().powf(p)).sum();
        Ok((sum * self.cell_volume()).powf(1.0 / p))
    }

    /// Grid quadrature of int log(1 + |x|) mu(x) dx, |x| from the box center.
    pub fn log_moment(&self) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for i in 0..n {
            let x = self.coord(i);
            for j in 0..n {
                let y = self.coord(j);
                for k in 0..n {
                    let z = self.coord(k);
                    let r = (x * x + y * y + z * z).sqrt();
                    acc += (1.0 + r).ln() * self.values[[i, j, k]];
                }
            }
        }
        acc * self.cell_volume()
    }

    /// True when every component of x lies in [-L/2, L/2).
    pub fn contains(&self, x: [f64; 3]) -> bool {
        x.iter().all(|&c| (-0.5 * self.box_size..0.5 * self.box_size).contains(&c))
    }
}

#[inline]
pub fn grid_coord(i: usize, n: usize, box_size: f64) -> f64 {
    -0.5 * box_size + i as f64 * box_size / n as f64
}

/// Initial data shared between the particle system and the PDE.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum InitialLaw {
    /// Isotropic Gaussian centered at `center` with standard deviation `std`.
    Gaussian { center: [f64; 3], std: f64 },
    /// Convex combination of isotropic Gaussians.
    GaussianMixture { components: Vec<MixtureComponent> },
    /// Uniform distribution on a ball.
    UniformBall { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub center: [f64; 3],
    pub std: f64,
}

impl InitialLaw {
    pub fn standard() -> Self {
        InitialLaw::Gaussian { center: [0.0; 3], std: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::Gaussian { std, .. } if *std > 0.0 => Ok(()),
            InitialLaw::Gaussian { std, .. } => Err(Error::Config(format!(
                "Gaussian law requires positive std, got {std}"
            ))),
            InitialLaw::UniformBall { radius, .. } if *radius > 0.0 => Ok(()),
            InitialLaw::UniformBall { radius, .. } => Err(Error::Config(format!(
                "uniform ball requires positive radius, got {radius}"
            ))),
            InitialLaw::GaussianMixture { components } => {
                if components.is_empty()
                    || components.iter().any(|c| c.weight <= 0.0 || c.std <= 0.0)
                {
                    return Err(Error::Config(
                        "mixture needs nonempty components with positive weights and stds".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Unnormalized density (the grid constructor renormalizes; the particle
    /// sampler only needs ratios).
    pub fn density(&self, x: [f64; 3]) -> f64 {
        match self {
            InitialLaw::Gaussian { center, std } => gaussian3(x, *center, *std),
            InitialLaw::GaussianMixture { components } => components
                .iter()
                .map(|c| c.weight * gaussian3(x, c.center, c.std))
                .sum(),
            InitialLaw::UniformBall { center, radius } => {
                let r2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if r2 <= radius * radius {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn gaussian3(x: [f64; 3], center: [f64; 3], std: f64) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(&center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let norm = (2.0 * std::f64::consts::PI * std * std).powf(-1.5);
    norm * (-r2 / (2.0 * std * std)).exp()
}
