//! The flow matrix selecting gradient-flow, conservative, or mixed dynamics.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A d x d real matrix applied to the kernel gradient in the drift.
///
/// The admissible regime requires the symmetric part to be negative
/// semidefinite; construction does not enforce this so that the
/// admissibility checker can report violations, but simulation entry
/// points call [`FlowMatrix::validate_dissipative`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    entries: Array2<f64>,
}

impl FlowMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c || r == 0 {
            return Err(Error::Config(format!(
                "flow matrix must be square and nonempty, got {r}x{c}"
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow matrix entries".into()));
        }
        Ok(Self { entries })
    }

    /// Gradient-flow choice M = -I.
    pub fn neg_identity(d: usize) -> Self {
        Self {
            entries: Array2::from_diag_elem(d, -1.0),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            entries: Array2::from_diag_elem(d, 1.0),
        }
    }

    /// Canonical conservative choice: rotation generator in the (0, 1) plane,
    /// zero elsewhere. Antisymmetric for every d >= 2.
    pub fn rotation(d: usize) -> Self {
        let mut m = Array2::zeros((d, d));
        m[[0, 1]] = 1.0;
        m[[1, 0]] = -1.0;
        Self { entries: m }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    #[inline]
    pub fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        self.entries.dot(&v)
    }

    /// M v for a 3-vector without allocation; used in hot loops.
    #[inline]
    pub fn apply3(&self, v: [f64; 3]) -> [f64; 3] {
        debug_assert_eq!(self.dim(), 3);
        let m = &self.entries;
        [
            m[[0, 0]] * v[0] + m[[0, 1]] * v[1] + m[[0, 2]] * v[2],
            m[[1, 0]] * v[0] + m[[1, 1]] * v[1] + m[[1, 2]] * v[2],
            m[[2, 0]] * v[0] + m[[2, 1]] * v[1] + m[[2, 2]] * v[2],
        ]
    }

    pub fn is_antisymmetric(&self, tol: f64) -> bool {
        let m = &self.entries;
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| (m[[i, j]] + m[[j, i]]).abs() <= tol))
    }

    /// Eigenvalues of (M + M^T)/2, ascending.
    pub fn symmetric_part_eigenvalues(&self) -> Vec<f64> {
        let d = self.dim();
        let mut sym = nalgebra::DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                sym[(i, j)] = 0.5 * (self.entries[[i, j]] + self.entries[[j, i]]);
            }
        }
        let mut eig: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eig
    }

    /// Largest eigenvalue of the symmetric part; <= 0 means M xi . xi <= 0.
    pub fn max_symmetric_eigenvalue(&self) -> f64 {
        *self
            .symmetric_part_eigenvalues()
            .last()
            .expect("nonempty matrix")
    }

    pub fn validate_dissipative(&self) -> Result<()> {
        let lam = self.max_symmetric_eigenvalue();
        if lam > 1e-12 {
            return Err(Error::Config(format!(
                "flow matrix symmetric part has positive eigenvalue {lam:.3e}; M xi . xi <= 0 fails"
            )));
        }
        Ok(())
    }
}
