use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;

/// Processing stage a loading set has reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Rotated,
    Smoothed,
    Shrunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationKind {
    Orthogonal,
    Oblique,
}

/// `K` spatial loadings stored as the columns of an `n_active x K` matrix.
#[derive(Debug, Clone)]
pub struct LoadingSet {
    pub grid: SpatialGrid,
    pub matrix: DMatrix<f64>,
    pub stage: Stage,
    pub kind: Option<RotationKind>,
    /// Orthonormal `R` or oblique `T` (rotated loadings are `L R` or `L T^{-1}`).
    pub transform: Option<DMatrix<f64>>,
    /// Factor covariance implied by the rotation (`T T^T`; identity if orthogonal).
    pub phi: Option<DMatrix<f64>>,
}

impl LoadingSet {
    pub fn new(grid: SpatialGrid, matrix: DMatrix<f64>, stage: Stage) -> Result<Self> {
        if matrix.nrows() != grid.n_active() {
            return Err(Error::Shape(format!(
                "loadings have {} rows for {} active voxels",
                matrix.nrows(),
                grid.n_active()
            )));
        }
        Ok(Self {
            grid,
            matrix,
            stage,
            kind: None,
            transform: None,
            phi: None,
        })
    }

    pub fn n_components(&self) -> usize {
        self.matrix.ncols()
    }

    /// Same metadata, new values and stage.
    pub fn with_matrix(&self, matrix: DMatrix<f64>, stage: Stage) -> Self {
        Self {
            grid: self.grid.clone(),
            matrix,
            stage,
            kind: self.kind,
            transform: self.transform.clone(),
            phi: self.phi.clone(),
        }
    }

    /// Implied global covariance: `L Phi L^T` (or `L L^T` without a factor covariance).
    pub fn global_covariance(&self) -> DMatrix<f64> {
        match &self.phi {
            Some(phi) => &self.matrix * phi * self.matrix.transpose(),
            None => &self.matrix * self.matrix.transpose(),
        }
    }

    /// Factor-covariance-free loadings whose outer product equals the global covariance.
    /// For oblique sets this reverts the rotation (`L* T`).
    pub fn orthogonalized(&self) -> DMatrix<f64> {
        match (self.kind, &self.transform) {
            (Some(RotationKind::Oblique), Some(t)) => &self.matrix * t,
            _ => self.matrix.clone(),
        }
    }
}
