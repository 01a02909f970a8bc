//! Discretized spatial domain: a regular partition of the unit cube with an
//! optional voxel mask. Active voxels are packed in lexicographic order of
//! their multi-indices (first dimension slowest).

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    dims: Vec<usize>,
    mask: Option<Vec<bool>>,
    active: Vec<usize>,
    strides: Vec<usize>,
}

impl SpatialGrid {
    /// Unmasked grid with the given resolution per dimension.
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        Self::build(dims, None)
    }

    /// Grid restricted to voxels where `mask` is true (row-major over `dims`).
    pub fn with_mask(dims: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        Self::build(dims, Some(mask))
    }

    /// Square grid of side `m` keeping only a centered `h`-by-`h` window.
    pub fn centered_square(m: usize, h: usize) -> Result<Self> {
        if h == 0 || h > m {
            return Err(invalid(format!("window height {h} must lie in 1..={m}")));
        }
        let lo = (m - h) / 2;
        let hi = lo + h;
        let mask = (0..m * m)
            .map(|idx| {
                let (r, c) = (idx / m, idx % m);
                (lo..hi).contains(&r) && (lo..hi).contains(&c)
            })
            .collect();
        Self::with_mask(vec![m, m], mask)
    }

    fn build(dims: Vec<usize>, mask: Option<Vec<bool>>) -> Result<Self> {
        if dims.is_empty() {
            return Err(invalid("grid needs at least one dimension"));
        }
        if let Some(&d) = dims.iter().find(|&&d| d < 2) {
            return Err(invalid(format!("grid dimension {d} is smaller than 2")));
        }
        let full: usize = dims.iter().product();
        let mut strides = vec![1; dims.len()];
        for d in (0..dims.len() - 1).rev() {
            strides[d] = strides[d + 1] * dims[d + 1];
        }
        let active: Vec<usize> = match &mask {
            Some(m) => {
                if m.len() != full {
                    return Err(invalid(format!(
                        "mask has {} entries but grid has {full} voxels",
                        m.len()
                    )));
                }
                (0..full).filter(|&i| m[i]).collect()
            }
            None => (0..full).collect(),
        };
        if active.is_empty() {
            return Err(invalid("mask excludes every voxel"));
        }
        Ok(Self {
            dims,
            mask,
            active,
            strides,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn is_masked(&self) -> bool {
        self.mask.is_some()
    }

    /// Number of voxels in the full bounding box.
    pub fn full_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Number of active (in-mask) voxels.
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Row-major linear index of the `a`-th active voxel.
    pub fn active_linear(&self, a: usize) -> usize {
        self.active[a]
    }

    pub fn active_linear_indices(&self) -> &[usize] {
        &self.active
    }

    pub fn linearize(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(m, s)| m * s).sum()
    }

    pub fn unlinearize(&self, mut linear: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|&s| {
                let q = linear / s;
                linear %= s;
                q
            })
            .collect()
    }

    /// Multi-index of the `a`-th active voxel.
    pub fn multi_index(&self, a: usize) -> Vec<usize> {
        self.unlinearize(self.active[a])
    }

    /// Multi-indices of all active voxels, flattened with stride `ndim`.
    pub fn active_multi_indices(&self) -> Vec<usize> {
        let d = self.ndim();
        let mut out = Vec::with_capacity(self.n_active() * d);
        for &lin in &self.active {
            out.extend(self.unlinearize(lin));
        }
        out
    }

    /// Position of a full-grid voxel in the active packing.
    pub fn active_position(&self, linear: usize) -> Option<usize> {
        match &self.mask {
            None => (linear < self.full_len()).then_some(linear),
            Some(_) => self.active.binary_search(&linear).ok(),
        }
    }

    /// Coordinate of voxel center along dimension `d`, in `[0, 1]`.
    pub fn cell_center(&self, index: usize, d: usize) -> f64 {
        (index as f64 + 0.5) / self.dims[d] as f64
    }

    /// Scatter active-voxel values into a full-grid buffer (zeros outside the mask).
    pub fn embed(&self, values: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.full_len()];
        for (&lin, &v) in self.active.iter().zip(values) {
            full[lin] = v;
        }
        full
    }

    /// Gather active-voxel values out of a full-grid buffer.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.active.iter().map(|&lin| full[lin]).collect()
    }

    /// Same dimensions and mask.
    pub fn same_as(&self, other: &SpatialGrid) -> bool {
        self.dims == other.dims && self.mask == other.mask
    }

    /// Subgrid restricted to a further mask over the currently active voxels.
    pub fn submask(&self, keep_active: &[bool]) -> Result<Self> {
        let mut mask = vec![false; self.full_len()];
        for (a, &lin) in self.active.iter().enumerate() {
            mask[lin] = keep_active[a];
        }
        Self::with_mask(self.dims.clone(), mask)
    }
}
