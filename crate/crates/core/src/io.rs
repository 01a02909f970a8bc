//! TFT1 tensor files and dataset manifests.
//!
//! Layout of a TFT1 file:
//!
//! ```text
//! "TFT1" | dtype:u8 (1 = f32, 2 = f64) | ndim:u8 | ndim x u64 LE dims | row-major LE payload
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;

const MAGIC: &[u8; 4] = b"TFT1";
pub const FORMAT_VERSION: &str = "tffa-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense row-major real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(m.row(i).iter());
        }
        Self {
            dims: vec![r, c],
            data,
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// Interpret a 1-D or 2-D tensor as a matrix (1-D becomes a column).
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.dims.as_slice() {
            [n] => Ok(DMatrix::from_column_slice(*n, 1, &self.data)),
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &self.data)),
            other => Err(Error::Shape(format!("expected a matrix, got dims {other:?}"))),
        }
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    if tensor.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if tensor.dims.len() > u8::MAX as usize {
        return Err(invalid("tensor has more than 255 dimensions"));
    }
    let n: usize = tensor.dims.iter().product();
    if n != tensor.data.len() {
        return Err(Error::Shape(format!(
            "dims {:?} disagree with payload length {}",
            tensor.dims,
            tensor.data.len()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(6 + 8 * tensor.dims.len());
    header.extend_from_slice(MAGIC);
    header.push(dtype.code());
    header.push(tensor.dims.len() as u8);
    for &d in &tensor.dims {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut payload = Vec::with_capacity(n * dtype.width());
    match dtype {
        Dtype::F32 => {
            for &v in &tensor.data {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &tensor.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&payload).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tensor(&bytes, path)
}

fn parse_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 6 {
        return Err(truncated(6));
    }
    let dtype = Dtype::from_code(bytes[4])?;
    let ndim = bytes[5] as usize;
    let header_len = 6 + 8 * ndim;
    if bytes.len() < header_len {
        return Err(truncated(header_len));
    }
    let dims: Vec<usize> = bytes[6..header_len]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    let expected = n * dtype.width();
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let data = match dtype {
        Dtype::F32 => payload[..expected]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        Dtype::F64 => payload[..expected]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok(Tensor { dims, data })
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m), Dtype::F64)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_tensor(path)?.to_matrix()
}

/// One subject's observation: active voxels by time points.
#[derive(Debug, Clone)]
pub struct ScanTensor {
    pub grid: SpatialGrid,
    /// `n_active x J`, rows in the grid's active packing order.
    pub values: DMatrix<f64>,
}

impl ScanTensor {
    pub fn new(grid: SpatialGrid, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != grid.n_active() {
            return Err(Error::Shape(format!(
                "scan has {} rows but grid has {} active voxels",
                values.nrows(),
                grid.n_active()
            )));
        }
        if values.ncols() == 0 {
            return Err(invalid("scan has no time points"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { grid, values })
    }

    pub fn n_time(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDescriptor {
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

/// JSON manifest describing a multi-subject dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub grid: GridDescriptor,
    pub n_time: usize,
    pub scans: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn n_subjects(&self) -> usize {
        self.scans.len()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Build the grid, reading the mask relative to `base`.
    pub fn load_grid(&self, base: &Path) -> Result<SpatialGrid> {
        match &self.grid.mask_path {
            None => SpatialGrid::new(self.grid.dims.clone()),
            Some(p) => {
                let t = read_tensor(base.join(p))?;
                if t.dims != self.grid.dims {
                    return Err(Error::Shape(format!(
                        "mask dims {:?} differ from grid dims {:?}",
                        t.dims, self.grid.dims
                    )));
                }
                let mask = t.data.iter().map(|&v| v != 0.0).collect();
                SpatialGrid::with_mask(self.grid.dims.clone(), mask)
            }
        }
    }
}

/// Read every scan listed in a manifest. Relative paths resolve against `base`.
///
/// Scans are returned as stored; cross-subject centering happens during
/// covariance assembly.
pub fn load_dataset(manifest: &DatasetManifest, base: &Path) -> Result<Vec<ScanTensor>> {
    if manifest.scans.is_empty() {
        return Err(invalid("manifest lists no scans (need at least one subject)"));
    }
    let grid = manifest.load_grid(base)?;
    let mut out = Vec::with_capacity(manifest.scans.len());
    for rel in &manifest.scans {
        let path = base.join(rel);
        let m = read_matrix(&path)?;
        if m.nrows() != grid.n_active() {
            return Err(invalid(format!(
                "grid mismatch in {}: {} rows for {} active voxels",
                path.display(),
                m.nrows(),
                grid.n_active()
            )));
        }
        if m.ncols() != manifest.n_time {
            return Err(invalid(format!(
                "time-point mismatch in {}: J = {} but manifest says {}",
                path.display(),
                m.ncols(),
                manifest.n_time
            )));
        }
        out.push(ScanTensor::new(grid.clone(), m)?);
    }
    Ok(out)
}

/// Convenience loader: read the manifest at `path` and its scans.
pub fn load_dataset_from(path: impl AsRef<Path>) -> Result<Vec<ScanTensor>> {
    let path = path.as_ref();
    let manifest = DatasetManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_dataset(&manifest, base)
}

/// Write scans as `scans/scan_XXXX.tft` plus `manifest.json` (and `mask.tft` when masked).
pub fn write_dataset(dir: impl AsRef<Path>, scans: &[ScanTensor], dtype: Dtype) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let first = scans
        .first()
        .ok_or_else(|| invalid("cannot write an empty dataset"))?;
    let grid = &first.grid;
    let n_time = first.n_time();
    fs::create_dir_all(dir.join("scans")).map_err(|e| Error::io(dir, e))?;
    let mask_path = match grid.mask() {
        Some(mask) => {
            let t = Tensor::new(
                grid.dims().to_vec(),
                mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?;
            write_tensor(dir.join("mask.tft"), &t, Dtype::F32)?;
            Some(PathBuf::from("mask.tft"))
        }
        None => None,
    };
    let mut paths = Vec::with_capacity(scans.len());
    for (i, scan) in scans.iter().enumerate() {
        if !scan.grid.same_as(grid) || scan.n_time() != n_time {
            return Err(invalid(format!("scan {i} does not share the dataset grid/J")));
        }
        let rel = PathBuf::from(format!("scans/scan_{i:04}.tft"));
        write_tensor(dir.join(&rel), &Tensor::from_matrix(&scan.values), dtype)?;
        paths.push(rel);
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION.to_string(),
        grid: GridDescriptor {
            dims: grid.dims().to_vec(),
            mask_path,
        },
        n_time,
        scans: paths,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
