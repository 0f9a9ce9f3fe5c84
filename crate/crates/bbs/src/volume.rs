//! Vector-valued volumes, masks, dataset manifests, and the BVOL codec.
//!
//! BVOL is a single JSON header line followed by little-endian f32 payload,
//! voxel index varying x-fastest then y then z, channels contiguous per voxel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector-valued 3D image. Immutable after construction; safe to share
/// read-only across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    channels: usize,
    voxel_size: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        channels: usize,
        voxel_size: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("zero dimension in {dims:?}")));
        }
        if channels == 0 {
            return Err(Error::InvalidVolume("channels must be >= 1".into()));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidVolume("voxel_size must be positive".into()));
        }
        let expected = dims[0] * dims[1] * dims[2] * channels;
        if data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "data length {} != nx*ny*nz*C = {}",
                data.len(),
                expected
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self {
            dims,
            channels,
            voxel_size,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_2d(&self) -> bool {
        self.dims[2] == 1
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Channel vector at a voxel.
    #[inline]
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let i = self.voxel_index(x, y, z) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Min and max over all values.
    pub fn value_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            let v = v as f64;
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BvolHeader {
    dims: [usize; 3],
    channels: usize,
    voxel_size: [f64; 3],
    dtype: String,
}

/// Write a volume to the BVOL format. Deterministic bytes for identical input;
/// validates invariants before touching the file.
pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    if let Some(i) = vol.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let header = BvolHeader {
        dims: vol.dims,
        channels: vol.channels,
        voxel_size: vol.voxel_size,
        dtype: "f32le".into(),
    };
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let header_line = serde_json::to_string(&header)
        .map_err(|e| Error::Internal(format!("header serialization: {e}")))?;
    w.write_all(header_line.as_bytes()).map_err(io_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    for &v in &vol.data {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read a BVOL volume.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte).map_err(io_err)?;
        if n == 0 {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "missing newline-terminated header".into(),
            });
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 4096 {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "header exceeds 4096 bytes".into(),
            });
        }
    }
    let header: BvolHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if header.dtype != "f32le" {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let expected = header.dims[0] * header.dims[1] * header.dims[2] * header.channels;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err)?;
    if payload.len() != expected * 4 {
        return Err(Error::PayloadMismatch {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() / 4,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.dims, header.channels, header.voxel_size, data)
}

/// Boolean per-voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::DimsMismatch(format!(
                "mask data length {} != {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![true; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch("mask intersection".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && b)
            .collect();
        Mask::new(self.dims, data)
    }

    /// Encode as a single-channel 0/1 volume for BVOL storage.
    pub fn to_volume(&self) -> Volume {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume::new(self.dims, 1, [1.0, 1.0, 1.0], data).expect("mask volume is valid")
    }

    pub fn from_volume(vol: &Volume) -> Result<Mask> {
        if vol.channels() != 1 {
            return Err(Error::DimsMismatch("mask volume must have C=1".into()));
        }
        let data = vol.data().iter().map(|&v| v > 0.5).collect();
        Mask::new(vol.dims(), data)
    }
}

/// One dataset entry: image path and group label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub group: u8,
}

/// Dataset manifest: image list with group labels, optional mask, and
/// optional per-group query-image overrides (indices into `images`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub images: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<QueryOverride>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryOverride {
    pub group1: Vec<usize>,
    pub group2: Vec<usize>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let m1 = self.group_indices(1).len();
        let m2 = self.group_indices(2).len();
        if m1 == 0 || m2 == 0 {
            return Err(Error::Manifest(format!(
                "both groups must be nonempty (group1={m1}, group2={m2})"
            )));
        }
        for e in &self.images {
            if e.group != 1 && e.group != 2 {
                return Err(Error::Manifest(format!(
                    "group label must be 1 or 2, found {} for {:?}",
                    e.group, e.path
                )));
            }
        }
        if let Some(q) = &self.queries {
            let pairs = q
                .group1
                .iter()
                .map(|&i| (i, 1u8))
                .chain(q.group2.iter().map(|&i| (i, 2u8)));
            for (i, g) in pairs {
                if i >= self.images.len() || self.images[i].group != g {
                    return Err(Error::Manifest(format!(
                        "query override index {i} invalid for group {g}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn group_indices(&self, group: u8) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

/// Block of voxel values, flattened lexicographically (x fastest, then y,
/// then z), channels contiguous per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    pub values: Vec<f64>,
    pub center: [usize; 3],
    pub source_image: usize,
}

/// Number of voxels in a block of the given radius: (2r+1)^3, or (2r+1)^2 for
/// 2D (nz = 1) volumes.
pub fn block_voxel_count(radius: usize, is_2d: bool) -> usize {
    let w = 2 * radius + 1;
    if is_2d {
        w * w
    } else {
        w * w * w
    }
}

/// Extract the block centered at `center`. The block must fit entirely inside
/// the volume; callers pre-filter candidate centers.
pub fn extract_block(
    vol: &Volume,
    center: [usize; 3],
    radius: usize,
    source_image: usize,
) -> Result<BlockVector> {
    let dims = vol.dims();
    let fits_axis = |c: usize, n: usize| c >= radius && c + radius < n;
    let fits_z = if vol.is_2d() {
        center[2] == 0
    } else {
        fits_axis(center[2], dims[2])
    };
    if !fits_axis(center[0], dims[0]) || !fits_axis(center[1], dims[1]) || !fits_z {
        return Err(Error::BlockOutOfBounds {
            center,
            radius,
            dims,
        });
    }
    let c = vol.channels();
    let d = block_voxel_count(radius, vol.is_2d());
    let mut values = Vec::with_capacity(d * c);
    let (z_lo, z_hi) = if vol.is_2d() {
        (0, 0)
    } else {
        (center[2] - radius, center[2] + radius)
    };
    for z in z_lo..=z_hi {
        for y in center[1] - radius..=center[1] + radius {
            for x in center[0] - radius..=center[0] + radius {
                values.extend(vol.voxel(x, y, z).iter().map(|&v| v as f64));
            }
        }
    }
    Ok(BlockVector {
        values,
        center,
        source_image,
    })
}
