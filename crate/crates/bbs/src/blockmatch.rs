//! Non-local block matching: per-voxel search for blocks similar to the query
//! block set, Gaussian kernel weighting, and top-L weighted sample retention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{extract_block, BlockVector, Mask, Volume};

/// Noise level: a fixed value or estimated from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Estimate(String),
    Value(f64),
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec::Estimate("estimate".into())
    }
}

impl SigmaSpec {
    pub fn fixed(&self) -> Option<f64> {
        match self {
            SigmaSpec::Value(v) => Some(*v),
            SigmaSpec::Estimate(_) => None,
        }
    }
}

/// Block matching configuration. `k` and `l` default to min{Q1,Q2} and
/// 2*min{M1,M2} respectively when unset; the pipeline resolves them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchConfig {
    #[serde(default = "default_block_radius")]
    pub block_radius: usize,
    #[serde(default = "default_search_radius")]
    pub search_radius: usize,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub l: Option<usize>,
    #[serde(default)]
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub unit_weights: bool,
}

fn default_block_radius() -> usize {
    1
}

fn default_search_radius() -> usize {
    2
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            block_radius: default_block_radius(),
            search_radius: default_search_radius(),
            k: None,
            l: None,
            sigma: SigmaSpec::default(),
            unit_weights: false,
        }
    }
}

/// Kernel bandwidths: one shared value for all block components and one for
/// the three spatial-offset components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub h_block: f64,
    pub h_space: f64,
}

impl Bandwidth {
    /// h_block = sigma * sqrt(d) with d the block voxel count, floored at
    /// 1e-3 of the volume value range to survive noiseless data.
    /// h_space = half the search-window diameter.
    pub fn from_sigma(
        sigma: f64,
        block_voxels: usize,
        search_radius: usize,
        value_range: f64,
    ) -> Self {
        let floor = 1e-3 * value_range.max(f64::MIN_POSITIVE);
        let h_block = (sigma * (block_voxels as f64).sqrt()).max(floor);
        let h_space = (2 * search_radius + 1) as f64 / 2.0;
        Bandwidth { h_block, h_space }
    }
}

/// One retained match: kernel weight plus the candidate's center-voxel
/// channel vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub weight: f64,
    pub values: Vec<f64>,
    pub source_image: usize,
    pub source_voxel: [usize; 3],
}

/// Gaussian kernel on the joint (block difference, spatial offset) vector.
/// The unit-integral constant is dropped; it is shared by all candidates at a
/// voxel and cancels in the weighted mean and variance.
pub fn kernel_weight(block_diff: &[f64], offset: [f64; 3], bw: Bandwidth) -> f64 {
    let mut q = 0.0;
    for &d in block_diff {
        q += d * d;
    }
    q /= bw.h_block * bw.h_block;
    let s = offset.iter().map(|&o| o * o).sum::<f64>() / (bw.h_space * bw.h_space);
    (-0.5 * (q + s)).exp()
}

/// Squared Euclidean distance between block value vectors.
fn block_dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Geometric mean of the kernel weights of the K closest queries (block
/// Euclidean distance only; the kernel reintroduces the spatial term).
/// Ties break by (distance, query image index, query center coordinate).
pub fn candidate_weight(
    cand: &BlockVector,
    cand_offset: [f64; 3],
    queries: &[BlockVector],
    k: usize,
    bw: Bandwidth,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if k == 0 || k > queries.len() {
        return Err(Error::Config(format!(
            "K = {k} out of range for {} queries",
            queries.len()
        )));
    }
    let mut dists: Vec<(f64, usize)> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| (block_dist2(&cand.values, &q.values), i))
        .collect();
    dists.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then_with(|| {
                let (qa, qb) = (&queries[a.1], &queries[b.1]);
                qa.source_image.cmp(&qb.source_image).then_with(|| {
                    let ca = [qa.center[2], qa.center[1], qa.center[0]];
                    let cb = [qb.center[2], qb.center[1], qb.center[0]];
                    ca.cmp(&cb)
                })
            })
    });
    // Geometric mean in log space: exp(-(mean block term + spatial term)/2).
    let mean_block: f64 = dists[..k].iter().map(|&(d2, _)| d2).sum::<f64>()
        / (k as f64 * bw.h_block * bw.h_block);
    let spatial: f64 =
        cand_offset.iter().map(|&o| o * o).sum::<f64>() / (bw.h_space * bw.h_space);
    let w = (-0.5 * (mean_block + spatial)).exp();
    if !w.is_finite() {
        return Err(Error::Internal("non-finite candidate weight".into()));
    }
    Ok(w)
}

/// Candidate centers in the search window around `x` where a full block fits,
/// clipped to the valid interior.
fn candidate_centers(
    dims: [usize; 3],
    is_2d: bool,
    x: [usize; 3],
    block_radius: usize,
    search_radius: usize,
) -> Vec<[usize; 3]> {
    let lo = |c: usize| c.saturating_sub(search_radius).max(block_radius);
    let hi = |c: usize, n: usize| (c + search_radius).min(n - 1 - block_radius);
    let (zs, ze) = if is_2d {
        (0, 0)
    } else {
        (lo(x[2]), hi(x[2], dims[2]))
    };
    let mut out = Vec::new();
    for z in zs..=ze {
        for y in lo(x[1])..=hi(x[1], dims[1]) {
            for xc in lo(x[0])..=hi(x[0], dims[0]) {
                out.push([xc, y, z]);
            }
        }
    }
    out
}

/// For every image and candidate center in the search window, compute the
/// candidate weight and retain the top-L samples per group.
///
/// With `search_radius = 0` each image contributes exactly one sample whose
/// values equal the image's voxel vector at `x`.
pub fn gather_samples(
    images: &[Volume],
    groups: &[u8],
    queries: &[BlockVector],
    x: [usize; 3],
    cfg: &MatchConfig,
    k: usize,
    l: usize,
    bw: Bandwidth,
) -> Result<(Vec<WeightedSample>, Vec<WeightedSample>)> {
    debug_assert_eq!(images.len(), groups.len());
    let dims = images[0].dims();
    let is_2d = images[0].is_2d();
    let centers = candidate_centers(dims, is_2d, x, cfg.block_radius, cfg.search_radius);

    let mut g1: Vec<WeightedSample> = Vec::new();
    let mut g2: Vec<WeightedSample> = Vec::new();
    for (m, img) in images.iter().enumerate() {
        for &c in &centers {
            let cand = extract_block(img, c, cfg.block_radius, m)?;
            let offset = [
                c[0] as f64 - x[0] as f64,
                c[1] as f64 - x[1] as f64,
                c[2] as f64 - x[2] as f64,
            ];
            let weight = candidate_weight(&cand, offset, queries, k, bw)?;
            let sample = WeightedSample {
                weight,
                values: img.voxel(c[0], c[1], c[2]).iter().map(|&v| v as f64).collect(),
                source_image: m,
                source_voxel: c,
            };
            if groups[m] == 1 {
                g1.push(sample);
            } else {
                g2.push(sample);
            }
        }
    }

    for (gi, g) in [(1u8, &mut g1), (2u8, &mut g2)] {
        // Stable order: descending weight, then image index, then coordinate.
        g.sort_by(|a, b| {
            b.weight
                .partial_cmp(&a.weight)
                .unwrap()
                .then_with(|| a.source_image.cmp(&b.source_image))
                .then_with(|| {
                    let ca = [a.source_voxel[2], a.source_voxel[1], a.source_voxel[0]];
                    let cb = [b.source_voxel[2], b.source_voxel[1], b.source_voxel[0]];
                    ca.cmp(&cb)
                })
        });
        g.truncate(l);
        if cfg.unit_weights {
            for s in g.iter_mut() {
                s.weight = 1.0;
            }
        }
        if g.len() < 2 {
            return Err(Error::InsufficientSamples {
                voxel: x,
                group: gi,
                count: g.len(),
            });
        }
    }
    Ok((g1, g2))
}

/// Noise standard deviation via MAD of second-order pseudo-residuals on
/// channel 0 within the mask: each voxel minus the mean of its in-bounds face
/// neighbors, rescaled by sqrt(1 + 1/k), then 1.4826 * MAD.
pub fn estimate_sigma(vol: &Volume, mask: &Mask) -> Result<f64> {
    if vol.dims() != mask.dims() {
        return Err(Error::DimsMismatch("sigma estimation mask".into()));
    }
    let n_masked = mask.count();
    if n_masked < 100 {
        return Err(Error::MaskTooSmall(n_masked));
    }
    let dims = vol.dims();
    let is_2d = vol.is_2d();
    let mut residuals = Vec::with_capacity(n_masked);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if !mask.get(x, y, z) {
                    continue;
                }
                let mut sum = 0.0;
                let mut k = 0usize;
                let mut push = |xx: isize, yy: isize, zz: isize| {
                    if xx >= 0
                        && yy >= 0
                        && zz >= 0
                        && (xx as usize) < dims[0]
                        && (yy as usize) < dims[1]
                        && (zz as usize) < dims[2]
                    {
                        sum += vol.voxel(xx as usize, yy as usize, zz as usize)[0] as f64;
                        k += 1;
                    }
                };
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                push(xi - 1, yi, zi);
                push(xi + 1, yi, zi);
                push(xi, yi - 1, zi);
                push(xi, yi + 1, zi);
                if !is_2d {
                    push(xi, yi, zi - 1);
                    push(xi, yi, zi + 1);
                }
                if k == 0 {
                    continue;
                }
                let v = vol.voxel(x, y, z)[0] as f64;
                let r = (v - sum / k as f64) / (1.0 + 1.0 / k as f64).sqrt();
                residuals.push(r);
            }
        }
    }
    Ok(1.4826 * mad(&mut residuals))
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn mad(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median_sorted(values);
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    median_sorted(&dev)
}
