//! Pipeline orchestration: group comparison on a manifest (block matching →
//! permutation test → multiplicity correction → artifacts) and the synthetic
//! benchmark sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockmatch::{estimate_sigma, gather_samples, Bandwidth, MatchConfig, SigmaSpec};
use crate::error::{Error, Result};
use crate::eval::{contingency, metric_row, MetricRow};
use crate::multiplicity::{
    bh_fdr, bonferroni, stepdown_minp, threshold_map, uncorrected, CorrectionMethod, PValueSet,
    StatMatrix,
};
use crate::refselect::{select_queries, ApParams};
use crate::rng::stream;
use crate::stats::{
    exact_p, hotelling_from_moments, per_image_moments, permutation_test,
    replicates_image_level, CohortLayout, GroupMoments, PermMode, PermutationPlan, RelabelingSet,
};
use crate::synth::{make_cohorts, PhantomSpec};
use crate::volume::{
    block_voxel_count, extract_block, load_volume, save_volume, BlockVector, DatasetManifest,
    Mask, Volume,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bbs,
    Standard,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Bbs => "bbs",
            Method::Standard => "standard",
        }
    }
}

fn default_method() -> Method {
    Method::Bbs
}

fn default_alpha() -> f64 {
    0.01
}

fn default_correction() -> CorrectionMethod {
    CorrectionMethod::Minp
}

/// One comparison run, as read from the config JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_correction")]
    pub correction: CorrectionMethod,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub permutation: PermutationPlan,
    #[serde(default)]
    pub ap: ApParams,
    #[serde(default)]
    pub render: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// In-memory comparison settings, independent of file paths.
#[derive(Debug, Clone)]
pub struct CompareSettings {
    pub method: Method,
    pub alpha: f64,
    pub correction: CorrectionMethod,
    pub matching: MatchConfig,
    pub plan: PermutationPlan,
    pub ap: ApParams,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            method: Method::Bbs,
            alpha: default_alpha(),
            correction: default_correction(),
            matching: MatchConfig::default(),
            plan: PermutationPlan::default(),
            ap: ApParams::default(),
        }
    }
}

impl CompareSettings {
    fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            method: cfg.method,
            alpha: cfg.alpha,
            correction: cfg.correction,
            matching: cfg.matching.clone(),
            plan: cfg.permutation.clone(),
            ap: cfg.ap.clone(),
        }
    }
}

#[derive(Debug)]
pub struct CompareResult {
    pub raw_p: Volume,
    pub adj_p: Volume,
    /// 1 - adjusted p, for rendering (high = significant).
    pub display: Volume,
    pub significant: Mask,
    pub pvalues: PValueSet,
    pub analysis_mask: Mask,
    pub untestable: usize,
    pub sigma: f64,
    pub queries: (Vec<usize>, Vec<usize>),
}

/// Interior voxels where a full block plus search window fits, intersected
/// with an optional base mask. The z margin is skipped for 2D volumes.
pub fn analysis_mask(
    dims: [usize; 3],
    is_2d: bool,
    margin: usize,
    base: Option<&Mask>,
) -> Result<Mask> {
    if dims[0] <= 2 * margin || dims[1] <= 2 * margin || (!is_2d && dims[2] <= 2 * margin) {
        return Err(Error::Config(format!(
            "dims {dims:?} too small for margin {margin}"
        )));
    }
    let mut mask = Mask::empty(dims);
    let (z0, z1) = if is_2d {
        (0, dims[2] - 1)
    } else {
        (margin, dims[2] - 1 - margin)
    };
    for z in z0..=z1 {
        for y in margin..=dims[1] - 1 - margin {
            for x in margin..=dims[0] - 1 - margin {
                mask.set(x, y, z, true);
            }
        }
    }
    match base {
        Some(b) => mask.intersect(b),
        None => Ok(mask),
    }
}

// standard permutation test = BBS with no search, flat weights, no retention
fn effective_matching(settings: &CompareSettings, m1: usize, m2: usize) -> MatchConfig {
    let mut m = settings.matching.clone();
    if settings.method == Method::Standard {
        m.search_radius = 0;
        m.unit_weights = true;
        m.l = Some(m1.max(m2));
        m.sigma = SigmaSpec::Value(1.0);
    }
    m
}

struct VoxelOutcome {
    voxel: [usize; 3],
    raw_p: f64,
    replicates: Option<Vec<f64>>,
}

/// Core comparison on in-memory volumes. `groups[i]` is 1 or 2 per image;
/// voxels outside the analysis mask (and untestable ones) get p = 1.
pub fn compare_volumes(
    images: &[Volume],
    groups: &[u8],
    base_mask: Option<&Mask>,
    query_override: Option<(Vec<usize>, Vec<usize>)>,
    settings: &CompareSettings,
) -> Result<CompareResult> {
    if images.len() != groups.len() {
        return Err(Error::Manifest("images/groups length mismatch".into()));
    }
    if images.is_empty() {
        return Err(Error::Manifest("no images".into()));
    }
    let dims = images[0].dims();
    let channels = images[0].channels();
    for img in images {
        if img.dims() != dims || img.channels() != channels {
            return Err(Error::DimsMismatch("input volumes".into()));
        }
    }
    let g1_indices: Vec<usize> = (0..images.len()).filter(|&i| groups[i] == 1).collect();
    let g2_indices: Vec<usize> = (0..images.len()).filter(|&i| groups[i] == 2).collect();
    let (m1, m2) = (g1_indices.len(), g2_indices.len());
    if m1 < 2 || m2 < 2 {
        return Err(Error::Manifest(format!(
            "need >= 2 images per group, found {m1} and {m2}"
        )));
    }

    let matching = effective_matching(settings, m1, m2);
    let is_2d = images[0].is_2d();
    let margin = matching.block_radius + matching.search_radius;
    let mask = analysis_mask(dims, is_2d, margin, base_mask)?;
    if mask.count() == 0 {
        return Err(Error::Config("analysis mask is empty".into()));
    }

    // query selection
    let (q1, q2) = match query_override {
        Some((a, b)) => {
            if a.is_empty() || b.is_empty() {
                return Err(Error::EmptyQuerySet);
            }
            (a, b)
        }
        None if settings.method == Method::Standard => {
            // weights are overridden with 1; a single query per group suffices
            (vec![g1_indices[0]], vec![g2_indices[0]])
        }
        None => select_queries((&g1_indices, &g2_indices), images, &mask, &settings.ap)?,
    };

    // one global bandwidth, estimated on the first group-1 query image
    let sigma_image = &images[q1[0]];
    let sigma = match matching.sigma.fixed() {
        Some(v) => v,
        None => estimate_sigma(sigma_image, &mask)?,
    };
    let (lo, hi) = sigma_image.value_range();
    let bw = Bandwidth::from_sigma(
        sigma,
        block_voxel_count(matching.block_radius, is_2d),
        matching.search_radius,
        hi - lo,
    );

    let k = matching.k.unwrap_or_else(|| q1.len().min(q2.len()));
    let l = matching.l.unwrap_or(2 * m1.min(m2));
    let query_images: Vec<usize> = q1.iter().chain(q2.iter()).copied().collect();
    let layout = CohortLayout { m1, m2 };
    let relabelings = match settings.plan.mode {
        PermMode::ImageLevel => Some(RelabelingSet::generate(&settings.plan, layout)),
        PermMode::SampleLevel => None,
    };
    let keep_replicates = settings.correction == CorrectionMethod::Minp;

    let voxels: Vec<[usize; 3]> = {
        let mut v = Vec::with_capacity(mask.count());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if mask.get(x, y, z) {
                        v.push([x, y, z]);
                    }
                }
            }
        }
        v
    };

    let outcomes: Vec<Option<VoxelOutcome>> = voxels
        .par_iter()
        .map(|&x| -> Result<Option<VoxelOutcome>> {
            let queries: Vec<BlockVector> = query_images
                .iter()
                .map(|&qi| extract_block(&images[qi], x, matching.block_radius, qi))
                .collect::<Result<Vec<_>>>()?;
            let (g1, g2) = match gather_samples(images, groups, &queries, x, &matching, k, l, bw) {
                Ok(pair) => pair,
                Err(Error::InsufficientSamples { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let (raw_p, replicates) = match &relabelings {
                Some(rel) => {
                    // aggregate per image first so the observed statistic is
                    // exactly consistent with the relabeled replicates
                    let per_img = per_image_moments(&g1, &g2, images.len(), channels);
                    let mut m1 = GroupMoments::zero(channels);
                    let mut m2 = GroupMoments::zero(channels);
                    for (i, m) in per_img.iter().enumerate() {
                        if groups[i] == 1 {
                            m1.add(m);
                        } else {
                            m2.add(m);
                        }
                    }
                    let observed = hotelling_from_moments(&m1, &m2);
                    let reps = replicates_image_level(&per_img, rel, channels);
                    (exact_p(observed, &reps), reps)
                }
                None => {
                    let voxel_index = (x[2] * dims[1] + x[1]) * dims[0] + x[0];
                    let r = permutation_test(&g1, &g2, &settings.plan, layout, voxel_index as u64)?;
                    (r.p_raw, r.replicates)
                }
            };
            Ok(Some(VoxelOutcome {
                voxel: x,
                raw_p,
                replicates: keep_replicates.then_some(replicates),
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut untestable = 0usize;
    let mut tested: Vec<VoxelOutcome> = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Some(v) => tested.push(v),
            None => untestable += 1,
        }
    }
    if tested.is_empty() {
        return Err(Error::Config("no testable voxels".into()));
    }

    let raw: Vec<f64> = tested.iter().map(|t| t.raw_p).collect();
    let voxel_index: Vec<[usize; 3]> = tested.iter().map(|t| t.voxel).collect();
    let pvalues = match settings.correction {
        CorrectionMethod::Minp => {
            let b = settings.plan.b;
            let mut values = Vec::with_capacity(tested.len() * b);
            let mut observed = Vec::with_capacity(tested.len());
            for t in &mut tested {
                let reps = t.replicates.take().expect("replicates kept for minP");
                values.extend_from_slice(&reps);
                // observed stat is not re-used by the correction; keep the
                // row max as a valid placeholder satisfying matrix invariants
                observed.push(reps.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
            let matrix = StatMatrix::new(tested.len(), b, values, observed)?;
            stepdown_minp(&matrix, &raw, voxel_index)?
        }
        CorrectionMethod::Bonferroni => bonferroni(&raw, voxel_index),
        CorrectionMethod::Bh => bh_fdr(&raw, voxel_index),
        CorrectionMethod::None => uncorrected(&raw, voxel_index),
    };

    let significant = threshold_map(&pvalues, settings.alpha, dims)?;

    let n = dims[0] * dims[1] * dims[2];
    let mut raw_map = vec![1.0f32; n];
    let mut adj_map = vec![1.0f32; n];
    for (i, v) in pvalues.voxel_index.iter().enumerate() {
        let idx = (v[2] * dims[1] + v[1]) * dims[0] + v[0];
        raw_map[idx] = pvalues.raw[i] as f32;
        adj_map[idx] = pvalues.adjusted[i] as f32;
    }
    let display: Vec<f32> = adj_map.iter().map(|&p| 1.0 - p).collect();
    let voxel_size = images[0].voxel_size();
    Ok(CompareResult {
        raw_p: Volume::new(dims, 1, voxel_size, raw_map)?,
        adj_p: Volume::new(dims, 1, voxel_size, adj_map)?,
        display: Volume::new(dims, 1, voxel_size, display)?,
        significant,
        pvalues,
        analysis_mask: mask,
        untestable,
        sigma,
        queries: (q1, q2),
    })
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seed: u64,
    pub workers: usize,
    pub group_sizes: [usize; 2],
    pub queries_group1: Vec<usize>,
    pub queries_group2: Vec<usize>,
    pub sigma: f64,
    pub testable_voxels: usize,
    pub untestable_voxels: usize,
    pub significant_voxels: usize,
    pub timings_ms: BTreeMap<String, u128>,
}

/// Builds a rayon pool with `workers` threads and runs `f` inside it.
pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Full file-to-file comparison: loads the manifest, runs `compare_volumes`,
/// and writes raw_p.bvol, adj_p.bvol, sig_mask.bvol, display.bvol, and
/// report.json under `out_dir`.
pub fn run_compare(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<RunReport> {
    cfg.validate()?;
    let t_load = Instant::now();
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let base_dir = cfg.manifest.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    let images: Vec<Volume> = manifest
        .images
        .iter()
        .map(|e| load_volume(&resolve(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    let groups: Vec<u8> = manifest.images.iter().map(|e| e.group).collect();
    let base_mask = match &manifest.mask {
        Some(p) => Some(Mask::from_volume(&load_volume(&resolve(p))?)?),
        None => None,
    };
    let query_override = manifest
        .queries
        .as_ref()
        .map(|q| (q.group1.clone(), q.group2.clone()));
    let load_ms = t_load.elapsed().as_millis();

    let settings = CompareSettings::from_run_config(cfg);
    let t_compare = Instant::now();
    let result = with_pool(workers, || {
        compare_volumes(&images, &groups, base_mask.as_ref(), query_override, &settings)
    })?;
    let compare_ms = t_compare.elapsed().as_millis();

    let t_write = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    save_volume(&result.raw_p, &out_dir.join("raw_p.bvol"))?;
    save_volume(&result.adj_p, &out_dir.join("adj_p.bvol"))?;
    save_volume(&result.display, &out_dir.join("display.bvol"))?;
    save_volume(&result.significant.to_volume(), &out_dir.join("sig_mask.bvol"))?;
    if cfg.render {
        render_slices(&result.display, out_dir, "display")?;
        render_slices(&result.significant.to_volume(), out_dir, "sig_mask")?;
    }
    let write_ms = t_write.elapsed().as_millis();

    let mut timings_ms = BTreeMap::new();
    timings_ms.insert("load".to_string(), load_ms);
    timings_ms.insert("compare".to_string(), compare_ms);
    timings_ms.insert("write".to_string(), write_ms);
    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.permutation.seed,
        workers,
        group_sizes: [
            groups.iter().filter(|&&g| g == 1).count(),
            groups.iter().filter(|&&g| g == 2).count(),
        ],
        queries_group1: result.queries.0.clone(),
        queries_group2: result.queries.1.clone(),
        sigma: result.sigma,
        testable_voxels: result.pvalues.raw.len(),
        untestable_voxels: result.untestable,
        significant_voxels: result.significant.count(),
        timings_ms,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
    std::fs::write(out_dir.join("report.json"), json).map_err(|source| Error::Io {
        path: out_dir.join("report.json"),
        source,
    })?;
    Ok(report)
}

/// Synthetic sweep configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Phantom layout; defaults to the built-in four-structure layout.
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    #[serde(default = "default_sweep_dims")]
    pub dims: [usize; 3],
    #[serde(default = "default_noise_levels")]
    pub noise_levels: Vec<f64>,
    #[serde(default = "default_sample_sizes")]
    pub sample_sizes: Vec<usize>,
    /// When set, the control cohort stays at this size (unbalanced mode)
    /// while the patient cohort follows `sample_sizes`.
    #[serde(default)]
    pub control_size: Option<usize>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_correction")]
    pub correction: CorrectionMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub permutation: PermutationPlan,
    #[serde(default)]
    pub ap: ApParams,
    #[serde(default)]
    pub seed: u64,
}

fn default_sweep_dims() -> [usize; 3] {
    [64, 64, 1]
}

fn default_noise_levels() -> Vec<f64> {
    vec![6.0, 8.0, 10.0]
}

fn default_sample_sizes() -> Vec<usize> {
    vec![10, 20, 30]
}

fn default_repetitions() -> usize {
    10
}

fn default_methods() -> Vec<Method> {
    vec![Method::Bbs, Method::Standard]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            phantom: None,
            dims: default_sweep_dims(),
            noise_levels: default_noise_levels(),
            sample_sizes: default_sample_sizes(),
            control_size: None,
            repetitions: default_repetitions(),
            methods: default_methods(),
            correction: default_correction(),
            alpha: default_alpha(),
            matching: MatchConfig::default(),
            permutation: PermutationPlan::default(),
            ap: ApParams::default(),
            seed: 0,
        }
    }
}

/// One sweep cell and repetition, with both methods evaluated on the same
/// cohort so comparisons are paired.
pub struct CellResult {
    pub rows: Vec<MetricRow>,
    pub masks: Vec<(Method, Mask)>,
    pub noise: f64,
    pub size: usize,
    pub rep: usize,
}

fn cohort_seed(seed: u64, noise: f64, size: usize, rep: usize) -> u64 {
    let mut rng = stream(
        seed,
        &[(noise * 1000.0).round() as u64, size as u64, rep as u64],
    );
    rng.next_u64()
}

/// Runs the full sweep in memory and returns per-run metric rows.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<MetricRow>> {
    Ok(run_sweep_cells(cfg)?
        .into_iter()
        .flat_map(|c| c.rows)
        .collect())
}

pub fn run_sweep_cells(cfg: &SweepConfig) -> Result<Vec<CellResult>> {
    let spec = cfg
        .phantom
        .clone()
        .unwrap_or_else(|| PhantomSpec::default_layout(cfg.dims));
    let mut cells = Vec::new();
    for &noise in &cfg.noise_levels {
        for &size in &cfg.sample_sizes {
            for rep in 0..cfg.repetitions {
                let n_control = cfg.control_size.unwrap_or(size);
                let (controls, patients, truth) = make_cohorts(
                    &spec,
                    n_control,
                    size,
                    noise,
                    cohort_seed(cfg.seed, noise, size, rep),
                )?;
                let mut images = controls;
                let n1 = images.len();
                images.extend(patients);
                let groups: Vec<u8> = (0..images.len())
                    .map(|i| if i < n1 { 1 } else { 2 })
                    .collect();

                let mut rows = Vec::new();
                let mut masks = Vec::new();
                for &method in &cfg.methods {
                    let settings = CompareSettings {
                        method,
                        alpha: cfg.alpha,
                        correction: cfg.correction,
                        matching: cfg.matching.clone(),
                        plan: cfg.permutation.clone(),
                        ap: cfg.ap.clone(),
                    };
                    let result = compare_volumes(&images, &groups, None, None, &settings)?;
                    let table =
                        contingency(&result.significant, &truth, &result.analysis_mask)?;
                    rows.push(metric_row(&table, method.label(), size, noise));
                    masks.push((method, result.significant));
                }
                cells.push(CellResult {
                    rows,
                    masks,
                    noise,
                    size,
                    rep,
                });
            }
        }
    }
    Ok(cells)
}

/// File-level sweep: per-cell significance masks plus metrics.csv and
/// report.json under `out_dir`.
pub fn run_synth_experiment(cfg: &SweepConfig, out_dir: &Path, workers: usize) -> Result<()> {
    let cells = with_pool(workers, || run_sweep_cells(cfg))?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for cell in &cells {
        for (method, mask) in &cell.masks {
            let name = format!(
                "sig_{}_n{}_s{}_r{}.bvol",
                method.label(),
                cell.noise,
                cell.size,
                cell.rep
            );
            save_volume(&mask.to_volume(), &out_dir.join(name))?;
        }
        rows.extend(cell.rows.iter().cloned());
    }
    let summary = crate::eval::experiment_table(&rows);
    crate::eval::write_summary_csv(&summary, &out_dir.join("metrics.csv"))?;
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| Error::Internal(format!("sweep report: {e}")))?;
    std::fs::write(out_dir.join("report.json"), json).map_err(|source| Error::Io {
        path: out_dir.join("report.json"),
        source,
    })?;
    Ok(())
}

/// One 8-bit grayscale PGM per z-slice, linearly scaled from [0, 1] with
/// round-half-up (0.5 maps to 128).
pub fn render_slices(vol: &Volume, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    if vol.channels() != 1 {
        return Err(Error::Config(format!(
            "render expects a single-channel volume, got {}",
            vol.channels()
        )));
    }
    let dims = vol.dims();
    let mut paths = Vec::new();
    for z in 0..dims[2] {
        let path = dir.join(format!("{stem}_z{z:03}.pgm"));
        let io_err = |source| Error::Io {
            path: path.clone(),
            source,
        };
        let mut out = Vec::with_capacity(dims[0] * dims[1] + 32);
        write!(out, "P5\n{} {}\n255\n", dims[0], dims[1]).map_err(io_err)?;
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = (vol.voxel(x, y, z)[0] as f64).clamp(0.0, 1.0);
                out.push((v * 255.0 + 0.5).floor().min(255.0) as u8);
            }
        }
        std::fs::write(&path, out).map_err(io_err)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmatch::WeightedSample;
    use crate::rng::stream;
    use crate::stats::hotelling_t2;
    use rand::Rng;

    fn toy_images(seed: u64, dims: [usize; 3], per_group: usize, shift: f32) -> (Vec<Volume>, Vec<u8>) {
        let mut rng = stream(seed, &[42]);
        let n = dims[0] * dims[1] * dims[2];
        let mut images = Vec::new();
        let mut groups = Vec::new();
        for g in [1u8, 2u8] {
            for _ in 0..per_group {
                let data: Vec<f32> = (0..n * 2)
                    .map(|_| {
                        let base: f32 = rng.gen_range(0.0..10.0);
                        if g == 2 {
                            base + shift
                        } else {
                            base
                        }
                    })
                    .collect();
                images.push(Volume::new(dims, 2, [1.0; 3], data).unwrap());
                groups.push(g);
            }
        }
        (images, groups)
    }

    #[test]
    fn analysis_mask_margins() {
        let m = analysis_mask([8, 8, 1], true, 2, None).unwrap();
        assert_eq!(m.count(), 16); // 4x4 interior
        assert!(!m.get(1, 4, 0));
        assert!(m.get(2, 2, 0));
        assert!(m.get(5, 5, 0));
        assert!(!m.get(6, 5, 0));
        // 3D applies the z margin too
        let m3 = analysis_mask([8, 8, 8], false, 2, None).unwrap();
        assert_eq!(m3.count(), 64);
        let err = analysis_mask([4, 8, 1], true, 2, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn standard_mode_matches_hand_wired_permutation_test() {
        let dims = [8, 8, 1];
        let (images, groups) = toy_images(3, dims, 2, 1.5);
        let settings = CompareSettings {
            method: Method::Standard,
            correction: CorrectionMethod::None,
            plan: PermutationPlan {
                b: 200,
                seed: 9,
                mode: PermMode::ImageLevel,
            },
            ..Default::default()
        };
        let result = compare_volumes(&images, &groups, None, None, &settings).unwrap();

        // oracle: at each voxel, one unit-weight sample per image, same plan
        let layout = CohortLayout { m1: 2, m2: 2 };
        let rel = RelabelingSet::generate(&settings.plan, layout);
        for (i, &v) in result.pvalues.voxel_index.iter().enumerate() {
            let sample = |img: usize| WeightedSample {
                weight: 1.0,
                values: images[img]
                    .voxel(v[0], v[1], v[2])
                    .iter()
                    .map(|&x| x as f64)
                    .collect(),
                source_image: img,
                source_voxel: v,
            };
            let g1 = vec![sample(0), sample(1)];
            let g2 = vec![sample(2), sample(3)];
            let observed = hotelling_t2(&g1, &g2).unwrap();
            let per_img = per_image_moments(&g1, &g2, 4, 2);
            let reps = replicates_image_level(&per_img, &rel, 2);
            assert_eq!(result.pvalues.raw[i], exact_p(observed, &reps), "voxel {v:?}");
        }
    }

    #[test]
    fn bbs_with_no_search_and_unit_weights_equals_standard() {
        let dims = [10, 10, 1];
        let (images, groups) = toy_images(5, dims, 3, 1.0);
        let plan = PermutationPlan {
            b: 150,
            seed: 4,
            mode: PermMode::ImageLevel,
        };
        let bbs = CompareSettings {
            method: Method::Bbs,
            correction: CorrectionMethod::None,
            matching: MatchConfig {
                search_radius: 0,
                unit_weights: true,
                l: Some(3),
                sigma: SigmaSpec::Value(1.0),
                ..Default::default()
            },
            plan: plan.clone(),
            ..Default::default()
        };
        let std_settings = CompareSettings {
            method: Method::Standard,
            correction: CorrectionMethod::None,
            matching: MatchConfig {
                search_radius: 0, // forced anyway
                ..Default::default()
            },
            plan,
            ..Default::default()
        };
        let a = compare_volumes(&images, &groups, None, None, &bbs).unwrap();
        let b = compare_volumes(&images, &groups, None, None, &std_settings).unwrap();
        assert_eq!(a.raw_p.data(), b.raw_p.data());
    }

    #[test]
    fn run_compare_is_deterministic_and_worker_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let spec = PhantomSpec::default_layout([24, 24, 1]);
        let manifest = crate::synth::write_cohorts(&data_dir, &spec, 3, 3, 8.0, 11).unwrap();
        let cfg = RunConfig {
            manifest,
            method: Method::Bbs,
            alpha: 0.05,
            correction: CorrectionMethod::Minp,
            matching: MatchConfig::default(),
            permutation: PermutationPlan {
                b: 100,
                seed: 2,
                mode: PermMode::ImageLevel,
            },
            ap: ApParams::default(),
            render: true,
        };
        let out1 = dir.path().join("out1");
        let out2 = dir.path().join("out2");
        let out3 = dir.path().join("out3");
        run_compare(&cfg, &out1, 1).unwrap();
        run_compare(&cfg, &out2, 1).unwrap();
        run_compare(&cfg, &out3, 4).unwrap();
        for name in ["raw_p.bvol", "adj_p.bvol", "sig_mask.bvol", "display.bvol"] {
            let a = std::fs::read(out1.join(name)).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            let c = std::fs::read(out3.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
            assert_eq!(a, c, "{name} differs across worker counts");
        }
        assert!(out1.join("report.json").exists());
        assert!(out1.join("display_z000.pgm").exists());
    }

    #[test]
    fn adjusted_p_never_below_raw() {
        let dims = [10, 10, 1];
        let (images, groups) = toy_images(8, dims, 3, 2.0);
        let settings = CompareSettings {
            correction: CorrectionMethod::Minp,
            matching: MatchConfig {
                sigma: SigmaSpec::Value(2.0),
                ..Default::default()
            },
            plan: PermutationPlan {
                b: 100,
                seed: 1,
                mode: PermMode::ImageLevel,
            },
            ..Default::default()
        };
        let r = compare_volumes(&images, &groups, None, None, &settings).unwrap();
        for (raw, adj) in r.pvalues.raw.iter().zip(&r.pvalues.adjusted) {
            assert!(adj >= raw);
            assert!(*adj <= 1.0);
        }
        assert!(r.pvalues.raw.iter().all(|&p| p >= 1.0 / 101.0));
    }

    #[test]
    fn render_slice_values() {
        let dir = tempfile::tempdir().unwrap();
        let black = Volume::new([2, 2, 1], 1, [1.0; 3], vec![0.0; 4]).unwrap();
        let white = Volume::new([2, 2, 1], 1, [1.0; 3], vec![1.0; 4]).unwrap();
        let half = Volume::new([2, 1, 1], 1, [1.0; 3], vec![0.0, 0.5]).unwrap();
        let p = render_slices(&black, dir.path(), "black").unwrap();
        let bytes = std::fs::read(&p[0]).unwrap();
        assert!(bytes.ends_with(&[0, 0, 0, 0]));
        let p = render_slices(&white, dir.path(), "white").unwrap();
        let bytes = std::fs::read(&p[0]).unwrap();
        assert!(bytes.ends_with(&[255, 255, 255, 255]));
        let p = render_slices(&half, dir.path(), "half").unwrap();
        let bytes = std::fs::read(&p[0]).unwrap();
        assert!(bytes.ends_with(&[0, 128]));
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
    }

    #[test]
    fn minimal_sweep_emits_one_row_per_metric() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SweepConfig {
            dims: [24, 24, 1],
            noise_levels: vec![8.0],
            sample_sizes: vec![3],
            repetitions: 1,
            methods: vec![Method::Bbs],
            correction: CorrectionMethod::None,
            alpha: 0.05,
            permutation: PermutationPlan {
                b: 50,
                seed: 3,
                mode: PermMode::ImageLevel,
            },
            ..Default::default()
        };
        run_synth_experiment(&cfg, dir.path(), 1).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4); // header + dice + sensitivity + specificity
        assert!(lines[1].starts_with("bbs,3,8,dice,"));
        assert!(dir
            .path()
            .join("sig_bbs_n8_s3_r0.bvol")
            .exists());
    }

    #[test]
    fn unbalanced_mode_fixes_control_size() {
        let cfg = SweepConfig {
            dims: [24, 24, 1],
            noise_levels: vec![8.0],
            sample_sizes: vec![2],
            control_size: Some(4),
            repetitions: 1,
            methods: vec![Method::Standard],
            correction: CorrectionMethod::None,
            alpha: 0.05,
            permutation: PermutationPlan {
                b: 50,
                seed: 3,
                mode: PermMode::ImageLevel,
            },
            ..Default::default()
        };
        // runs without error: 4 controls vs 2 patients
        let rows = run_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].sample_size, 2);
    }

    #[test]
    fn rejects_undersized_groups() {
        let dims = [10, 10, 1];
        let (mut images, mut groups) = toy_images(2, dims, 2, 0.0);
        images.pop();
        groups.pop();
        let err =
            compare_volumes(&images, &groups, None, None, &CompareSettings::default()).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }

    #[test]
    fn config_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{
                "manifest": "data/manifest.json",
                "method": "standard",
                "alpha": 0.05,
                "correction": "bh",
                "matching": {"block_radius": 2, "sigma": 4.5},
                "permutation": {"b": 500, "seed": 7}
            }"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.method, Method::Standard);
        assert_eq!(cfg.correction, CorrectionMethod::Bh);
        assert_eq!(cfg.matching.block_radius, 2);
        assert_eq!(cfg.matching.sigma.fixed(), Some(4.5));
        assert_eq!(cfg.permutation.b, 500);
        assert_eq!(cfg.alpha, 0.05);
        assert!(!cfg.render);

        std::fs::write(&path, r#"{"manifest": "m.json", "alpha": 1.5}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
