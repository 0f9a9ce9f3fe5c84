//! Synthetic diffusion-weighted phantoms: jittered anisotropic structures,
//! circular lesions via radial tensor swelling, Stejskal-Tanner signal
//! formation, and Rician noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::volume::{save_volume, DatasetManifest, ManifestEntry, Mask, Volume};

/// Axis-aligned-before-rotation square structure with an anisotropic tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Structure {
    /// Center in voxel coordinates (x, y).
    pub center: [f64; 2],
    pub half_size: f64,
    /// Principal diffusion direction, degrees in the xy-plane.
    pub angle_deg: f64,
    #[serde(default = "default_lambda_axial")]
    pub lambda_axial: f64,
    #[serde(default = "default_lambda_radial")]
    pub lambda_radial: f64,
}

/// Circular lesion region; radial eigenvalues inside are multiplied by a
/// per-subject swelling factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Per-subject perturbation magnitudes (uniform, symmetric around zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JitterSpec {
    #[serde(default = "default_jitter_location")]
    pub location: f64,
    #[serde(default = "default_jitter_size")]
    pub size: f64,
    #[serde(default = "default_jitter_angle")]
    pub angle_deg: f64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            location: default_jitter_location(),
            size: default_jitter_size(),
            angle_deg: default_jitter_angle(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default = "default_gradients")]
    pub gradients: Vec<[f64; 3]>,
    #[serde(default = "default_b_value")]
    pub b_value: f64,
    #[serde(default = "default_s0")]
    pub s0: f64,
    /// Isotropic diffusivity outside the structures.
    #[serde(default = "default_background_diffusivity")]
    pub background_diffusivity: f64,
    pub structures: Vec<Structure>,
    #[serde(default)]
    pub lesions: Vec<Lesion>,
    /// Swelling factor interval; each patient draws one factor uniformly.
    #[serde(default = "default_swelling_range")]
    pub swelling_range: [f64; 2],
    #[serde(default)]
    pub jitter: JitterSpec,
}

fn default_dims() -> [usize; 3] {
    [64, 64, 1]
}

fn default_b_value() -> f64 {
    1000.0
}

fn default_s0() -> f64 {
    100.0
}

fn default_lambda_axial() -> f64 {
    1.7e-3
}

fn default_lambda_radial() -> f64 {
    0.3e-3
}

fn default_background_diffusivity() -> f64 {
    0.7e-3
}

fn default_swelling_range() -> [f64; 2] {
    [1.5, 2.5]
}

fn default_jitter_location() -> f64 {
    2.0
}

fn default_jitter_size() -> f64 {
    1.0
}

fn default_jitter_angle() -> f64 {
    10.0
}

/// Six non-antipodal icosahedron vertex directions, unit norm.
pub fn default_gradients() -> Vec<[f64; 3]> {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let raw = [
        [0.0, 1.0, phi],
        [0.0, 1.0, -phi],
        [1.0, phi, 0.0],
        [1.0, -phi, 0.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, 1.0],
    ];
    raw.iter()
        .map(|g| {
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            [g[0] / n, g[1] / n, g[2] / n]
        })
        .collect()
}

impl PhantomSpec {
    /// A four-structure layout with two lesion sites, scaled to `dims`.
    pub fn default_layout(dims: [usize; 3]) -> Self {
        let (w, h) = (dims[0] as f64, dims[1] as f64);
        let q = |fx: f64, fy: f64| [fx * w, fy * h];
        let half = (w.min(h) / 9.0).floor();
        Self {
            dims,
            gradients: default_gradients(),
            b_value: default_b_value(),
            s0: default_s0(),
            background_diffusivity: default_background_diffusivity(),
            structures: vec![
                Structure {
                    center: q(0.25, 0.25),
                    half_size: half,
                    angle_deg: 0.0,
                    lambda_axial: default_lambda_axial(),
                    lambda_radial: default_lambda_radial(),
                },
                Structure {
                    center: q(0.75, 0.25),
                    half_size: half,
                    angle_deg: 35.0,
                    lambda_axial: default_lambda_axial(),
                    lambda_radial: default_lambda_radial(),
                },
                Structure {
                    center: q(0.25, 0.75),
                    half_size: half,
                    angle_deg: 70.0,
                    lambda_axial: default_lambda_axial(),
                    lambda_radial: default_lambda_radial(),
                },
                Structure {
                    center: q(0.75, 0.75),
                    half_size: half,
                    angle_deg: 110.0,
                    lambda_axial: default_lambda_axial(),
                    lambda_radial: default_lambda_radial(),
                },
            ],
            lesions: vec![
                Lesion {
                    center: q(0.25, 0.25),
                    radius: (half * 0.8).max(2.0),
                },
                Lesion {
                    center: q(0.75, 0.75),
                    radius: (half * 0.8).max(2.0),
                },
            ],
            swelling_range: default_swelling_range(),
            jitter: JitterSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims[2] != 1 {
            return Err(Error::Config(
                "phantom generator produces 2D slices (nz must be 1)".into(),
            ));
        }
        if self.dims[0] == 0 || self.dims[1] == 0 {
            return Err(Error::Config("phantom dims must be nonzero".into()));
        }
        if self.gradients.is_empty() {
            return Err(Error::Config("at least one gradient direction".into()));
        }
        for g in &self.gradients {
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("gradient {g:?} is not unit norm")));
            }
        }
        if self.b_value < 0.0 || self.s0 <= 0.0 || self.background_diffusivity <= 0.0 {
            return Err(Error::Config("b >= 0, s0 > 0, background > 0 required".into()));
        }
        if self.swelling_range[0] <= 1.0 || self.swelling_range[1] < self.swelling_range[0] {
            return Err(Error::Config(
                "swelling range must satisfy 1 < lo <= hi".into(),
            ));
        }
        let slack = self.jitter.location + self.jitter.size;
        for s in &self.structures {
            if s.half_size <= 0.0 || s.lambda_axial <= 0.0 || s.lambda_radial <= 0.0 {
                return Err(Error::Config("structure sizes/eigenvalues must be > 0".into()));
            }
            // rotated square plus worst-case jitter must stay inside the slice
            let reach = s.half_size * 2.0f64.sqrt() + slack;
            if s.center[0] - reach < 0.0
                || s.center[1] - reach < 0.0
                || s.center[0] + reach >= self.dims[0] as f64
                || s.center[1] + reach >= self.dims[1] as f64
            {
                return Err(Error::StructureOutOfBounds(format!(
                    "structure at {:?} (reach {reach:.1}) exceeds {}x{}",
                    s.center, self.dims[0], self.dims[1]
                )));
            }
        }
        for l in &self.lesions {
            if l.radius <= 0.0 {
                return Err(Error::Config("lesion radius must be > 0".into()));
            }
        }
        Ok(())
    }

    fn without_lesions(&self) -> Self {
        let mut s = self.clone();
        s.lesions.clear();
        s
    }
}

/// Per-voxel symmetric tensors, packed [xx, xy, xz, yy, yz, zz].
#[derive(Debug, Clone)]
pub struct TensorField {
    pub dims: [usize; 3],
    pub tensors: Vec<[f64; 6]>,
}

impl TensorField {
    #[inline]
    pub fn tensor(&self, x: usize, y: usize, z: usize) -> &[f64; 6] {
        &self.tensors[(z * self.dims[1] + y) * self.dims[0] + x]
    }
}

#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub dw: Volume,
    pub lesion_mask: Mask,
    pub tensor_field: TensorField,
}

fn sym_from_eigen(angle_rad: f64, l_axial: f64, l_r1: f64, l_r2: f64) -> [f64; 6] {
    // e1 = (c, s, 0), e2 = (-s, c, 0), e3 = (0, 0, 1)
    let (s, c) = angle_rad.sin_cos();
    let xx = l_axial * c * c + l_r1 * s * s;
    let yy = l_axial * s * s + l_r1 * c * c;
    let xy = (l_axial - l_r1) * s * c;
    [xx, xy, 0.0, yy, 0.0, l_r2]
}

fn isotropic(d: f64) -> [f64; 6] {
    [d, 0.0, 0.0, d, 0.0, d]
}

fn is_spd(t: &[f64; 6]) -> bool {
    // Sylvester's criterion on the leading principal minors.
    let [xx, xy, xz, yy, yz, zz] = *t;
    let m1 = xx;
    let m2 = xx * yy - xy * xy;
    let m3 = xx * (yy * zz - yz * yz) - xy * (xy * zz - yz * xz) + xz * (xy * yz - yy * xz);
    m1 > 0.0 && m2 > 0.0 && m3 > 0.0
}

/// One subject's phantom. Jitter and the lesion swelling factor are drawn
/// from `rng`; the returned lesion mask is always the unjittered reference
/// layout, independent of the subject's perturbation.
pub fn generate_phantom(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<PhantomTruth> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims[0] * dims[1] * dims[2];

    fn jit<R: Rng>(rng: &mut R, m: f64) -> f64 {
        if m > 0.0 {
            rng.gen_range(-m..=m)
        } else {
            0.0
        }
    }

    // Draw all subject-level perturbations up front, in a fixed order, so the
    // stream layout does not depend on later rasterization choices.
    struct Placed {
        center: [f64; 2],
        half_size: f64,
        angle_rad: f64,
        l_axial: f64,
        l_radial: f64,
    }
    let placed: Vec<Placed> = spec
        .structures
        .iter()
        .map(|s| Placed {
            center: [
                s.center[0] + jit(rng, spec.jitter.location),
                s.center[1] + jit(rng, spec.jitter.location),
            ],
            half_size: (s.half_size + jit(rng, spec.jitter.size)).max(1.0),
            angle_rad: (s.angle_deg + jit(rng, spec.jitter.angle_deg)) * PI / 180.0,
            l_axial: s.lambda_axial,
            l_radial: s.lambda_radial,
        })
        .collect();
    let lesion_centers: Vec<[f64; 2]> = spec
        .lesions
        .iter()
        .map(|l| {
            [
                l.center[0] + jit(rng, spec.jitter.location),
                l.center[1] + jit(rng, spec.jitter.location),
            ]
        })
        .collect();
    let swelling = if spec.lesions.is_empty() {
        1.0
    } else {
        rng.gen_range(spec.swelling_range[0]..=spec.swelling_range[1])
    };

    let mut tensors = vec![isotropic(spec.background_diffusivity); n];
    let mut lesion_mask = Mask::empty(dims);

    for y in 0..dims[1] {
        for x in 0..dims[0] {
            let idx = y * dims[0] + x;
            let (px, py) = (x as f64, y as f64);

            // innermost structure wins; later structures override earlier
            let mut eigen: Option<(f64, f64, f64)> = None; // (angle, axial, radial)
            for p in &placed {
                let dx = px - p.center[0];
                let dy = py - p.center[1];
                let (sn, cs) = p.angle_rad.sin_cos();
                let u = cs * dx + sn * dy;
                let v = -sn * dx + cs * dy;
                if u.abs() <= p.half_size && v.abs() <= p.half_size {
                    eigen = Some((p.angle_rad, p.l_axial, p.l_radial));
                }
            }

            if let Some((angle, axial, radial)) = eigen {
                let mut r1 = radial;
                let mut r2 = radial;
                for (l, c) in spec.lesions.iter().zip(&lesion_centers) {
                    let dx = px - c[0];
                    let dy = py - c[1];
                    if dx * dx + dy * dy <= l.radius * l.radius {
                        r1 = radial * swelling;
                        r2 = radial * swelling;
                    }
                }
                tensors[idx] = sym_from_eigen(angle, axial, r1, r2);
            }

            // ground truth from the reference (unjittered) lesion circles
            for l in &spec.lesions {
                let dx = px - l.center[0];
                let dy = py - l.center[1];
                if dx * dx + dy * dy <= l.radius * l.radius {
                    lesion_mask.set(x, y, 0, true);
                }
            }
        }
    }

    let field = TensorField { dims, tensors };
    let dw = dw_signal(&field, &spec.gradients, spec.b_value, spec.s0)?;
    Ok(PhantomTruth {
        dw,
        lesion_mask,
        tensor_field: field,
    })
}

/// Stejskal-Tanner forward model: channel i holds s0 * exp(-b * g_i' D g_i).
pub fn dw_signal(
    field: &TensorField,
    gradients: &[[f64; 3]],
    b: f64,
    s0: f64,
) -> Result<Volume> {
    if b < 0.0 {
        return Err(Error::Config("b-value must be >= 0".into()));
    }
    let c = gradients.len();
    let mut data = Vec::with_capacity(field.tensors.len() * c);
    for (i, t) in field.tensors.iter().enumerate() {
        if !is_spd(t) {
            let (nx, ny) = (field.dims[0], field.dims[1]);
            return Err(Error::NonSpdTensor([i % nx, (i / nx) % ny, i / (nx * ny)]));
        }
        let [xx, xy, xz, yy, yz, zz] = *t;
        for g in gradients {
            let q = xx * g[0] * g[0]
                + yy * g[1] * g[1]
                + zz * g[2] * g[2]
                + 2.0 * (xy * g[0] * g[1] + xz * g[0] * g[2] + yz * g[1] * g[2]);
            data.push((s0 * (-b * q).exp()) as f32);
        }
    }
    Volume::new(field.dims, c, [1.0, 1.0, 1.0], data)
}

fn gaussian_pair(rng: &mut impl Rng) -> (f64, f64) {
    // Box-Muller; u1 in (0,1] avoids ln(0)
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * PI * u2).sin_cos();
    (r * c, r * s)
}

/// Rician noise in the complex domain: out = sqrt((s+n1)^2 + n2^2) with
/// n1, n2 ~ N(0, sigma^2) and sigma = v * theta / 100.
pub fn add_rician_noise(
    vol: &Volume,
    theta_percent: f64,
    v: f64,
    rng: &mut impl Rng,
) -> Result<Volume> {
    if theta_percent < 0.0 || v <= 0.0 {
        return Err(Error::Config("theta >= 0 and v > 0 required".into()));
    }
    let sigma = v * theta_percent / 100.0;
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let data: Vec<f32> = vol
        .data()
        .iter()
        .map(|&s| {
            let (n1, n2) = gaussian_pair(rng);
            let re = s as f64 + sigma * n1;
            let im = sigma * n2;
            (re * re + im * im).sqrt() as f32
        })
        .collect();
    Volume::new(vol.dims(), vol.channels(), vol.voxel_size(), data)
}

/// Control and patient cohorts plus the reference lesion mask. Subjects get
/// independent jitter and noise streams keyed by (seed, role, index), so
/// generation order and cohort sizes do not couple the draws.
pub fn make_cohorts(
    spec: &PhantomSpec,
    n_control: usize,
    n_patient: usize,
    theta_percent: f64,
    seed: u64,
) -> Result<(Vec<Volume>, Vec<Volume>, Mask)> {
    if n_control == 0 || n_patient == 0 {
        return Err(Error::Config("cohort sizes must be >= 1".into()));
    }
    spec.validate()?;
    let control_spec = spec.without_lesions();

    let subject = |sp: &PhantomSpec, role: u64, i: usize| -> Result<Volume> {
        let mut jrng = stream(seed, &[tag::SUBJECT_JITTER, role, i as u64]);
        let truth = generate_phantom(sp, &mut jrng)?;
        if theta_percent == 0.0 {
            return Ok(truth.dw);
        }
        let mut nrng = stream(seed, &[tag::SUBJECT_NOISE, role, i as u64]);
        add_rician_noise(&truth.dw, theta_percent, sp.s0, &mut nrng)
    };

    let controls = (0..n_control)
        .map(|i| subject(&control_spec, tag::CONTROL, i))
        .collect::<Result<Vec<_>>>()?;
    let patients = (0..n_patient)
        .map(|i| subject(spec, tag::PATIENT, i))
        .collect::<Result<Vec<_>>>()?;

    // reference truth: unjittered lesioned layout
    let mut ref_rng = stream(seed, &[tag::SUBJECT_JITTER, 0, 0]);
    let mut ref_spec = spec.clone();
    ref_spec.jitter = JitterSpec {
        location: 0.0,
        size: 0.0,
        angle_deg: 0.0,
    };
    let truth = generate_phantom(&ref_spec, &mut ref_rng)?;
    Ok((controls, patients, truth.lesion_mask))
}

/// Writes a cohort to disk as BVOL files plus a manifest and truth mask;
/// returns the manifest path.
pub fn write_cohorts(
    dir: &Path,
    spec: &PhantomSpec,
    n_control: usize,
    n_patient: usize,
    theta_percent: f64,
    seed: u64,
) -> Result<PathBuf> {
    let (controls, patients, truth) = make_cohorts(spec, n_control, n_patient, theta_percent, seed)?;
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut images = Vec::new();
    for (i, v) in controls.iter().enumerate() {
        let p = dir.join(format!("control_{i:03}.bvol"));
        save_volume(v, &p)?;
        images.push(ManifestEntry { path: p, group: 1 });
    }
    for (i, v) in patients.iter().enumerate() {
        let p = dir.join(format!("patient_{i:03}.bvol"));
        save_volume(v, &p)?;
        images.push(ManifestEntry { path: p, group: 2 });
    }
    save_volume(&truth.to_volume(), &dir.join("truth_mask.bvol"))?;
    let manifest = DatasetManifest {
        mask: None,
        images,
        queries: None,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
