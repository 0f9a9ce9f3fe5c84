//! Query-image selection via affinity propagation clustering.
//!
//! Exemplars of each group serve as block-matching references, avoiding the
//! bias of a single hand-picked reference image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Pairwise similarities s(i,k) = -||I_i - I_k||^2 over masked voxels, with
/// the shared preference on the diagonal.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub s: Vec<f64>,
    pub preference: f64,
}

impl SimilarityMatrix {
    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.s[i * self.n + k]
    }
}

#[derive(Debug, Clone)]
pub struct ApResult {
    pub exemplar_indices: Vec<usize>,
    pub assignment: Vec<usize>,
    pub iterations_run: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApParams {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_stable_iters")]
    pub stable_iters: usize,
    /// Groups at or below this size skip clustering and use all images.
    #[serde(default = "default_small_group")]
    pub small_group_threshold: usize,
}

fn default_damping() -> f64 {
    0.9
}

fn default_max_iter() -> usize {
    1000
}

fn default_stable_iters() -> usize {
    50
}

fn default_small_group() -> usize {
    8
}

impl Default for ApParams {
    fn default() -> Self {
        Self {
            damping: default_damping(),
            max_iter: default_max_iter(),
            stable_iters: default_stable_iters(),
            small_group_threshold: default_small_group(),
        }
    }
}

/// Negative squared Euclidean distance between images over masked voxels;
/// diagonal set to the median off-diagonal similarity.
pub fn similarity_matrix(images: &[&Volume], mask: &Mask) -> Result<SimilarityMatrix> {
    let n = images.len();
    if n < 2 {
        return Err(Error::Config("similarity matrix needs >= 2 images".into()));
    }
    let dims = images[0].dims();
    let channels = images[0].channels();
    for img in images {
        if img.dims() != dims || img.channels() != channels {
            return Err(Error::DimsMismatch("similarity matrix image dims".into()));
        }
    }
    if mask.dims() != dims {
        return Err(Error::DimsMismatch("similarity matrix mask dims".into()));
    }

    let masked: Vec<usize> = (0..dims[0] * dims[1] * dims[2])
        .filter(|&v| mask.data()[v])
        .collect();

    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for k in i + 1..n {
            let (a, b) = (images[i].data(), images[k].data());
            let mut d2 = 0.0;
            for &v in &masked {
                let base = v * channels;
                for c in 0..channels {
                    let d = a[base + c] as f64 - b[base + c] as f64;
                    d2 += d * d;
                }
            }
            s[i * n + k] = -d2;
            s[k * n + i] = -d2;
        }
    }

    let mut off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
        .map(|(i, k)| s[i * n + k])
        .collect();
    off.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let preference = if off.len() % 2 == 1 {
        off[off.len() / 2]
    } else {
        0.5 * (off[off.len() / 2 - 1] + off[off.len() / 2])
    };
    for i in 0..n {
        s[i * n + i] = preference;
    }
    Ok(SimilarityMatrix { n, s, preference })
}

/// Frey-Dueck responsibility/availability message passing with damping.
/// Deterministic: no randomness, ties resolved towards lower indices.
pub fn affinity_propagation(
    sim: &SimilarityMatrix,
    damping: f64,
    max_iter: usize,
    stable_iters: usize,
) -> Result<ApResult> {
    if !(0.5..1.0).contains(&damping) {
        return Err(Error::Config(format!("damping {damping} not in [0.5, 1)")));
    }
    let n = sim.n;
    if n == 1 {
        return Ok(ApResult {
            exemplar_indices: vec![0],
            assignment: vec![0],
            iterations_run: 0,
            converged: true,
        });
    }

    let mut r = vec![0.0f64; n * n];
    let mut a = vec![0.0f64; n * n];
    let mut exemplars: Vec<usize> = Vec::new();
    let mut stable = 0usize;
    let mut iterations_run = 0usize;
    let mut converged = false;

    for it in 0..max_iter {
        iterations_run = it + 1;

        // responsibilities
        for i in 0..n {
            // top two values of a(i,k) + s(i,k) across k
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0usize;
            let mut second = f64::NEG_INFINITY;
            for k in 0..n {
                let v = a[i * n + k] + sim.get(i, k);
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let max_other = if k == best_k { second } else { best };
                let new_r = sim.get(i, k) - max_other;
                r[i * n + k] = damping * r[i * n + k] + (1.0 - damping) * new_r;
            }
        }

        // availabilities
        for k in 0..n {
            let mut pos_sum = 0.0;
            for i2 in 0..n {
                if i2 != k {
                    pos_sum += r[i2 * n + k].max(0.0);
                }
            }
            let rkk = r[k * n + k];
            for i in 0..n {
                let new_a = if i == k {
                    pos_sum
                } else {
                    (rkk + pos_sum - r[i * n + k].max(0.0)).min(0.0)
                };
                a[i * n + k] = damping * a[i * n + k] + (1.0 - damping) * new_a;
            }
        }

        let current: Vec<usize> = (0..n)
            .filter(|&k| r[k * n + k] + a[k * n + k] > 0.0)
            .collect();
        if !current.is_empty() && current == exemplars {
            stable += 1;
            if stable >= stable_iters {
                converged = true;
                break;
            }
        } else {
            stable = 0;
            exemplars = current;
        }
    }

    if exemplars.is_empty() {
        // Fall back to the single item with the largest self-evidence.
        let mut best = (f64::NEG_INFINITY, 0usize);
        for k in 0..n {
            let v = r[k * n + k] + a[k * n + k];
            if v > best.0 {
                best = (v, k);
            }
        }
        exemplars = vec![best.1];
    }

    // Each non-exemplar goes to the exemplar with maximal similarity;
    // exemplars assign to themselves. Lower index wins ties.
    let assignment: Vec<usize> = (0..n)
        .map(|i| {
            if exemplars.contains(&i) {
                return i;
            }
            let mut best = (f64::NEG_INFINITY, exemplars[0]);
            for &e in &exemplars {
                let v = sim.get(i, e);
                if v > best.0 {
                    best = (v, e);
                }
            }
            best.1
        })
        .collect();

    Ok(ApResult {
        exemplar_indices: exemplars,
        assignment,
        iterations_run,
        converged,
    })
}

/// Query indices per group: AP exemplars for large groups, all images for
/// small ones. Returned indices are positions in the full image list.
pub fn select_queries(
    group_indices: (&[usize], &[usize]),
    images: &[Volume],
    mask: &Mask,
    params: &ApParams,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut out: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (slot, indices) in [group_indices.0, group_indices.1].iter().enumerate() {
        if indices.is_empty() {
            return Err(Error::Manifest("empty group in query selection".into()));
        }
        if indices.len() <= params.small_group_threshold {
            out[slot] = indices.to_vec();
            continue;
        }
        let group_images: Vec<&Volume> = indices.iter().map(|&i| &images[i]).collect();
        let sim = similarity_matrix(&group_images, mask)?;
        let ap = affinity_propagation(&sim, params.damping, params.max_iter, params.stable_iters)?;
        out[slot] = ap.exemplar_indices.iter().map(|&e| indices[e]).collect();
    }
    let [g1, g2] = out;
    Ok((g1, g2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn vol(values: Vec<f32>, dims: [usize; 3], c: usize) -> Volume {
        Volume::new(dims, c, [1.0, 1.0, 1.0], values).unwrap()
    }

    fn points_to_sim(points: &[Vec<f64>], preference: Option<f64>) -> SimilarityMatrix {
        let n = points.len();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                if i != k {
                    let d2: f64 = points[i]
                        .iter()
                        .zip(&points[k])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    s[i * n + k] = -d2;
                }
            }
        }
        let mut off: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| i * n + k))
            .map(|idx| s[idx])
            .collect();
        off.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pref = preference.unwrap_or_else(|| {
            if off.len() % 2 == 1 {
                off[off.len() / 2]
            } else {
                0.5 * (off[off.len() / 2 - 1] + off[off.len() / 2])
            }
        });
        for i in 0..n {
            s[i * n + i] = pref;
        }
        SimilarityMatrix {
            n,
            s,
            preference: pref,
        }
    }

    #[test]
    fn identical_images_have_zero_distance() {
        let a = vol(vec![1.0, 2.0, 3.0, 4.0], [2, 2, 1], 1);
        let b = a.clone();
        let sim = similarity_matrix(&[&a, &b], &Mask::full([2, 2, 1])).unwrap();
        assert_eq!(sim.get(0, 1), 0.0);
        assert_eq!(sim.get(1, 0), 0.0);
    }

    #[test]
    fn single_voxel_distance() {
        let a = vol(vec![1.0], [1, 1, 1], 1);
        let b = vol(vec![3.0], [1, 1, 1], 1);
        let sim = similarity_matrix(&[&a, &b], &Mask::full([1, 1, 1])).unwrap();
        assert_eq!(sim.get(0, 1), -4.0);
    }

    #[test]
    fn similarity_matches_brute_force() {
        let mut rng = crate::rng::stream(5, &[1]);
        let dims = [3, 3, 1];
        let c = 6;
        let imgs: Vec<Volume> = (0..3)
            .map(|_| {
                vol(
                    (0..dims[0] * dims[1] * c)
                        .map(|_| rng.gen_range(0.0..10.0))
                        .collect(),
                    dims,
                    c,
                )
            })
            .collect();
        let mut mask = Mask::full(dims);
        mask.set(0, 0, 0, false);
        let refs: Vec<&Volume> = imgs.iter().collect();
        let sim = similarity_matrix(&refs, &mask).unwrap();
        // brute force directly over coordinates
        for i in 0..3 {
            for k in 0..3 {
                if i == k {
                    continue;
                }
                let mut d2 = 0.0f64;
                for y in 0..3 {
                    for x in 0..3 {
                        if !mask.get(x, y, 0) {
                            continue;
                        }
                        for ch in 0..c {
                            let d = imgs[i].voxel(x, y, 0)[ch] as f64
                                - imgs[k].voxel(x, y, 0)[ch] as f64;
                            d2 += d * d;
                        }
                    }
                }
                assert!((sim.get(i, k) + d2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_item_is_its_own_exemplar() {
        let sim = SimilarityMatrix {
            n: 1,
            s: vec![0.0],
            preference: 0.0,
        };
        let ap = affinity_propagation(&sim, 0.9, 100, 10).unwrap();
        assert_eq!(ap.exemplar_indices, vec![0]);
        assert_eq!(ap.assignment, vec![0]);
    }

    #[test]
    fn two_clouds_give_two_exemplars_matching_medoids() {
        let mut rng = crate::rng::stream(8, &[2]);
        let mut points: Vec<Vec<f64>> = Vec::new();
        for _ in 0..10 {
            points.push(vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
        }
        for _ in 0..10 {
            points.push(vec![
                20.0 + rng.gen_range(-0.5..0.5),
                20.0 + rng.gen_range(-0.5..0.5),
            ]);
        }
        let sim = points_to_sim(&points, None);
        let ap = affinity_propagation(&sim, 0.9, 1000, 50).unwrap();
        assert_eq!(ap.exemplar_indices.len(), 2, "{:?}", ap.exemplar_indices);
        let (e1, e2) = (ap.exemplar_indices[0], ap.exemplar_indices[1]);
        assert!(e1 < 10 && e2 >= 10);
        for i in 0..20 {
            let assigned = ap.assignment[i];
            assert_eq!(assigned < 10, i < 10, "assignment crosses clouds");
        }

        // Brute-force 2-medoid minimizer over all pairs (one per cloud side
        // unconstrained); AP exemplars must equal the optimal pair.
        let cost = |a: usize, b: usize| -> f64 {
            points
                .iter()
                .map(|p| {
                    let d = |e: usize| -> f64 {
                        p.iter()
                            .zip(&points[e])
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum()
                    };
                    d(a).min(d(b))
                })
                .sum()
        };
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..20 {
            for b in a + 1..20 {
                let c = cost(a, b);
                if c < best.0 {
                    best = (c, a, b);
                }
            }
        }
        assert_eq!((e1, e2), (best.1, best.2));
    }

    #[test]
    fn high_preference_makes_every_item_an_exemplar() {
        // Preference far above the max off-diagonal similarity: the
        // self-exemplar limit of the message updates.
        let points = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.5],
            vec![2.0, 2.0],
        ];
        let sim = points_to_sim(&points, Some(100.0));
        let ap = affinity_propagation(&sim, 0.9, 1000, 50).unwrap();
        assert_eq!(ap.exemplar_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn exemplars_self_assign_and_assignments_point_to_exemplars() {
        let mut rng = crate::rng::stream(9, &[3]);
        let points: Vec<Vec<f64>> = (0..15)
            .map(|_| vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let sim = points_to_sim(&points, None);
        let ap = affinity_propagation(&sim, 0.9, 1000, 50).unwrap();
        for &e in &ap.exemplar_indices {
            assert_eq!(ap.assignment[e], e);
        }
        for &a in &ap.assignment {
            assert!(ap.exemplar_indices.contains(&a));
        }
        // assignment optimality
        for (i, &a) in ap.assignment.iter().enumerate() {
            if ap.exemplar_indices.contains(&i) {
                continue;
            }
            for &e in &ap.exemplar_indices {
                assert!(sim.get(i, a) >= sim.get(i, e));
            }
        }
    }

    #[test]
    fn determinism() {
        let points = vec![
            vec![0.0],
            vec![1.0],
            vec![5.0],
            vec![6.0],
            vec![10.0],
            vec![11.0],
        ];
        let sim = points_to_sim(&points, None);
        let a = affinity_propagation(&sim, 0.9, 500, 30).unwrap();
        let b = affinity_propagation(&sim, 0.9, 500, 30).unwrap();
        assert_eq!(a.exemplar_indices, b.exemplar_indices);
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn small_group_uses_all_images() {
        let imgs: Vec<Volume> = (0..5)
            .map(|i| vol(vec![i as f32; 4], [2, 2, 1], 1))
            .collect();
        let mask = Mask::full([2, 2, 1]);
        let (g1, g2) = select_queries(
            (&[0, 1, 2], &[3, 4]),
            &imgs,
            &mask,
            &ApParams::default(),
        )
        .unwrap();
        assert_eq!(g1, vec![0, 1, 2]);
        assert_eq!(g2, vec![3, 4]);
    }

    #[test]
    fn identical_large_group_collapses_to_one_exemplar() {
        let imgs: Vec<Volume> = (0..12)
            .map(|i| {
                if i < 10 {
                    vol(vec![3.0; 4], [2, 2, 1], 1)
                } else {
                    vol(vec![9.0; 4], [2, 2, 1], 1)
                }
            })
            .collect();
        let mask = Mask::full([2, 2, 1]);
        let group1: Vec<usize> = (0..10).collect();
        let (g1, g2) =
            select_queries((&group1, &[10, 11]), &imgs, &mask, &ApParams::default()).unwrap();
        assert_eq!(g1.len(), 1);
        assert_eq!(g2, vec![10, 11]);
    }

    #[test]
    fn template_families_yield_one_exemplar_each() {
        // 12 images built from 3 distinct templates plus small perturbations:
        // AP should find 3 exemplars, one per family.
        let mut rng = crate::rng::stream(10, &[4]);
        let dims = [8, 8, 1];
        let templates: [f32; 3] = [0.0, 50.0, 100.0];
        let mut imgs = Vec::new();
        let mut family = Vec::new();
        for f in 0..3 {
            for _ in 0..4 {
                let data: Vec<f32> = (0..64)
                    .map(|_| templates[f] + rng.gen_range(-0.5..0.5))
                    .collect();
                imgs.push(vol(data, dims, 1));
                family.push(f);
            }
        }
        let group: Vec<usize> = (0..12).collect();
        let other = vec![vol(vec![1.0; 64], dims, 1), vol(vec![2.0; 64], dims, 1)];
        let mut all = imgs.clone();
        all.extend(other);
        let (g1, _) = select_queries(
            (&group, &[12, 13]),
            &all,
            &Mask::full(dims),
            &ApParams::default(),
        )
        .unwrap();
        assert_eq!(g1.len(), 3, "exemplars {:?}", g1);
        let mut seen: Vec<usize> = g1.iter().map(|&e| family[e]).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }
}
