//! Resampling-based FWER control (step-down minP) plus Bonferroni and
//! Benjamini-Hochberg baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Mask;

/// N_tests x B matrix of permutation statistic replicates plus the observed
/// statistics. Column b across rows corresponds to one shared relabeling.
#[derive(Debug, Clone)]
pub struct StatMatrix {
    pub n_tests: usize,
    pub b: usize,
    /// Row-major, n_tests * b.
    pub values: Vec<f64>,
    pub observed: Vec<f64>,
}

impl StatMatrix {
    pub fn new(n_tests: usize, b: usize, values: Vec<f64>, observed: Vec<f64>) -> Result<Self> {
        if values.len() != n_tests * b || observed.len() != n_tests {
            return Err(Error::DimsMismatch(format!(
                "stat matrix {}x{} vs values {} / observed {}",
                n_tests,
                b,
                values.len(),
                observed.len()
            )));
        }
        Ok(Self {
            n_tests,
            b,
            values,
            observed,
        })
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.b..(n + 1) * self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    Minp,
    Bonferroni,
    Bh,
    None,
}

/// Raw and adjusted p-values with the test-index-to-voxel map.
#[derive(Debug, Clone)]
pub struct PValueSet {
    pub raw: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub method: CorrectionMethod,
    pub voxel_index: Vec<[usize; 3]>,
}

/// Within-row rank transform: p*_{n,b} = #{b' : theta*_{n,b'} >= theta*_{n,b}} / B.
/// One sort per row, O(B log B).
pub fn raw_p_matrix(m: &StatMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.n_tests * m.b];
    let mut sorted: Vec<f64> = Vec::with_capacity(m.b);
    for n in 0..m.n_tests {
        let row = m.row(n);
        sorted.clear();
        sorted.extend_from_slice(row);
        // ascending; +inf sentinels sort last and tie among themselves
        sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let dst = &mut out[n * m.b..(n + 1) * m.b];
        for (o, &v) in dst.iter_mut().zip(row) {
            // count of values >= v = B - (number strictly below v)
            let below = sorted.partition_point(|&s| s < v);
            *o = (m.b - below) as f64 / m.b as f64;
        }
    }
    out
}

fn order_by_raw(raw: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..raw.len()).collect();
    // stable sort by (raw p, test index)
    idx.sort_by(|&a, &b| raw[a].partial_cmp(&raw[b]).unwrap().then(a.cmp(&b)));
    idx
}

/// Step-down minP adjustment. `raw` are the exact (+1-corrected) per-test
/// p-values computed from the matrix rows; `p_star` the rank transform from
/// `raw_p_matrix`.
pub fn stepdown_minp(
    m: &StatMatrix,
    raw: &[f64],
    voxel_index: Vec<[usize; 3]>,
) -> Result<PValueSet> {
    if raw.len() != m.n_tests || voxel_index.len() != m.n_tests {
        return Err(Error::DimsMismatch(
            "raw p / voxel index length vs matrix".into(),
        ));
    }
    let p_star = raw_p_matrix(m);
    let order = order_by_raw(raw);
    let b = m.b;
    let bf = b as f64;
    let mut adjusted = vec![0.0; m.n_tests];

    // Successive minima from the least significant row downwards.
    let mut q = vec![0.0f64; b];
    q.copy_from_slice(&p_star[order[m.n_tests - 1] * b..order[m.n_tests - 1] * b + b]);
    let count_le = |q: &[f64], p: f64| q.iter().filter(|&&v| v <= p).count() as f64;
    adjusted[order[m.n_tests - 1]] = count_le(&q, raw[order[m.n_tests - 1]]) / bf;
    for n in (0..m.n_tests - 1).rev() {
        let row = &p_star[order[n] * b..order[n] * b + b];
        for (qv, &pv) in q.iter_mut().zip(row) {
            if pv < *qv {
                *qv = pv;
            }
        }
        adjusted[order[n]] = count_le(&q, raw[order[n]]) / bf;
    }

    // Monotonicity along the raw-p order, then clip and floor at raw.
    for w in 1..m.n_tests {
        let prev = adjusted[order[w - 1]];
        if adjusted[order[w]] < prev {
            adjusted[order[w]] = prev;
        }
    }
    for (a, &r) in adjusted.iter_mut().zip(raw) {
        *a = a.max(r).min(1.0);
    }

    Ok(PValueSet {
        raw: raw.to_vec(),
        adjusted,
        method: CorrectionMethod::Minp,
        voxel_index,
    })
}

/// Bonferroni: min(1, N * p).
pub fn bonferroni(raw: &[f64], voxel_index: Vec<[usize; 3]>) -> PValueSet {
    let n = raw.len() as f64;
    let adjusted = raw.iter().map(|&p| (n * p).min(1.0)).collect();
    PValueSet {
        raw: raw.to_vec(),
        adjusted,
        method: CorrectionMethod::Bonferroni,
        voxel_index,
    }
}

/// Benjamini-Hochberg step-up adjusted values:
/// p~_(i) = min_{j >= i} min(1, N * p_(j) / j), mapped back to input order.
pub fn bh_fdr(raw: &[f64], voxel_index: Vec<[usize; 3]>) -> PValueSet {
    let n = raw.len();
    let order = order_by_raw(raw);
    let mut adjusted = vec![0.0; n];
    let mut running_min = 1.0f64;
    for i in (0..n).rev() {
        let rank = i + 1;
        let candidate = (n as f64 * raw[order[i]] / rank as f64).min(1.0);
        running_min = running_min.min(candidate);
        adjusted[order[i]] = running_min;
    }
    PValueSet {
        raw: raw.to_vec(),
        adjusted,
        method: CorrectionMethod::Bh,
        voxel_index,
    }
}

/// Identity "correction": adjusted equals raw.
pub fn uncorrected(raw: &[f64], voxel_index: Vec<[usize; 3]>) -> PValueSet {
    PValueSet {
        raw: raw.to_vec(),
        adjusted: raw.to_vec(),
        method: CorrectionMethod::None,
        voxel_index,
    }
}

/// Boolean significance map: true where adjusted p < alpha; voxels never
/// tested stay false.
pub fn threshold_map(pv: &PValueSet, alpha: f64, dims: [usize; 3]) -> Result<Mask> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} not in (0, 1)")));
    }
    let mut mask = Mask::empty(dims);
    for (v, &p) in pv.voxel_index.iter().zip(&pv.adjusted) {
        if p < alpha {
            mask.set(v[0], v[1], v[2], true);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::exact_p;

    fn vx(n: usize) -> Vec<[usize; 3]> {
        (0..n).map(|i| [i, 0, 0]).collect()
    }

    #[test]
    fn raw_p_matrix_constant_row() {
        let m = StatMatrix::new(1, 4, vec![2.0; 4], vec![2.0]).unwrap();
        assert_eq!(raw_p_matrix(&m), vec![1.0; 4]);
    }

    #[test]
    fn raw_p_matrix_strictly_decreasing_row() {
        let m = StatMatrix::new(1, 4, vec![9.0, 7.0, 5.0, 3.0], vec![9.0]).unwrap();
        assert_eq!(raw_p_matrix(&m), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn raw_p_matrix_hand_counts_with_ties() {
        let m = StatMatrix::new(1, 4, vec![3.0, 1.0, 3.0, 2.0], vec![3.0]).unwrap();
        assert_eq!(raw_p_matrix(&m), vec![0.5, 1.0, 0.5, 0.75]);
    }

    #[test]
    fn raw_p_matrix_column_permutation_equivariance() {
        let vals = vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.0];
        let m = StatMatrix::new(1, 6, vals.clone(), vec![0.0]).unwrap();
        let p = raw_p_matrix(&m);
        let perm = [5usize, 3, 0, 1, 4, 2];
        let pvals: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
        let mp = StatMatrix::new(1, 6, pvals, vec![0.0]).unwrap();
        let pp = raw_p_matrix(&mp);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(pp[j], p[i]);
        }
    }

    /// Literal line-by-line execution of the step-down minP procedure,
    /// written independently of the production path (per-column scans,
    /// no shared rank machinery).
    pub(crate) fn minp_oracle(observed: &[f64], matrix: &[Vec<f64>], raw: &[f64]) -> Vec<f64> {
        let n = observed.len();
        let b = matrix[0].len();
        // p*_{n,b} by direct counting
        let mut p_star = vec![vec![0.0; b]; n];
        for i in 0..n {
            for j in 0..b {
                let mut count = 0;
                for j2 in 0..b {
                    if matrix[i][j2] >= matrix[i][j] {
                        count += 1;
                    }
                }
                p_star[i][j] = count as f64 / b as f64;
            }
        }
        // order raw ascending with index tie-break
        let mut s: Vec<usize> = (0..n).collect();
        s.sort_by(|&a, &c| raw[a].partial_cmp(&raw[c]).unwrap().then(a.cmp(&c)));
        // successive minima and counting
        let mut q: Vec<Vec<f64>> = vec![vec![0.0; b]; n];
        q[n - 1] = p_star[s[n - 1]].clone();
        let mut adj = vec![0.0; n];
        let count_adj = |qrow: &[f64], p: f64| {
            qrow.iter().filter(|&&v| v <= p).count() as f64 / b as f64
        };
        adj[s[n - 1]] = count_adj(&q[n - 1], raw[s[n - 1]]);
        for step in (0..n - 1).rev() {
            for j in 0..b {
                q[step][j] = q[step + 1][j].min(p_star[s[step]][j]);
            }
            adj[s[step]] = count_adj(&q[step], raw[s[step]]);
        }
        // monotonicity constraint
        for w in 1..n {
            if adj[s[w]] < adj[s[w - 1]] {
                adj[s[w]] = adj[s[w - 1]];
            }
        }
        for i in 0..n {
            adj[i] = adj[i].max(raw[i]).min(1.0);
        }
        adj
    }

    #[test]
    fn single_row_minp_close_to_raw() {
        // Atomless row: adjusted equals raw up to 1/B discretization.
        let b = 64;
        let row: Vec<f64> = (0..b).map(|i| (i as f64) * 1.37 + 0.1).collect();
        let observed = 60.0; // between row values
        let m = StatMatrix::new(1, b, row.clone(), vec![observed]).unwrap();
        let raw = vec![exact_p(observed, &row)];
        let pv = stepdown_minp(&m, &raw, vx(1)).unwrap();
        assert!((pv.adjusted[0] - raw[0]).abs() <= 1.0 / b as f64 + 1.0 / (b as f64 + 1.0));
        let oracle = minp_oracle(&[observed], &[row], &raw);
        assert_eq!(pv.adjusted, oracle);
    }

    #[test]
    fn identical_rows_get_identical_adjustments() {
        let row = vec![5.0, 1.0, 3.0, 2.0, 4.0, 0.5, 2.5, 3.5];
        let values = [row.clone(), row.clone()].concat();
        let m = StatMatrix::new(2, 8, values, vec![4.2, 4.2]).unwrap();
        let raw = vec![exact_p(4.2, &row); 2];
        let pv = stepdown_minp(&m, &raw, vx(2)).unwrap();
        assert_eq!(pv.adjusted[0], pv.adjusted[1]);
    }

    #[test]
    fn fixed_toy_matrix_matches_algorithm_oracle() {
        // N = 3, B = 8 fixed small integers.
        let rows = vec![
            vec![5.0, 2.0, 8.0, 1.0, 6.0, 3.0, 7.0, 4.0],
            vec![1.0, 9.0, 2.0, 8.0, 3.0, 7.0, 4.0, 6.0],
            vec![4.0, 4.0, 4.0, 9.0, 1.0, 2.0, 8.0, 3.0],
        ];
        let observed = vec![7.5, 5.0, 4.0];
        let raw: Vec<f64> = observed
            .iter()
            .zip(&rows)
            .map(|(&o, r)| exact_p(o, r))
            .collect();
        let values: Vec<f64> = rows.concat();
        let m = StatMatrix::new(3, 8, values, observed.clone()).unwrap();
        let pv = stepdown_minp(&m, &raw, vx(3)).unwrap();
        let oracle = minp_oracle(&observed, &rows, &raw);
        assert_eq!(pv.adjusted, oracle);
        // adjusted >= raw and monotone along the raw order
        for (a, r) in pv.adjusted.iter().zip(&raw) {
            assert!(a >= r);
        }
    }

    #[test]
    fn bonferroni_hand_values() {
        let pv = bonferroni(&[0.004; 10], vx(10));
        assert!((pv.adjusted[0] - 0.04).abs() < 1e-15);
        let cap = bonferroni(&[0.2; 10], vx(10));
        assert_eq!(cap.adjusted[0], 1.0);
        let single = bonferroni(&[0.123], vx(1));
        assert_eq!(single.adjusted[0], 0.123);
    }

    #[test]
    fn bh_hand_values() {
        let pv = bh_fdr(&[0.01, 0.02, 0.03], vx(3));
        for a in &pv.adjusted {
            assert!((a - 0.03).abs() < 1e-15);
        }
        let ties = bh_fdr(&[0.2; 5], vx(5));
        for a in &ties.adjusted {
            assert!((a - 0.2).abs() < 1e-15);
        }
        let single = bh_fdr(&[0.07], vx(1));
        assert_eq!(single.adjusted[0], 0.07);
    }

    #[test]
    fn bh_never_exceeds_bonferroni() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, &[77]);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0001..1.0)).collect();
            let bh = bh_fdr(&raw, vx(12));
            let bonf = bonferroni(&raw, vx(12));
            for (a, b) in bh.adjusted.iter().zip(&bonf.adjusted) {
                assert!(a <= b, "bh {a} > bonferroni {b}");
            }
        }
    }

    #[test]
    fn threshold_map_behaviour() {
        let pv = PValueSet {
            raw: vec![0.001, 0.005],
            adjusted: vec![0.005, 0.02],
            method: CorrectionMethod::Minp,
            voxel_index: vec![[0, 0, 0], [1, 0, 0]],
        };
        let mask = threshold_map(&pv, 0.01, [2, 1, 1]).unwrap();
        assert!(mask.get(0, 0, 0));
        assert!(!mask.get(1, 0, 0));

        let all_ns = PValueSet {
            adjusted: vec![1.0, 1.0],
            ..pv.clone()
        };
        let empty = threshold_map(&all_ns, 0.01, [2, 1, 1]).unwrap();
        assert_eq!(empty.count(), 0);
    }
}
