//! Rank correlation, continual-learning indices and bank divergence.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::normbank::TaskNormBank;

/// Average ranks (1-based); tied values share the mean of their rank span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average-rank tie handling.
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "srcc of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need at least two observations".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("srcc inputs must be finite"));
    }
    pearson(&average_ranks(a), &average_ranks(b))
        .ok_or_else(|| Error::UndefinedCorrelation("a ranking has zero variance".into()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of the final model's SRCC over every task.
pub fn msrcc(final_row: &[f64]) -> f64 {
    mean(final_row)
}

/// Mean of the diagonal `SRCC_tt`.
pub fn mpi(diagonal: &[f64]) -> f64 {
    mean(diagonal)
}

/// Stability indices from the cross-model matrix: row `t` (0-based) holds
/// `SRCC-hat_tk` for `k < t`, so row 0 is empty. `SI_1 = 1`.
pub fn msi(cross: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if cross.is_empty() {
        return Err(invalid("empty cross-model matrix"));
    }
    let mut si = Vec::with_capacity(cross.len());
    for (t, row) in cross.iter().enumerate() {
        if row.len() != t {
            return Err(invalid(format!(
                "cross-model row {t} has {} entries, expected {t}",
                row.len()
            )));
        }
        si.push(if t == 0 { 1.0 } else { mean(row) });
    }
    let m = mean(&si);
    Ok((si, m))
}

/// `PSI_t = (PI_t + SI_t) / 2` and their mean.
pub fn mpsi(pi: &[f64], si: &[f64]) -> Result<(Vec<f64>, f64)> {
    if pi.len() != si.len() || pi.is_empty() {
        return Err(invalid(
            "plasticity and stability vectors must be equal and non-empty",
        ));
    }
    let psi: Vec<f64> = pi.iter().zip(si).map(|(p, s)| (p + s) / 2.0).collect();
    let m = mean(&psi);
    Ok((psi, m))
}

/// Every metric derived from one task sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceResults {
    /// Row `t` holds `SRCC_tk` for `k ≤ t`.
    pub srcc: Vec<Vec<f64>>,
    /// Row `t` holds `SRCC-hat_tk` for `k < t`.
    pub cross: Vec<Vec<f64>>,
    pub msrcc: f64,
    pub pi: Vec<f64>,
    pub mpi: f64,
    pub si: Vec<f64>,
    pub msi: f64,
    pub psi: Vec<f64>,
    pub mpsi: f64,
}

impl SequenceResults {
    pub fn from_matrices(srcc: Vec<Vec<f64>>, cross: Vec<Vec<f64>>) -> Result<Self> {
        if srcc.is_empty() || srcc.len() != cross.len() {
            return Err(invalid(
                "SRCC and cross-model matrices must have equal non-zero rows",
            ));
        }
        for (t, row) in srcc.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(invalid(format!(
                    "SRCC row {t} has {} entries, expected {}",
                    row.len(),
                    t + 1
                )));
            }
        }
        let pi: Vec<f64> = srcc.iter().enumerate().map(|(t, row)| row[t]).collect();
        let (si, msi_v) = msi(&cross)?;
        let (psi, mpsi_v) = mpsi(&pi, &si)?;
        Ok(Self {
            msrcc: msrcc(srcc.last().expect("non-empty")),
            mpi: mpi(&pi),
            srcc,
            cross,
            pi,
            si,
            msi: msi_v,
            psi,
            mpsi: mpsi_v,
        })
    }

    pub fn len(&self) -> usize {
        self.srcc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.srcc.is_empty()
    }

    /// `mPSI_t` for every prefix length `t`.
    pub fn length_curve(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.psi
            .iter()
            .enumerate()
            .map(|(t, p)| {
                acc += p;
                acc / (t + 1) as f64
            })
            .collect()
    }
}

/// Diagonal Gaussian over the last normalization site's running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BankGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(invalid("mean and variance lengths differ"));
        }
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("variances must be positive"));
        }
        Ok(Self { mean, var })
    }

    pub fn from_bank(bank: &TaskNormBank) -> Result<Self> {
        let last = bank
            .sites()
            .last()
            .ok_or_else(|| invalid("bank has no sites"))?;
        Self::new(
            last.mean.iter().map(|&v| v as f64).collect(),
            last.var.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// `KL(p ‖ q)` between diagonal Gaussians.
pub fn bank_kl(p: &BankGaussian, q: &BankGaussian) -> Result<f64> {
    if p.mean.len() != q.mean.len() {
        return Err(invalid("Gaussians have different dimensions"));
    }
    if p.var.iter().chain(&q.var).any(|&v| !(v > 0.0)) {
        return Err(invalid("variances must be positive"));
    }
    let mut kl = 0.0;
    for c in 0..p.mean.len() {
        let (vp, vq) = (p.var[c], q.var[c]);
        let d = p.mean[c] - q.mean[c];
        kl += 0.5 * (vq / vp).ln() + (vp + d * d) / (2.0 * vq) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// Pairwise `KL_ij = KL(bank_i ‖ bank_j)`.
pub fn kl_matrix(gaussians: &[BankGaussian]) -> Result<Vec<Vec<f64>>> {
    gaussians
        .iter()
        .map(|p| gaussians.iter().map(|q| bank_kl(p, q)).collect())
        .collect()
}

/// SRCC between the off-diagonal entries of two square matrices.
pub fn kl_vs_srcc_correlation(kl: &[Vec<f64>], cross_srcc: &[Vec<f64>]) -> Result<f64> {
    let n = kl.len();
    if cross_srcc.len() != n || kl.iter().chain(cross_srcc).any(|r| r.len() != n) {
        return Err(invalid("matrices must be square with equal shapes"));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a.push(kl[i][j]);
                b.push(cross_srcc[i][j]);
            }
        }
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "fewer than two off-diagonal pairs".into(),
        ));
    }
    srcc(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hand evaluation: ranks of [1,2,2,3] are [1, 2.5, 2.5, 4] against
    /// [1,2,3,4]; Pearson of those is 4.5 / sqrt(4.5 · 5).
    const TIE_EXAMPLE: f64 = 0.9486832980505138;

    #[test]
    fn srcc_examples() {
        assert_eq!(srcc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(srcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = srcc(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - TIE_EXAMPLE).abs() < 1e-12);
    }

    #[test]
    fn srcc_errors() {
        assert!(matches!(
            srcc(&[1.0], &[1.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            srcc(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(srcc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn index_arithmetic() {
        assert_eq!(msrcc(&[1.0; 4]), 1.0);
        assert!((mpi(&[0.7; 3]) - 0.7).abs() < 1e-12);
        assert_eq!(mpi(&[0.42]), 0.42);
        let (si, m) = msi(&[vec![], vec![0.8]]).unwrap();
        assert_eq!(si, vec![1.0, 0.8]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!(msi(&[vec![], vec![]]).is_err());
        let (_, m) = mpsi(&[0.853], &[0.979]).unwrap();
        assert!((m - 0.916).abs() < 5e-4);
        let (_, m) = mpsi(&[0.6, 0.8], &[0.6, 0.8]).unwrap();
        assert!((m - mpi(&[0.6, 0.8])).abs() < 1e-12);
        assert_eq!(mpsi(&[1.0; 3], &[1.0; 3]).unwrap().1, 1.0);
    }

    #[test]
    fn msrcc_is_permutation_invariant() {
        let a = [0.81, 0.9, 0.77, 0.86];
        let b = [0.86, 0.77, 0.81, 0.9];
        assert!((msrcc(&a) - msrcc(&b)).abs() < 1e-15);
    }

    #[test]
    fn sequence_results_single_task() {
        let r = SequenceResults::from_matrices(vec![vec![0.9]], vec![vec![]]).unwrap();
        assert_eq!(r.msi, 1.0);
        assert!((r.mpsi - 0.95).abs() < 1e-12);
        assert_eq!(r.length_curve(), vec![r.psi[0]]);
    }

    #[test]
    fn sequence_curve_matches_recomputation() {
        let srcc_m = vec![vec![0.9], vec![0.8, 0.85], vec![0.7, 0.8, 0.95]];
        let cross = vec![vec![], vec![0.97], vec![0.9, 0.99]];
        let r = SequenceResults::from_matrices(srcc_m.clone(), cross.clone()).unwrap();
        for t in 0..3 {
            let prefix =
                SequenceResults::from_matrices(srcc_m[..=t].to_vec(), cross[..=t].to_vec())
                    .unwrap();
            assert!((r.length_curve()[t] - prefix.mpsi).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let p = BankGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let q = BankGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(bank_kl(&p, &p).unwrap(), 0.0);
        assert!((bank_kl(&p, &q).unwrap() - 0.5).abs() < 1e-12);
        let a = BankGaussian::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let b = BankGaussian::new(vec![0.5, -1.0], vec![3.0, 0.5]).unwrap();
        assert!((bank_kl(&a, &b).unwrap() - bank_kl(&b, &a).unwrap()).abs() > 1e-3);
        assert!(BankGaussian::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn kl_srcc_correlation() {
        let s = vec![
            vec![1.0, 0.8, 0.3],
            vec![0.7, 1.0, 0.5],
            vec![0.2, 0.6, 1.0],
        ];
        let neg: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        assert!((kl_vs_srcc_correlation(&neg, &s).unwrap() + 1.0).abs() < 1e-12);
        // Relabel tasks by the permutation (2, 0, 1) in both matrices.
        let perm = [2usize, 0, 1];
        let permute = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..3)
                .map(|i| (0..3).map(|j| m[perm[i]][perm[j]]).collect())
                .collect()
        };
        let kl = vec![
            vec![0.0, 2.0, 5.0],
            vec![1.0, 0.0, 3.0],
            vec![6.0, 2.5, 0.0],
        ];
        let base = kl_vs_srcc_correlation(&kl, &s).unwrap();
        let moved = kl_vs_srcc_correlation(&permute(&kl), &permute(&s)).unwrap();
        assert!((base - moved).abs() < 1e-12);
        assert!(kl_vs_srcc_correlation(&[vec![0.0]], &[vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn srcc_invariant_under_increasing_transform(
            a in prop::collection::vec(-100.0f64..100.0, 3..40),
            seed in 0u64..1000,
        ) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x.sin() + (i as f64 * seed as f64).cos()).collect();
            if let Ok(r) = srcc(&a, &b) {
                let t: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0 * x).collect();
                let r2 = srcc(&t, &b).unwrap();
                prop_assert!((r - r2).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_on_identity(
            m in prop::collection::vec(-5.0f64..5.0, 1..8),
            v in prop::collection::vec(0.05f64..4.0, 8),
            shift in -2.0f64..2.0,
        ) {
            let var = v[..m.len()].to_vec();
            let p = BankGaussian::new(m.clone(), var.clone()).unwrap();
            prop_assert!(bank_kl(&p, &p).unwrap().abs() <= 1e-9);
            let q = BankGaussian::new(m.iter().map(|x| x + shift).collect(), var.iter().rev().cloned().collect()).unwrap();
            prop_assert!(bank_kl(&p, &q).unwrap() >= 0.0);
        }
    }
}
