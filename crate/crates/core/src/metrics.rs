//! Prediction error and partition-agreement scores.
//!
//! Pair-counting scores are computed from exact integer counts with a single
//! final division. Information scores use natural logarithms.
//!
//! Conventions for degenerate inputs: identical partitions always score 1 on
//! every agreement metric; a ratio whose denominator vanishes otherwise
//! scores 0.

use std::collections::HashMap;
use std::hash::Hash;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Root-mean-square error over all entries.
pub fn rmse<T: Scalar>(y_true: ArrayView2<'_, T>, y_pred: ArrayView2<'_, T>) -> Result<f64> {
    if y_true.dim() != y_pred.dim() {
        return Err(Error::ShapeMismatch(format!(
            "truth is {:?}, prediction is {:?}",
            y_true.dim(),
            y_pred.dim()
        )));
    }
    let n = y_true.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("rmse of empty matrices".into()));
    }
    let sum: f64 = y_true
        .iter()
        .zip(y_pred.iter())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok((sum / n as f64).sqrt())
}

/// Counts of co-occurring labels; rows index the first labeling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn encode_labels<L: Eq + Hash + Clone>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut ids: HashMap<L, usize> = HashMap::new();
    let coded = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(l.clone()).or_insert(next)
        })
        .collect();
    (coded, ids.len())
}

fn check_lengths<L>(a: &[L], b: &[L]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Cross-tabulates two labelings. Categories are ordered by first appearance.
pub fn contingency<L: Eq + Hash + Clone>(x_labels: &[L], y_labels: &[L]) -> Result<ContingencyTable> {
    check_lengths(x_labels, y_labels)?;
    let (xs, nx) = encode_labels(x_labels);
    let (ys, ny) = encode_labels(y_labels);
    let mut counts = vec![vec![0u64; ny]; nx];
    for (&a, &b) in xs.iter().zip(&ys) {
        counts[a][b] += 1;
    }
    let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums = (0..ny).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    Ok(ContingencyTable {
        counts,
        row_sums,
        col_sums,
        n: x_labels.len() as u64,
    })
}

impl ContingencyTable {
    fn cells(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, &c)| (i, j, c)))
            .filter(|&(_, _, c)| c > 0)
    }

    /// True when both labelings describe the same partition.
    pub fn is_identity(&self) -> bool {
        self.row_sums.len() == self.col_sums.len() && self.cells().count() == self.row_sums.len()
    }

    pub fn entropy_rows(&self) -> f64 {
        entropy(&self.row_sums, self.n)
    }

    pub fn entropy_cols(&self) -> f64 {
        entropy(&self.col_sums, self.n)
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        self.cells()
            .map(|(i, j, c)| {
                let c = c as f64;
                c / n * (n * c / (self.row_sums[i] as f64 * self.col_sums[j] as f64)).ln()
            })
            .sum()
    }

    /// `H(rows | cols)`.
    pub fn conditional_entropy_rows(&self) -> f64 {
        let n = self.n as f64;
        -self
            .cells()
            .map(|(_, j, c)| c as f64 / n * (c as f64 / self.col_sums[j] as f64).ln())
            .sum::<f64>()
    }

    /// `H(cols | rows)`.
    pub fn conditional_entropy_cols(&self) -> f64 {
        let n = self.n as f64;
        -self
            .cells()
            .map(|(i, _, c)| c as f64 / n * (c as f64 / self.row_sums[i] as f64).ln())
            .sum::<f64>()
    }
}

fn entropy(sizes: &[u64], n: u64) -> f64 {
    let n = n as f64;
    -sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Mutual information normalized by the geometric mean of the entropies.
pub fn nmi(table: &ContingencyTable) -> f64 {
    if table.is_identity() {
        return 1.0;
    }
    let hx = table.entropy_rows();
    let hy = table.entropy_cols();
    if hx == 0.0 || hy == 0.0 {
        return 0.0;
    }
    table.mutual_information() / (hx * hy).sqrt()
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Expected mutual information under the hypergeometric permutation model.
pub fn expected_mutual_information(table: &ContingencyTable) -> f64 {
    let n = table.n;
    let nf = n as f64;
    let lf = ln_factorials(n);
    let mut emi = 0.0;
    for &a in &table.row_sums {
        for &b in &table.col_sums {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let log_p = lf[a as usize] + lf[b as usize] + lf[(n - a) as usize] + lf[(n - b) as usize]
                    - lf[n as usize]
                    - lf[nij as usize]
                    - lf[(a - nij) as usize]
                    - lf[(b - nij) as usize]
                    - lf[(n + nij - a - b) as usize];
                let term = nij as f64 / nf * (nf * nij as f64 / (a as f64 * b as f64)).ln();
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with the arithmetic-mean normalizer.
pub fn ami(table: &ContingencyTable) -> f64 {
    if table.is_identity() {
        return 1.0;
    }
    let mi = table.mutual_information();
    let emi = expected_mutual_information(table);
    let normalizer = 0.5 * (table.entropy_rows() + table.entropy_cols());
    let mut denominator = normalizer - emi;
    if denominator < 0.0 {
        denominator = denominator.min(-f64::EPSILON);
    } else {
        denominator = denominator.max(f64::EPSILON);
    }
    (mi - emi) / denominator
}

/// Harmonic mean of homogeneity and completeness; rows are the truth.
pub fn v_measure(table: &ContingencyTable) -> f64 {
    let (h, c) = homogeneity_completeness(table);
    if h + c == 0.0 {
        0.0
    } else {
        2.0 * h * c / (h + c)
    }
}

pub fn homogeneity_completeness(table: &ContingencyTable) -> (f64, f64) {
    let h_truth = table.entropy_rows();
    let h_pred = table.entropy_cols();
    let homogeneity = if h_truth == 0.0 {
        1.0
    } else {
        1.0 - table.conditional_entropy_rows() / h_truth
    };
    let completeness = if h_pred == 0.0 {
        1.0
    } else {
        1.0 - table.conditional_entropy_cols() / h_pred
    };
    (homogeneity, completeness)
}

/// Unordered-pair agreement counts between a truth and a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    /// Together in both.
    pub tp: u64,
    /// Together in the prediction only.
    pub fp: u64,
    /// Together in the truth only.
    pub fn_: u64,
    /// Apart in both.
    pub tn: u64,
}

fn choose2(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

impl PairCounts {
    pub fn from_table(table: &ContingencyTable) -> Self {
        let tp: u64 = table.cells().map(|(_, _, c)| choose2(c)).sum();
        let truth: u64 = table.row_sums.iter().map(|&a| choose2(a)).sum();
        let pred: u64 = table.col_sums.iter().map(|&b| choose2(b)).sum();
        let total = choose2(table.n);
        Self {
            tp,
            fp: pred - tp,
            fn_: truth - tp,
            tn: total + tp - pred - truth,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// No pair is together in either labeling.
    fn all_apart(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

/// Pair counts for `truth` versus `pred`.
pub fn pair_counts<L: Eq + Hash + Clone>(truth: &[L], pred: &[L]) -> Result<PairCounts> {
    Ok(PairCounts::from_table(&contingency(truth, pred)?))
}

/// Fowlkes-Mallows index.
pub fn fmi(pc: &PairCounts) -> f64 {
    if pc.all_apart() {
        return 1.0;
    }
    let denominator = ((pc.tp + pc.fp) as f64 * (pc.tp + pc.fn_) as f64).sqrt();
    if denominator == 0.0 {
        0.0
    } else {
        pc.tp as f64 / denominator
    }
}

/// Rand index.
pub fn ri(pc: &PairCounts) -> f64 {
    let total = pc.total();
    if total == 0 {
        1.0
    } else {
        (pc.tp + pc.tn) as f64 / total as f64
    }
}

/// Adjusted Rand index from pair counts.
pub fn ari_from_pairs(pc: &PairCounts) -> f64 {
    let index = pc.tp as i128;
    let truth = (pc.tp + pc.fn_) as i128;
    let pred = (pc.tp + pc.fp) as i128;
    let total = pc.total() as i128;
    let numerator = 2 * (index * total - truth * pred);
    let denominator = (truth + pred) * total - 2 * truth * pred;
    if denominator == 0 {
        1.0
    } else {
        numerator as f64 / denominator as f64
    }
}

/// Adjusted Rand index.
pub fn ari(table: &ContingencyTable) -> f64 {
    ari_from_pairs(&PairCounts::from_table(table))
}

/// Pair-counting F1 score.
pub fn pair_f1(pc: &PairCounts) -> f64 {
    if pc.all_apart() {
        return 1.0;
    }
    2.0 * pc.tp as f64 / (2 * pc.tp + pc.fp + pc.fn_) as f64
}

/// Pair-counting Jaccard index `tp / (tp + fp + fn)`.
pub fn pair_jaccard(pc: &PairCounts) -> f64 {
    if pc.all_apart() {
        return 1.0;
    }
    pc.tp as f64 / (pc.tp + pc.fp + pc.fn_) as f64
}

/// RMSE and the seven clustering scores; absent fields were not requested.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: Option<f64>,
    pub nmi: Option<f64>,
    pub ami: Option<f64>,
    pub fmi: Option<f64>,
    pub ari: Option<f64>,
    pub v_measure: Option<f64>,
    pub f1: Option<f64>,
    pub jaccard: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 8] = ["NMI", "AMI", "FMI", "ARI", "V-Measure", "F1-Score", "Jaccard", "RMSE"];

impl EvalReport {
    /// Clustering scores scaled to percentages. RMSE is left as is.
    pub fn as_percent(&self) -> Self {
        let pct = |v: Option<f64>| v.map(|x| x * 100.0);
        Self {
            rmse: self.rmse,
            nmi: pct(self.nmi),
            ami: pct(self.ami),
            fmi: pct(self.fmi),
            ari: pct(self.ari),
            v_measure: pct(self.v_measure),
            f1: pct(self.f1),
            jaccard: pct(self.jaccard),
        }
    }

    fn ordered(&self) -> [Option<f64>; 8] {
        [self.nmi, self.ami, self.fmi, self.ari, self.v_measure, self.f1, self.jaccard, self.rmse]
    }

    /// Header plus one row; missing fields are empty cells.
    pub fn to_csv(&self) -> String {
        let row: Vec<String> = self
            .ordered()
            .iter()
            .map(|v| v.map(|x| format!("{x}")).unwrap_or_default())
            .collect();
        format!("{}\n{}\n", REPORT_COLUMNS.join(","), row.join(","))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Every clustering score for one truth/prediction pair.
pub fn clustering_scores<L: Eq + Hash + Clone>(truth: &[L], pred: &[L]) -> Result<EvalReport> {
    let table = contingency(truth, pred)?;
    let pc = PairCounts::from_table(&table);
    Ok(EvalReport {
        rmse: None,
        nmi: Some(nmi(&table)),
        ami: Some(ami(&table)),
        fmi: Some(fmi(&pc)),
        ari: Some(ari_from_pairs(&pc)),
        v_measure: Some(v_measure(&table)),
        f1: Some(pair_f1(&pc)),
        jaccard: Some(pair_jaccard(&pc)),
    })
}

/// Populates whichever parts of the report the inputs allow.
pub fn evaluate<T: Scalar, L: Eq + Hash + Clone>(
    y_true: Option<ArrayView2<'_, T>>,
    y_pred: Option<ArrayView2<'_, T>>,
    labels_true: Option<&[L]>,
    labels_pred: Option<&[L]>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut any = false;
    match (y_true, y_pred) {
        (Some(t), Some(p)) => {
            report.rmse = Some(rmse(t, p)?);
            any = true;
        }
        (None, None) => {}
        _ => return Err(Error::InvalidValue("matrix evaluation needs both truth and prediction".into())),
    }
    match (labels_true, labels_pred) {
        (Some(t), Some(p)) => {
            if t.is_empty() {
                return Err(Error::NothingToEvaluate);
            }
            let scores = clustering_scores(t, p)?;
            report = EvalReport { rmse: report.rmse, ..scores };
            any = true;
        }
        (None, None) => {}
        _ => return Err(Error::InvalidValue("label evaluation needs both truth and prediction".into())),
    }
    if !any {
        return Err(Error::NothingToEvaluate);
    }
    Ok(report)
}
