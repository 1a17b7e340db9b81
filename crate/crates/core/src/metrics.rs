//! Grading metrics: accuracy, rank AUC, macro precision/recall/F1,
//! confusion matrices and joint accuracy.

use serde::Serialize;

use crate::error::{Error, Result};

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Usage(format!("{what}: {a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::UndefinedMetric(format!("{what} of an empty set")));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_len("accuracy", preds.len(), labels.len())?;
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

/// Fraction of samples whose two predictions both match.
pub fn joint_accuracy(preds: &[(usize, usize)], labels: &[(usize, usize)]) -> Result<f64> {
    check_len("joint_accuracy", preds.len(), labels.len())?;
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

/// Mann–Whitney AUC: the probability that a random positive scores above a
/// random negative, ties counting one half. Computed from mid-ranks.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_len("auc", scores.len(), positive.len())?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("AUC score {s} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC averaged over classes. `probs` is row-major `N×K`.
/// Classes without both positives and negatives are skipped; binary
/// problems reduce to the AUC of class 1.
pub fn auc_ovr(probs: &[f64], labels: &[usize], k: usize) -> Result<f64> {
    if probs.len() != labels.len() * k {
        return Err(Error::Usage(format!(
            "auc_ovr: {} scores for {} samples × {k} classes",
            probs.len(),
            labels.len()
        )));
    }
    let classes: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    let mut vals = Vec::new();
    for c in classes {
        let scores: Vec<f64> = probs.chunks(k).map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match auc(&scores, &pos) {
            Ok(v) => vals.push(v),
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(Error::UndefinedMetric("no class has both positives and negatives".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassStats>,
    /// Classes absent from the labels; they enter the macro average as 0.
    pub zero_support: Vec<usize>,
    /// `confusion[label][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_len("confusion_matrix", preds.len(), labels.len())?;
    let mut m = vec![vec![0usize; k]; k];
    for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        if p >= k || l >= k {
            return Err(Error::Data(format!(
                "sample {i}: prediction {p} / label {l} out of range for {k} classes"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class and macro-averaged precision, recall and F1.
pub fn prf1_confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<Prf1> {
    let confusion = confusion_matrix(preds, labels, k)?;
    let mut per_class = Vec::with_capacity(k);
    let mut zero_support = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..k).map(|l| confusion[l][c]).sum();
        if support == 0 {
            zero_support.push(c);
        }
        let (p, r) = (ratio(tp, predicted), ratio(tp, support));
        per_class.push(ClassStats {
            precision: p,
            recall: r,
            f1: f1(p, r),
            support,
        });
    }
    let mean = |f: fn(&ClassStats) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(Prf1 {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        per_class,
        zero_support,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiseaseMetrics {
    pub accuracy: f64,
    /// `None` when the evaluated labels contain a single class.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Class-1 precision/recall/F1 for binary problems.
    pub precision_pos: Option<f64>,
    pub recall_pos: Option<f64>,
    pub f1_pos: Option<f64>,
    pub zero_support: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

impl DiseaseMetrics {
    /// `probs` is row-major `N×K` class probabilities.
    pub fn compute(preds: &[usize], probs: &[f64], labels: &[usize], k: usize) -> Result<Self> {
        let prf = prf1_confusion(preds, labels, k)?;
        let auc = match auc_ovr(probs, labels, k) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let pos = (k == 2).then(|| prf.per_class[1].clone());
        Ok(DiseaseMetrics {
            accuracy: accuracy(preds, labels)?,
            auc,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            precision_pos: pos.as_ref().map(|c| c.precision),
            recall_pos: pos.as_ref().map(|c| c.recall),
            f1_pos: pos.as_ref().map(|c| c.f1),
            zero_support: prf.zero_support,
            confusion: prf.confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    /// Only defined when both diseases are predicted.
    pub joint_accuracy: Option<f64>,
    pub a: Option<DiseaseMetrics>,
    pub b: Option<DiseaseMetrics>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "n,joint_ac,ac_a,auc_a,pre_a,rec_a,f1_a,ac_b,auc_b,pre_b,rec_b,f1_b";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// One row under [`Self::CSV_HEADER`]; missing values are empty.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let d = |m: &Option<DiseaseMetrics>| match m {
            Some(m) => format!(
                "{},{},{},{},{}",
                f(Some(m.accuracy)),
                f(m.auc),
                f(Some(m.precision)),
                f(Some(m.recall)),
                f(Some(m.f1))
            ),
            None => ",,,,".to_string(),
        };
        format!("{},{},{},{}", self.n, f(self.joint_accuracy), d(&self.a), d(&self.b))
    }
}
