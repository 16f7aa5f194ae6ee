use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Downstream task type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify { num_classes: usize },
    Regress,
}

impl Task {
    pub fn outputs(&self) -> usize {
        match self {
            Task::Classify { num_classes } => *num_classes,
            Task::Regress => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Classify { .. } => "classify",
            Task::Regress => "regress",
        }
    }

    /// Class index of a label, for classification tasks.
    pub fn class_of(&self, label: f64) -> Result<usize> {
        match self {
            Task::Classify { num_classes } => {
                if label.fract() != 0.0 || label < 0.0 || label as usize >= *num_classes {
                    return Err(Error::invalid(format!("label {label} is not a class index below {num_classes}")));
                }
                Ok(label as usize)
            }
            Task::Regress => Err(Error::invalid("regression labels have no class")),
        }
    }
}

/// Metrics of one evaluation; fields that do not apply to the task are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
}

impl MetricSet {
    /// Field-wise mean over sets that report each field.
    pub fn mean(sets: &[MetricSet]) -> MetricSet {
        let avg = |f: fn(&MetricSet) -> Option<f64>| {
            let v: Vec<f64> = sets.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        MetricSet {
            acc: avg(|m| m.acc),
            auc: avg(|m| m.auc),
            mae: avg(|m| m.mae),
            r2: avg(|m| m.r2),
        }
    }
}

/// Area under the ROC curve through the Mann-Whitney statistic: the
/// fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Metrics from per-sample outputs: class probabilities for classification,
/// a single prediction for regression.
pub fn compute_metrics(outputs: &[Vec<f64>], labels: &[f64], task: Task) -> Result<MetricSet> {
    if outputs.len() != labels.len() {
        return Err(Error::invalid("outputs and labels differ in length"));
    }
    if outputs.len() < 2 {
        return Err(Error::invalid("metrics need at least two samples"));
    }
    if outputs.iter().any(|o| o.len() != task.outputs()) {
        return Err(Error::invalid(format!("each output must have {} entries", task.outputs())));
    }
    match task {
        Task::Classify { num_classes } => {
            let classes: Vec<usize> = labels.iter().map(|&l| task.class_of(l)).collect::<Result<_>>()?;
            let correct = outputs
                .iter()
                .zip(&classes)
                .filter(|(o, &c)| {
                    if num_classes == 2 {
                        (o[1] >= 0.5) == (c == 1)
                    } else {
                        o.iter().enumerate().fold(0, |b, (i, &v)| if v > o[b] { i } else { b }) == c
                    }
                })
                .count();
            let auc = if num_classes == 2 {
                let s: Vec<f64> = outputs.iter().map(|o| o[1]).collect();
                auc(&s, &classes.iter().map(|&c| c == 1).collect::<Vec<_>>())?
            } else {
                macro_ovr_auc(outputs, &classes)?
            };
            Ok(MetricSet {
                acc: Some(correct as f64 / labels.len() as f64),
                auc: Some(auc),
                mae: None,
                r2: None,
            })
        }
        Task::Regress => {
            let pred: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            let (mae, r2) = regression_metrics(&pred, labels)?;
            Ok(MetricSet {
                acc: None,
                auc: None,
                mae: Some(mae),
                r2: Some(r2),
            })
        }
    }
}

/// Per-fold metrics and their mean from `(fold, output, label)` triples, as
/// produced by cross-validation.
pub fn fold_metrics(rows: &[(usize, Vec<f64>, f64)], task: Task) -> Result<(Vec<MetricSet>, MetricSet)> {
    let k = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let (outputs, labels): (Vec<Vec<f64>>, Vec<f64>) = rows.iter().filter(|r| r.0 == f).map(|r| (r.1.clone(), r.2)).unzip();
        if outputs.is_empty() {
            return Err(Error::invalid(format!("fold {f} has no rows")));
        }
        folds.push(compute_metrics(&outputs, &labels, task)?);
    }
    let mean = MetricSet::mean(&folds);
    Ok((folds, mean))
}

/// Unweighted mean of one-vs-rest AUCs over classes that occur with at least
/// one other class present.
pub fn macro_ovr_auc(probs: &[Vec<f64>], classes: &[usize]) -> Result<f64> {
    let k = probs.first().map_or(0, Vec::len);
    let mut aucs = Vec::new();
    for c in 0..k {
        let pos: Vec<bool> = classes.iter().map(|&x| x == c).collect();
        if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
            continue;
        }
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        aucs.push(auc(&s, &pos)?);
    }
    if aucs.is_empty() {
        return Err(Error::Undefined("AUC needs at least two classes".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Mean absolute error and `1 - SS_res / SS_tot`.
pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid("predictions and targets must be equally long and non-empty"));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("R2 of a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((mae, 1.0 - ss_res / ss_tot))
}
