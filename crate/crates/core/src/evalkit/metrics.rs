use std::io::Write;

use serde::Serialize;

use super::{AnnotationMask, EvalError, Result};
use crate::tensor::Tensor;

/// Counts of (true class, predicted class) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<usize>>,
    /// Each row divided by its total; all zeros for absent classes.
    pub row_normalized: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Trace over total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: usize = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }

    /// Header row of class names, then one row per true class with
    /// `true_class,count...` followed by the same layout for percentages.
    pub fn write_csv<W: Write>(&self, names: &[String], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (i, row) in self.counts.iter().enumerate() {
            let mut rec = vec![names[i].clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        for (i, row) in self.row_normalized.iter().enumerate() {
            let mut rec = vec![format!("{}_percent", names[i])];
            rec.extend(row.iter().map(|f| format!("{:.2}", 100.0 * f)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn confusion_matrix(
    labels: &[usize],
    predictions: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(EvalError::Invalid(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut counts = vec![vec![0usize; classes]; classes];
    for (k, (&l, &p)) in labels.iter().zip(predictions).enumerate() {
        if l >= classes || p >= classes {
            return Err(EvalError::Invalid(format!(
                "sample {k}: class id ({l}, {p}) out of range for {classes} classes"
            )));
        }
        counts[l][p] += 1;
    }
    let row_normalized = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total == 0 {
                        0.0
                    } else {
                        c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        counts,
        row_normalized,
    })
}

/// Indices of the `k` largest values, ordered by value descending then
/// index ascending.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Localization {
    /// Share of the map's total mass inside the mask.
    MassInMask,
    /// Share of the `k` highest-scoring pixels inside the mask.
    TopKInMask(usize),
}

impl Localization {
    pub fn name(self) -> String {
        match self {
            Localization::MassInMask => "mass_in_mask".into(),
            Localization::TopKInMask(k) => format!("top{k}_in_mask"),
        }
    }
}

pub fn localization_score(
    map: &Tensor<f64>,
    mask: &AnnotationMask,
    variant: Localization,
) -> Result<f64> {
    if map.shape() != [mask.height(), mask.width()] {
        return Err(EvalError::Shape(format!(
            "map {:?} vs mask {}x{}",
            map.shape(),
            mask.height(),
            mask.width()
        )));
    }
    match variant {
        Localization::MassInMask => {
            if mask.is_empty() {
                return Err(EvalError::UndefinedMetric(
                    "mass_in_mask needs a non-empty mask".into(),
                ));
            }
            let (mut inside, mut total) = (0.0, 0.0);
            for (&v, &m) in map.data().iter().zip(mask.grid()) {
                total += v;
                if m {
                    inside += v;
                }
            }
            if total <= 0.0 {
                return Err(EvalError::UndefinedMetric(
                    "mass_in_mask needs a map with positive total mass".into(),
                ));
            }
            Ok(inside / total)
        }
        Localization::TopKInMask(k) => {
            if k == 0 || k > map.len() {
                return Err(EvalError::Invalid(format!(
                    "top-k needs 1 <= k <= {}, got {k}",
                    map.len()
                )));
            }
            let hits = top_k_indices(map.data(), k)
                .into_iter()
                .filter(|&i| mask.grid()[i])
                .count();
            Ok(hits as f64 / k as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agreement {
    /// Pearson correlation of average ranks.
    Spearman,
    /// Intersection over union of the two top-k pixel sets.
    TopKIou(usize),
}

impl Agreement {
    pub fn name(self) -> String {
        match self {
            Agreement::Spearman => "spearman".into(),
            Agreement::TopKIou(k) => format!("top{k}_iou"),
        }
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn agreement(a: &Tensor<f64>, b: &Tensor<f64>, metric: Agreement) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(EvalError::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    match metric {
        Agreement::Spearman => {
            let (ra, rb) = (average_ranks(a.data()), average_ranks(b.data()));
            let n = ra.len() as f64;
            let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
            let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
            for (x, y) in ra.iter().zip(&rb) {
                cov += (x - ma) * (y - mb);
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
            }
            if va == 0.0 || vb == 0.0 {
                return Err(EvalError::UndefinedMetric(
                    "spearman correlation of a constant map".into(),
                ));
            }
            Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
        }
        Agreement::TopKIou(k) => {
            if k == 0 || k > a.len() {
                return Err(EvalError::Invalid(format!(
                    "top-k needs 1 <= k <= {}, got {k}",
                    a.len()
                )));
            }
            let mut in_a = vec![false; a.len()];
            for i in top_k_indices(a.data(), k) {
                in_a[i] = true;
            }
            let top_b = top_k_indices(b.data(), k);
            let inter = top_b.iter().filter(|&&i| in_a[i]).count();
            Ok(inter as f64 / (2 * k - inter) as f64)
        }
    }
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub image: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

/// Writes rows as CSV with an `image,method,metric,value` header.
pub fn write_metric_rows<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["image", "method", "metric", "value"])?;
    }
    w.flush()?;
    Ok(())
}
