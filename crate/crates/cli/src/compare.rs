use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::File;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;

use lesionscope::attribution::{explain, Method};
use lesionscope::autodiff::Target;
use lesionscope::evalkit::{
    agreement, localization_score, normalize_map, write_metric_rows, Agreement, EvalError,
    Localization, MetricRow,
};
use lesionscope::tensor::Tensor;

use crate::error::{io_at, CliError, Result};
use crate::explain::{top_k, Explainer};
use crate::inputs::{create_dir, from_manifest, Item};
use crate::{MapArgs, MethodArgs, ModelArgs, OutArgs};

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Manifest whose rows all carry a mask.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Correct predictions with mass_in_mask below this multiple of the mask
    /// area fraction are flagged as possible spurious-feature cases.
    #[arg(long, default_value_t = 2.0)]
    pub low_factor: f64,
    /// Wrong predictions with mass_in_mask above this multiple of the mask
    /// area fraction are flagged as possible confounded-symptom cases.
    #[arg(long, default_value_t = 4.0)]
    pub high_factor: f64,
    #[command(flatten)]
    pub methods: MethodArgs,
    #[command(flatten)]
    pub map: MapArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

struct ItemReport {
    agreement: Vec<MetricRow>,
    localization: Vec<MetricRow>,
    predicted: usize,
    /// `(method, mass_in_mask)` for images with a lesion.
    mass: Vec<(Method, f64)>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn run(args: &CompareArgs) -> Result<()> {
    let methods = args.methods.methods()?;
    let params = args.methods.params()?;
    let norm = args.map.norm_mode()?;
    let explainer = Explainer::new(&args.model)?;
    let (items, names) = from_manifest(&args.manifest)?;
    let missing: Vec<String> = items
        .iter()
        .enumerate()
        .filter(|(_, i)| i.mask.is_none())
        .map(|(n, i)| format!("row {} ({})", n + 1, i.path.display()))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingMasks(missing));
    }

    let report = |item: &Item| -> Result<ItemReport> {
        let model = &explainer.model;
        let x = item.image.cast::<f64>();
        let target = Target::predicted(model, &x)?;
        let mut maps: BTreeMap<usize, Tensor<f64>> = BTreeMap::new();
        for &m in &methods {
            if let Entry::Vacant(slot) = maps.entry(m.rank()) {
                let map = explain(model, &x, &target, m, &params)?;
                slot.insert(normalize_map(&map, norm)?);
            }
        }
        let mask = item.mask.as_ref().expect("checked above");
        let k = top_k(args.map.topk, item);
        let row = |method: String, metric: String, value: f64| MetricRow {
            image: item.name.clone(),
            method,
            metric,
            value,
        };
        let mut out = ItemReport {
            agreement: Vec::new(),
            localization: Vec::new(),
            predicted: target.neuron,
            mass: Vec::new(),
        };
        for (i, &a) in methods.iter().enumerate() {
            for &b in &methods[i + 1..] {
                for metric in [Agreement::Spearman, Agreement::TopKIou(k)] {
                    match agreement(&maps[&a.rank()], &maps[&b.rank()], metric) {
                        Ok(v) => out
                            .agreement
                            .push(row(format!("{a}:{b}"), metric.name(), v)),
                        Err(EvalError::UndefinedMetric(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        if !mask.is_empty() {
            for &m in &methods {
                for variant in [Localization::MassInMask, Localization::TopKInMask(k)] {
                    match localization_score(&maps[&m.rank()], mask, variant) {
                        Ok(v) => {
                            if variant == Localization::MassInMask {
                                out.mass.push((m, v));
                            }
                            out.localization
                                .push(row(m.name().into(), variant.name(), v));
                        }
                        Err(EvalError::UndefinedMetric(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        Ok(out)
    };
    let reports = items.par_iter().map(report).collect::<Result<Vec<_>>>()?;

    let out = &args.out.out;
    create_dir(out)?;
    for (file, pick) in [
        (
            "agreement.csv",
            (|r: &ItemReport| &r.agreement) as fn(&ItemReport) -> &Vec<MetricRow>,
        ),
        ("localization.csv", |r: &ItemReport| &r.localization),
    ] {
        let rows: Vec<MetricRow> = reports
            .iter()
            .flat_map(|r| pick(r).iter().cloned())
            .collect();
        let path = out.join(file);
        write_metric_rows(&rows, File::create(&path).map_err(io_at(&path))?)?;
    }

    let path = out.join("flags.csv");
    let mut w = csv::Writer::from_writer(File::create(&path).map_err(io_at(&path))?);
    w.write_record([
        "image",
        "label",
        "predicted",
        "method",
        "mass_in_mask",
        "area_fraction",
        "flag",
    ])?;
    let mut per_method: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut fractions = Vec::new();
    for (item, r) in items.iter().zip(&reports) {
        let label = item.label.expect("manifest rows carry labels");
        let fraction = item.mask.as_ref().map(|m| m.area_fraction()).unwrap_or(0.0);
        if !r.mass.is_empty() {
            fractions.push(fraction);
        }
        for &(m, mass) in &r.mass {
            per_method.entry(m.rank()).or_default().push(mass);
            let flag = if label == r.predicted && mass < args.low_factor * fraction {
                "correct_low_localization"
            } else if label != r.predicted && mass > args.high_factor * fraction {
                "misclassified_high_localization"
            } else {
                continue;
            };
            w.write_record([
                item.name.clone(),
                names[label].clone(),
                names[r.predicted].clone(),
                m.name().to_string(),
                mass.to_string(),
                fraction.to_string(),
                flag.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_at(&path))?;

    let path = out.join("summary.csv");
    let mut w = csv::Writer::from_writer(File::create(&path).map_err(io_at(&path))?);
    w.write_record([
        "method",
        "images",
        "median_mass_in_mask",
        "mean_area_fraction",
    ])?;
    let mean_fraction = fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
    for (rank, mut masses) in per_method {
        let method = Method::ALL[rank];
        let med = median(&mut masses);
        w.write_record([
            method.name().to_string(),
            masses.len().to_string(),
            med.to_string(),
            mean_fraction.to_string(),
        ])?;
        println!(
            "{method}: median mass_in_mask {med:.4} over {} images (mean area fraction {mean_fraction:.4})",
            masses.len()
        );
    }
    w.flush().map_err(io_at(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::median;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
