use std::fs::File;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;

use lesionscope::attribution::{explain, write_explanation, Method, MethodParams};
use lesionscope::autodiff::Target;
use lesionscope::evalkit::{
    compose_panel, localization_score, normalize_map, render_heatmap, tensor_to_rgb,
    write_metric_rows, Colormap, EvalError, Localization, MetricRow, NormMode,
};
use lesionscope::netgraph::{fold_batchnorm, model_digest, ModelGraph};

use crate::error::{io_at, CliError, Result};
use crate::inputs::{create_dir, from_images, from_manifest, Item};
use crate::pipeline::load;
use crate::{MapArgs, MethodArgs, ModelArgs, OutArgs};

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Image to explain; repeatable.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    /// Manifest of images to explain (masks enable localization metrics).
    #[arg(long, conflicts_with = "images")]
    pub manifest: Option<PathBuf>,
    /// Prelogit neuron to explain; defaults to the predicted class.
    #[arg(long)]
    pub target_neuron: Option<usize>,
    /// Blend heatmaps over the input image.
    #[arg(long)]
    pub overlay: bool,
    #[command(flatten)]
    pub methods: MethodArgs,
    #[command(flatten)]
    pub map: MapArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

/// The model prepared for explanation: batch-norm folded into the
/// preceding layers, evaluated in f64, and the digest of the original.
pub struct Explainer {
    pub model: ModelGraph<f64>,
    pub digest: String,
}

impl Explainer {
    pub fn new(model: &ModelArgs) -> Result<Self> {
        let original = load(model)?;
        Ok(Self {
            model: fold_batchnorm(&original)?.cast(),
            digest: model_digest(&original),
        })
    }
}

/// Requested methods deduplicated and in canonical panel order.
pub fn panel_order(methods: &[Method]) -> Vec<Method> {
    let mut out = methods.to_vec();
    out.sort_by_key(|m| m.rank());
    out.dedup();
    out
}

struct Settings {
    methods: Vec<Method>,
    params: MethodParams,
    norm: NormMode,
    colormap: Colormap,
    topk: Option<usize>,
    target_neuron: Option<usize>,
    overlay: bool,
}

pub fn run(args: &ExplainArgs) -> Result<()> {
    let settings = Settings {
        methods: panel_order(&args.methods.methods()?),
        params: args.methods.params()?,
        norm: args.map.norm_mode()?,
        colormap: args.map.colormap()?,
        topk: args.map.topk,
        target_neuron: args.target_neuron,
        overlay: args.overlay,
    };
    let explainer = Explainer::new(&args.model)?;
    if let Some(n) = args.target_neuron {
        if n >= explainer.model.num_classes() {
            return Err(CliError::Usage(format!(
                "target neuron {n} out of range for {} classes",
                explainer.model.num_classes()
            )));
        }
    }
    let items = match (&args.manifest, args.images.is_empty()) {
        (Some(m), _) => from_manifest(m)?.0,
        (None, false) => from_images(&args.images)?,
        (None, true) => return Err(CliError::Usage("give --image or --manifest".into())),
    };
    let out = &args.out.out;
    create_dir(out)?;
    let per_item = items
        .par_iter()
        .map(|item| explain_item(&explainer, item, &settings, out))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<MetricRow> = per_item.into_iter().flatten().collect();
    let path = out.join("metrics.csv");
    write_metric_rows(&rows, File::create(&path).map_err(io_at(&path))?)?;
    println!(
        "explained {} images with {} methods into {}",
        items.len(),
        settings.methods.len(),
        out.display()
    );
    Ok(())
}

pub fn top_k(explicit: Option<usize>, item: &Item) -> usize {
    let area = item.mask.as_ref().map(|m| m.area()).unwrap_or(0);
    let [_, h, w] = item.image.shape() else {
        unreachable!("images are [3,H,W]")
    };
    explicit.unwrap_or(if area > 0 { area } else { (h * w / 10).max(1) })
}

fn explain_item(
    explainer: &Explainer,
    item: &Item,
    s: &Settings,
    out: &Path,
) -> Result<Vec<MetricRow>> {
    let x = item.image.cast::<f64>();
    let model = &explainer.model;
    let target = match s.target_neuron {
        Some(n) => Target::new(model.prelogits_id(), n),
        None => Target::predicted(model, &x)?,
    };
    let dir = out.join(&item.name);
    create_dir(&dir)?;
    let base = tensor_to_rgb(&item.image)?;
    let mask = item.mask.as_ref().filter(|m| !m.is_empty());
    let k = top_k(s.topk, item);
    let mut tiles = vec![base.clone()];
    let mut rows = Vec::new();
    let row = |method: Method, metric: String, value: f64| MetricRow {
        image: item.name.clone(),
        method: method.name().into(),
        metric,
        value,
    };
    for &method in &s.methods {
        let map = explain(model, &x, &target, method, &s.params)?.with_digest(&explainer.digest);
        write_explanation(dir.join(format!("{method}.expl")), &map)?;
        let normalized = normalize_map(&map, s.norm)?;
        let heat = render_heatmap(&normalized, s.colormap, s.overlay.then_some(&base), mask)?;
        heat.save(dir.join(format!("{method}.png")))
            .map_err(EvalError::from)?;
        tiles.push(heat);

        rows.push(row(method, "target_neuron".into(), target.neuron as f64));
        rows.push(row(method, "raw_sum".into(), map.raw.sum()));
        if let Some(mask) = mask {
            for variant in [Localization::MassInMask, Localization::TopKInMask(k)] {
                match localization_score(&normalized, mask, variant) {
                    Ok(v) => rows.push(row(method, variant.name(), v)),
                    // an all-zero map has no mass to localize
                    Err(EvalError::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    compose_panel(&tiles, 2)
        .save(dir.join("panel.png"))
        .map_err(EvalError::from)?;
    Ok(rows)
}
