use std::fs::File;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;

use lesionscope::evalkit::{confusion_matrix, render_confusion, EvalError};
use lesionscope::netgraph::{load_model_files, save_model_files, ModelGraph};
use lesionscope::trainer::{
    generate_synthetic, reference_net, train as fit, write_dataset, SyntheticDatasetSpec,
    TrainConfig,
};

use crate::error::{io_at, CliError, Result};
use crate::inputs::{create_dir, from_manifest};
use crate::{ModelArgs, OutArgs};

/// File names written by `train` inside the output directory.
pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "model.weights";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Images per class.
    #[arg(long, default_value_t = 60)]
    pub samples_per_class: usize,
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let spec = SyntheticDatasetSpec::three_class(args.samples_per_class, args.seed);
    let dataset = generate_synthetic(&spec)?;
    let manifest = write_dataset(&args.out.out, &dataset)?;
    println!(
        "wrote {} images; manifest {}",
        dataset.samples.len(),
        manifest.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Share of the data held out for early stopping.
    #[arg(long, default_value_t = 0.10)]
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    /// Redraw the validation split every epoch.
    #[arg(long)]
    pub resample_validation: bool,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (items, names) = from_manifest(&args.manifest)?;
    let shape = items[0].image.shape().to_vec();
    if let Some(bad) = items.iter().find(|i| i.image.shape() != shape.as_slice()) {
        return Err(CliError::Usage(format!(
            "{} has shape {:?}, expected {:?}",
            bad.path.display(),
            bad.image.shape(),
            shape
        )));
    }
    let template = reference_net([shape[0], shape[1], shape[2]], names.len())?;
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        max_epochs: args.epochs,
        validation_fraction: args.val_fraction,
        early_stop_patience: args.patience,
        seed: args.seed,
        resample_validation: args.resample_validation,
        ..Default::default()
    };
    let xs: Vec<_> = items.iter().map(|i| i.image.clone()).collect();
    let labels: Vec<usize> = items.iter().map(|i| i.label.unwrap_or(0)).collect();
    let (model, history) = fit(&template, &xs, &labels, &config)?;

    let out = &args.out.out;
    create_dir(out)?;
    save_model_files(&model, &out.join(MODEL_FILE), &out.join(WEIGHTS_FILE))?;
    let path = out.join(HISTORY_FILE);
    history.write_csv(File::create(&path).map_err(io_at(&path))?)?;
    match history
        .best_epoch
        .and_then(|b| history.epochs.iter().find(|e| e.epoch == b))
    {
        Some(best) => println!(
            "best epoch {}: val_acc {:.4} val_loss {:.4}",
            best.epoch, best.val_acc, best.val_loss
        ),
        None => println!("no epochs run; wrote the initialized model"),
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn load(model: &ModelArgs) -> Result<ModelGraph<f32>> {
    Ok(load_model_files(&model.model, &model.weights)?)
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let model = load(&args.model)?;
    let (items, names) = from_manifest(&args.manifest)?;
    if names.len() != model.num_classes() {
        return Err(CliError::Usage(format!(
            "manifest has {} classes but the model predicts {}",
            names.len(),
            model.num_classes()
        )));
    }
    let predictions = items
        .par_iter()
        .map(|item| Ok(model.predict(&item.image)?.0))
        .collect::<Result<Vec<usize>>>()?;

    let out = &args.out.out;
    create_dir(out)?;
    let path = out.join("predictions.csv");
    let mut w = csv::Writer::from_writer(File::create(&path).map_err(io_at(&path))?);
    w.write_record(["image", "label", "predicted", "predicted_class"])?;
    for (item, &p) in items.iter().zip(&predictions) {
        let label = item.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([item.name.as_str(), &label, &p.to_string(), &names[p]])?;
    }
    w.flush().map_err(io_at(&path))?;

    let labels: Vec<usize> = items.iter().filter_map(|i| i.label).collect();
    if labels.len() == items.len() {
        let cm = confusion_matrix(&labels, &predictions, names.len())?;
        let path = out.join("confusion.csv");
        cm.write_csv(&names, File::create(&path).map_err(io_at(&path))?)?;
        render_confusion(&cm)
            .save(out.join("confusion.png"))
            .map_err(EvalError::from)?;
        println!("accuracy {:.4} over {} images", cm.accuracy(), cm.total());
    }
    Ok(())
}
