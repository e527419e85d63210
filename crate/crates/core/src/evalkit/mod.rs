//! Map normalization and rendering, confusion matrices, and localization and
//! agreement metrics for explanation maps.

mod metrics;
mod render;

pub use metrics::{
    agreement, confusion_matrix, localization_score, top_k_indices, write_metric_rows, Agreement,
    ConfusionMatrix, Localization, MetricRow,
};
pub use render::{
    compose_panel, render_confusion, render_heatmap, tensor_to_rgb, Colormap, RED_BLUE_STOPS,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::ExplanationMap;
use crate::tensor::{chw_of, Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// How a `[C,H,W]` map is collapsed to `[H,W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Σ_c |x_c|
    AbsSum,
    /// Σ_c x_c
    Sum,
}

/// Collapses the channel axis. Rank-1 and rank-2 inputs are treated as a
/// single channel (`[n]` becomes `[1, n]`).
pub fn reduce_channels<T: Element>(
    raw: &Tensor<T>,
    reduction: Reduction,
) -> std::result::Result<Tensor<T>, TensorError> {
    let (c, h, w) = chw_of(raw.shape())?;
    let plane = h * w;
    let data = (0..plane)
        .map(|p| {
            let mut acc = T::zero();
            for ch in 0..c {
                let v = raw.data()[ch * plane + p];
                acc += match reduction {
                    Reduction::AbsSum => v.abs(),
                    Reduction::Sum => v,
                };
            }
            acc
        })
        .collect();
    Tensor::new(vec![h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Absolute channel sum, then min-max.
    #[default]
    AbsMinmax,
    /// Signed channel sum, then min-max.
    SignedMinmax,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::AbsMinmax => "abs_minmax",
            NormMode::SignedMinmax => "signed_minmax",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_minmax" => Ok(NormMode::AbsMinmax),
            "signed_minmax" => Ok(NormMode::SignedMinmax),
            other => Err(EvalError::Invalid(format!(
                "norm mode `{other}`; expected abs_minmax or signed_minmax"
            ))),
        }
    }
}

/// Min-max scales a `[H,W]` map into `[0, 1]`; a constant map becomes zeros.
pub fn minmax<T: Element>(reduced: &Tensor<T>) -> Result<Tensor<f64>> {
    let values = reduced.to_f64_vec();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 {
        values
            .iter()
            .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; values.len()]
    };
    Ok(Tensor::new(reduced.shape().to_vec(), data)?)
}

/// The `[H,W]` display form of an explanation, with values in `[0, 1]`.
pub fn normalize_map<T: Element>(map: &ExplanationMap<T>, mode: NormMode) -> Result<Tensor<f64>> {
    match mode {
        NormMode::AbsMinmax => minmax(&map.reduced),
        NormMode::SignedMinmax => minmax(&reduce_channels(&map.raw, Reduction::Sum)?),
    }
}

/// Where a mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Human,
}

/// Binary lesion mask over an image's spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMask {
    height: usize,
    width: usize,
    grid: Vec<bool>,
    pub provenance: Provenance,
}

impl AnnotationMask {
    pub fn new(
        height: usize,
        width: usize,
        grid: Vec<bool>,
        provenance: Provenance,
    ) -> Result<Self> {
        if grid.len() != height * width {
            return Err(EvalError::Shape(format!(
                "mask of {height}x{width} needs {} cells, got {}",
                height * width,
                grid.len()
            )));
        }
        Ok(Self {
            height,
            width,
            grid,
            provenance,
        })
    }

    pub fn empty(height: usize, width: usize, provenance: Provenance) -> Self {
        Self {
            height,
            width,
            grid: vec![false; height * width],
            provenance,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.grid.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Mask cells with a 4-neighbour outside the mask or on the image border.
    pub fn boundary(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                self.grid[i]
                    && (y == 0
                        || x == 0
                        || y + 1 == h
                        || x + 1 == w
                        || !self.grid[i - w]
                        || !self.grid[i + w]
                        || !self.grid[i - 1]
                        || !self.grid[i + 1])
            })
            .collect()
    }

    /// Number of 8-connected components.
    pub fn component_count(&self) -> usize {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut seen = vec![false; self.grid.len()];
        let mut count = 0;
        for start in 0..self.grid.len() {
            if !self.grid[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                let (y, x) = ((i / self.width) as isize, (i % self.width) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h || nx >= w {
                            continue;
                        }
                        let j = (ny * w + nx) as usize;
                        if self.grid[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        count
    }

    /// Reads a grayscale or RGB PNG; any non-zero pixel is inside the mask.
    pub fn load_png(path: impl AsRef<std::path::Path>, provenance: Provenance) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let grid = img.pixels().map(|p| p.0[0] > 0).collect();
        Self::new(h as usize, w as usize, grid, provenance)
    }

    /// Writes the mask as an 8-bit grayscale PNG (inside = 255).
    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) {
                255
            } else {
                0
            }])
        });
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}
