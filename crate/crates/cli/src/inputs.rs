use std::collections::HashSet;
use std::path::{Path, PathBuf};

use lesionscope::evalkit::{AnnotationMask, Provenance};
use lesionscope::tensor::Tensor;
use lesionscope::trainer::{load_image, read_manifest};

use crate::error::{CliError, Result};

/// One image to process, named by its file stem.
#[derive(Debug, Clone)]
pub struct Item {
    pub name: String,
    pub path: PathBuf,
    pub image: Tensor<f32>,
    pub label: Option<usize>,
    pub mask: Option<AnnotationMask>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn check_unique(items: &[Item]) -> Result<()> {
    let mut seen = HashSet::new();
    for item in items {
        if !seen.insert(item.name.as_str()) {
            return Err(CliError::Usage(format!(
                "two inputs share the file stem `{}`; output files would collide",
                item.name
            )));
        }
    }
    Ok(())
}

/// Loads every manifest row with its label and optional mask, plus the
/// class names.
pub fn from_manifest(manifest: &Path) -> Result<(Vec<Item>, Vec<String>)> {
    let (rows, names) = read_manifest(manifest)?;
    let items = rows
        .into_iter()
        .map(|row| {
            let mask = row
                .mask
                .as_ref()
                .map(|m| AnnotationMask::load_png(m, Provenance::Human))
                .transpose()?;
            Ok(Item {
                name: stem(&row.image),
                image: load_image(&row.image)?,
                path: row.image,
                label: Some(row.label),
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_unique(&items)?;
    Ok((items, names))
}

/// Loads bare images without labels or masks.
pub fn from_images(paths: &[PathBuf]) -> Result<Vec<Item>> {
    let items = paths
        .iter()
        .map(|p| {
            Ok(Item {
                name: stem(p),
                path: p.clone(),
                image: load_image(p)?,
                label: None,
                mask: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_unique(&items)?;
    Ok(items)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_at(dir))
}
