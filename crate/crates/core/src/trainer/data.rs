//! Dataset manifests and 8-bit PNG image IO.
//!
//! A manifest is CSV with one row per sample, `image_path,label[,mask_path]`,
//! and an optional `image_path,label,mask_path` header. Relative paths are
//! resolved against the manifest's directory. Class names, one per line,
//! are read from `classes.txt` next to the manifest when present.

use std::path::{Path, PathBuf};

use super::{Dataset, Result, TrainError};
use crate::evalkit::tensor_to_rgb;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub image: PathBuf,
    pub label: usize,
    pub mask: Option<PathBuf>,
}

/// Reads an 8-bit PNG as a `[3, H, W]` tensor with values `k / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = p.0[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h as usize, w as usize], data)?)
}

/// Writes a `[3, H, W]` or `[1, H, W]` tensor in `[0, 1]` as an RGB PNG.
pub fn save_image(path: impl AsRef<Path>, x: &Tensor<f32>) -> Result<()> {
    tensor_to_rgb(x)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Parses a manifest and returns its rows and the class names.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(Vec<ManifestRow>, Vec<String>)> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 || record.len() > 3 {
            return Err(TrainError::Dataset(format!(
                "{}: row {} has {} fields, expected 2 or 3",
                path.display(),
                line + 1,
                record.len()
            )));
        }
        let label = match record[1].parse::<usize>() {
            Ok(l) => l,
            Err(_) if line == 0 => continue,
            Err(_) => {
                return Err(TrainError::Dataset(format!(
                    "{}: row {} has non-integer label `{}`",
                    path.display(),
                    line + 1,
                    &record[1]
                )))
            }
        };
        let resolve = |p: &str| base.join(p);
        rows.push(ManifestRow {
            image: resolve(&record[0]),
            label,
            mask: record.get(2).filter(|m| !m.is_empty()).map(resolve),
        });
    }
    if rows.is_empty() {
        return Err(TrainError::Dataset(format!(
            "{}: no samples",
            path.display()
        )));
    }
    let classes_file = base.join("classes.txt");
    let max_label = rows.iter().map(|r| r.label).max().unwrap_or(0);
    let names = if classes_file.exists() {
        let names: Vec<String> = std::fs::read_to_string(&classes_file)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if max_label >= names.len() {
            return Err(TrainError::Dataset(format!(
                "label {max_label} but {} lists {} classes",
                classes_file.display(),
                names.len()
            )));
        }
        names
    } else {
        (0..=max_label).map(|i| format!("class{i}")).collect()
    };
    Ok((rows, names))
}

/// Writes `images/`, `masks/`, `classes.txt` and `manifest.csv` under `dir`
/// and returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut names = dataset.class_names.join("\n");
    names.push('\n');
    std::fs::write(dir.join("classes.txt"), names)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["image_path", "label", "mask_path"])?;
    for s in &dataset.samples {
        let image = format!("images/{}.png", s.name);
        let mask = format!("masks/{}.png", s.name);
        save_image(dir.join(&image), &s.image)?;
        s.mask.save_png(dir.join(&mask))?;
        w.write_record([image, s.label.to_string(), mask])?;
    }
    w.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_synthetic, SyntheticDatasetSpec};
    use super::*;
    use crate::evalkit::{AnnotationMask, Provenance};

    #[test]
    fn dataset_round_trips_through_files() {
        let ds = generate_synthetic(&SyntheticDatasetSpec::three_class(3, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &ds).unwrap();
        let (rows, names) = read_manifest(&manifest).unwrap();
        assert_eq!(names, ds.class_names);
        assert_eq!(rows.len(), ds.samples.len());
        for (row, s) in rows.iter().zip(&ds.samples) {
            assert_eq!(row.label, s.label);
            assert_eq!(load_image(&row.image).unwrap(), s.image);
            let mask = AnnotationMask::load_png(row.mask.as_ref().unwrap(), Provenance::Synthetic)
                .unwrap();
            assert_eq!(mask, s.mask);
        }
    }

    #[test]
    fn manifest_without_header_or_masks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "a.png,1\nsub/b.png,0,\n").unwrap();
        let (rows, names) = read_manifest(&path).unwrap();
        assert_eq!(names, vec!["class0", "class1"]);
        assert_eq!(rows[0].image, dir.path().join("a.png"));
        assert_eq!(rows[1].mask, None);
        std::fs::write(&path, "a.png,1\nb.png,x\n").unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::write(&path, "image_path,label\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
