//! Seeded generator of leaf images with localized spots, diffuse yellowing
//! or no symptoms, each with a pixel-exact lesion mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::evalkit::{AnnotationMask, Provenance};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// A few separated round lesions.
    LocalizedSpots,
    /// Yellowing that fades in along a random direction across the leaf.
    DiffuseGradient,
    Healthy,
}

/// RGB colors in `[0, 1]` and per-channel Gaussian noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    pub background: [f64; 3],
    pub leaf: [f64; 3],
    pub lesion: [f64; 3],
    pub noise: f64,
}

impl Default for ColorParams {
    fn default() -> Self {
        Self {
            background: [0.08, 0.08, 0.08],
            leaf: [0.20, 0.55, 0.18],
            lesion: [0.40, 0.22, 0.08],
            noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub pattern: Pattern,
    /// Inclusive range of spot counts (spots pattern only).
    pub spot_count_range: [usize; 2],
    /// Range of spot radii in pixels (spots pattern only).
    pub spot_radius_range: [f64; 2],
    pub color_params: ColorParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub classes: Vec<ClassSpec>,
    pub image_size: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    /// Spots, yellowing and healthy classes at 24×24.
    pub fn three_class(samples_per_class: usize, seed: u64) -> Self {
        let class = |name: &str, pattern, lesion| ClassSpec {
            name: name.into(),
            pattern,
            spot_count_range: [3, 5],
            spot_radius_range: [1.5, 2.5],
            color_params: ColorParams {
                lesion,
                ..ColorParams::default()
            },
        };
        Self {
            classes: vec![
                class("spots", Pattern::LocalizedSpots, [0.40, 0.22, 0.08]),
                class("yellowing", Pattern::DiffuseGradient, [0.85, 0.80, 0.20]),
                class("healthy", Pattern::Healthy, [0.0, 0.0, 0.0]),
            ],
            image_size: 24,
            samples_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.classes.len() < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.image_size < 8 {
            return bad(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            ));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be at least 1".into());
        }
        for c in &self.classes {
            let in_unit = |v: &[f64; 3]| v.iter().all(|x| (0.0..=1.0).contains(x));
            let p = &c.color_params;
            if !(in_unit(&p.background) && in_unit(&p.leaf) && in_unit(&p.lesion)) {
                return bad(format!("class `{}`: colors must lie in [0, 1]", c.name));
            }
            if !(p.noise >= 0.0 && p.noise.is_finite()) {
                return bad(format!("class `{}`: noise must be non-negative", c.name));
            }
            if c.pattern == Pattern::LocalizedSpots {
                let [lo, hi] = c.spot_count_range;
                let [rlo, rhi] = c.spot_radius_range;
                if lo == 0 || lo > hi {
                    return bad(format!(
                        "class `{}`: spot_count_range must be 1 <= lo <= hi",
                        c.name
                    ));
                }
                if !(rlo >= 1.0 && rlo <= rhi && rhi.is_finite()) {
                    return bad(format!(
                        "class `{}`: spot_radius_range must be 1 <= lo <= hi",
                        c.name
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[3, H, W]`, every value a multiple of 1/255.
    pub image: Tensor<f32>,
    pub label: usize,
    pub mask: AnnotationMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn inputs(&self) -> Vec<Tensor<f32>> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

struct Leaf {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Leaf {
    fn random(size: f64, rng: &mut ChaCha8Rng) -> Self {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cx: size / 2.0 + rng.random_range(-1.0..1.0),
            cy: size / 2.0 + rng.random_range(-1.0..1.0),
            a: size * rng.random_range(0.38..0.44),
            b: size * rng.random_range(0.28..0.34),
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn disk_pixels(cx: i64, cy: i64, r: f64, size: usize) -> Option<Vec<usize>> {
    let ri = r.floor() as i64;
    let mut out = Vec::new();
    for y in cy - ri..=cy + ri {
        for x in cx - ri..=cx + ri {
            let (dx, dy) = ((x - cx) as f64, (y - cy) as f64);
            if dx * dx + dy * dy <= r * r {
                if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                    return None;
                }
                out.push(y as usize * size + x as usize);
            }
        }
    }
    Some(out)
}

/// Places `count` disks fully inside the leaf, with centers far enough apart
/// that no two disks touch, not even diagonally.
fn place_spots(
    leaf: &Leaf,
    leaf_mask: &[bool],
    size: usize,
    count: usize,
    radii: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<bool>> {
    for _ in 0..100 {
        let mut placed: Vec<(i64, i64, f64)> = Vec::new();
        let mut mask = vec![false; size * size];
        for _ in 0..1000 {
            if placed.len() == count {
                break;
            }
            let r = if radii[0] < radii[1] {
                rng.random_range(radii[0]..=radii[1])
            } else {
                radii[0]
            };
            let cx = rng.random_range(0..size as i64);
            let cy = rng.random_range(0..size as i64);
            if !leaf.contains(cx as f64, cy as f64) {
                continue;
            }
            let far = placed.iter().all(|&(px, py, pr)| {
                let d = (((px - cx).pow(2) + (py - cy).pow(2)) as f64).sqrt();
                d > pr + r + 2.0
            });
            if !far {
                continue;
            }
            let Some(pixels) = disk_pixels(cx, cy, r, size) else {
                continue;
            };
            if pixels.iter().any(|&p| !leaf_mask[p]) {
                continue;
            }
            for p in pixels {
                mask[p] = true;
            }
            placed.push((cx, cy, r));
        }
        if placed.len() == count {
            return Some(mask);
        }
    }
    None
}

fn generate_one(spec: &SyntheticDatasetSpec, label: usize, index: usize) -> Result<Sample> {
    let class = &spec.classes[label];
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((label * spec.samples_per_class + index) as u64);
    let colors = &class.color_params;
    let leaf = Leaf::random(size as f64, &mut rng);
    let leaf_mask: Vec<bool> = (0..size * size)
        .map(|i| leaf.contains((i % size) as f64, (i / size) as f64))
        .collect();

    // per-pixel lesion weight in [0, 1]
    let weight: Vec<f64> = match class.pattern {
        Pattern::Healthy => vec![0.0; size * size],
        Pattern::LocalizedSpots => {
            let [lo, hi] = class.spot_count_range;
            let count = rng.random_range(lo..=hi);
            let mask = place_spots(
                &leaf,
                &leaf_mask,
                size,
                count,
                class.spot_radius_range,
                &mut rng,
            )
            .ok_or_else(|| {
                TrainError::Config(format!(
                    "class `{}`: cannot fit {count} separated spots in a {size}x{size} leaf",
                    class.name
                ))
            })?;
            mask.into_iter()
                .map(|m| if m { 1.0 } else { 0.0 })
                .collect()
        }
        Pattern::DiffuseGradient => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let reach = leaf.a;
            // yellowing starts somewhere behind the leaf centre and saturates
            // towards the far edge
            let start = rng.random_range(-0.3..0.1) * reach;
            let end = start + rng.random_range(0.6..0.9) * reach;
            (0..size * size)
                .map(|i| {
                    if !leaf_mask[i] {
                        return 0.0;
                    }
                    let (x, y) = ((i % size) as f64 - leaf.cx, (i / size) as f64 - leaf.cy);
                    ((x * dx + y * dy - start) / (end - start)).clamp(0.0, 1.0)
                })
                .collect()
        }
    };

    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let w = weight[i];
        for ch in 0..3 {
            let base = if leaf_mask[i] {
                colors.leaf[ch] * (1.0 - w) + colors.lesion[ch] * w
            } else {
                colors.background[ch]
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = (base + colors.noise * z).clamp(0.0, 1.0);
            data[ch * plane + i] = ((v * 255.0).round() / 255.0) as f32;
        }
    }
    let grid = weight.iter().map(|&w| w > 0.0).collect();
    Ok(Sample {
        name: format!("{}_{index:04}", class.name),
        image: Tensor::new(vec![3, size, size], data)?,
        label,
        mask: AnnotationMask::new(size, size, grid, Provenance::Synthetic)?,
    })
}

/// Generates `samples_per_class` images per class, in class order. Each
/// image draws from its own ChaCha stream, so the output is a pure function
/// of `spec` and independent of thread count.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.samples_per_class).map(move |i| (c, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(c, i)| generate_one(spec, c, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticDatasetSpec::three_class(6, 42);
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
        let other = SyntheticDatasetSpec::three_class(6, 43);
        assert_ne!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn masks_match_patterns() {
        let spec = SyntheticDatasetSpec::three_class(40, 7);
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.samples.len(), 120);
        for s in &ds.samples {
            assert_eq!(s.image.shape(), &[3, 24, 24]);
            assert!(s.image.data().iter().all(|&v| {
                let k = v * 255.0;
                (0.0..=1.0).contains(&v) && (k - k.round()).abs() < 1e-3
            }));
            match spec.classes[s.label].pattern {
                Pattern::Healthy => assert!(s.mask.is_empty()),
                Pattern::LocalizedSpots => {
                    let n = s.mask.component_count();
                    assert!((3..=5).contains(&n), "{}: {n} components", s.name);
                }
                Pattern::DiffuseGradient => {
                    assert!(s.mask.area_fraction() > 0.05, "{}", s.name);
                    assert_eq!(s.mask.component_count(), 1);
                }
            }
        }
        // class balance
        for c in 0..3 {
            assert_eq!(ds.samples.iter().filter(|s| s.label == c).count(), 40);
        }
    }

    #[test]
    fn spot_pixels_carry_lesion_color() {
        let spec = SyntheticDatasetSpec::three_class(5, 1);
        let ds = generate_synthetic(&spec).unwrap();
        let plane = 24 * 24;
        for s in ds.samples.iter().filter(|s| s.label == 0) {
            for (i, &m) in s.mask.grid().iter().enumerate() {
                // brown lesions have red above green, up to noise
                let (r, g) = (s.image.data()[i], s.image.data()[plane + i]);
                if m {
                    assert!(r > g - 0.05, "{} pixel {i}", s.name);
                }
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SyntheticDatasetSpec::three_class(2, 0);
        spec.classes[0].spot_count_range = [4, 2];
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = SyntheticDatasetSpec::three_class(2, 0);
        spec.classes[0].spot_count_range = [40, 40];
        assert!(matches!(
            generate_synthetic(&spec),
            Err(TrainError::Config(_))
        ));
        let mut spec = SyntheticDatasetSpec::three_class(2, 0);
        spec.image_size = 4;
        assert!(generate_synthetic(&spec).is_err());
    }
}
