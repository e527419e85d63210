use std::str::FromStr;

use image::{Rgb, RgbImage};

use super::{AnnotationMask, ConfusionMatrix, EvalError, Result};
use crate::tensor::{chw_of, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    /// 0 → black, 1 → white.
    Grayscale,
    /// Dark blue through white to dark red.
    #[default]
    RedBlue,
}

impl FromStr for Colormap {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grayscale" => Ok(Colormap::Grayscale),
            "red_blue" => Ok(Colormap::RedBlue),
            other => Err(EvalError::Invalid(format!(
                "colormap `{other}`; expected grayscale or red_blue"
            ))),
        }
    }
}

/// Piecewise-linear control points of the red-blue map.
pub const RED_BLUE_STOPS: [(f64, [u8; 3]); 5] = [
    (0.0, [0, 0, 128]),
    (0.25, [0, 0, 255]),
    (0.5, [255, 255, 255]),
    (0.75, [255, 0, 0]),
    (1.0, [128, 0, 0]),
];

impl Colormap {
    /// Color of a value in `[0, 1]`.
    pub fn color(self, v: f64) -> [u8; 3] {
        match self {
            Colormap::Grayscale => {
                let g = (v * 255.0).round() as u8;
                [g, g, g]
            }
            Colormap::RedBlue => {
                let seg = RED_BLUE_STOPS
                    .windows(2)
                    .find(|w| v <= w[1].0)
                    .unwrap_or(&RED_BLUE_STOPS[3..5]);
                let ((t0, c0), (t1, c1)) = (seg[0], seg[1]);
                let f = (v - t0) / (t1 - t0);
                let mut out = [0u8; 3];
                for k in 0..3 {
                    let (a, b) = (c0[k] as f64, c1[k] as f64);
                    out[k] = (a + f * (b - a)).round() as u8;
                }
                out
            }
        }
    }
}

/// Renders a `[H,W]` map with values in `[0, 1]`.
///
/// With `overlay` the colors are blended 50/50 with that image. With `edge`
/// the mask boundary is drawn in white on top.
pub fn render_heatmap(
    normalized: &Tensor<f64>,
    colormap: Colormap,
    overlay: Option<&RgbImage>,
    edge: Option<&AnnotationMask>,
) -> Result<RgbImage> {
    let &[h, w] = normalized.shape() else {
        return Err(EvalError::Shape(format!(
            "heatmap needs a [H,W] map, got {:?}",
            normalized.shape()
        )));
    };
    if let Some(index) = normalized
        .data()
        .iter()
        .position(|v| !(0.0..=1.0).contains(v))
    {
        return Err(EvalError::OutOfRange {
            index,
            value: normalized.data()[index],
        });
    }
    if let Some(img) = overlay {
        if img.dimensions() != (w as u32, h as u32) {
            return Err(EvalError::Shape(format!(
                "overlay is {:?}, map is {w}x{h}",
                img.dimensions()
            )));
        }
    }
    let boundary = match edge {
        Some(mask) if (mask.height(), mask.width()) != (h, w) => {
            return Err(EvalError::Shape(format!(
                "edge mask is {}x{}, map is {w}x{h}",
                mask.width(),
                mask.height()
            )))
        }
        Some(mask) => Some(mask.boundary()),
        None => None,
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if boundary.as_ref().is_some_and(|b| b[i]) {
            return Rgb([255, 255, 255]);
        }
        let mut c = colormap.color(normalized.data()[i]);
        if let Some(img) = overlay {
            let base = img.get_pixel(x, y).0;
            for k in 0..3 {
                c[k] = (c[k] as u16 + base[k] as u16).div_ceil(2) as u8;
            }
        }
        Rgb(c)
    }))
}

/// Converts a `[3,H,W]` (RGB) or `[1,H,W]` (gray) tensor in `[0, 1]` to an
/// 8-bit image, clamping out-of-range values.
pub fn tensor_to_rgb<T: Element>(x: &Tensor<T>) -> Result<RgbImage> {
    let (c, h, w) = chw_of(x.shape())?;
    if c != 1 && c != 3 {
        return Err(EvalError::Shape(format!(
            "image tensor needs 1 or 3 channels, got {c}"
        )));
    }
    let plane = h * w;
    let px = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |xx, yy| {
        let i = yy as usize * w + xx as usize;
        let d = x.data();
        if c == 3 {
            Rgb([px(d[i]), px(d[plane + i]), px(d[2 * plane + i])])
        } else {
            let g = px(d[i]);
            Rgb([g, g, g])
        }
    }))
}

/// Places tiles left to right, separated by `gap` white columns and
/// top-aligned on a white background.
pub fn compose_panel(tiles: &[RgbImage], gap: u32) -> RgbImage {
    let width =
        tiles.iter().map(|t| t.width()).sum::<u32>() + gap * tiles.len().saturating_sub(1) as u32;
    let height = tiles.iter().map(|t| t.height()).max().unwrap_or(0);
    let mut panel = RgbImage::from_pixel(width.max(1), height.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0;
    for tile in tiles {
        for (x, y, p) in tile.enumerate_pixels() {
            panel.put_pixel(x0 + x, y, *p);
        }
        x0 += tile.width() + gap;
    }
    panel
}

/// 3x5 bitmaps, one row per byte, most significant of the low three bits
/// on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        _ => return None,
    })
}

const SCALE: u32 = 2;
const GLYPH_ADVANCE: u32 = 4 * SCALE;

fn draw_text(img: &mut RgbImage, text: &str, x0: u32, y0: u32, color: Rgb<u8>) {
    for (n, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        let gx = x0 + n as u32 * GLYPH_ADVANCE;
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..3u32 {
                if bits & (0b100 >> rx) == 0 {
                    continue;
                }
                for sy in 0..SCALE {
                    for sx in 0..SCALE {
                        let (x, y) = (gx + rx * SCALE + sx, y0 + ry as u32 * SCALE + sy);
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}

/// Grid of row-normalized percentages with two decimals. Cells shade from
/// white (0%) to dark blue (100%); rows are true classes in id order.
pub fn render_confusion(cm: &ConfusionMatrix) -> RgbImage {
    const CELL_W: u32 = 7 * GLYPH_ADVANCE + 8;
    const CELL_H: u32 = 5 * SCALE + 8;
    let n = cm.classes() as u32;
    let mut img = RgbImage::from_pixel(n * CELL_W + 1, n * CELL_H + 1, Rgb([96, 96, 96]));
    for (i, row) in cm.row_normalized.iter().enumerate() {
        for (j, &f) in row.iter().enumerate() {
            let shade = |full: f64| (255.0 + f * (full - 255.0)).round() as u8;
            let bg = Rgb([shade(8.0), shade(48.0), shade(107.0)]);
            let (x0, y0) = (j as u32 * CELL_W + 1, i as u32 * CELL_H + 1);
            for y in y0..y0 + CELL_H - 1 {
                for x in x0..x0 + CELL_W - 1 {
                    img.put_pixel(x, y, bg);
                }
            }
            let text = format!("{:.2}%", 100.0 * f);
            let fg = if f > 0.5 {
                Rgb([255, 255, 255])
            } else {
                Rgb([0, 0, 0])
            };
            let tx = x0 + (CELL_W - 1 - text.len() as u32 * GLYPH_ADVANCE) / 2;
            draw_text(&mut img, &text, tx, y0 + 4, fg);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::super::{confusion_matrix, Provenance};
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(Colormap::RedBlue.color(1.0), [128, 0, 0]);
        assert_eq!(Colormap::RedBlue.color(0.0), [0, 0, 128]);
        assert_eq!(Colormap::RedBlue.color(0.5), [255, 255, 255]);
        assert_eq!(Colormap::RedBlue.color(0.625), [255, 128, 128]);
        assert_eq!(Colormap::Grayscale.color(1.0), [255, 255, 255]);
    }

    #[test]
    fn zero_map_renders_black() {
        let img = render_heatmap(&t(&[2, 3], &[0.; 6]), Colormap::Grayscale, None, None).unwrap();
        assert_eq!(img.dimensions(), (3, 2));
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn out_of_range_rejected() {
        let err = render_heatmap(&t(&[1, 2], &[0.5, 1.5]), Colormap::RedBlue, None, None);
        assert!(matches!(err, Err(EvalError::OutOfRange { index: 1, .. })));
    }

    #[test]
    fn overlay_and_edge() {
        let map = t(&[3, 3], &[1.0; 9]);
        let base = RgbImage::from_pixel(3, 3, Rgb([0, 0, 0]));
        let mut grid = vec![true; 9];
        grid[0] = false;
        let mask = AnnotationMask::new(3, 3, grid, Provenance::Synthetic).unwrap();
        let img = render_heatmap(&map, Colormap::Grayscale, Some(&base), Some(&mask)).unwrap();
        // the centre is interior to the mask, so it keeps the blended color
        assert_eq!(img.get_pixel(1, 1).0, [128, 128, 128]);
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
        assert_eq!(img.get_pixel(2, 2).0, [255, 255, 255]);
    }

    #[test]
    fn rendering_is_deterministic() {
        let map = t(
            &[4, 4],
            &(0..16).map(|i| i as f64 / 15.0).collect::<Vec<_>>(),
        );
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_heatmap(&map, Colormap::RedBlue, None, None)
            .unwrap()
            .save(&a)
            .unwrap();
        render_heatmap(&map, Colormap::RedBlue, None, None)
            .unwrap()
            .save(&b)
            .unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn panel_layout() {
        let a = RgbImage::from_pixel(2, 3, Rgb([1, 2, 3]));
        let b = RgbImage::from_pixel(4, 1, Rgb([4, 5, 6]));
        let p = compose_panel(&[a, b], 1);
        assert_eq!(p.dimensions(), (7, 3));
        assert_eq!(p.get_pixel(2, 0).0, [255, 255, 255]);
        assert_eq!(p.get_pixel(3, 0).0, [4, 5, 6]);
        assert_eq!(p.get_pixel(3, 1).0, [255, 255, 255]);
    }

    #[test]
    fn image_tensor_conversion() {
        let x = t(&[3, 1, 2], &[1.0, 0.0, 0.5, 0.0, 2.0, -1.0]);
        let img = tensor_to_rgb(&x).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [255, 128, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 0]);
        assert!(tensor_to_rgb(&t(&[2, 1, 1], &[0., 0.])).is_err());
    }

    #[test]
    fn confusion_grid_has_cells_and_text() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        let img = render_confusion(&cm);
        assert_eq!(img.width(), 2 * (7 * 8 + 8) + 1);
        // the 100% cell is dark and carries white glyph pixels
        let cell: Vec<_> = (65..128)
            .flat_map(|x| (19..36).map(move |y| (x, y)))
            .map(|(x, y)| img.get_pixel(x, y).0)
            .collect();
        assert!(cell.contains(&[8, 48, 107]));
        assert!(cell.contains(&[255, 255, 255]));
    }
}
