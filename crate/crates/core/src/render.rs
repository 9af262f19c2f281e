//! PGM/PPM output of predicted and ground-truth masks.
//!
//! Per sample: one binary PGM per class for the prediction and for the
//! ground truth, and a composite PPM with the prediction on the left, the
//! ground truth on the right and a legend strip underneath. Classes are
//! painted in class order, so later classes cover earlier ones.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::CLASS_NAMES;
use crate::tensor::Tensor;

/// RGB colour of each class, in class order. Background is black.
pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [255, 221, 0],
];

const GAP: usize = 2;
const LEGEND_ROWS: usize = 4;

/// Binary masks from logits: 1 where `logit >= 0`.
pub fn threshold_logits(logits: &Tensor<f32>) -> Tensor<f32> {
    logits.map(|z| if z >= 0.0 { 1.0 } else { 0.0 })
}

fn planes(masks: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match masks.shape() {
        [k, h, w] => Ok((*k, *h, *w)),
        other => Err(Error::shape("render", format!("expected [K, H, W], got {other:?}"))),
    }
}

/// Binary P5 image of one mask plane: 255 where the mask is set.
pub fn mask_pgm(plane: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }));
    out
}

fn paint(rgb: &mut [u8], stride: usize, x0: usize, masks: &Tensor<f32>) {
    let (k, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
    for c in 0..k.min(PALETTE.len()) {
        let plane = &masks.data()[c * h * w..(c + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                if plane[r * w + col] >= 0.5 {
                    let o = 3 * (r * stride + x0 + col);
                    rgb[o..o + 3].copy_from_slice(&PALETTE[c]);
                }
            }
        }
    }
}

/// P6 composite: prediction | ground truth, legend strip below.
pub fn composite_ppm(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Vec<u8>> {
    let (_, h, w) = planes(pred)?;
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "render",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let width = 2 * w + GAP;
    let height = h + GAP + LEGEND_ROWS;
    let mut rgb = vec![0u8; 3 * width * height];
    for r in 0..h {
        for c in w..w + GAP {
            rgb[3 * (r * width + c)..3 * (r * width + c) + 3].fill(255);
        }
    }
    paint(&mut rgb, width, 0, pred);
    paint(&mut rgb, width, w + GAP, gt);
    for r in h + GAP..height {
        for c in 0..width {
            let class = c * PALETTE.len() / width;
            let o = 3 * (r * width + c);
            rgb[o..o + 3].copy_from_slice(&PALETTE[class]);
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

/// `class,r,g,b` lines for the palette.
pub fn legend_text() -> String {
    let mut s = String::from("class,r,g,b\n");
    for (name, [r, g, b]) in CLASS_NAMES.iter().zip(PALETTE) {
        let _ = writeln!(s, "{name},{r},{g},{b}");
    }
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the PGMs and the composite of sample `index` into `dir`.
pub fn render_sample(dir: &Path, index: usize, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    let (k, h, w) = planes(gt)?;
    let composite = composite_ppm(pred, gt)?;
    for c in 0..k {
        let name = CLASS_NAMES.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("class{c}"));
        let range = c * h * w..(c + 1) * h * w;
        write(
            &dir.join(format!("sample_{index:06}_pred_{name}.pgm")),
            &mask_pgm(&pred.data()[range.clone()], h, w),
        )?;
        write(
            &dir.join(format!("sample_{index:06}_gt_{name}.pgm")),
            &mask_pgm(&gt.data()[range], h, w),
        )?;
    }
    write(&dir.join(format!("sample_{index:06}_composite.ppm")), &composite)
}
