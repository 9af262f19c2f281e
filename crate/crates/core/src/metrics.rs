//! IoU / mIoU with dataset-level count accumulation.
//!
//! Predictions are `logit >= 0` (sigmoid >= 0.5). A class whose union is
//! empty over the whole evaluated set scores 1.0.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::CLASS_NAMES;
use crate::tensor::{kernels, Element, Tensor};

fn ratio(intersection: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// IoU of two binary masks of equal shape.
pub fn iou<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "iou",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    kernels::ensure_binary("iou", pred)?;
    kernels::ensure_binary("iou", gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == T::one(), g == T::one());
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(ratio(inter, union))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub counts: Vec<ClassCounts>,
}

impl SegMetrics {
    /// `class,iou` rows for every class followed by `mean,<miou>`.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("class,iou\n");
        for (k, v) in self.per_class_iou.iter().enumerate() {
            let name = class_names
                .get(k)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class{k}"));
            let _ = writeln!(out, "{name},{v:.6}");
        }
        let _ = writeln!(out, "mean,{:.6}", self.miou);
        out
    }

    pub fn to_csv_default(&self) -> String {
        self.to_csv(&CLASS_NAMES)
    }
}

/// Accumulates per-class intersection/union counts across samples.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    counts: Vec<ClassCounts>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![ClassCounts::default(); num_classes],
        }
    }

    /// Adds one batch: `logits` and binary `masks`, both `[N, K, H, W]`
    /// or `[K, H, W]`.
    pub fn add<T: Element>(&mut self, logits: &Tensor<T>, masks: &Tensor<T>) -> Result<()> {
        if logits.shape() != masks.shape() {
            return Err(Error::shape(
                "evaluate",
                format!("logits {:?} vs masks {:?}", logits.shape(), masks.shape()),
            ));
        }
        let k = match logits.shape() {
            [_, k, _, _] | [k, _, _] => *k,
            other => {
                return Err(Error::shape(
                    "evaluate",
                    format!("expected [N,K,H,W] or [K,H,W], got {other:?}"),
                ))
            }
        };
        if k != self.counts.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} classes in logits, accumulator has {}", k, self.counts.len()),
            ));
        }
        kernels::ensure_binary("evaluate", masks)?;
        let plane = logits.shape()[logits.ndim() - 2] * logits.shape()[logits.ndim() - 1];
        for (i, (lz, lm)) in logits
            .data()
            .chunks(plane)
            .zip(masks.data().chunks(plane))
            .enumerate()
        {
            let c = &mut self.counts[i % k];
            for (&z, &m) in lz.iter().zip(lm) {
                let (p, g) = (z >= T::zero(), m == T::one());
                c.intersection += (p && g) as u64;
                c.union += (p || g) as u64;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.intersection += b.intersection;
            a.union += b.union;
        }
    }

    pub fn finish(&self) -> SegMetrics {
        let per_class_iou: Vec<f64> = self
            .counts
            .iter()
            .map(|c| ratio(c.intersection, c.union))
            .collect();
        let miou = per_class_iou.iter().sum::<f64>() / per_class_iou.len().max(1) as f64;
        SegMetrics {
            per_class_iou,
            miou,
            counts: self.counts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Tensor<f32> {
        Tensor::new([1, bits.len()], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn reference_ious() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        let third = iou(&mask(&[1, 1, 0, 0]), &mask(&[0, 1, 1, 0])).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
    }

    #[test]
    fn iou_input_validation() {
        assert!(iou(&mask(&[1, 0]), &mask(&[1, 0, 0])).is_err());
        let soft = Tensor::new([1, 2], vec![0.5f32, 1.0]).unwrap();
        assert!(iou(&soft, &mask(&[1, 0])).is_err());
    }

    #[test]
    fn accumulator_counts_over_dataset() {
        let mut acc = IouAccumulator::new(2);
        // sample 1: class0 perfect, class1 predicted nothing
        let logits = Tensor::<f64>::from_f64([2, 1, 2], &[1.0, -1.0, -1.0, -1.0]).unwrap();
        let masks = Tensor::from_f64([2, 1, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        acc.add(&logits, &masks).unwrap();
        // sample 2: class0 one false positive
        let logits = Tensor::<f64>::from_f64([2, 1, 2], &[1.0, 0.0, -3.0, -3.0]).unwrap();
        let masks = Tensor::from_f64([2, 1, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        acc.add(&logits, &masks).unwrap();
        let m = acc.finish();
        assert_eq!(m.counts[0], ClassCounts { intersection: 2, union: 3 });
        assert_eq!(m.counts[1], ClassCounts { intersection: 0, union: 1 });
        assert!((m.miou - (2.0 / 3.0 + 0.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let m = IouAccumulator::new(6).finish();
        let csv = m.to_csv_default();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou");
        assert_eq!(lines[1], "drivable_area,1.000000");
        assert_eq!(lines.last().unwrap(), &"mean,1.000000");
        assert_eq!(lines.len(), 8);
    }
}
