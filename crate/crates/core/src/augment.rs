//! Joint geometric augmentation of BEV features and ground-truth masks.
//!
//! A transform is the similarity map `S * M_Flip * M_Rot` acting on pixel
//! coordinates centred on the map centre, `x = col - (W-1)/2`,
//! `y = row - (H-1)/2`. Each output pixel samples the input at the inverse
//! image of its own coordinate: bilinear for features, nearest for masks,
//! zero outside the canvas. Both warps use the same inverse map, so masks
//! stay aligned with the features they label.
//!
//! Source coordinates within `1e-9` of an integer are snapped to it, which
//! makes quarter turns and flips exact index permutations.

use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

pub type Mat3 = [[f64; 3]; 3];

const SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugConfig {
    pub max_rot_deg: f64,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            max_rot_deg: 45.0,
            flip_prob: 0.5,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl AugConfig {
    /// No rotation, no flips, unit scale.
    pub fn disabled() -> Self {
        Self {
            max_rot_deg: 0.0,
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rot_deg.is_finite() && self.max_rot_deg >= 0.0) {
            return Err(Error::Config(format!(
                "aug.max_rot_deg must be a non-negative number, got {}",
                self.max_rot_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "aug.flip_prob must lie in [0, 1], got {}",
                self.flip_prob
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite())
        {
            return Err(Error::Config(format!(
                "aug scale range [{}, {}] must be a positive, ordered interval",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

pub fn rotation_matrix(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn flip_matrix(flip_x: bool, flip_y: bool) -> Mat3 {
    let sign = |f: bool| if f { -1.0 } else { 1.0 };
    [
        [sign(flip_x), 0.0, 0.0],
        [0.0, sign(flip_y), 0.0],
        [0.0, 0.0, 1.0],
    ]
}

fn invert3(m: &Mat3) -> Option<Mat3> {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            inv[r][c] = adj[r][c] / det;
        }
    }
    Some(inv)
}

/// Euler-angle recovery from a rotation matrix:
/// `atan2(M^-1(2,1), M^-1(1,1))` with 1-based indices.
///
/// For `M = rotation_matrix(t)` this returns `-t` (the inverse rotation's
/// angle), wrapped to `(-pi, pi]`.
pub fn recover_angle(m_rot: &Mat3) -> Result<f64> {
    let inv = invert3(m_rot)
        .ok_or_else(|| Error::InvalidInput("rotation matrix is singular".into()))?;
    Ok(inv[1][0].atan2(inv[0][0]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugTransform {
    theta: f64,
    flip_x: bool,
    flip_y: bool,
    scale: f64,
    m_rot: Mat3,
    m_flip: Mat3,
    recovered_angle: f64,
}

impl AugTransform {
    /// `theta` rotates about the map centre (radians); `flip_x` mirrors
    /// columns, `flip_y` mirrors rows; `scale` must be positive.
    pub fn new(theta: f64, flip_x: bool, flip_y: bool, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "augmentation scale must be positive, got {scale}"
            )));
        }
        if !theta.is_finite() {
            return Err(Error::InvalidInput("rotation angle must be finite".into()));
        }
        let m_rot = rotation_matrix(theta);
        let recovered_angle = recover_angle(&m_rot)?;
        Ok(Self {
            theta,
            flip_x,
            flip_y,
            scale,
            m_rot,
            m_flip: flip_matrix(flip_x, flip_y),
            recovered_angle,
        })
    }

    pub fn identity() -> Self {
        Self::new(0.0, false, false, 1.0).expect("identity is valid")
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn flip_x(&self) -> bool {
        self.flip_x
    }

    pub fn flip_y(&self) -> bool {
        self.flip_y
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn m_rot(&self) -> &Mat3 {
        &self.m_rot
    }

    pub fn m_flip(&self) -> &Mat3 {
        &self.m_flip
    }

    /// Stored result of [`recover_angle`] on `M_Rot`.
    pub fn recovered_angle(&self) -> f64 {
        self.recovered_angle
    }

    pub fn is_identity(&self) -> bool {
        self.theta == 0.0 && !self.flip_x && !self.flip_y && self.scale == 1.0
    }

    /// Linear part of `S * M_Flip * M_Rot` on `(x, y)`.
    pub fn forward_linear(&self) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.scale * (0..2).map(|k| self.m_flip[r][k] * self.m_rot[k][c]).sum::<f64>();
            }
        }
        out
    }

    /// Inverse of [`forward_linear`](Self::forward_linear):
    /// `M_Rot^T * M_Flip / S`.
    fn inverse_linear(&self) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..2).map(|k| self.m_rot[k][r] * self.m_flip[k][c]).sum::<f64>() / self.scale;
            }
        }
        out
    }

    /// Source `(row, col)` sampled by output pixel `(row, col)` on an
    /// `h x w` canvas.
    pub fn source_coord(&self, row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (x, y) = (col as f64 - cx, row as f64 - cy);
        let inv = self.inverse_linear();
        let sx = inv[0][0] * x + inv[0][1] * y + cx;
        let sy = inv[1][0] * x + inv[1][1] * y + cy;
        (snap(sy), snap(sx))
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Draws `theta ~ U[-max_rot, max_rot]`, independent flips with
/// probability `flip_prob` per axis, and `S ~ U[scale_min, scale_max]`.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, cfg: &AugConfig) -> Result<AugTransform> {
    cfg.validate()?;
    let max_rot = cfg.max_rot_deg.to_radians();
    let theta = rng.random_range(-max_rot..=max_rot);
    let flip_x = rng.random_bool(cfg.flip_prob);
    let flip_y = rng.random_bool(cfg.flip_prob);
    let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    AugTransform::new(theta, flip_x, flip_y, scale)
}

fn spatial_dims<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [.., h, w] if t.ndim() >= 2 => Ok((*h, *w)),
        other => Err(Error::shape(
            op,
            format!("need at least two spatial axes, got {other:?}"),
        )),
    }
}

fn check_scale(t: &AugTransform) -> Result<()> {
    if t.scale > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "augmentation scale must be positive, got {}",
            t.scale
        )))
    }
}

/// Per-pixel source coordinates, shared by every plane of a tensor.
fn source_grid(t: &AugTransform, h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h * w)
        .map(|i| t.source_coord(i / w, i % w, h, w))
        .collect()
}

/// Warps the trailing `H x W` planes of `features` with bilinear sampling.
pub fn augment_bev<T: Element>(features: &Tensor<T>, t: &AugTransform) -> Result<Tensor<T>> {
    check_scale(t)?;
    let (h, w) = spatial_dims(features, "augment_bev")?;
    if t.is_identity() || h * w == 0 {
        return Ok(features.clone());
    }
    let grid = source_grid(t, h, w);
    let read = |plane: &[T], r: isize, c: isize| -> T {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            T::zero()
        } else {
            plane[r as usize * w + c as usize]
        }
    };
    let mut out = vec![T::zero(); features.numel()];
    for (src, dst) in features.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for (o, &(sr, sc)) in dst.iter_mut().zip(&grid) {
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            *o = if fr == 0.0 && fc == 0.0 {
                read(src, r0, c0)
            } else {
                let (fr, fc) = (T::from_f64_lossy(fr), T::from_f64_lossy(fc));
                let top = read(src, r0, c0) * (T::one() - fc) + read(src, r0, c0 + 1) * fc;
                let bot = read(src, r0 + 1, c0) * (T::one() - fc) + read(src, r0 + 1, c0 + 1) * fc;
                top * (T::one() - fr) + bot * fr
            };
        }
    }
    Tensor::new(features.shape().to_vec(), out)
}

/// Warps binary masks with nearest-neighbour sampling; outside reads 0.
pub fn augment_gt<T: Element>(masks: &Tensor<T>, t: &AugTransform) -> Result<Tensor<T>> {
    check_scale(t)?;
    kernels::ensure_binary("augment_gt", masks)?;
    let (h, w) = spatial_dims(masks, "augment_gt")?;
    if t.is_identity() || h * w == 0 {
        return Ok(masks.clone());
    }
    let index: Vec<Option<usize>> = source_grid(t, h, w)
        .into_iter()
        .map(|(sr, sc)| {
            let (r, c) = (sr.round(), sc.round());
            (r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64)
                .then(|| r as usize * w + c as usize)
        })
        .collect();
    let mut out = vec![T::zero(); masks.numel()];
    for (src, dst) in masks.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for (o, idx) in dst.iter_mut().zip(&index) {
            if let Some(i) = idx {
                *o = src[*i];
            }
        }
    }
    Tensor::new(masks.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn disabled_config_samples_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_transform(&mut rng, &AugConfig::disabled()).unwrap();
        assert!(t.is_identity(), "{t:?}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = AugConfig::default();
        let a = sample_transform(&mut ChaCha8Rng::seed_from_u64(8), &cfg).unwrap();
        let b = sample_transform(&mut ChaCha8Rng::seed_from_u64(8), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.theta().abs() <= 45f64.to_radians());
        assert!((0.9..=1.1).contains(&a.scale()));
    }

    #[test]
    fn flip_frequency_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cfg = AugConfig::default();
        let (mut fx, mut fy) = (0usize, 0usize);
        let n = 10_000;
        for _ in 0..n {
            let t = sample_transform(&mut rng, &cfg).unwrap();
            fx += t.flip_x() as usize;
            fy += t.flip_y() as usize;
        }
        for count in [fx, fy] {
            let freq = count as f64 / n as f64;
            assert!((0.48..=0.52).contains(&freq), "{freq}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            AugConfig { flip_prob: 1.5, ..AugConfig::default() },
            AugConfig { scale_min: 0.0, ..AugConfig::default() },
            AugConfig { scale_min: 1.2, scale_max: 1.1, ..AugConfig::default() },
            AugConfig { max_rot_deg: -1.0, ..AugConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(AugTransform::new(0.0, false, false, 0.0).is_err());
        assert!(AugTransform::new(0.0, false, false, -1.0).is_err());
    }

    #[test]
    fn recover_angle_reference_values() {
        assert_eq!(recover_angle(&rotation_matrix(0.0)).unwrap(), 0.0);
        let a = recover_angle(&rotation_matrix(FRAC_PI_2)).unwrap();
        assert!((a + FRAC_PI_2).abs() < 1e-12, "{a}");
        let a = recover_angle(&rotation_matrix(0.3)).unwrap();
        assert!((a + 0.3).abs() < 1e-12, "{a}");
        let singular = [[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(recover_angle(&singular).is_err());
    }

    #[test]
    fn stored_angle_matches_recompute() {
        let t = AugTransform::new(-1.1, true, false, 1.05).unwrap();
        assert_eq!(t.recovered_angle(), recover_angle(t.m_rot()).unwrap());
        let det = t.m_rot()[0][0] * t.m_rot()[1][1] - t.m_rot()[0][1] * t.m_rot()[1][0];
        assert!((det - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_is_exact() {
        let x = Tensor::<f32>::from_fn([2, 3, 5, 7], |i| (i as f32 * 0.3).sin());
        assert_eq!(augment_bev(&x, &AugTransform::identity()).unwrap(), x);
    }

    #[test]
    fn half_turn_twice_restores_map() {
        let x = Tensor::<f32>::from_fn([1, 2, 6, 6], |i| i as f32);
        let t = AugTransform::new(PI, false, false, 1.0).unwrap();
        let twice = augment_bev(&augment_bev(&x, &t).unwrap(), &t).unwrap();
        assert_eq!(twice, x);
    }

    #[test]
    fn double_flip_restores_masks() {
        let m = Tensor::<f32>::from_fn([3, 5, 5], |i| ((i * 7) % 3 == 0) as u8 as f32);
        let t = AugTransform::new(0.0, true, true, 1.0).unwrap();
        assert_eq!(augment_gt(&augment_gt(&m, &t).unwrap(), &t).unwrap(), m);
    }

    #[test]
    fn masks_stay_binary_under_arbitrary_transform() {
        let m = Tensor::<f32>::from_fn([2, 16, 16], |i| ((i / 5) % 2) as f32);
        let t = AugTransform::new(0.37, true, false, 1.07).unwrap();
        let out = augment_gt(&m, &t).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let soft = Tensor::<f32>::full([1, 2, 2], 0.5);
        assert!(augment_gt(&soft, &t).is_err());
    }

    #[test]
    fn out_of_canvas_reads_zero() {
        let x = Tensor::<f64>::ones([1, 8, 8]);
        let t = AugTransform::new(0.0, false, false, 0.5).unwrap();
        let out = augment_bev(&x, &t).unwrap();
        // shrinking by half samples twice as far out: corners leave the canvas
        assert_eq!(out.at(&[0, 0, 0]), 0.0);
        assert_eq!(out.at(&[0, 4, 4]), 1.0);
    }
}
