//! Procedural BEV scenes: a feature raster plus six aligned class masks.
//!
//! Roads are straight corridors at random angles. Each road carries a
//! centre divider, one pedestrian crossing and a stop line in front of it on
//! one lane, and is flanked by walkways. A rectangular car park is placed
//! off-road. Scenes missing any class are rejected and redrawn.
//!
//! Feature channels, loosely modelled on a rasterised LiDAR sweep:
//! - 0: road surface (1.0)
//! - 1: signed paint (divider 1.0, crossing -1.0)
//! - 2: kerb height (walkway 1.0)
//! - 3: surface material (car park gravel 1.0 with 0.6 stall lines,
//!   stop bar -1.0)
//! - 4..: low-frequency distractor fields
//!
//! Channels 0..4 are blurred with a 3-tap binomial kernel. Gaussian noise is
//! added to every channel.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::CLASS_NAMES;
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
pub const MANIFEST: &str = "manifest.txt";
const MAX_ATTEMPTS: u64 = 256;
const MIN_CLASS_PIXELS: usize = 3;
/// Feature channels that carry scene content; the rest are distractors.
pub const SEMANTIC_CHANNELS: usize = 4;

pub const DRIVABLE: usize = 0;
pub const PED_CROSSING: usize = 1;
pub const WALKWAY: usize = 2;
pub const STOP_LINE: usize = 3;
pub const CARPARK: usize = 4;
pub const DIVIDER: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub noise_sigma: f64,
    pub road_count_min: usize,
    pub road_count_max: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            in_channels: 4,
            noise_sigma: 0.1,
            road_count_min: 1,
            road_count_max: 3,
        }
    }
}

impl SynthSpec {
    pub fn square(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene size {}x{} is below the 16x16 minimum",
                self.height, self.width
            )));
        }
        if self.in_channels < SEMANTIC_CHANNELS {
            return Err(Error::Config(format!(
                "need at least {SEMANTIC_CHANNELS} feature channels, got {}",
                self.in_channels
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("bad noise sigma {}", self.noise_sigma)));
        }
        if self.road_count_min == 0 || self.road_count_min > self.road_count_max || self.road_count_max > 8 {
            return Err(Error::Config(format!(
                "road count range {}..={} must lie within 1..=8",
                self.road_count_min, self.road_count_max
            )));
        }
        Ok(())
    }

    fn to_kv(&self, out: &mut String) {
        let _ = writeln!(out, "height={}", self.height);
        let _ = writeln!(out, "width={}", self.width);
        let _ = writeln!(out, "in_channels={}", self.in_channels);
        let _ = writeln!(out, "noise_sigma={}", self.noise_sigma);
        let _ = writeln!(out, "road_count_min={}", self.road_count_min);
        let _ = writeln!(out, "road_count_max={}", self.road_count_max);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[Cin, H, W]`
    pub features: Tensor<f32>,
    /// `[K, H, W]`, binary, class order as [`CLASS_NAMES`].
    pub masks: Tensor<f32>,
    pub seed: u64,
    pub version: u32,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated from `base`.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}

// pixels of bare road between a stop line and its crossing
const STOP_GAP: f64 = 2.0;

struct Road {
    py: f64,
    px: f64,
    // unit direction (along) and normal
    uy: f64,
    ux: f64,
    half_width: f64,
    crossing_start: f64,
    crossing_len: f64,
    stop_len: f64,
    // stop line sits on the lane with this sign of the normal offset
    stop_side: f64,
}

impl Road {
    fn local(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.py, x - self.px);
        let along = dy * self.uy + dx * self.ux;
        let across = -dy * self.ux + dx * self.uy;
        (along, across)
    }
}

struct Layout {
    roads: Vec<Road>,
    walk_width: f64,
    carpark: (usize, usize, usize, usize),
}

/// Draws one scene. Deterministic in `(seed, spec, GENERATOR_VERSION)`.
pub fn generate_scene(seed: u64, spec: &SynthSpec) -> Result<SceneSample> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ attempt.wrapping_mul(0xd6e8_feb8_6659_fd93)));
        if let Some(masks) = draw_masks(&mut rng, spec) {
            let features = render_features(&mut rng, spec, &masks)?;
            let sample = SceneSample {
                features,
                masks,
                seed,
                version: GENERATOR_VERSION,
            };
            check_invariants(&sample)?;
            return Ok(sample);
        }
    }
    Err(Error::InvalidInput(format!(
        "seed {seed}: no scene with every class present after {MAX_ATTEMPTS} attempts"
    )))
}

/// `num` scenes with seeds `sample_seed(base_seed, i)`.
pub fn generate_dataset(spec: &SynthSpec, base_seed: u64, num: usize) -> Result<Vec<SceneSample>> {
    (0..num as u64)
        .map(|i| generate_scene(sample_seed(base_seed, i), spec))
        .collect()
}

fn draw_layout(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Layout {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let size = h.min(w);
    let n = rng.random_range(spec.road_count_min..=spec.road_count_max);
    let roads = (0..n)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let half_width = (size * rng.random_range(0.06..0.10)).max(2.0);
            let crossing_len = (size * 0.10).max(3.0);
            Road {
                py: rng.random_range(0.25 * h..0.75 * h),
                px: rng.random_range(0.25 * w..0.75 * w),
                uy: angle.sin(),
                ux: angle.cos(),
                half_width,
                crossing_start: rng.random_range(-0.2 * size..0.2 * size),
                crossing_len,
                stop_len: (size * 0.08).max(3.0),
                stop_side: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            }
        })
        .collect();
    let walk_width = (size * 0.05).max(1.5);
    let ch = rng.random_range(spec.height / 6..=spec.height / 3);
    let cw = rng.random_range(spec.width / 6..=spec.width / 3);
    let cy = rng.random_range(0..=spec.height - ch);
    let cx = rng.random_range(0..=spec.width - cw);
    Layout {
        roads,
        walk_width,
        carpark: (cy, cx, ch, cw),
    }
}

fn draw_masks(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Option<Tensor<f32>> {
    let layout = draw_layout(rng, spec);
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut m = vec![false; NUM_CLASSES * plane];
    let mut near_road = vec![false; plane];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (y, x) = (r as f64, c as f64);
            for road in &layout.roads {
                let (along, across) = road.local(y, x);
                let on_road = across.abs() <= road.half_width;
                let in_crossing =
                    along >= road.crossing_start && along < road.crossing_start + road.crossing_len;
                let stop_to = road.crossing_start - STOP_GAP;
                let in_stop = along >= stop_to - road.stop_len
                    && along < stop_to
                    && across * road.stop_side >= 0.0;
                if on_road {
                    m[DRIVABLE * plane + i] = true;
                    if in_crossing {
                        m[PED_CROSSING * plane + i] = true;
                    }
                    if in_stop {
                        m[STOP_LINE * plane + i] = true;
                    }
                    if across.abs() < 1.0 && !in_crossing {
                        m[DIVIDER * plane + i] = true;
                    }
                } else if across.abs() <= road.half_width + layout.walk_width {
                    m[WALKWAY * plane + i] = true;
                }
                if across.abs() <= road.half_width + layout.walk_width + 1.0 {
                    near_road[i] = true;
                }
            }
        }
    }
    for i in 0..plane {
        if m[DRIVABLE * plane + i] {
            m[WALKWAY * plane + i] = false;
        }
        // dividers break at every crossing, including other roads' crossings
        if m[PED_CROSSING * plane + i] {
            m[DIVIDER * plane + i] = false;
        }
    }
    let (cy, cx, ch, cw) = layout.carpark;
    for r in cy..cy + ch {
        for c in cx..cx + cw {
            if near_road[r * w + c] {
                // the car park must sit entirely off-road
                return None;
            }
        }
    }
    for r in cy..cy + ch {
        for c in cx..cx + cw {
            m[CARPARK * plane + r * w + c] = true;
        }
    }
    let all_present = m
        .chunks(plane)
        .all(|ch| ch.iter().filter(|&&b| b).count() >= MIN_CLASS_PIXELS);
    if !all_present {
        return None;
    }
    Some(
        Tensor::new(
            [NUM_CLASSES, h, w],
            m.into_iter().map(|b| b as u8 as f32).collect(),
        )
        .expect("sized above"),
    )
}

fn blur3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = [0.25, 0.5, 0.25];
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let cc = (c as isize + j as isize - 1).clamp(0, w as isize - 1) as usize;
                acc += kv * src[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let rr = (r as isize + j as isize - 1).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn render_features(rng: &mut ChaCha8Rng, spec: &SynthSpec, masks: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, cin) = (spec.height, spec.width, spec.in_channels);
    let plane = h * w;
    let mk = |k: usize, i: usize| masks.data()[k * plane + i] > 0.5;
    let mut surface = vec![0.0; plane];
    let mut paint = vec![0.0f64; plane];
    let mut kerb = vec![0.0; plane];
    let mut material = vec![0.0; plane];
    for i in 0..plane {
        let c = i % w;
        if mk(DRIVABLE, i) {
            surface[i] = 1.0;
        }
        if mk(PED_CROSSING, i) {
            paint[i] = -1.0;
        }
        if mk(DIVIDER, i) {
            paint[i] = 1.0;
        }
        if mk(WALKWAY, i) {
            kerb[i] = 1.0;
        }
        if mk(CARPARK, i) {
            material[i] = if c % 3 == 0 { 0.6 } else { 1.0 };
        }
        if mk(STOP_LINE, i) {
            material[i] = -1.0;
        }
    }
    let mut channels: Vec<Vec<f64>> = [surface, paint, kerb, material]
        .iter()
        .map(|ch| blur3(ch, h, w))
        .collect();
    for _ in SEMANTIC_CHANNELS..cin {
        let fy = rng.random_range(0.5..2.5) * std::f64::consts::TAU / h as f64;
        let fx = rng.random_range(0.5..2.5) * std::f64::consts::TAU / w as f64;
        let (py, px) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
        let amp = rng.random_range(0.2..0.5);
        channels.push(
            (0..plane)
                .map(|i| amp * ((i / w) as f64 * fy + py).sin() * ((i % w) as f64 * fx + px).cos())
                .collect(),
        );
    }
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut data = Vec::with_capacity(cin * plane);
    for ch in channels {
        for v in ch {
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((v + n) as f32);
        }
    }
    Tensor::new([cin, h, w], data)
}

/// Checks binarity, finiteness and the containment rules
/// `ped_crossing ⊆ drivable`, `stop_line ⊆ drivable`, `walkway ∩ drivable = ∅`.
pub fn check_invariants(s: &SceneSample) -> Result<()> {
    let shape = s.masks.shape();
    if shape.len() != 3 || shape[0] != NUM_CLASSES {
        return Err(Error::shape("scene", format!("masks {shape:?}, expected [{NUM_CLASSES}, H, W]")));
    }
    if s.features.ndim() != 3 || s.features.shape()[1..] != shape[1..] {
        return Err(Error::shape(
            "scene",
            format!("features {:?} vs masks {:?}", s.features.shape(), shape),
        ));
    }
    if !s.features.all_finite() {
        return Err(Error::NonFinite { op: "scene features".into() });
    }
    crate::tensor::kernels::ensure_binary("scene", &s.masks)?;
    let plane = shape[1] * shape[2];
    let m = |k: usize, i: usize| s.masks.data()[k * plane + i] == 1.0;
    for i in 0..plane {
        let d = m(DRIVABLE, i);
        if (m(PED_CROSSING, i) || m(STOP_LINE, i)) && !d {
            return Err(Error::InvalidInput(format!("seed {}: marking outside drivable area", s.seed)));
        }
        if m(WALKWAY, i) && d {
            return Err(Error::InvalidInput(format!("seed {}: walkway overlaps drivable area", s.seed)));
        }
    }
    Ok(())
}

/// A dataset as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub base_seed: u64,
    pub samples: Vec<SceneSample>,
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:06}.rgct")
}

/// Writes one container per sample plus `manifest.txt`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "generator_version={GENERATOR_VERSION}");
    let _ = writeln!(manifest, "count={}", ds.samples.len());
    let _ = writeln!(manifest, "base_seed={}", ds.base_seed);
    ds.spec.to_kv(&mut manifest);
    for (i, s) in ds.samples.iter().enumerate() {
        let name = sample_file_name(i);
        let mut c = Container::new();
        c.push("features", s.features.clone());
        c.push("masks", s.masks.clone());
        c.metadata = Some(format!("seed={}\ngenerator_version={}\n", s.seed, s.version));
        c.write(&dir.join(&name))?;
        let _ = writeln!(manifest, "file={name}");
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn parse_kv<'a>(text: &'a str, path: &Path) -> Result<Vec<(&'a str, &'a str)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::format(path, format!("expected key=value, got `{l}`")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, path: &Path) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(path, format!("bad value `{value}` for `{key}`")))
}

/// Inverse of [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut spec = SynthSpec::default();
    let (mut version, mut count, mut base_seed) = (None, None, 0u64);
    let mut files = Vec::new();
    for (k, v) in parse_kv(&text, &mpath)? {
        match k {
            "generator_version" => version = Some(parse_num::<u32>(k, v, &mpath)?),
            "count" => count = Some(parse_num::<usize>(k, v, &mpath)?),
            "base_seed" => base_seed = parse_num(k, v, &mpath)?,
            "height" => spec.height = parse_num(k, v, &mpath)?,
            "width" => spec.width = parse_num(k, v, &mpath)?,
            "in_channels" => spec.in_channels = parse_num(k, v, &mpath)?,
            "noise_sigma" => spec.noise_sigma = parse_num(k, v, &mpath)?,
            "road_count_min" => spec.road_count_min = parse_num(k, v, &mpath)?,
            "road_count_max" => spec.road_count_max = parse_num(k, v, &mpath)?,
            "file" => files.push(v.to_string()),
            other => return Err(Error::format(&mpath, format!("unknown key `{other}`"))),
        }
    }
    let version = version.ok_or_else(|| Error::format(&mpath, "missing generator_version"))?;
    if version != GENERATOR_VERSION {
        return Err(Error::Version {
            path: mpath,
            found: version,
            expected: GENERATOR_VERSION,
        });
    }
    let count = count.ok_or_else(|| Error::format(&mpath, "missing count"))?;
    let on_disk = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name();
            let n = n.to_string_lossy();
            n.starts_with("sample_") && n.ends_with(".rgct")
        })
        .count();
    if files.len() != count || on_disk != count {
        return Err(Error::format(
            &mpath,
            format!(
                "manifest count {count} but {} listed and {on_disk} sample files present",
                files.len()
            ),
        ));
    }
    let samples = files
        .iter()
        .map(|name| read_sample(&dir.join(name), &spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec,
        base_seed,
        samples,
    })
}

fn read_sample(path: &PathBuf, spec: &SynthSpec) -> Result<SceneSample> {
    let c = Container::read(path)?;
    let get = |name: &str| {
        c.get(name)
            .map(|t| t.to_float::<f32>())
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))
    };
    let features = get("features")?;
    let masks = get("masks")?;
    if features.shape() != [spec.in_channels, spec.height, spec.width]
        || masks.shape() != [NUM_CLASSES, spec.height, spec.width]
    {
        return Err(Error::format(
            path,
            format!(
                "tensor shapes {:?}/{:?} disagree with manifest",
                features.shape(),
                masks.shape()
            ),
        ));
    }
    let meta = c.metadata.as_deref().unwrap_or("");
    let (mut seed, mut version) = (None, None);
    for (k, v) in parse_kv(meta, path)? {
        match k {
            "seed" => seed = Some(parse_num::<u64>(k, v, path)?),
            "generator_version" => version = Some(parse_num::<u32>(k, v, path)?),
            _ => {}
        }
    }
    let version = version.ok_or_else(|| Error::format(path, "missing generator_version"))?;
    if version != GENERATOR_VERSION {
        return Err(Error::Version {
            path: path.clone(),
            found: version,
            expected: GENERATOR_VERSION,
        });
    }
    Ok(SceneSample {
        features,
        masks,
        seed: seed.ok_or_else(|| Error::format(path, "missing seed"))?,
        version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SynthSpec::square(32);
        assert_eq!(generate_scene(5, &spec).unwrap(), generate_scene(5, &spec).unwrap());
        assert_ne!(
            generate_scene(5, &spec).unwrap().features,
            generate_scene(6, &spec).unwrap().features
        );
    }

    #[test]
    fn every_class_present_and_invariants_hold() {
        for size in [16, 32, 64] {
            let spec = SynthSpec::square(size);
            for seed in 0..20 {
                let s = generate_scene(seed, &spec).unwrap();
                check_invariants(&s).unwrap();
                let plane = size * size;
                for k in 0..NUM_CLASSES {
                    let n = s.masks.data()[k * plane..(k + 1) * plane]
                        .iter()
                        .filter(|&&v| v == 1.0)
                        .count();
                    assert!(n >= MIN_CLASS_PIXELS, "size {size} seed {seed} class {k}");
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(generate_scene(0, &SynthSpec::square(8)).is_err());
        let bad = SynthSpec {
            road_count_min: 0,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            in_channels: 1,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn broken_containment_is_reported() {
        let mut s = generate_scene(1, &SynthSpec::square(16)).unwrap();
        let plane = 16 * 16;
        let i = (0..plane).find(|&i| s.masks.data()[i] == 0.0).unwrap();
        s.masks.data_mut()[STOP_LINE * plane + i] = 1.0;
        assert!(check_invariants(&s).is_err());
    }
}
