//! SynthMotion: deterministic synthetic clips whose classes differ only in
//! the direction of time.
//!
//! Every class has a time-reversed partner (left/right, up/down,
//! grow/shrink, rotate_cw/rotate_ccw). A sample of the second class of a
//! pair is rendered as a sample of the first and played backwards, so both
//! classes have exactly the same distribution of individual frames and only
//! frame order tells them apart.

mod format;

pub use format::{DatasetReader, AFSV_MAGIC, AFSV_VERSION, HEADER_LEN};

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{self, fmt_f64, parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    Left,
    Right,
    Up,
    Down,
    Grow,
    Shrink,
    RotateCw,
    RotateCcw,
}

impl MotionClass {
    pub const ALL: [MotionClass; 8] = [
        MotionClass::Left,
        MotionClass::Right,
        MotionClass::Up,
        MotionClass::Down,
        MotionClass::Grow,
        MotionClass::Shrink,
        MotionClass::RotateCw,
        MotionClass::RotateCcw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Left => "left",
            MotionClass::Right => "right",
            MotionClass::Up => "up",
            MotionClass::Down => "down",
            MotionClass::Grow => "grow",
            MotionClass::Shrink => "shrink",
            MotionClass::RotateCw => "rotate_cw",
            MotionClass::RotateCcw => "rotate_ccw",
        }
    }

    /// The class whose clips, reversed, are clips of this class.
    pub fn reverse(self) -> MotionClass {
        match self {
            MotionClass::Left => MotionClass::Right,
            MotionClass::Right => MotionClass::Left,
            MotionClass::Up => MotionClass::Down,
            MotionClass::Down => MotionClass::Up,
            MotionClass::Grow => MotionClass::Shrink,
            MotionClass::Shrink => MotionClass::Grow,
            MotionClass::RotateCw => MotionClass::RotateCcw,
            MotionClass::RotateCcw => MotionClass::RotateCw,
        }
    }

    /// Whether this class is rendered directly (`true`) or as its partner
    /// played backwards.
    fn is_forward(self) -> bool {
        matches!(
            self,
            MotionClass::Right | MotionClass::Down | MotionClass::Grow | MotionClass::RotateCw
        )
    }

    pub fn valid_names() -> String {
        MotionClass::ALL.map(|c| c.name()).join(", ")
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionClass::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown class {s:?}; valid classes: {}", MotionClass::valid_names())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMotionSpec {
    pub n_samples: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<MotionClass>,
    pub noise_std: f64,
    /// Nominal shape diameter in pixels.
    pub shape_size: f64,
    pub seed: u64,
}

impl Default for SynthMotionSpec {
    fn default() -> Self {
        SynthMotionSpec {
            n_samples: 1000,
            frames: 8,
            height: 32,
            width: 32,
            classes: MotionClass::ALL.to_vec(),
            noise_std: 0.02,
            shape_size: 8.0,
            seed: 0,
        }
    }
}

/// Slowest and fastest translation, pixels per frame.
const SPEED: (f64, f64) = (1.0, 2.0);

impl SynthMotionSpec {
    pub fn two_class() -> Self {
        SynthMotionSpec {
            classes: vec![MotionClass::Left, MotionClass::Right],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 || self.frames == 0 {
            return bad("data.n_samples and data.frames must be positive".into());
        }
        if self.classes.len() < 2 {
            return bad(format!("need at least two classes; valid classes: {}", MotionClass::valid_names()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return bad(format!("class {c} listed twice"));
            }
        }
        if !self.classes.iter().any(|c| self.classes.contains(&c.reverse())) {
            return bad("classes must contain at least one time-reversal pair (e.g. left,right)".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("data.noise_std = {} must be a finite non-negative number", self.noise_std));
        }
        if self.classes.len() > u16::MAX as usize || self.n_samples > u32::MAX as usize {
            return bad("dataset too large for the file format".into());
        }
        let side = self.height.min(self.width) as f64;
        // The widest footprint is the grown shape; translations need room
        // for the slowest speed.
        let travel = SPEED.0 * (self.frames - 1) as f64;
        if !(self.shape_size >= 2.0) || self.shape_size * 1.5 > side || self.shape_size + travel > side {
            return bad(format!(
                "degenerate geometry: a {}-pixel shape moving {travel} pixels does not fit a {}x{} frame",
                self.shape_size, self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn label_of(&self, index: usize) -> usize {
        index % self.classes.len()
    }
}

impl KeyValue for SynthMotionSpec {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "data.n_samples" => self.n_samples = parse_value(key, value)?,
            "data.frames" => self.frames = parse_value(key, value)?,
            "data.height" => self.height = parse_value(key, value)?,
            "data.width" => self.width = parse_value(key, value)?,
            "data.classes" => {
                self.classes = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "data.noise_std" => self.noise_std = parse_value(key, value)?,
            "data.shape_size" => self.shape_size = parse_value(key, value)?,
            "data.seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("data.n_samples", self.n_samples.to_string()),
            ("data.frames", self.frames.to_string()),
            ("data.height", self.height.to_string()),
            ("data.width", self.width.to_string()),
            ("data.classes", config::join(&self.classes)),
            ("data.noise_std", fmt_f64(self.noise_std)),
            ("data.shape_size", fmt_f64(self.shape_size)),
            ("data.seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// SplitMix64 finaliser; decorrelates per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator state of sample `index`, a pure function of `(seed, index)`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ index as u64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

/// Per-frame pose of the shape.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

fn inside(shape: Shape, pose: &Pose, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - pose.cx, y - pose.cy);
    let (s, c) = (-pose.angle).sin_cos();
    let (u, v) = (dx * c - dy * s, dx * s + dy * c);
    let r = pose.radius;
    match shape {
        Shape::Circle => u * u + v * v <= r * r,
        Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
        Shape::Triangle => (0..3).all(|k| {
            // Inside the three half-planes of an equilateral triangle with
            // circumradius r.
            let a = 2.0 * PI * k as f64 / 3.0;
            u * a.cos() + v * a.sin() >= -0.5 * r
        }),
    }
}

/// Renders one frame with 2×2 supersampling.
fn render(shape: Shape, pose: &Pose, fg: f64, bg: f64, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![bg; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if inside(shape, pose, x as f64 + ox, y as f64 + oy) {
                    hits += 1;
                }
            }
            out[y * w + x] = bg + (fg - bg) * hits as f64 / 4.0;
        }
    }
    out
}

/// Poses of a clip of the forward member of `class`'s pair.
fn trajectory(class: MotionClass, spec: &SynthMotionSpec, rng: &mut ChaCha8Rng) -> (Shape, Vec<Pose>) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let t_max = (spec.frames - 1) as f64;
    let base = spec.shape_size / 2.0;
    let forward = if class.is_forward() { class } else { class.reverse() };
    let shape = match forward {
        // Rotation must be visible.
        MotionClass::RotateCw => [Shape::Square, Shape::Triangle][rng.random_range(0..2)],
        _ => [Shape::Circle, Shape::Square, Shape::Triangle][rng.random_range(0..3)],
    };
    let angle0 = rng.random_range(0.0..2.0 * PI);
    // Room for a centre given the footprint radius and the travel.
    let place = |rng: &mut ChaCha8Rng, extent: f64, reach: f64, travel: f64| -> f64 {
        let lo = reach;
        let hi = (extent - reach - travel).max(lo);
        rng.random_range(lo..=hi)
    };
    let poses = match forward {
        MotionClass::Right | MotionClass::Down => {
            let max_speed = ((w.min(h) - spec.shape_size) / t_max.max(1.0)).min(SPEED.1);
            let speed = rng.random_range(SPEED.0..=max_speed.max(SPEED.0));
            let travel = speed * t_max;
            let horizontal = forward == MotionClass::Right;
            let (along, across) = if horizontal { (w, h) } else { (h, w) };
            let start = place(rng, along, base, travel);
            let fixed = place(rng, across, base, 0.0);
            (0..spec.frames)
                .map(|t| {
                    let p = start + speed * t as f64;
                    let (cx, cy) = if horizontal { (p, fixed) } else { (fixed, p) };
                    Pose {
                        cx,
                        cy,
                        radius: base,
                        angle: angle0,
                    }
                })
                .collect()
        }
        MotionClass::Grow => {
            let r0 = base * rng.random_range(0.5..0.7);
            let r1 = base * rng.random_range(1.2..1.5);
            let cx = place(rng, w, r1, 0.0);
            let cy = place(rng, h, r1, 0.0);
            (0..spec.frames)
                .map(|t| Pose {
                    cx,
                    cy,
                    radius: r0 + (r1 - r0) * t as f64 / t_max.max(1.0),
                    angle: angle0,
                })
                .collect()
        }
        _ => {
            let step = rng.random_range(PI / 16.0..PI / 8.0);
            let cx = place(rng, w, base, 0.0);
            let cy = place(rng, h, base, 0.0);
            (0..spec.frames)
                .map(|t| Pose {
                    cx,
                    cy,
                    radius: base,
                    // Image y points down, so a growing angle turns clockwise.
                    angle: angle0 + step * t as f64,
                })
                .collect()
        }
    };
    (shape, poses)
}

/// Clean frames `[T, h·w]` of one sample before noise and quantisation.
fn clean_frames(spec: &SynthMotionSpec, class: MotionClass, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (shape, poses) = trajectory(class, spec, rng);
    let fg = rng.random_range(0.6..1.0);
    let bg = rng.random_range(0.0..0.2);
    let mut frames: Vec<Vec<f64>> = poses
        .iter()
        .map(|p| render(shape, p, fg, bg, spec.height, spec.width))
        .collect();
    if !class.is_forward() {
        frames.reverse();
    }
    frames
}

fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders sample `index`: its label and `T·h·w` quantised pixels.
pub fn render_sample(spec: &SynthMotionSpec, index: usize) -> (u16, Vec<u8>) {
    let label = spec.label_of(index);
    let mut rng = sample_rng(spec.seed, index);
    let frames = clean_frames(spec, spec.classes[label], &mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let pixels = frames
        .iter()
        .flatten()
        .map(|&v| {
            let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            quantise(v + n)
        })
        .collect();
    (label as u16, pixels)
}

/// An in-memory dataset of quantised clips, single channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<u16>,
    /// `[n, T, c, h, w]` pixels.
    pub pixels: Vec<u8>,
}

/// A batch of clips `[n, T, c, h, w]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch {
    pub clips: Tensor,
    pub labels: Vec<usize>,
}

impl VideoBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Frames folded into the batch axis: `[(n·T), c, h, w]`.
    pub fn folded(&self) -> Tensor {
        let s = self.clips.shape();
        self.clips
            .clone()
            .reshape(&[s[0] * s[1], s[2], s[3], s[4]])
            .expect("same element count")
    }
}

/// Generates the dataset described by `spec`; a pure function of the spec.
pub fn generate(spec: &SynthMotionSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = par::map_range(spec.n_samples, |i| render_sample(spec, i));
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut pixels = Vec::with_capacity(spec.n_samples * spec.frames * spec.height * spec.width);
    for (l, p) in samples {
        labels.push(l);
        pixels.extend(p);
    }
    Ok(Dataset {
        frames: spec.frames,
        channels: 1,
        height: spec.height,
        width: spec.width,
        num_classes: spec.classes.len(),
        labels,
        pixels,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    /// Gathers the samples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> VideoBatch {
        let len = self.clip_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(self.pixels[i * len..(i + 1) * len].iter().map(|&p| p as f64 / 255.0));
        }
        VideoBatch {
            clips: Tensor::new(
                &[indices.len(), self.frames, self.channels, self.height, self.width],
                data,
            )
            .expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }

    /// Clip `i` as `[T, c, h, w]`.
    pub fn clip(&self, i: usize) -> Tensor {
        let b = self.batch(&[i]);
        let s = b.clips.shape()[1..].to_vec();
        b.clips.reshape(&s).expect("same element count")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::decode(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Sidecar manifest path: `<file>.manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Generates the dataset, writes it to `path` and the spec to the manifest.
pub fn generate_to_file(spec: &SynthMotionSpec, path: &Path) -> Result<Dataset> {
    let ds = generate(spec)?;
    ds.save(path)?;
    let manifest = manifest_path(path);
    std::fs::write(&manifest, config::render(&spec.entries())).map_err(|e| Error::io(&manifest, e))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(classes: &[MotionClass]) -> SynthMotionSpec {
        SynthMotionSpec {
            n_samples: 24,
            classes: classes.to_vec(),
            seed: 7,
            ..Default::default()
        }
    }

    fn centroid_x(frame: &[f64], w: usize) -> f64 {
        let total: f64 = frame.iter().sum();
        frame.iter().enumerate().map(|(i, v)| (i % w) as f64 * v).sum::<f64>() / total
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small(&MotionClass::ALL);
        assert_eq!(generate(&spec).unwrap().to_bytes(), generate(&spec).unwrap().to_bytes());
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate(&other).unwrap().pixels, generate(&spec).unwrap().pixels);
    }

    #[test]
    fn sequential_and_parallel_generation_agree() {
        let spec = small(&MotionClass::ALL);
        let a = generate(&spec).unwrap();
        par::set_sequential(true);
        let b = generate(&spec).unwrap();
        par::set_sequential(false);
        assert_eq!(a, b);
    }

    #[test]
    fn reversed_left_clip_drifts_right() {
        let spec = small(&[MotionClass::Left, MotionClass::Right]);
        let mut rng = sample_rng(1, 0);
        let mut frames = clean_frames(&spec, MotionClass::Left, &mut rng);
        let xs: Vec<f64> = frames.iter().map(|f| centroid_x(f, spec.width)).collect();
        assert!(xs.windows(2).all(|p| p[1] < p[0]), "{xs:?}");
        frames.reverse();
        let xs: Vec<f64> = frames.iter().map(|f| centroid_x(f, spec.width)).collect();
        assert!(xs.windows(2).all(|p| p[1] > p[0]), "{xs:?}");
    }

    #[test]
    fn partner_classes_share_frames_in_reverse() {
        let spec = small(&MotionClass::ALL);
        for class in MotionClass::ALL {
            let a = clean_frames(&spec, class, &mut sample_rng(3, 5));
            let mut b = clean_frames(&spec, class.reverse(), &mut sample_rng(3, 5));
            b.reverse();
            assert_eq!(a, b, "{class}");
        }
    }

    #[test]
    fn labels_are_round_robin() {
        let spec = SynthMotionSpec {
            n_samples: 19,
            ..small(&MotionClass::ALL)
        };
        let ds = generate(&spec).unwrap();
        let counts = ds.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(ds.labels[9], 1);
    }

    #[test]
    fn pixels_stay_in_range_and_the_shape_is_visible() {
        let ds = generate(&small(&MotionClass::ALL)).unwrap();
        let clip = ds.clip(0);
        assert!(clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let max = clip.data().iter().copied().fold(0.0, f64::max);
        assert!(max > 0.5);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut s = small(&[MotionClass::Left, MotionClass::Up]);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.classes = vec![MotionClass::Left, MotionClass::Right];
        s.shape_size = 40.0;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("degenerate"), "{err}");
        assert!("sideways".parse::<MotionClass>().unwrap_err().to_string().contains("rotate_ccw"));
    }

    #[test]
    fn data_keys_round_trip() {
        let spec = SynthMotionSpec {
            noise_std: 0.03,
            ..small(&[MotionClass::Grow, MotionClass::Shrink])
        };
        let mut back = SynthMotionSpec::default();
        config::apply(&mut [&mut back], &config::parse_text(&config::render(&spec.entries())).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
