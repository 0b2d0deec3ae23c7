//! Procedural toy images: one coloured, textured shape per class on a plain
//! background, plus distortion families for building 2AFC triplets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use robustsim_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_unit, ImageBatch, LabeledImages};
use crate::percept::{AfcLabel, TwoAfcTriplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    /// Stripe frequency across the shape, in cycles per image width.
    pub texture: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionFamily {
    /// Gaussian pixel noise; magnitude is the standard deviation.
    Noise,
    /// Blend towards a 3x3 box blur; magnitude is the blend weight.
    Blur,
    /// Per-channel additive offset of random sign; magnitude is its size.
    ColorShift,
    /// Sub-pixel translation; magnitude is the shift length in pixels.
    Warp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub family: DistortionFamily,
    pub small: [f64; 2],
    pub large: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    pub distortions: Vec<Distortion>,
}

fn class(name: &str, shape: ShapeKind, color: [f64; 3], texture: f64) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        shape,
        color,
        texture,
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes: vec![
                class("disk", ShapeKind::Disk, [0.85, 0.25, 0.2], 0.0),
                class("square", ShapeKind::Square, [0.25, 0.8, 0.3], 3.0),
                class("triangle", ShapeKind::Triangle, [0.25, 0.35, 0.9], 1.5),
                class("ring", ShapeKind::Ring, [0.9, 0.8, 0.25], 0.0),
            ],
            distortions: vec![
                Distortion {
                    family: DistortionFamily::Noise,
                    small: [0.0, 0.02],
                    large: [0.023, 0.027],
                },
                Distortion {
                    family: DistortionFamily::Blur,
                    small: [0.0, 0.15],
                    large: [0.175, 0.195],
                },
                Distortion {
                    family: DistortionFamily::ColorShift,
                    small: [0.0, 0.01],
                    large: [0.011, 0.013],
                },
                Distortion {
                    family: DistortionFamily::Warp,
                    small: [0.0, 0.3],
                    large: [0.36, 0.44],
                },
            ],
        }
    }
}

impl SyntheticSpec {
    /// The three-class safe / buffer / unsafe layout used by the detection
    /// experiment. Buffer images sit between the other two in colour, and the
    /// colours are close enough that shape and texture carry most of the
    /// class signal.
    pub fn three_class() -> Self {
        Self {
            classes: vec![
                class("safe", ShapeKind::Disk, [0.45, 0.65, 0.325], 0.0),
                class("buffer", ShapeKind::Diamond, [0.6, 0.525, 0.3], 1.5),
                class("unsafe", ShapeKind::Cross, [0.75, 0.375, 0.275], 3.0),
            ],
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes.len())));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!("image size {} is not a positive multiple of 8", self.image_size)));
        }
        for c in &self.classes {
            if c.color.iter().any(|v| !(0.0..=1.0).contains(v)) || !c.texture.is_finite() {
                return Err(Error::Config(format!("class {} has invalid colour or texture", c.name)));
            }
        }
        if self.distortions.is_empty() {
            return Err(Error::Config("no distortion families".into()));
        }
        for d in &self.distortions {
            let ok = d.small[0] >= 0.0 && d.small[0] <= d.small[1] && d.large[0] <= d.large[1] && d.small[1] < d.large[0];
            if !ok {
                return Err(Error::Config(format!(
                    "{:?}: ranges must satisfy 0 <= small <= small_hi < large_lo <= large_hi",
                    d.family
                )));
            }
        }
        Ok(())
    }
}

fn inside(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Disk => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        ShapeKind::Triangle => dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.45 * r * r
        }
        ShapeKind::Cross => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
    }
}

/// One `[1, 3, S, S]` image of class `c`.
fn render(spec: &SyntheticSpec, c: &ClassSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let s = spec.image_size;
    let sf = s as f64;
    let grey = rng.gen_range(0.1..0.4);
    let bg: [f64; 3] = std::array::from_fn(|_| grey + rng.gen_range(-0.05..0.05));
    let color: [f64; 3] = std::array::from_fn(|i| c.color[i] + rng.gen_range(-0.08..0.08));
    let cx = rng.gen_range(0.35..0.65) * sf;
    let cy = rng.gen_range(0.35..0.65) * sf;
    let r = rng.gen_range(0.2..0.32) * sf;
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut data = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let on = inside(c.shape, dx, dy, r);
            let stripe = 1.0
                + 0.2 * (std::f64::consts::TAU * c.texture * (px * theta.cos() + py * theta.sin()) / sf + phase).sin();
            for ch in 0..3 {
                let v = if on { color[ch] * stripe } else { bg[ch] };
                data[ch * s * s + y * s + x] = v;
            }
        }
    }
    let mut t = Tensor::new(vec![1, 3, s, s], data).expect("sized");
    clamp_unit(&mut t);
    t
}

/// `per_class` images of every class, interleaved by class.
pub fn gen_labeled_images(spec: &SyntheticSpec, per_class: usize, seed: u64) -> Result<LabeledImages> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_class * spec.num_classes());
    let mut labels = Vec::with_capacity(images.capacity());
    for _ in 0..per_class {
        for (k, c) in spec.classes.iter().enumerate() {
            images.push(render(spec, c, &mut rng));
            labels.push(k);
        }
    }
    if images.is_empty() {
        return Err(Error::Config("zero images requested".into()));
    }
    LabeledImages::new(ImageBatch::stack(&images)?, labels)
}

fn box_blur(img: &Tensor) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += src[ch * h * w + yy * w + xx];
                    }
                }
                out[ch * h * w + y * w + x] = acc / 9.0;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("sized")
}

fn translate(img: &Tensor, sx: f64, sy: f64) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let src = img.data();
    let at = |ch: usize, y: i64, x: i64| {
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        src[ch * h * w + yy * w + xx]
    };
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 - sx, y as f64 - sy);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - x0, fy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = (1.0 - ay) * ((1.0 - ax) * at(ch, y0, x0) + ax * at(ch, y0, x0 + 1))
                    + ay * ((1.0 - ax) * at(ch, y0 + 1, x0) + ax * at(ch, y0 + 1, x0 + 1));
                out[ch * h * w + y * w + x] = v;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("sized")
}

/// Applies `family` at `magnitude`; the result is clamped to `[0, 1]`.
pub fn distort(img: &Tensor, family: DistortionFamily, magnitude: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = match family {
        DistortionFamily::Noise => {
            let normal = Normal::new(0.0, magnitude.max(0.0)).expect("finite sigma");
            let mut t = img.clone();
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
            t
        }
        DistortionFamily::Blur => {
            let blurred = box_blur(img);
            img.zip_map(&blurred, |a, b| (1.0 - magnitude) * a + magnitude * b).expect("same shape")
        }
        DistortionFamily::ColorShift => {
            let s = img.shape();
            let plane = s[2] * s[3];
            let offsets: Vec<f64> = (0..s[1])
                .map(|_| if rng.gen_bool(0.5) { magnitude } else { -magnitude })
                .collect();
            let mut t = img.clone();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += offsets[(i / plane) % s[1]];
            }
            t
        }
        DistortionFamily::Warp => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            translate(img, magnitude * angle.cos(), magnitude * angle.sin())
        }
    };
    clamp_unit(&mut out);
    out
}

/// Triplets whose reference is a fresh class image, one candidate a small
/// distortion of it and the other a large one, in random order.
pub fn gen_2afc(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Vec<TwoAfcTriplet>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("zero triplets requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let c = &spec.classes[rng.gen_range(0..spec.num_classes())];
        let reference = render(spec, c, &mut rng);
        let d = &spec.distortions[rng.gen_range(0..spec.distortions.len())];
        let m_small = sample_range(d.small, &mut rng);
        let m_large = sample_range(d.large, &mut rng);
        let near = distort(&reference, d.family, m_small, &mut rng);
        let far = distort(&reference, d.family, m_large, &mut rng);
        let t = if rng.gen_bool(0.5) {
            TwoAfcTriplet {
                reference,
                first: near,
                second: far,
                label: AfcLabel::First,
            }
        } else {
            TwoAfcTriplet {
                reference,
                first: far,
                second: near,
                label: AfcLabel::Second,
            }
        };
        out.push(t);
    }
    Ok(out)
}

fn sample_range(r: [f64; 2], rng: &mut ChaCha8Rng) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}
