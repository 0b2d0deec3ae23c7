//! Feature and text inversion by l2-constrained APGD from a grey start, and
//! the cross-judge similarity matrix used to score reconstructions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustsim_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attacks::{apgd, AttackConfig, EncoderObjective, ThreatModel};
use crate::embedding::Embedding;
use crate::encoders::{embed_with, ImageEncoder};
use crate::error::{contract, Error, Result};
use crate::image::ImageBatch;
use crate::par::Execution;
use crate::percept::cosine_sim;

/// Radius 100 at 224x224x3 keeps a per-pixel RMS of about 0.258; these
/// scale a quantity quoted at that resolution to 32x32x3.
const REFERENCE_PIXELS: f64 = 224.0 * 224.0 * 3.0;
const TOY_PIXELS: f64 = 32.0 * 32.0 * 3.0;

fn resolution_scale() -> f64 {
    (TOY_PIXELS / REFERENCE_PIXELS).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub iterations: usize,
    pub initial_step: f64,
    pub radius: f64,
    /// Half-width of the uniform noise added to the grey start.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            initial_step: 200.0 * resolution_scale(),
            radius: 100.0 * resolution_scale(),
            init_noise: 8.0 / 255.0,
            seed: 0,
        }
    }
}

impl InversionConfig {
    /// Zero iterations is allowed and returns the start image.
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("inversion radius must be positive, got {}", self.radius)));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::Config(format!("initial step must be positive, got {}", self.initial_step)));
        }
        if !(0.0..=0.5).contains(&self.init_noise) {
            return Err(Error::Config(format!("init noise {} outside [0, 0.5]", self.init_noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub image: ImageBatch,
    pub init: ImageBatch,
    /// Cosine between the embedding of `image` and the target.
    pub similarity: f64,
    pub best_trace: Vec<f64>,
}

/// Grey plus uniform noise, shape `[1, C, H, W]`.
pub fn grey_init(shape: [usize; 3], noise: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = shape;
    let mut t = Tensor::full(&[1, c, h, w], 0.5);
    if noise > 0.0 {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-noise..=noise));
    }
    t
}

/// Maximizes `cos(phi(x), target)` over the l2 ball of `config.radius`
/// around the grey start, intersected with `[0, 1]`.
pub fn feature_invert<E: ImageEncoder>(
    target: &Embedding,
    encoder: &E,
    image_shape: [usize; 3],
    config: &InversionConfig,
) -> Result<Inversion> {
    config.validate()?;
    if target.dim() != encoder.embed_dim() {
        return contract(format!("target has dimension {}, encoder {}", target.dim(), encoder.embed_dim()));
    }
    let unit = target.normalize()?;
    let init = grey_init(image_shape, config.init_noise, config.seed);
    let col = Tensor::new(vec![unit.dim(), 1], unit.values().to_vec())?;
    let judge = |x: &Tensor| -> Result<f64> {
        let e = crate::encoders::embed_one(encoder, x)?;
        cosine_sim(&e, &unit)
    };
    if config.iterations == 0 {
        let similarity = judge(&init)?;
        let init = ImageBatch::new(init)?;
        return Ok(Inversion {
            image: init.clone(),
            init,
            similarity,
            best_trace: vec![similarity],
        });
    }
    let objective = EncoderObjective::new(encoder, |g: &Graph, emb: Var<'_>| {
        Ok(emb.normalize_last()?.matmul(g.constant(col.clone())?)?.sum()?)
    });
    let attack = AttackConfig {
        iterations: config.iterations,
        initial_step: Some(config.initial_step),
        early_stop: false,
        random_start: false,
        seed: config.seed,
        ..AttackConfig::default()
    };
    let init = ImageBatch::new(init)?;
    let result = apgd(&objective, &init, &ThreatModel::l2(config.radius), &attack)?;
    let similarity = judge(result.adversarial.tensor())?;
    Ok(Inversion {
        image: result.adversarial,
        init,
        similarity,
        best_trace: result.best_trace,
    })
}

/// Same optimizer with a prompt embedding as the target.
pub fn text_invert<E: ImageEncoder>(
    prompt: &Embedding,
    encoder: &E,
    image_shape: [usize; 3],
    config: &InversionConfig,
) -> Result<Inversion> {
    feature_invert(prompt, encoder, image_shape, config)
}

/// `M[g][j]`: mean over images of the cosine, under judge `j`, between
/// each original and its reconstruction by generator `g`.
pub fn cross_judge(
    originals: &ImageBatch,
    reconstructions: &[ImageBatch],
    judges: &[&dyn ImageEncoder],
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    if originals.is_empty() {
        return contract("cross-judge needs at least one original");
    }
    if let Some(r) = reconstructions.iter().find(|r| r.len() != originals.len()) {
        return contract(format!("{} originals but {} reconstructions", originals.len(), r.len()));
    }
    let judged_originals: Vec<Vec<Embedding>> =
        judges.iter().map(|j| embed_with(*j, originals, exec)).collect::<Result<_>>()?;
    reconstructions
        .iter()
        .map(|rec| {
            judges
                .iter()
                .zip(&judged_originals)
                .map(|(j, orig)| {
                    let rec = embed_with(*j, rec, exec)?;
                    let sum = orig
                        .iter()
                        .zip(&rec)
                        .map(|(a, b)| cosine_sim(a, b))
                        .sum::<Result<f64>>()?;
                    Ok(sum / orig.len() as f64)
                })
                .collect()
        })
        .collect()
}

/// 8-bit code of a `[0, 1]` value, rounding half to even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Writes an RGB image `[C=3, H, W]` (or a batch of one) as 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = match *image.shape() {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return contract(format!("cannot write image of shape {:?}", image.shape())),
    };
    if c != 3 {
        return contract(format!("PNG output needs 3 channels, got {c}"));
    }
    let d = image.data();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            bytes.push(quantize(d[ch * h * w + i]));
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Reads an 8-bit RGB PNG back into `[1, 3, H, W]` in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_decode_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_decode_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return contract(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = f64::from(buf[i * 3 + ch]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![1, 3, h, w], data)?)
}

fn png_err(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Format {
            offset: 0,
            reason: other.to_string(),
        },
    }
}

fn png_decode_err(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::Io(io),
        other => Error::Format {
            offset: 0,
            reason: other.to_string(),
        },
    }
}

/// One line of the JSON record written next to reconstructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    /// `feature` or `text`.
    pub kind: String,
    /// Source image index or prompt class.
    pub target: usize,
    pub seed: u64,
    pub similarity: f64,
    pub file: String,
}
