//! Latent-space dataset distillation.
//!
//! Synthetic samples are latent codes decoded into HR images by a small
//! convolutional generator. Codes are initialized by inversion (gradient
//! descent on reconstruction MSE against downscaled real content, with
//! optional pivotal tuning of the generator per code) and then optimized
//! by the same gradient-matching objective as the pixel route, except
//! that updates flow into the codes while the generator stays frozen.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_prep::{stack_nchw, DatasetMeta, PatchGroup};
use crate::error::{Result, SrError};
use crate::graph::{Graph, Var};
use crate::image_tensor::ImageTensor;
use crate::matching::{build_match_loss, grad_match_loss, MatchMode};
use crate::models::{AdamState, GradientVector, NamedParam, SrModel};
use crate::pixel_distill::{
    net_update_on_images, real_gradient, synthetic_pair, DistillHistory, ReferenceStrategy,
};
use crate::resize::DegradationConfig;

/// Spatial grid the decoder projects the latent vector onto.
pub const GENERATOR_BASE: usize = 4;
/// Channel width of the toy decoder and encoder.
pub const TOY_GENERATOR_WIDTH: usize = 32;
/// Shipped latent dimensionality.
pub const DEFAULT_LATENT_DIM: usize = 64;
/// Shipped decoder output size.
pub const DEFAULT_OUT_SIZE: usize = 64;
/// Peak Adam step size on the latent code during inversion.
pub const INVERSION_LR: f64 = 5e-2;
/// Peak Adam step size on generator parameters during pivotal tuning.
pub const TUNING_LR: f64 = 1e-3;

/// Cosine-annealed step size: starts at `peak`, decays to zero across
/// the budget so late steps settle instead of oscillating.
fn annealed_lr(peak: f64, step: usize, steps: usize) -> f64 {
    peak * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
}

/// Number of 2x upsampling stages between the base grid and `out_size`.
fn decoder_stages(out_size: usize) -> Result<usize> {
    if out_size < GENERATOR_BASE || out_size % GENERATOR_BASE != 0 {
        return Err(SrError::Config(format!(
            "generator out_size {out_size} must be a multiple of the {GENERATOR_BASE}x{GENERATOR_BASE} base grid"
        )));
    }
    let ratio = out_size / GENERATOR_BASE;
    if !ratio.is_power_of_two() {
        return Err(SrError::Config(format!(
            "generator out_size {out_size} must be a power-of-two multiple of {GENERATOR_BASE}"
        )));
    }
    Ok(ratio.trailing_zeros() as usize)
}

/// A convolutional decoder from latent vectors to HR images.
///
/// Layout: a 1x1 projection onto a `GENERATOR_BASE` grid, a chain of
/// conv + pixel-shuffle + relu doubling stages, and a final conv with a
/// sigmoid that pins the output to [0,1]. Decoding is deterministic in
/// (z, parameters).
#[derive(Debug, Clone)]
pub struct Generator {
    pub latent_dim: usize,
    pub out_size: usize,
    pub width: usize,
    pub params: Vec<NamedParam>,
}

fn generator_template(
    latent_dim: usize,
    out_size: usize,
    width: usize,
) -> Result<Vec<(String, Vec<usize>)>> {
    if latent_dim == 0 || width == 0 {
        return Err(SrError::Config(
            "latent_dim and generator width must be positive".into(),
        ));
    }
    let stages = decoder_stages(out_size)?;
    let base_ch = GENERATOR_BASE * GENERATOR_BASE * width;
    let mut t = vec![
        ("project.weight".to_string(), vec![base_ch, latent_dim, 1, 1]),
        ("project.bias".to_string(), vec![base_ch]),
    ];
    for s in 0..stages {
        t.push((format!("stage{s}.weight"), vec![4 * width, width, 3, 3]));
        t.push((format!("stage{s}.bias"), vec![4 * width]));
    }
    t.push(("output.weight".to_string(), vec![3, width, 3, 3]));
    t.push(("output.bias".to_string(), vec![3]));
    Ok(t)
}

fn seeded_params(template: &[(String, Vec<usize>)], seed: u64, tag: u64) -> Vec<NamedParam> {
    template
        .iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let value = if name.ends_with(".bias") {
                ArrayD::zeros(IxDyn(shape))
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = crate::rng::stream(seed, &[tag, i as u64]);
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
            };
            NamedParam { name: name.clone(), value }
        })
        .collect()
}

/// Builds the toy decoder with seeded He-uniform weights.
pub fn build_toy_generator(latent_dim: usize, out_size: usize, rng_seed: u64) -> Result<Generator> {
    let width = TOY_GENERATOR_WIDTH;
    let template = generator_template(latent_dim, out_size, width)?;
    Ok(Generator {
        latent_dim,
        out_size,
        width,
        params: seeded_params(&template, rng_seed, 0x6465_636f),
    })
}

impl Generator {
    pub fn param_total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn stages(&self) -> usize {
        decoder_stages(self.out_size).expect("validated at construction")
    }

    /// Builds the decode pass on `g` from a latent node of shape
    /// [N, latent_dim, 1, 1] and parameter nodes in template order;
    /// returns the [N, 3, out_size, out_size] image node.
    pub fn decode_graph(&self, g: &mut Graph, z: Var, params: &[Var]) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 4 || zs[1] != self.latent_dim || zs[2] != 1 || zs[3] != 1 {
            return Err(SrError::Shape(format!(
                "latent input must be Nx{}x1x1, got {zs:?}",
                self.latent_dim
            )));
        }
        if params.len() != self.params.len() {
            return Err(SrError::Shape(format!(
                "expected {} generator parameter nodes, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let c = g.conv2d(z, next());
        let c = g.bias_add(c, next());
        let mut x = g.pixel_shuffle(c, GENERATOR_BASE);
        for _ in 0..self.stages() {
            let c = g.conv2d_same(x, next());
            let c = g.bias_add(c, next());
            let s = g.pixel_shuffle(c, 2);
            x = g.relu(s);
        }
        let c = g.conv2d_same(x, next());
        let c = g.bias_add(c, next());
        Ok(g.sigmoid(c))
    }

    /// Decodes a single latent vector without tracking gradients.
    pub fn decode(&self, z: &[f64]) -> Result<ImageTensor> {
        if z.len() != self.latent_dim {
            return Err(SrError::Shape(format!(
                "latent vector has {} entries, expected {}",
                z.len(),
                self.latent_dim
            )));
        }
        let mut g = Graph::new();
        let zv = g.constant(z_array(z));
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let out = self.decode_graph(&mut g, zv, &params)?;
        ImageTensor::from_chw(&g.value(out).index_axis(Axis(0), 0).to_owned().into_dyn())
    }

    /// A copy of the generator with flat per-parameter offsets applied.
    pub fn with_deltas(&self, deltas: &[Vec<f64>]) -> Result<Generator> {
        if deltas.len() != self.params.len() {
            return Err(SrError::Shape(format!(
                "expected {} delta blocks, got {}",
                self.params.len(),
                deltas.len()
            )));
        }
        let mut out = self.clone();
        for (p, d) in out.params.iter_mut().zip(deltas.iter()) {
            if p.value.len() != d.len() {
                return Err(SrError::Shape(format!(
                    "delta for {} has {} entries, expected {}",
                    p.name,
                    d.len(),
                    p.value.len()
                )));
            }
            for (pv, &dv) in p.value.iter_mut().zip(d.iter()) {
                *pv += dv;
            }
        }
        Ok(out)
    }
}

/// A convolutional encoder used only to pre-train the decoder as an
/// autoencoder: pixel-unshuffle + conv halving stages down to the base
/// grid, then a 1x1 embedding onto the latent dimension.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub latent_dim: usize,
    pub out_size: usize,
    pub width: usize,
    pub params: Vec<NamedParam>,
}

fn encoder_template(
    latent_dim: usize,
    out_size: usize,
    width: usize,
) -> Result<Vec<(String, Vec<usize>)>> {
    if latent_dim == 0 || width == 0 {
        return Err(SrError::Config(
            "latent_dim and encoder width must be positive".into(),
        ));
    }
    let stages = decoder_stages(out_size)?;
    let mut t = Vec::new();
    for s in 0..stages {
        let in_c = if s == 0 { 3 * 4 } else { width * 4 };
        t.push((format!("enc{s}.weight"), vec![width, in_c, 3, 3]));
        t.push((format!("enc{s}.bias"), vec![width]));
    }
    let embed_in = if stages == 0 { 3 } else { width } * GENERATOR_BASE * GENERATOR_BASE;
    t.push(("embed.weight".to_string(), vec![latent_dim, embed_in, 1, 1]));
    t.push(("embed.bias".to_string(), vec![latent_dim]));
    Ok(t)
}

/// Builds the toy encoder with seeded He-uniform weights.
pub fn build_toy_encoder(
    latent_dim: usize,
    out_size: usize,
    width: usize,
    rng_seed: u64,
) -> Result<ToyEncoder> {
    let template = encoder_template(latent_dim, out_size, width)?;
    Ok(ToyEncoder {
        latent_dim,
        out_size,
        width,
        params: seeded_params(&template, rng_seed, 0x656e_636f),
    })
}

impl ToyEncoder {
    fn stages(&self) -> usize {
        decoder_stages(self.out_size).expect("validated at construction")
    }

    /// Builds the encode pass on `g` from an [N, 3, out_size, out_size]
    /// image node; returns the [N, latent_dim, 1, 1] latent node.
    pub fn encode_graph(&self, g: &mut Graph, x: Var, params: &[Var]) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != self.out_size || xs[3] != self.out_size {
            return Err(SrError::Shape(format!(
                "encoder input must be Nx3x{0}x{0}, got {xs:?}",
                self.out_size
            )));
        }
        if params.len() != self.params.len() {
            return Err(SrError::Shape(format!(
                "expected {} encoder parameter nodes, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let mut h = x;
        for _ in 0..self.stages() {
            let u = g.pixel_unshuffle(h, 2);
            let c = g.conv2d_same(u, next());
            let c = g.bias_add(c, next());
            h = g.relu(c);
        }
        let u = g.pixel_unshuffle(h, GENERATOR_BASE);
        let c = g.conv2d(u, next());
        Ok(g.bias_add(c, next()))
    }

    fn check_matches(&self, generator: &Generator) -> Result<()> {
        if self.latent_dim != generator.latent_dim
            || self.out_size != generator.out_size
            || self.width != generator.width
        {
            return Err(SrError::Config(
                "encoder and generator dimensions do not match".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder-decoder round trip on one image.
pub fn reconstruct(
    generator: &Generator,
    encoder: &ToyEncoder,
    image: &ImageTensor,
) -> Result<ImageTensor> {
    encoder.check_matches(generator)?;
    let mut g = Graph::new();
    let x = g.constant(stack_nchw(std::iter::once(image)));
    let enc_params: Vec<Var> =
        encoder.params.iter().map(|p| g.constant(p.value.clone())).collect();
    let z = encoder.encode_graph(&mut g, x, &enc_params)?;
    let dec_params: Vec<Var> =
        generator.params.iter().map(|p| g.constant(p.value.clone())).collect();
    let out = generator.decode_graph(&mut g, z, &dec_params)?;
    ImageTensor::from_chw(&g.value(out).index_axis(Axis(0), 0).to_owned().into_dyn())
}

/// Hyperparameters for autoencoder pre-training of the decoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: 4, learning_rate: 1e-3, rng_seed: 0 }
    }
}

/// Trains (encoder, generator) jointly to reconstruct corpus sub-images
/// resized to the generator's output size; the generator is updated in
/// place and the trained encoder is returned with the loss history.
pub fn pretrain_generator(
    generator: &mut Generator,
    groups: &[PatchGroup],
    config: &PretrainConfig,
) -> Result<(ToyEncoder, Vec<f64>)> {
    if config.batch_size == 0 {
        return Err(SrError::Config("batch_size must be positive".into()));
    }
    if config.learning_rate <= 0.0 || !config.learning_rate.is_finite() {
        return Err(SrError::Config("learning_rate must be positive".into()));
    }
    let pool: Vec<&ImageTensor> = groups.iter().flat_map(|g| g.sub_images.iter()).collect();
    if pool.is_empty() {
        return Err(SrError::Data("cannot pre-train on an empty corpus".into()));
    }
    let mut encoder = build_toy_encoder(
        generator.latent_dim,
        generator.out_size,
        generator.width,
        config.rng_seed,
    )?;
    let enc_n = encoder.params.len();
    let mut joint: Vec<NamedParam> =
        encoder.params.iter().chain(generator.params.iter()).cloned().collect();
    let mut adam = AdamState::new(&joint);
    let mut history = Vec::with_capacity(config.steps);
    let size = generator.out_size;

    for step in 0..config.steps {
        let mut rng = crate::rng::stream(config.rng_seed, &[0x6165_7072, step as u64]);
        let batch: Vec<ImageTensor> = (0..config.batch_size)
            .map(|_| {
                let pick = rng.random_range(0..pool.len());
                crate::resize::resize_to(pool[pick], size, size)
            })
            .collect::<Result<_>>()?;

        let mut g = Graph::new();
        let x = g.constant(stack_nchw(batch.iter()));
        let leaves: Vec<Var> = joint.iter().map(|p| g.leaf(p.value.clone())).collect();
        let z = encoder.encode_graph(&mut g, x, &leaves[..enc_n])?;
        let recon = generator.decode_graph(&mut g, z, &leaves[enc_n..])?;
        let loss = g.mse(recon, x);
        let loss_value = g.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(SrError::Train {
                step,
                reason: format!("non-finite autoencoder loss {loss_value}"),
            });
        }
        history.push(loss_value);

        let grads = g.grad(loss, &leaves);
        let grad_values: Vec<ArrayD<f64>> = grads.iter().map(|&v| g.value(v).clone()).collect();
        adam.step(&mut joint, &grad_values, config.learning_rate);
    }

    for (dst, src) in encoder.params.iter_mut().zip(joint[..enc_n].iter()) {
        dst.value = src.value.clone();
    }
    for (dst, src) in generator.params.iter_mut().zip(joint[enc_n..].iter()) {
        dst.value = src.value.clone();
    }
    Ok((encoder, history))
}

fn z_array(z: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[1, z.len(), 1, 1]), z.to_vec())
        .expect("shape matches length")
}

/// Seeded standard-normal latent vector; the starting point of every
/// inversion.
pub fn seed_latent(latent_dim: usize, rng_seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::stream(rng_seed, &[0x7a69_6e69]);
    (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// One synthetic sample in latent form: the code plus optional
/// per-parameter generator offsets from pivotal tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub deltas: Option<Vec<Vec<f64>>>,
}

/// Result of inverting one target image.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub code: LatentCode,
    pub psnr: f64,
}

/// Decodes a code, applying its tuning offsets when present.
pub fn decode_code(generator: &Generator, code: &LatentCode) -> Result<ImageTensor> {
    match &code.deltas {
        None => generator.decode(&code.z),
        Some(d) => generator.with_deltas(d)?.decode(&code.z),
    }
}

/// Fits a latent code to `target` by Adam on the reconstruction MSE,
/// starting from a seeded random code. With `tune_generator`, a second
/// phase of the same length fine-tunes the generator parameters with the
/// code pinned, and the parameter offsets are returned alongside it.
pub fn invert(
    generator: &Generator,
    target: &ImageTensor,
    steps: usize,
    tune_generator: bool,
    rng_seed: u64,
) -> Result<Inversion> {
    let size = generator.out_size;
    if target.height() != size || target.width() != size || target.channels() != 3 {
        return Err(SrError::Shape(format!(
            "inversion target must be {size}x{size}x3, got {}x{}x{}",
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    let target_nchw = stack_nchw(std::iter::once(target));

    let mut z = NamedParam {
        name: "z".to_string(),
        value: z_array(&seed_latent(generator.latent_dim, rng_seed)),
    };
    let mut adam = AdamState::new(std::slice::from_ref(&z));
    for step in 0..steps {
        let mut g = Graph::new();
        let zv = g.leaf(z.value.clone());
        let params: Vec<Var> =
            generator.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let out = generator.decode_graph(&mut g, zv, &params)?;
        let tgt = g.constant(target_nchw.clone());
        let loss = g.mse(out, tgt);
        let loss_value = g.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(SrError::Inversion(format!(
                "non-finite reconstruction loss at step {step}"
            )));
        }
        let grad = g.grad(loss, &[zv])[0];
        let grad_value = g.value(grad).clone();
        adam.step(
            std::slice::from_mut(&mut z),
            &[grad_value],
            annealed_lr(INVERSION_LR, step, steps),
        );
    }

    let deltas = if tune_generator {
        let mut tuned = generator.clone();
        let mut adam_g = AdamState::new(&tuned.params);
        for step in 0..steps {
            let mut g = Graph::new();
            let zv = g.constant(z.value.clone());
            let leaves: Vec<Var> =
                tuned.params.iter().map(|p| g.leaf(p.value.clone())).collect();
            let out = tuned.decode_graph(&mut g, zv, &leaves)?;
            let tgt = g.constant(target_nchw.clone());
            let loss = g.mse(out, tgt);
            if !g.scalar_value(loss).is_finite() {
                return Err(SrError::Inversion(format!(
                    "non-finite tuning loss at step {step}"
                )));
            }
            let grads = g.grad(loss, &leaves);
            let grad_values: Vec<ArrayD<f64>> =
                grads.iter().map(|&v| g.value(v).clone()).collect();
            adam_g.step(&mut tuned.params, &grad_values, annealed_lr(TUNING_LR, step, steps));
        }
        Some(
            tuned
                .params
                .iter()
                .zip(generator.params.iter())
                .map(|(t, o)| {
                    t.value.iter().zip(o.value.iter()).map(|(a, b)| a - b).collect()
                })
                .collect(),
        )
    } else {
        None
    };

    let code = LatentCode { z: z.value.iter().copied().collect(), deltas };
    let recon = decode_code(generator, &code)?;
    let psnr = crate::metrics::psnr(&recon, target, 1.0)?;
    Ok(Inversion { code, psnr })
}

/// The trainable latent dataset: IPC codes per pseudo-label plus the
/// shared frozen generator.
#[derive(Debug, Clone)]
pub struct LatentSet {
    pub codes: BTreeMap<usize, Vec<LatentCode>>,
    pub generator: Generator,
    pub ipc: usize,
}

impl LatentSet {
    pub fn num_labels(&self) -> usize {
        self.codes.len()
    }

    pub fn total_codes(&self) -> usize {
        self.codes.values().map(|v| v.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (&label, codes) in &self.codes {
            if codes.len() != self.ipc {
                return Err(SrError::Data(format!(
                    "label {label} holds {} codes, expected {}",
                    codes.len(),
                    self.ipc
                )));
            }
            for code in codes {
                if code.z.len() != self.generator.latent_dim {
                    return Err(SrError::Data(format!(
                        "label {label}: code dimension {} does not match generator latent_dim {}",
                        code.z.len(),
                        self.generator.latent_dim
                    )));
                }
                if let Some(d) = &code.deltas {
                    if d.len() != self.generator.params.len()
                        || d.iter()
                            .zip(self.generator.params.iter())
                            .any(|(dv, p)| dv.len() != p.value.len())
                    {
                        return Err(SrError::Data(format!(
                            "label {label}: tuning offsets do not match the generator parameters"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Decodes every code in label order.
pub fn decode_set(set: &LatentSet) -> Result<BTreeMap<usize, Vec<ImageTensor>>> {
    set.codes
        .iter()
        .map(|(&label, codes)| {
            codes
                .iter()
                .map(|c| decode_code(&set.generator, c))
                .collect::<Result<Vec<_>>>()
                .map(|v| (label, v))
        })
        .collect()
}

/// The target a given (label, slot) inverts against: the group's real
/// content resized to the generator's output size, with extra slots
/// drawing distinct seeded windows.
fn inversion_target(
    group: &PatchGroup,
    slot: usize,
    out_size: usize,
    rng_seed: u64,
) -> Result<ImageTensor> {
    let mut rng = crate::rng::stream(
        rng_seed,
        &[0x7461_7267, group.pseudo_label as u64, slot as u64],
    );
    let source = &group.sub_images[slot % group.sub_images.len()];
    let (h, w) = (source.height(), source.width());
    let crop = if slot == 0 {
        source.clone()
    } else {
        let ch = (3 * h / 4).max(1);
        let cw = (3 * w / 4).max(1);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        source.crop(top, left, ch, cw)?
    };
    crate::resize::resize_to(&crop, out_size, out_size)
}

/// One inversion per (pseudo-label, IPC slot) against downscaled real
/// content; inversion failures are reported with their label.
pub fn init_latent(
    groups: &[PatchGroup],
    generator: &Generator,
    ipc: usize,
    inversion_steps: usize,
    tune_generator: bool,
    rng_seed: u64,
) -> Result<LatentSet> {
    if ipc == 0 {
        return Err(SrError::Config("ipc must be positive".into()));
    }
    if groups.is_empty() {
        return Err(SrError::Data("cannot distill an empty dataset".into()));
    }
    let mut codes = BTreeMap::new();
    for group in groups {
        let label = group.pseudo_label;
        if group.sub_images.is_empty() {
            return Err(SrError::Data(format!("group {label} has no sub-images")));
        }
        let mut per_label = Vec::with_capacity(ipc);
        for k in 0..ipc {
            let target = inversion_target(group, k, generator.out_size, rng_seed)?;
            let seed = crate::rng::derive_seed(rng_seed, &[0x696e_7665, label as u64, k as u64]);
            let inv = invert(generator, &target, inversion_steps, tune_generator, seed)
                .map_err(|e| match e {
                    SrError::Inversion(msg) => {
                        SrError::Inversion(format!("label {label} slot {k}: {msg}"))
                    }
                    other => other,
                })?;
            per_label.push(inv.code);
        }
        codes.insert(label, per_label);
    }
    Ok(LatentSet { codes, generator: generator.clone(), ipc })
}

/// Hyperparameters for a latent-space distillation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub iterations: usize,
    /// Adam step size on the latent codes.
    pub synth_lr: f64,
    pub batch_real: usize,
    pub net_update_steps: usize,
    pub net_update_lr: f64,
    /// Iterations per reference cycle; under random_init the model is
    /// re-seeded at the start of each cycle.
    pub reset_interval: usize,
    pub reference: ReferenceStrategy,
    pub pretrained_checkpoint: Option<PathBuf>,
    pub ipc: usize,
    pub inversion_steps: usize,
    pub tune_generator: bool,
    pub match_mode: MatchMode,
    /// Snapshot period for the history; 0 disables snapshots.
    pub snapshot_every: usize,
    pub rng_seed: u64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            synth_lr: 1e-2,
            batch_real: 8,
            net_update_steps: 0,
            net_update_lr: 1e-4,
            reset_interval: 1,
            reference: ReferenceStrategy::RandomInit,
            pretrained_checkpoint: None,
            ipc: 1,
            inversion_steps: 300,
            tune_generator: true,
            match_mode: MatchMode::Layerwise,
            snapshot_every: 0,
            rng_seed: 0,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(SrError::Config("iterations must be >= 1".into()));
        }
        if self.synth_lr < 0.0 || !self.synth_lr.is_finite() {
            return Err(SrError::Config("synth_lr must be non-negative".into()));
        }
        if self.net_update_lr <= 0.0 {
            return Err(SrError::Config("net_update_lr must be positive".into()));
        }
        if self.batch_real == 0 || self.ipc == 0 {
            return Err(SrError::Config("batch_real and ipc must be positive".into()));
        }
        if self.reset_interval == 0 {
            return Err(SrError::Config("reset_interval must be >= 1".into()));
        }
        if self.reference == ReferenceStrategy::Pretrained
            && self.pretrained_checkpoint.is_none()
        {
            return Err(SrError::Config(
                "pretrained reference requires a checkpoint path".into(),
            ));
        }
        Ok(())
    }
}

fn check_scale_compat(generator: &Generator, scale: usize) -> Result<()> {
    if scale == 0 || generator.out_size % scale != 0 {
        return Err(SrError::Config(format!(
            "generator out_size {} is not divisible by scale {scale}",
            generator.out_size
        )));
    }
    Ok(())
}

/// Per-label Adam state over the latent codes.
#[derive(Default)]
pub struct LatentState {
    adam: BTreeMap<usize, AdamState>,
}

/// One matching step over every pseudo-label in order: decode each code,
/// degrade it into the LR operand, match the SR-loss gradient against a
/// real batch, and step the codes; the generator stays frozen.
///
/// Returns the summed matching loss, reported through the plain-value
/// cosine route like the pixel path.
pub fn latent_distill_step(
    set: &mut LatentSet,
    groups: &[PatchGroup],
    model: &SrModel,
    config: &LatentConfig,
    state: &mut LatentState,
    iteration: usize,
) -> Result<f64> {
    check_scale_compat(&set.generator, model.scale)?;
    set.validate()?;
    let scale = model.scale;
    let degradation = DegradationConfig::bicubic(scale);
    let patch = set.generator.out_size;
    let mut total_loss = 0.0;

    for group in groups {
        let label = group.pseudo_label;
        let codes = set
            .codes
            .get(&label)
            .ok_or_else(|| SrError::Data(format!("no latent codes for label {label}")))?
            .clone();

        let real_seed = crate::rng::derive_seed(
            config.rng_seed,
            &[0x7265_616c, iteration as u64, label as u64],
        );
        let g_real =
            real_gradient(model, group, patch, config.batch_real, &degradation, real_seed)?;

        let mut g = Graph::new();
        let params = model.param_leaves(&mut g);
        let mut z_leaves = Vec::with_capacity(codes.len());
        let mut loss_syn: Option<Var> = None;
        for code in &codes {
            let zv = g.leaf(z_array(&code.z));
            z_leaves.push(zv);
            let gen_vars: Vec<Var> = match &code.deltas {
                None => set
                    .generator
                    .params
                    .iter()
                    .map(|p| g.constant(p.value.clone()))
                    .collect(),
                Some(d) => set
                    .generator
                    .params
                    .iter()
                    .zip(d.iter())
                    .map(|(p, dv)| {
                        let mut v = p.value.clone();
                        for (pv, &x) in v.iter_mut().zip(dv.iter()) {
                            *pv += x;
                        }
                        g.constant(v)
                    })
                    .collect(),
            };
            let decoded = set.generator.decode_graph(&mut g, zv, &gen_vars)?;
            let (x_s, y_s) = synthetic_pair(&mut g, decoded, scale)?;
            let pred = model.forward_graph(&mut g, x_s, &params)?;
            let l = g.mse(pred, y_s);
            loss_syn = Some(match loss_syn {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let mut loss_syn = loss_syn.expect("ipc >= 1 validated");
        if codes.len() > 1 {
            loss_syn = g.scale(loss_syn, 1.0 / codes.len() as f64);
        }
        let syn_grads = g.grad(loss_syn, &params);

        let real_consts: Vec<Var> = g_real
            .layers
            .iter()
            .zip(model.params.iter())
            .map(|(l, p)| {
                g.constant(
                    ArrayD::from_shape_vec(p.value.raw_dim(), l.clone())
                        .expect("flat gradient length matches parameter"),
                )
            })
            .collect();
        let match_node = build_match_loss(&mut g, &syn_grads, &real_consts, config.match_mode);

        let g_syn = GradientVector {
            layer_names: g_real.layer_names.clone(),
            layers: syn_grads
                .iter()
                .map(|&v| g.value(v).iter().copied().collect())
                .collect(),
        };
        let label_loss = grad_match_loss(&g_syn, &g_real, config.match_mode)?;
        if !label_loss.is_finite() {
            return Err(SrError::Distill {
                iteration,
                reason: format!("non-finite matching loss for label {label}"),
            });
        }
        total_loss += label_loss;

        if config.synth_lr > 0.0 {
            let z_grads = g.grad(match_node, &z_leaves);
            let grad_values: Vec<ArrayD<f64>> =
                z_grads.iter().map(|&v| g.value(v).clone()).collect();
            let mut z_params: Vec<NamedParam> = codes
                .iter()
                .enumerate()
                .map(|(k, c)| NamedParam { name: format!("z{k}"), value: z_array(&c.z) })
                .collect();
            let adam = state
                .adam
                .entry(label)
                .or_insert_with(|| AdamState::new(&z_params));
            adam.step(&mut z_params, &grad_values, config.synth_lr);
            let updated: Vec<LatentCode> = codes
                .iter()
                .zip(z_params.iter())
                .map(|(c, p)| LatentCode {
                    z: p.value.iter().copied().collect(),
                    deltas: c.deltas.clone(),
                })
                .collect();
            set.codes.insert(label, updated);
        }
    }
    Ok(total_loss)
}

fn decoded_snapshot(set: &LatentSet) -> Result<BTreeMap<usize, Vec<ImageTensor>>> {
    decode_set(set)
}

/// Full latent distillation: inversion-based initialization, then
/// alternating matching steps and optional reference updates, with the
/// reference re-drawn every `reset_interval` cycles.
pub fn latent_distill(
    groups: &[PatchGroup],
    scale: usize,
    config: &LatentConfig,
    generator: &Generator,
    factory: &dyn Fn(u64) -> Result<SrModel>,
) -> Result<(LatentSet, DistillHistory)> {
    config.validate()?;
    check_scale_compat(generator, scale)?;
    let pretrained = match config.reference {
        ReferenceStrategy::Pretrained => {
            let path = config.pretrained_checkpoint.as_ref().expect("validated");
            let model = crate::models::load_checkpoint(path)?;
            if model.scale != scale {
                return Err(SrError::Config(format!(
                    "checkpoint scale {} does not match requested scale {scale}",
                    model.scale
                )));
            }
            Some(model)
        }
        ReferenceStrategy::RandomInit => None,
    };

    let mut set = init_latent(
        groups,
        generator,
        config.ipc,
        config.inversion_steps,
        config.tune_generator,
        config.rng_seed,
    )?;
    let mut state = LatentState::default();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();
    if config.snapshot_every > 0 {
        snapshots.push((0, decoded_snapshot(&set)?));
    }

    let mut model: Option<SrModel> = None;
    for iteration in 0..config.iterations {
        if iteration % config.reset_interval == 0 {
            let cycle = iteration / config.reset_interval;
            model = Some(match config.reference {
                ReferenceStrategy::RandomInit => factory(crate::rng::derive_seed(
                    config.rng_seed,
                    &[0x6d6f_64656c, cycle as u64],
                ))?,
                ReferenceStrategy::Pretrained => pretrained
                    .clone()
                    .expect("validated: pretrained model loaded before the loop"),
            });
        }
        let current = model.as_mut().expect("set at cycle start");
        let loss = latent_distill_step(&mut set, groups, current, config, &mut state, iteration)?;
        losses.push(loss);
        if config.net_update_steps > 0 {
            let decoded = decode_set(&set)?;
            let all: Vec<&ImageTensor> = decoded.values().flatten().collect();
            net_update_on_images(
                current,
                &all,
                scale,
                config.net_update_steps,
                config.net_update_lr,
                config.rng_seed,
                iteration,
            )?;
        }
        if config.snapshot_every > 0 && (iteration + 1) % config.snapshot_every == 0 {
            snapshots.push((iteration + 1, decoded_snapshot(&set)?));
        }
    }
    Ok((set, DistillHistory { losses, snapshots }))
}

const LATENT_CODES_MAGIC: &[u8; 8] = b"SRLATC01";

/// File name of the code archive inside an exported latent artifact.
pub const CODES_FILE_NAME: &str = "codes.bin";

#[derive(Serialize, Deserialize)]
struct CodesHeader {
    latent_dim: usize,
    ipc: usize,
    has_deltas: bool,
    /// Flattened generator parameter count per tuned code; 0 when the
    /// codes carry no tuning offsets.
    delta_len: usize,
    labels: Vec<CodesLabel>,
}

#[derive(Serialize, Deserialize)]
struct CodesLabel {
    label: usize,
    slots: usize,
}

/// Writes the raw codes (and tuning offsets, when present) as a flat
/// little-endian f64 array behind a JSON header.
pub fn write_latent_codes(set: &LatentSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut any_some = false;
    let mut any_none = false;
    for code in set.codes.values().flatten() {
        match code.deltas {
            Some(_) => any_some = true,
            None => any_none = true,
        }
    }
    if any_some && any_none {
        return Err(SrError::Data(
            "cannot archive a mix of tuned and untuned codes".into(),
        ));
    }
    let header = CodesHeader {
        latent_dim: set.generator.latent_dim,
        ipc: set.ipc,
        has_deltas: any_some,
        delta_len: if any_some { set.generator.param_total_len() } else { 0 },
        labels: set
            .codes
            .iter()
            .map(|(&label, codes)| CodesLabel { label, slots: codes.len() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(LATENT_CODES_MAGIC)?;
    f.write_u64::<LittleEndian>(header_json.len() as u64)?;
    f.write_all(&header_json)?;
    for codes in set.codes.values() {
        for code in codes {
            for &v in &code.z {
                f.write_f64::<LittleEndian>(v)?;
            }
            if let Some(d) = &code.deltas {
                for block in d {
                    for &v in block {
                        f.write_f64::<LittleEndian>(v)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Reads a code archive written by [`write_latent_codes`]; the generator
/// supplies the expected dimensions.
pub fn load_latent_codes(
    path: &Path,
    generator: &Generator,
) -> Result<BTreeMap<usize, Vec<LatentCode>>> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != LATENT_CODES_MAGIC {
        return Err(SrError::Data(format!(
            "{} is not a latent code archive",
            path.display()
        )));
    }
    let header_len = f.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CodesHeader = serde_json::from_slice(&header_bytes)?;
    if header.latent_dim != generator.latent_dim {
        return Err(SrError::Data(format!(
            "archive latent_dim {} does not match generator latent_dim {}",
            header.latent_dim, generator.latent_dim
        )));
    }
    if header.has_deltas && header.delta_len != generator.param_total_len() {
        return Err(SrError::Data(format!(
            "archive delta length {} does not match the generator's {} parameters",
            header.delta_len,
            generator.param_total_len()
        )));
    }
    let mut codes = BTreeMap::new();
    for entry in &header.labels {
        let mut per_label = Vec::with_capacity(entry.slots);
        for _ in 0..entry.slots {
            let mut z = vec![0f64; header.latent_dim];
            f.read_f64_into::<LittleEndian>(&mut z).map_err(|_| {
                SrError::Data(format!("{}: truncated code payload", path.display()))
            })?;
            let deltas = if header.has_deltas {
                let mut blocks = Vec::with_capacity(generator.params.len());
                for p in &generator.params {
                    let mut block = vec![0f64; p.value.len()];
                    f.read_f64_into::<LittleEndian>(&mut block).map_err(|_| {
                        SrError::Data(format!("{}: truncated delta payload", path.display()))
                    })?;
                    blocks.push(block);
                }
                Some(blocks)
            } else {
                None
            };
            per_label.push(LatentCode { z, deltas });
        }
        codes.insert(entry.label, per_label);
    }
    let mut trailer = [0u8; 1];
    if f.read(&mut trailer)? != 0 {
        return Err(SrError::Data(format!(
            "{}: trailing bytes after code payload",
            path.display()
        )));
    }
    Ok(codes)
}

/// Decodes every code and writes a standard dataset artifact plus the
/// raw code archive.
pub fn export_latent(
    set: &LatentSet,
    corpus_name: &str,
    scale: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    check_scale_compat(&set.generator, scale)?;
    let decoded = decode_set(set)?;
    let groups: Vec<PatchGroup> = decoded
        .iter()
        .map(|(&label, images)| PatchGroup {
            source_id: format!("latent_{label:05}"),
            pseudo_label: label,
            sub_images: images.clone(),
            origin_offsets: vec![(0, 0); images.len()],
        })
        .collect();
    let meta = DatasetMeta {
        corpus_name: corpus_name.to_string(),
        scale,
        sub_image_size: set.generator.out_size,
        stride: set.generator.out_size,
    };
    let manifest_path = crate::data_prep::save_dataset(&groups, &meta, out_dir)?;
    write_latent_codes(set, &out_dir.join(CODES_FILE_NAME))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_prep::assign_pseudo_labels;
    use crate::metrics::psnr;
    use crate::models::{build_model, ArchConfig, Architecture};
    use tempfile::tempdir;

    fn toy_groups(n: usize, size: usize) -> Vec<PatchGroup> {
        let corpus: Vec<(String, ImageTensor)> = (0..n)
            .map(|i| {
                let img = ImageTensor::from_fn(size, size, 3, |y, x, c| {
                    (0.5 + 0.4
                        * ((y as f64 * 0.6 + x as f64 * 1.3 + (c + i) as f64 * 0.8).sin()))
                    .clamp(0.0, 1.0)
                });
                (format!("img{i}.png"), img)
            })
            .collect();
        assign_pseudo_labels(&corpus, size, size).unwrap()
    }

    fn small_gen() -> Generator {
        build_toy_generator(12, 16, 11).unwrap()
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            srcnn_widths: [6, 4],
            srcnn_kernels: [5, 3, 3],
            ..Default::default()
        }
    }

    fn quick_latent_config(iterations: usize) -> LatentConfig {
        LatentConfig {
            iterations,
            batch_real: 2,
            inversion_steps: 30,
            tune_generator: false,
            rng_seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn toy_generator_is_seed_deterministic() {
        let a = build_toy_generator(12, 16, 5).unwrap();
        let b = build_toy_generator(12, 16, 5).unwrap();
        let c = build_toy_generator(12, 16, 6).unwrap();
        let z = seed_latent(12, 1);
        let da = a.decode(&z).unwrap();
        let db = b.decode(&z).unwrap();
        let dc = c.decode(&z).unwrap();
        assert_eq!(da.data(), db.data());
        assert!(da.mean_abs_diff(&dc).unwrap() > 1e-6);
    }

    #[test]
    fn decode_shape_range_and_preset_reduction() {
        let gen = build_toy_generator(DEFAULT_LATENT_DIM, DEFAULT_OUT_SIZE, 2).unwrap();
        let z = seed_latent(DEFAULT_LATENT_DIM, 4);
        let img = gen.decode(&z).unwrap();
        assert_eq!(
            (img.height(), img.width(), img.channels()),
            (DEFAULT_OUT_SIZE, DEFAULT_OUT_SIZE, 3)
        );
        for v in img.data().iter() {
            assert!((0.0..=1.0).contains(v));
        }
        assert!(
            DEFAULT_LATENT_DIM < DEFAULT_OUT_SIZE * DEFAULT_OUT_SIZE * 3,
            "a code must be strictly smaller than the pixels it replaces"
        );
    }

    #[test]
    fn incompatible_out_size_rejected() {
        assert!(matches!(
            build_toy_generator(16, 24, 0),
            Err(SrError::Config(_))
        ));
        assert!(matches!(
            build_toy_generator(16, 0, 0),
            Err(SrError::Config(_))
        ));
        assert!(matches!(
            build_toy_generator(0, 16, 0),
            Err(SrError::Config(_))
        ));
    }

    #[test]
    fn pretraining_improves_reconstruction() {
        let groups = toy_groups(3, 24);
        let mut gen = build_toy_generator(12, 16, 2).unwrap();
        let config = PretrainConfig {
            steps: 120,
            batch_size: 2,
            learning_rate: 2e-3,
            rng_seed: 7,
        };
        let enc0 = build_toy_encoder(12, 16, gen.width, config.rng_seed).unwrap();
        let targets: Vec<ImageTensor> = groups
            .iter()
            .map(|g| crate::resize::resize_to(&g.sub_images[0], 16, 16).unwrap())
            .collect();
        let mean_psnr = |gen: &Generator, enc: &ToyEncoder| -> f64 {
            targets
                .iter()
                .map(|t| psnr(&reconstruct(gen, enc, t).unwrap(), t, 1.0).unwrap())
                .sum::<f64>()
                / targets.len() as f64
        };
        let before = mean_psnr(&gen, &enc0);
        let (enc, history) = pretrain_generator(&mut gen, &groups, &config).unwrap();
        let after = mean_psnr(&gen, &enc);
        assert!(
            after > before,
            "pre-training must improve reconstruction: {before:.2} dB -> {after:.2} dB"
        );
        assert!(history.last().unwrap() < history.first().unwrap());
    }

    #[test]
    fn invert_realizable_target_reaches_threshold() {
        let gen = small_gen();
        let z0 = seed_latent(gen.latent_dim, 41);
        let target = gen.decode(&z0).unwrap();
        let inv = invert(&gen, &target, 300, false, 9).unwrap();
        assert!(
            inv.psnr >= 35.0,
            "realizable target should invert cleanly, got {:.2} dB",
            inv.psnr
        );
    }

    #[test]
    fn invert_zero_steps_returns_seeded_start() {
        let gen = small_gen();
        let target = ImageTensor::constant(16, 16, 3, 0.4);
        let inv = invert(&gen, &target, 0, false, 77).unwrap();
        assert_eq!(inv.code.z, seed_latent(gen.latent_dim, 77));
        assert!(inv.code.deltas.is_none());
        assert!(inv.psnr.is_finite());
    }

    #[test]
    fn inversion_beats_random_latents() {
        let gen = small_gen();
        let groups = toy_groups(1, 24);
        let target = inversion_target(&groups[0], 0, 16, 3).unwrap();
        let inv = invert(&gen, &target, 150, false, 5).unwrap();
        let best_random = (0..16)
            .map(|k| {
                let z = seed_latent(gen.latent_dim, crate::rng::derive_seed(100, &[k]));
                psnr(&gen.decode(&z).unwrap(), &target, 1.0).unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            inv.psnr >= best_random,
            "inversion {:.2} dB under best-of-16 random {best_random:.2} dB",
            inv.psnr
        );
    }

    #[test]
    fn pivotal_tuning_does_not_hurt() {
        let gen = small_gen();
        let groups = toy_groups(1, 24);
        let target = inversion_target(&groups[0], 0, 16, 3).unwrap();
        let plain = invert(&gen, &target, 80, false, 5).unwrap();
        let tuned = invert(&gen, &target, 80, true, 5).unwrap();
        let deltas = tuned.code.deltas.as_ref().expect("tuning stores offsets");
        assert_eq!(deltas.len(), gen.params.len());
        let moved: f64 = deltas.iter().flatten().map(|d| d.abs()).sum();
        assert!(moved > 0.0, "tuning must move the generator copy");
        assert!(
            tuned.psnr >= plain.psnr,
            "tuned {:.2} dB under plain {:.2} dB",
            tuned.psnr,
            plain.psnr
        );
    }

    #[test]
    fn init_latent_counts_and_determinism() {
        let gen = small_gen();
        let groups = toy_groups(3, 24);
        let a = init_latent(&groups, &gen, 1, 20, false, 11).unwrap();
        let b = init_latent(&groups, &gen, 1, 20, false, 11).unwrap();
        assert_eq!(a.num_labels(), 3);
        assert_eq!(a.total_codes(), 3);
        for (label, codes) in &a.codes {
            assert_eq!(codes, &b.codes[label]);
        }
    }

    #[test]
    fn init_codes_dominate_random_codes() {
        let gen = small_gen();
        let groups = toy_groups(2, 24);
        let set = init_latent(&groups, &gen, 1, 120, false, 11).unwrap();
        let mut init_mean = 0.0;
        let mut random_mean = 0.0;
        for group in &groups {
            let target = inversion_target(group, 0, 16, 11).unwrap();
            let init_img = decode_code(&gen, &set.codes[&group.pseudo_label][0]).unwrap();
            init_mean += psnr(&init_img, &target, 1.0).unwrap();
            let z = seed_latent(
                gen.latent_dim,
                crate::rng::derive_seed(200, &[group.pseudo_label as u64]),
            );
            random_mean += psnr(&gen.decode(&z).unwrap(), &target, 1.0).unwrap();
        }
        assert!(
            init_mean >= random_mean,
            "inverted codes {init_mean:.2} dB under random {random_mean:.2} dB"
        );
    }

    #[test]
    fn zero_lr_step_keeps_codes_and_generator_frozen() {
        let gen = small_gen();
        let groups = toy_groups(2, 24);
        let mut config = quick_latent_config(1);
        config.synth_lr = 0.0;
        config.inversion_steps = 10;
        let mut set =
            init_latent(&groups, &gen, 1, config.inversion_steps, false, 3).unwrap();
        let codes_before = set.codes.clone();
        let gen_before: Vec<ArrayD<f64>> = set.generator.param_values_for_test();
        let model = build_model(Architecture::Srcnn, 2, &small_arch(), 5).unwrap();
        let mut state = LatentState::default();
        let loss =
            latent_distill_step(&mut set, &groups, &model, &config, &mut state, 0).unwrap();
        assert!(loss.is_finite());
        assert_eq!(codes_before, set.codes);
        for (a, b) in gen_before.iter().zip(set.generator.param_values_for_test()) {
            assert_eq!(a, &b, "generator parameters must stay bit-identical");
        }
    }

    #[test]
    fn matching_gradient_reaches_codes() {
        let gen = small_gen();
        let groups = toy_groups(1, 24);
        let model = build_model(Architecture::Srcnn, 2, &small_arch(), 5).unwrap();
        let set = init_latent(&groups, &gen, 1, 10, false, 3).unwrap();
        let code = set.codes[&0][0].clone();
        let degradation = DegradationConfig::bicubic(2);
        let g_real = real_gradient(&model, &groups[0], 16, 2, &degradation, 9).unwrap();

        let eval_and_grad = |z: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let zv = g.leaf(z_array(z));
            let gen_vars: Vec<Var> =
                gen.params.iter().map(|p| g.constant(p.value.clone())).collect();
            let decoded = gen.decode_graph(&mut g, zv, &gen_vars).unwrap();
            let (x_s, y_s) = synthetic_pair(&mut g, decoded, 2).unwrap();
            let params = model.param_leaves(&mut g);
            let pred = model.forward_graph(&mut g, x_s, &params).unwrap();
            let loss_syn = g.mse(pred, y_s);
            let syn_grads = g.grad(loss_syn, &params);
            let real_consts: Vec<Var> = g_real
                .layers
                .iter()
                .zip(model.params.iter())
                .map(|(l, p)| {
                    g.constant(ArrayD::from_shape_vec(p.value.raw_dim(), l.clone()).unwrap())
                })
                .collect();
            let node = build_match_loss(&mut g, &syn_grads, &real_consts, MatchMode::Layerwise);
            let value = g.scalar_value(node);
            let grad = if want_grad {
                let zg = g.grad(node, &[zv])[0];
                g.value(zg).iter().copied().collect()
            } else {
                Vec::new()
            };
            (value, grad)
        };

        let (_, grad) = eval_and_grad(&code.z, true);
        let norm: f64 = grad.iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "matching loss must reach the latent code");

        let eps = 1e-4;
        for idx in [0usize, 5, 11] {
            let mut plus = code.z.clone();
            let mut minus = code.z.clone();
            plus[idx] += eps;
            minus[idx] -= eps;
            let fd = (eval_and_grad(&plus, false).0 - eval_and_grad(&minus, false).0)
                / (2.0 * eps);
            let got = grad[idx];
            let denom = fd.abs().max(got.abs()).max(1e-10);
            assert!(
                (fd - got).abs() / denom < 1e-2,
                "coordinate {idx}: fd {fd} vs graph {got}"
            );
        }
    }

    #[test]
    fn distill_is_deterministic_and_loss_trends_down() {
        let gen = small_gen();
        // Sub-images the size of the decoded output pin the real batch to
        // the full window, one reference cycle pins the net, and skipping
        // inversion starts the codes far from the real content, so the
        // trend assertion is a statement about plain descent with visible
        // headroom rather than sampling noise.
        let groups = toy_groups(2, 16);
        let mut config = quick_latent_config(10);
        config.snapshot_every = 5;
        config.reset_interval = 10;
        config.inversion_steps = 0;
        let arch = small_arch();
        let factory = move |seed: u64| build_model(Architecture::Srcnn, 2, &arch, seed);
        let (set1, h1) = latent_distill(&groups, 2, &config, &gen, &factory).unwrap();
        let (set2, h2) = latent_distill(&groups, 2, &config, &gen, &factory).unwrap();
        assert_eq!(h1.losses, h2.losses);
        for (label, codes) in &set1.codes {
            assert_eq!(codes, &set2.codes[label]);
        }
        assert_eq!(h1.losses.len(), 10);
        assert_eq!(h1.snapshots.len(), 3);
        assert_eq!(h1.snapshots[0].0, 0);

        let s = crate::models::smoothed(&h1.losses, 5);
        assert!(
            s.last().unwrap() <= &s[4],
            "smoothed loss rose: {} -> {}",
            s[4],
            s.last().unwrap()
        );
    }

    #[test]
    fn export_reload_and_retrain() {
        let dir = tempdir().unwrap();
        let gen = small_gen();
        let groups = toy_groups(2, 24);
        let set = init_latent(&groups, &gen, 2, 15, false, 3).unwrap();
        export_latent(&set, "latent-toy", 2, dir.path()).unwrap();

        let (manifest, loaded) = crate::data_prep::load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.num_groups(), 2);
        assert_eq!(manifest.num_sub_images(), 4);

        let codes = load_latent_codes(&dir.path().join(CODES_FILE_NAME), &gen).unwrap();
        for (label, entry) in &set.codes {
            assert_eq!(entry, &codes[label], "codes must round-trip bit-exactly");
        }
        for group in &loaded {
            for (img, code) in group
                .sub_images
                .iter()
                .zip(set.codes[&group.pseudo_label].iter())
            {
                let redecoded = decode_code(&gen, code).unwrap();
                assert!(img.mean_abs_diff(&redecoded).unwrap() <= 0.5 / 255.0 + 1e-12);
            }
        }

        let model = build_model(Architecture::Srcnn, 2, &small_arch(), 5).unwrap();
        let schedule = crate::models::TrainSchedule {
            steps: 3,
            batch_size: 2,
            patch_size: 8,
            ..Default::default()
        };
        let (_, history) = crate::models::train(
            model,
            &loaded,
            &DegradationConfig::bicubic(2),
            &schedule,
        )
        .unwrap();
        assert_eq!(history.len(), 3);
    }

    #[test]
    fn tuned_codes_round_trip_through_archive() {
        let dir = tempdir().unwrap();
        let gen = small_gen();
        let groups = toy_groups(1, 24);
        let set = init_latent(&groups, &gen, 1, 10, true, 3).unwrap();
        assert!(set.codes[&0][0].deltas.is_some());
        let path = dir.path().join(CODES_FILE_NAME);
        write_latent_codes(&set, &path).unwrap();
        let codes = load_latent_codes(&path, &gen).unwrap();
        assert_eq!(set.codes[&0], codes[&0]);
    }
}

#[cfg(test)]
impl Generator {
    fn param_values_for_test(&self) -> Vec<ArrayD<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }
}
