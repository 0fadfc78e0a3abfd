//! Pixel-space dataset distillation by gradient matching.
//!
//! Each pseudo-label owns a small set of synthetic HR images (IPC per
//! label) that are optimized directly in pixel space. One step, per
//! label: derive the synthetic LR by the differentiable bicubic path,
//! compute the SR-loss gradient with respect to the reference model's
//! parameters on the synthetic pair and on a sampled real batch, and
//! descend the synthetic pixels on the cosine matching distance between
//! the two gradients. Pixels are clamped to [0,1] after every step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_prep::{sample_label_batch, DatasetMeta, PatchGroup};
use crate::error::{Result, SrError};
use crate::graph::{Graph, Var};
use crate::image_tensor::ImageTensor;
use crate::matching::{build_match_loss, grad_match_loss, MatchMode};
use crate::models::{GradientVector, SrModel};
use crate::resize::{DegradationConfig, ResizePlan};

/// Synthetic image initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Seeded uniform pixels in [0,1].
    Noise,
    /// Bicubic resize of real content from the group.
    Downscale,
}

impl InitStrategy {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "noise" => Ok(InitStrategy::Noise),
            "downscale" => Ok(InitStrategy::Downscale),
            other => Err(SrError::Config(format!("unknown init strategy {other:?}"))),
        }
    }
}

/// Where the reference network's parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceStrategy {
    /// Fresh seeded initialization every cycle.
    RandomInit,
    /// A checkpoint loaded once at the start.
    Pretrained,
}

impl ReferenceStrategy {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "random" | "random_init" => Ok(ReferenceStrategy::RandomInit),
            "pretrained" => Ok(ReferenceStrategy::Pretrained),
            other => Err(SrError::Config(format!(
                "unknown reference strategy {other:?}"
            ))),
        }
    }
}

/// Hyperparameters for a pixel-space distillation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub iterations: usize,
    pub synth_lr: f64,
    pub synth_momentum: f64,
    pub batch_real: usize,
    pub net_update_steps: usize,
    pub net_update_lr: f64,
    /// Iterations per reference cycle; under random_init the model is
    /// re-seeded at the start of each cycle.
    pub reset_interval: usize,
    pub reference: ReferenceStrategy,
    pub pretrained_checkpoint: Option<PathBuf>,
    pub init: InitStrategy,
    pub ipc: usize,
    pub synth_size: usize,
    pub match_mode: MatchMode,
    /// Snapshot period for the history; 0 disables snapshots.
    pub snapshot_every: usize,
    pub rng_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            synth_lr: 0.1,
            synth_momentum: 0.5,
            batch_real: 8,
            net_update_steps: 0,
            net_update_lr: 1e-4,
            reset_interval: 1,
            reference: ReferenceStrategy::RandomInit,
            pretrained_checkpoint: None,
            init: InitStrategy::Downscale,
            ipc: 1,
            synth_size: 96,
            match_mode: MatchMode::Layerwise,
            snapshot_every: 0,
            rng_seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, scale: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(SrError::Config("iterations must be >= 1".into()));
        }
        if self.synth_lr < 0.0 || !self.synth_lr.is_finite() {
            return Err(SrError::Config("synth_lr must be non-negative".into()));
        }
        if self.net_update_lr <= 0.0 {
            return Err(SrError::Config("net_update_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.synth_momentum) {
            return Err(SrError::Config("synth_momentum must be in [0,1)".into()));
        }
        if self.batch_real == 0 || self.ipc == 0 {
            return Err(SrError::Config("batch_real and ipc must be positive".into()));
        }
        if self.reset_interval == 0 {
            return Err(SrError::Config("reset_interval must be >= 1".into()));
        }
        if self.synth_size == 0 || self.synth_size % scale != 0 {
            return Err(SrError::Config(format!(
                "synth_size {} must be a positive multiple of scale {scale}",
                self.synth_size
            )));
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

/// The trainable synthetic dataset: IPC images per pseudo-label.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub images: BTreeMap<usize, Vec<ImageTensor>>,
    pub ipc: usize,
    pub scale: usize,
    pub synth_size: usize,
}

impl SyntheticSet {
    pub fn num_labels(&self) -> usize {
        self.images.len()
    }

    pub fn total_images(&self) -> usize {
        self.images.values().map(|v| v.len()).sum()
    }
}

/// Loss trace plus periodic synthetic snapshots.
#[derive(Debug, Clone)]
pub struct DistillHistory {
    pub losses: Vec<f64>,
    /// (iteration, label -> images); iteration 0 is the initial state.
    pub snapshots: Vec<(usize, BTreeMap<usize, Vec<ImageTensor>>)>,
}

/// Builds the initial synthetic set from the real groups.
pub fn init_synthetic(
    groups: &[PatchGroup],
    scale: usize,
    config: &DistillConfig,
) -> Result<SyntheticSet> {
    config.validate(scale)?;
    if groups.is_empty() {
        return Err(SrError::Data("cannot distill an empty dataset".into()));
    }
    let size = config.synth_size;
    let mut images = BTreeMap::new();
    for group in groups {
        if group.sub_images.is_empty() {
            return Err(SrError::Data(format!(
                "group {} has no sub-images",
                group.pseudo_label
            )));
        }
        let mut per_label = Vec::with_capacity(config.ipc);
        for k in 0..config.ipc {
            let img = match config.init {
                InitStrategy::Noise => {
                    let mut rng = crate::rng::stream(
                        config.rng_seed,
                        &[0x6e6f_6973_65, group.pseudo_label as u64, k as u64],
                    );
                    ImageTensor::from_fn(size, size, 3, |_, _, _| rng.random_range(0.0..1.0))
                }
                InitStrategy::Downscale => {
                    let mut rng = crate::rng::stream(
                        config.rng_seed,
                        &[0x6372_6f70, group.pseudo_label as u64, k as u64],
                    );
                    let source = &group.sub_images[k % group.sub_images.len()];
                    let (h, w) = (source.height(), source.width());
                    let crop = if k == 0 {
                        source.clone()
                    } else {
                        // Distinct content per extra image: a random
                        // three-quarter window of the source.
                        let ch = (3 * h / 4).max(1);
                        let cw = (3 * w / 4).max(1);
                        let top = rng.random_range(0..=h - ch);
                        let left = rng.random_range(0..=w - cw);
                        source.crop(top, left, ch, cw)?
                    };
                    crate::resize::resize_to(&crop, size, size)?
                }
            };
            per_label.push(img);
        }
        images.insert(group.pseudo_label, per_label);
    }
    Ok(SyntheticSet { images, ipc: config.ipc, scale, synth_size: size })
}

/// Builds (x_s, y_s) on the graph: the LR operand is the differentiable
/// bicubic degradation of the synthetic HR node.
pub fn synthetic_pair(g: &mut Graph, y_s: Var, scale: usize) -> Result<(Var, Var)> {
    let shape = g.shape(y_s).to_vec();
    if shape.len() != 4 {
        return Err(SrError::Shape(format!(
            "synthetic batch must be NCHW, got {} dims",
            shape.len()
        )));
    }
    if shape[2] % scale != 0 || shape[3] % scale != 0 {
        return Err(SrError::Shape(format!(
            "synthetic dims {}x{} not divisible by scale {scale}",
            shape[2], shape[3]
        )));
    }
    if scale == 1 {
        return Ok((y_s, y_s));
    }
    let plan = Arc::new(ResizePlan::downscale(shape[2], shape[3], scale)?);
    let pid = g.register_plan(plan);
    let resized = g.resize(y_s, pid, false);
    let x_s = g.clamp_unit(resized);
    Ok((x_s, y_s))
}

fn stack_label_images(images: &[ImageTensor]) -> ArrayD<f64> {
    let (h, w, c) = (images[0].height(), images[0].width(), images[0].channels());
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (n, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), n).assign(&img.to_chw());
    }
    out
}

fn unstack_label_images(batch: &ArrayD<f64>) -> Result<Vec<ImageTensor>> {
    (0..batch.shape()[0])
        .map(|n| {
            ImageTensor::from_chw(&batch.index_axis(ndarray::Axis(0), n).to_owned().into_dyn())
        })
        .collect()
}

/// Per-label momentum buffers for the pixel optimizer.
#[derive(Debug, Clone, Default)]
pub struct DistillState {
    momentum: BTreeMap<usize, ArrayD<f64>>,
}

/// Real-batch gradient via the value route.
pub(crate) fn real_gradient(
    model: &SrModel,
    group: &PatchGroup,
    patch_size: usize,
    batch_real: usize,
    degradation: &DegradationConfig,
    seed: u64,
) -> Result<GradientVector> {
    let batch = sample_label_batch(group, patch_size, batch_real, degradation, seed)?;
    model.flat_gradient(&batch.lr_nchw(), &batch.hr_nchw())
}

/// One matching step over every pseudo-label in order.
///
/// Returns the summed matching loss. The loss reported per label is the
/// plain-value cosine distance; the gradient flows through an equivalent
/// graph construction.
pub fn distill_step(
    set: &mut SyntheticSet,
    groups: &[PatchGroup],
    model: &SrModel,
    config: &DistillConfig,
    state: &mut DistillState,
    iteration: usize,
) -> Result<f64> {
    if model.scale != set.scale {
        return Err(SrError::Config(format!(
            "model scale {} vs synthetic scale {}",
            model.scale, set.scale
        )));
    }
    let degradation = DegradationConfig::bicubic(set.scale);
    let mut total_loss = 0.0;
    for group in groups {
        let label = group.pseudo_label;
        let images = set.images.get(&label).ok_or_else(|| {
            SrError::Data(format!("no synthetic images for label {label}"))
        })?;

        let real_seed = crate::rng::derive_seed(
            config.rng_seed,
            &[0x7265_616c, iteration as u64, label as u64],
        );
        let g_real = real_gradient(
            model,
            group,
            set.synth_size,
            config.batch_real,
            &degradation,
            real_seed,
        )?;

        let mut g = Graph::new();
        let y_leaf = g.leaf(stack_label_images(images));
        let (x_s, y_s) = synthetic_pair(&mut g, y_leaf, set.scale)?;
        let params = model.param_leaves(&mut g);
        let pred = model.forward_graph(&mut g, x_s, &params)?;
        let loss_syn = g.mse(pred, y_s);
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
            let pixel_grad = g.grad(match_node, &[y_leaf])[0];
            let grad_value = g.value(pixel_grad);
            let velocity = state
                .momentum
                .entry(label)
                .or_insert_with(|| ArrayD::zeros(grad_value.raw_dim()));
            velocity.zip_mut_with(grad_value, |v, &gr| {
                *v = config.synth_momentum * *v + gr;
            });
            let mut updated = stack_label_images(images);
            updated.zip_mut_with(velocity, |p, &v| {
                *p = (*p - config.synth_lr * v).clamp(0.0, 1.0);
            });
            set.images.insert(label, unstack_label_images(&updated)?);
        }
    }
    Ok(total_loss)
}

fn snapshot(set: &SyntheticSet) -> BTreeMap<usize, Vec<ImageTensor>> {
    set.images.clone()
}

/// Builds the reference model for a cycle.
fn reference_model(
    config: &DistillConfig,
    factory: &dyn Fn(u64) -> Result<SrModel>,
    cycle: usize,
    pretrained: Option<&SrModel>,
) -> Result<SrModel> {
    match config.reference {
        ReferenceStrategy::RandomInit => factory(crate::rng::derive_seed(
            config.rng_seed,
            &[0x6d6f_64656c, cycle as u64],
        )),
        ReferenceStrategy::Pretrained => Ok(pretrained
            .expect("validated: pretrained model loaded before the loop")
            .clone()),
    }
}

/// Trains the reference model on the given synthetic images for a few
/// steps (plain SGD on the SR loss), mutating it in place.
pub(crate) fn net_update_on_images(
    model: &mut SrModel,
    images: &[&ImageTensor],
    scale: usize,
    steps: usize,
    learning_rate: f64,
    rng_seed: u64,
    iteration: usize,
) -> Result<()> {
    let degradation = DegradationConfig::bicubic(scale);
    for step in 0..steps {
        let mut rng = crate::rng::stream(
            rng_seed,
            &[0x6e65_7475_70, iteration as u64, step as u64],
        );
        let pick = rng.random_range(0..images.len());
        let hr_img = images[pick];
        let lr_img = crate::resize::degrade(hr_img, &degradation)?;
        let lr = lr_img.to_chw().insert_axis(ndarray::Axis(0)).into_dyn();
        let hr = hr_img.to_chw().insert_axis(ndarray::Axis(0)).into_dyn();

        let mut g = Graph::new();
        let input = g.constant(lr);
        let target = g.constant(hr);
        let params = model.param_leaves(&mut g);
        let pred = model.forward_graph(&mut g, input, &params)?;
        let loss = g.mse(pred, target);
        if !g.scalar_value(loss).is_finite() {
            return Err(SrError::Distill {
                iteration,
                reason: format!("non-finite net-update loss at inner step {step}"),
            });
        }
        let grads = g.grad(loss, &params);
        for (p, &gv) in model.params.iter_mut().zip(grads.iter()) {
            let gval = g.value(gv).clone();
            p.value.zip_mut_with(&gval, |pv, &gi| *pv -= learning_rate * gi);
        }
    }
    Ok(())
}

/// Full distillation: alternating matching steps and optional reference
/// updates, with the reference re-drawn every `reset_interval` cycles.
pub fn distill(
    groups: &[PatchGroup],
    scale: usize,
    config: &DistillConfig,
    factory: &dyn Fn(u64) -> Result<SrModel>,
) -> Result<(SyntheticSet, DistillHistory)> {
    config.validate(scale)?;
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

    let mut set = init_synthetic(groups, scale, config)?;
    let mut state = DistillState::default();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();
    if config.snapshot_every > 0 {
        snapshots.push((0, snapshot(&set)));
    }

    let mut model: Option<SrModel> = None;
    for iteration in 0..config.iterations {
        if iteration % config.reset_interval == 0 {
            let cycle = iteration / config.reset_interval;
            model = Some(reference_model(config, factory, cycle, pretrained.as_ref())?);
        }
        let current = model.as_mut().expect("set at cycle start");
        let loss = distill_step(&mut set, groups, current, config, &mut state, iteration)?;
        losses.push(loss);
        if config.net_update_steps > 0 {
            let all: Vec<&ImageTensor> = set.images.values().flatten().collect();
            net_update_on_images(
                current,
                &all,
                set.scale,
                config.net_update_steps,
                config.net_update_lr,
                config.rng_seed,
                iteration,
            )?;
        }
        if config.snapshot_every > 0 && (iteration + 1) % config.snapshot_every == 0 {
            snapshots.push((iteration + 1, snapshot(&set)));
        }
    }
    Ok((set, DistillHistory { losses, snapshots }))
}

/// Writes the synthetic set as a standard dataset artifact: one group
/// per pseudo-label, IPC images each.
pub fn export_synthetic(set: &SyntheticSet, corpus_name: &str, out_dir: &Path) -> Result<PathBuf> {
    let groups: Vec<PatchGroup> = set
        .images
        .iter()
        .map(|(&label, images)| PatchGroup {
            source_id: format!("synthetic_{label:05}"),
            pseudo_label: label,
            sub_images: images.clone(),
            origin_offsets: vec![(0, 0); images.len()],
        })
        .collect();
    let meta = DatasetMeta {
        corpus_name: corpus_name.to_string(),
        scale: set.scale,
        sub_image_size: set.synth_size,
        stride: set.synth_size,
    };
    crate::data_prep::save_dataset(&groups, &meta, out_dir)
}
