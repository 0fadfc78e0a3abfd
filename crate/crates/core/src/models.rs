//! The SR model family (SRCNN, VDSR, EDSR), training, gradients, and
//! checkpoints.
//!
//! Every forward pass is expressed on a [`Graph`], so the same code path
//! serves inference, training, gradient extraction, and the
//! second-order needs of gradient matching. SRCNN and VDSR consume a
//! bicubically pre-upsampled input; EDSR consumes the native LR input
//! and upsamples with learned convolutions plus pixel shuffle.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_prep::{sample_training_batch, PatchGroup};
use crate::error::{Result, SrError};
use crate::graph::{Graph, Var};
use crate::resize::{DegradationConfig, ResizePlan};

/// Supported model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Srcnn,
    Vdsr,
    Edsr,
}

impl Architecture {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "srcnn" => Ok(Architecture::Srcnn),
            "vdsr" => Ok(Architecture::Vdsr),
            "edsr" => Ok(Architecture::Edsr),
            other => Err(SrError::Config(format!("unknown architecture {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Srcnn => "srcnn",
            Architecture::Vdsr => "vdsr",
            Architecture::Edsr => "edsr",
        }
    }
}

/// Widths, depths, and kernel sizes for all three architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: usize,
    pub srcnn_widths: [usize; 2],
    pub srcnn_kernels: [usize; 3],
    pub vdsr_depth: usize,
    pub vdsr_width: usize,
    pub edsr_blocks: usize,
    pub edsr_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            srcnn_widths: [32, 16],
            srcnn_kernels: [9, 5, 5],
            vdsr_depth: 8,
            vdsr_width: 32,
            edsr_blocks: 4,
            edsr_width: 32,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(SrError::Config("channels must be positive".into()));
        }
        if self.srcnn_widths.iter().any(|&w| w == 0)
            || self.srcnn_kernels.iter().any(|&k| k == 0 || k % 2 == 0)
        {
            return Err(SrError::Config(
                "srcnn widths must be positive and kernels odd".into(),
            ));
        }
        if self.vdsr_depth < 2 || self.vdsr_width == 0 {
            return Err(SrError::Config("vdsr needs depth >= 2 and positive width".into()));
        }
        if self.edsr_blocks == 0 || self.edsr_width == 0 {
            return Err(SrError::Config("edsr needs positive blocks and width".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// A model: architecture, scale, configuration, and parameters in fixed
/// order.
#[derive(Debug, Clone)]
pub struct SrModel {
    pub architecture: Architecture,
    pub scale: usize,
    pub config: ArchConfig,
    pub params: Vec<NamedParam>,
}

/// Per-layer flattened gradients, in the model's parameter order.
#[derive(Debug, Clone)]
pub struct GradientVector {
    pub layer_names: Vec<String>,
    pub layers: Vec<Vec<f64>>,
}

impl GradientVector {
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// All entries concatenated in layer order.
    pub fn concatenated(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out
    }
}

fn conv_shape(out_c: usize, in_c: usize, k: usize) -> Vec<usize> {
    vec![out_c, in_c, k, k]
}

/// Parameter names and shapes for an architecture, in forward order.
pub fn param_template(
    architecture: Architecture,
    scale: usize,
    config: &ArchConfig,
) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    if scale < 1 {
        return Err(SrError::Config("scale must be >= 1".into()));
    }
    let c = config.channels;
    let mut t: Vec<(String, Vec<usize>)> = Vec::new();
    let conv = |name: &str, out_c: usize, in_c: usize, k: usize, t: &mut Vec<_>| {
        t.push((format!("{name}.weight"), conv_shape(out_c, in_c, k)));
        t.push((format!("{name}.bias"), vec![out_c]));
    };
    match architecture {
        Architecture::Srcnn => {
            let [n1, n2] = config.srcnn_widths;
            let [k1, k2, k3] = config.srcnn_kernels;
            conv("conv1", n1, c, k1, &mut t);
            conv("conv2", n2, n1, k2, &mut t);
            conv("conv3", c, n2, k3, &mut t);
        }
        Architecture::Vdsr => {
            let w = config.vdsr_width;
            conv("conv1", w, c, 3, &mut t);
            for i in 1..config.vdsr_depth - 1 {
                conv(&format!("conv{}", i + 1), w, w, 3, &mut t);
            }
            conv(&format!("conv{}", config.vdsr_depth), c, w, 3, &mut t);
        }
        Architecture::Edsr => {
            let w = config.edsr_width;
            conv("head", w, c, 3, &mut t);
            for b in 0..config.edsr_blocks {
                conv(&format!("block{b}.conv1"), w, w, 3, &mut t);
                conv(&format!("block{b}.conv2"), w, w, 3, &mut t);
            }
            conv("tail", w, w, 3, &mut t);
            for (stage, _) in upsample_stages(scale)?.iter().enumerate() {
                conv(&format!("up{stage}"), w * 4, w, 3, &mut t);
            }
            conv("out", c, w, 3, &mut t);
        }
    }
    Ok(t)
}

/// Pixel-shuffle factors whose product equals `scale`.
fn upsample_stages(scale: usize) -> Result<Vec<usize>> {
    match scale {
        1 => Ok(vec![]),
        2 => Ok(vec![2]),
        4 => Ok(vec![2, 2]),
        other => Err(SrError::Config(format!(
            "unsupported scale {other}; expected 1, 2, or 4"
        ))),
    }
}

/// He-uniform initialization over a deterministic seeded stream.
pub fn build_model(
    architecture: Architecture,
    scale: usize,
    config: &ArchConfig,
    seed: u64,
) -> Result<SrModel> {
    let template = param_template(architecture, scale, config)?;
    let last_weight = template
        .iter()
        .rev()
        .find(|(n, _)| n.ends_with(".weight"))
        .map(|(n, _)| n.clone());
    let params = template
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let value = if name.ends_with(".bias") {
                ArrayD::zeros(IxDyn(&shape))
            } else if architecture == Architecture::Vdsr
                && Some(&name) == last_weight.as_ref()
            {
                // Zero residual at init: the network starts as the
                // identity on top of the bicubic upsample.
                ArrayD::zeros(IxDyn(&shape))
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = crate::rng::stream(seed, &[0x696e_6974, i as u64]);
                ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-bound..bound))
            };
            NamedParam { name, value }
        })
        .collect();
    Ok(SrModel { architecture, scale, config: config.clone(), params })
}

impl SrModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_values(&self) -> Vec<ArrayD<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces every parameter tensor, preserving names and shapes.
    pub fn set_param_values(&mut self, values: &[ArrayD<f64>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(SrError::Shape(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values.iter()) {
            if p.value.shape() != v.shape() {
                return Err(SrError::Shape(format!(
                    "parameter {}: shape {:?} cannot be replaced by {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Inserts each parameter into `g` as a trainable leaf.
    pub fn param_leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Inserts each parameter into `g` as a frozen constant.
    pub fn param_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 4 {
            return Err(SrError::Shape(format!(
                "expected NCHW input, got {} dims",
                shape.len()
            )));
        }
        if shape[1] != self.config.channels {
            return Err(SrError::Shape(format!(
                "expected {} channels, got {}",
                self.config.channels, shape[1]
            )));
        }
        if shape[2] == 0 || shape[3] == 0 {
            return Err(SrError::Shape("empty spatial dims".into()));
        }
        Ok((shape[2], shape[3]))
    }

    /// Builds the forward pass on `g` from an LR input node and parameter
    /// nodes (in template order); returns the SR output node.
    pub fn forward_graph(&self, g: &mut Graph, lr: Var, params: &[Var]) -> Result<Var> {
        let (h, w) = self.check_input(g.shape(lr))?;
        if params.len() != self.params.len() {
            return Err(SrError::Shape(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("length checked above");
        match self.architecture {
            Architecture::Srcnn => {
                let up = self.upsample_input(g, lr, h, w)?;
                let c1 = conv_layer(g, up, next(), next());
                let r1 = g.relu(c1);
                let c2 = conv_layer(g, r1, next(), next());
                let r2 = g.relu(c2);
                Ok(conv_layer(g, r2, next(), next()))
            }
            Architecture::Vdsr => {
                let up = self.upsample_input(g, lr, h, w)?;
                let mut x = {
                    let c = conv_layer(g, up, next(), next());
                    g.relu(c)
                };
                for _ in 1..self.config.vdsr_depth - 1 {
                    let c = conv_layer(g, x, next(), next());
                    x = g.relu(c);
                }
                let residual = conv_layer(g, x, next(), next());
                Ok(g.add(up, residual))
            }
            Architecture::Edsr => {
                let head = conv_layer(g, lr, next(), next());
                let mut x = head;
                for _ in 0..self.config.edsr_blocks {
                    let c1 = conv_layer(g, x, next(), next());
                    let r = g.relu(c1);
                    let c2 = conv_layer(g, r, next(), next());
                    x = g.add(x, c2);
                }
                let tail = conv_layer(g, x, next(), next());
                let mut y = g.add(head, tail);
                for &r in &upsample_stages(self.scale)? {
                    let c = conv_layer(g, y, next(), next());
                    y = g.pixel_shuffle(c, r);
                }
                Ok(conv_layer(g, y, next(), next()))
            }
        }
    }

    fn upsample_input(&self, g: &mut Graph, lr: Var, h: usize, w: usize) -> Result<Var> {
        if self.scale == 1 {
            return Ok(lr);
        }
        let plan = Arc::new(ResizePlan::upscale(h, w, self.scale)?);
        let pid = g.register_plan(plan);
        Ok(g.resize(lr, pid, false))
    }

    /// Runs the model on an LR batch without tracking gradients.
    pub fn forward(&self, lr: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let mut g = Graph::new();
        let input = g.constant(lr.clone());
        let params = self.param_constants(&mut g);
        let out = self.forward_graph(&mut g, input, &params)?;
        Ok(g.value(out).clone())
    }

    /// Gradient of the batch MSE with respect to every parameter.
    pub fn flat_gradient(&self, lr: &ArrayD<f64>, hr: &ArrayD<f64>) -> Result<GradientVector> {
        let mut g = Graph::new();
        let input = g.constant(lr.clone());
        let target = g.constant(hr.clone());
        let params = self.param_leaves(&mut g);
        let pred = self.forward_graph(&mut g, input, &params)?;
        if g.shape(pred) != g.shape(target) {
            return Err(SrError::Shape(format!(
                "prediction {:?} vs target {:?}",
                g.shape(pred),
                g.shape(target)
            )));
        }
        let loss = g.mse(pred, target);
        let grads = g.grad(loss, &params);
        Ok(GradientVector {
            layer_names: self.params.iter().map(|p| p.name.clone()).collect(),
            layers: grads
                .iter()
                .map(|&v| g.value(v).iter().copied().collect())
                .collect(),
        })
    }
}

fn conv_layer(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Var {
    let c = g.conv2d_same(x, weight);
    g.bias_add(c, bias)
}

/// Mean squared error between two equal-shape tensors.
pub fn sr_loss(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(SrError::Shape(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Optimizer selection for [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub rng_seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            patch_size: 48,
            learning_rate: 1e-4,
            optimizer: Optimizer::Adam,
            rng_seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(SrError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(SrError::Config("batch_size and patch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment state across steps.
pub(crate) struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: usize,
}

impl AdamState {
    pub(crate) fn new(params: &[NamedParam]) -> Self {
        let zeros: Vec<ArrayD<f64>> =
            params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub(crate) fn step(&mut self, params: &mut [NamedParam], grads: &[ArrayD<f64>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            m.zip_mut_with(g, |mi, &gi| *mi = B1 * *mi + (1.0 - B1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = B2 * *vi + (1.0 - B2) * gi * gi);
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mi, &vi| {
                    *pv -= lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
                });
        }
    }
}

/// Minimizes batch MSE over sampled patches; returns per-step losses.
pub fn train(
    mut model: SrModel,
    groups: &[PatchGroup],
    degradation: &DegradationConfig,
    schedule: &TrainSchedule,
) -> Result<(SrModel, Vec<f64>)> {
    schedule.validate()?;
    let mut history = Vec::with_capacity(schedule.steps);
    let mut adam = AdamState::new(&model.params);
    for step in 0..schedule.steps {
        let seed = crate::rng::derive_seed(schedule.rng_seed, &[0x7472_6169_6e, step as u64]);
        let batch =
            sample_training_batch(groups, schedule.patch_size, schedule.batch_size, degradation, seed)?;
        let lr_in = batch.lr_nchw();
        let hr = batch.hr_nchw();

        let mut g = Graph::new();
        let input = g.constant(lr_in);
        let target = g.constant(hr);
        let params = model.param_leaves(&mut g);
        let pred = model.forward_graph(&mut g, input, &params)?;
        let loss = g.mse(pred, target);
        let loss_value = g.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(SrError::Train {
                step,
                reason: format!("non-finite loss {loss_value}"),
            });
        }
        history.push(loss_value);

        let grads = g.grad(loss, &params);
        let grad_values: Vec<ArrayD<f64>> =
            grads.iter().map(|&v| g.value(v).clone()).collect();
        match schedule.optimizer {
            Optimizer::Sgd => {
                for (p, gv) in model.params.iter_mut().zip(grad_values.iter()) {
                    p.value.zip_mut_with(gv, |pv, &gi| *pv -= schedule.learning_rate * gi);
                }
            }
            Optimizer::Adam => {
                adam.step(&mut model.params, &grad_values, schedule.learning_rate);
            }
        }
    }
    Ok((model, history))
}

/// Moving average over trailing windows; shorter prefixes average what
/// exists.
pub fn smoothed(history: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    let mut out = Vec::with_capacity(history.len());
    let mut acc = 0.0;
    for i in 0..history.len() {
        acc += history[i];
        if i >= window {
            acc -= history[i - window];
        }
        let n = (i + 1).min(window) as f64;
        out.push(acc / n);
    }
    out
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SRCKPT01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: Architecture,
    scale: usize,
    config: ArchConfig,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

/// Writes magic, JSON header, then all parameters as little-endian f64.
pub fn save_checkpoint(model: &SrModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        architecture: model.architecture,
        scale: model.scale,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|p| ParamHeader { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_u64::<LittleEndian>(header_json.len() as u64)?;
    f.write_all(&header_json)?;
    for p in &model.params {
        for &v in p.value.iter() {
            f.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<SrModel> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SrError::Data(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let header_len = f.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let expected = param_template(header.architecture, header.scale, &header.config)?;
    if expected.len() != header.params.len()
        || expected
            .iter()
            .zip(header.params.iter())
            .any(|((n, s), h)| *n != h.name || *s != h.shape)
    {
        return Err(SrError::Data(format!(
            "{}: header parameters do not match architecture template",
            path.display()
        )));
    }

    let mut params = Vec::with_capacity(header.params.len());
    for ph in &header.params {
        let len: usize = ph.shape.iter().product();
        let mut buf = vec![0f64; len];
        f.read_f64_into::<LittleEndian>(&mut buf).map_err(|_| {
            SrError::Data(format!("{}: truncated parameter payload", path.display()))
        })?;
        let value = ArrayD::from_shape_vec(IxDyn(&ph.shape), buf)
            .map_err(|e| SrError::Data(format!("bad parameter shape: {e}")))?;
        params.push(NamedParam { name: ph.name.clone(), value });
    }
    let mut trailer = [0u8; 1];
    if f.read(&mut trailer)? != 0 {
        return Err(SrError::Data(format!(
            "{}: trailing bytes after parameter payload",
            path.display()
        )));
    }
    Ok(SrModel {
        architecture: header.architecture,
        scale: header.scale,
        config: header.config,
        params,
    })
}
