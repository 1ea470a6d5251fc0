//! Attention U-Net: a contracting path of conv blocks and 2x2 pooling, a
//! bottleneck, and an expansive path where every skip connection is scaled
//! by an additive attention gate before concatenation.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{BatchNormMode, Real, RunningMoments, Tape, Tensor, TensorError, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_weights, save_weights, Checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub type Mode = BatchNormMode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input must be [N, 1, {expected}, {expected}], got {found:?}")]
    InputSize { expected: usize, found: Vec<usize> },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            num_classes: 3,
            input_size: 256,
        }
    }
}

impl ModelConfig {
    /// Small network used by tests and the synthetic experiment.
    pub fn fixture() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            num_classes: 3,
            input_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if self.base_channels == 0 || self.base_channels << self.depth > 1 << 16 {
            return bad(format!("base channel count {} out of range", self.base_channels));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        let unit = 1 << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return bad(format!(
                "input size {} is not a positive multiple of 2^depth = {unit}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Channels produced by encoder level `level`; `level == depth` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Intermediate width of the attention gate on a skip with `skip` channels.
    pub fn gate_channels(skip: usize) -> usize {
        (skip / 2).max(1)
    }

    /// Every parameter name with its shape, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
            out.push((format!("{name}.gamma"), vec![c]));
            out.push((format!("{name}.beta"), vec![c]));
        };
        let block = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize| {
            conv(out, &format!("{name}.conv1"), cin, cout, 3);
            bn(out, &format!("{name}.bn1"), cout);
            conv(out, &format!("{name}.conv2"), cout, cout, 3);
            bn(out, &format!("{name}.bn2"), cout);
        };
        for level in 0..self.depth {
            let cin = if level == 0 { 1 } else { self.channels(level - 1) };
            block(&mut out, &format!("enc{level}"), cin, self.channels(level));
        }
        block(&mut out, "bottleneck", self.channels(self.depth - 1), self.channels(self.depth));
        for level in (0..self.depth).rev() {
            let c = self.channels(level);
            let below = self.channels(level + 1);
            let f = Self::gate_channels(c);
            conv(&mut out, &format!("dec{level}.up.conv"), below, c, 3);
            bn(&mut out, &format!("dec{level}.up.bn"), c);
            conv(&mut out, &format!("dec{level}.gate.wg"), c, f, 1);
            conv(&mut out, &format!("dec{level}.gate.wx"), c, f, 1);
            conv(&mut out, &format!("dec{level}.gate.psi"), f, 1, 1);
            block(&mut out, &format!("dec{level}"), 2 * c, c);
        }
        conv(&mut out, "head", self.channels(0), self.num_classes, 1);
        out
    }

    /// Batch-normalization layers with their channel counts.
    pub fn norm_layers(&self) -> Vec<(String, usize)> {
        self.param_shapes()
            .into_iter()
            .filter_map(|(n, s)| n.strip_suffix(".gamma").map(|b| (b.to_string(), s[0])))
            .collect()
    }

    /// Activations addressable by Grad-CAM probes.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.depth).map(|l| format!("enc{l}")).collect();
        names.push("bottleneck".into());
        names.extend((0..self.depth).rev().map(|l| format!("dec{l}")));
        names
    }

    /// Highest-resolution decoder activation.
    pub fn default_probe_layer(&self) -> String {
        "dec0".into()
    }
}

/// Learned parameters and running normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T = f32> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
    moments: BTreeMap<String, RunningMoments<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn moments(&self) -> &BTreeMap<String, RunningMoments<T>> {
        &self.moments
    }

    pub fn moments_mut(&mut self, name: &str) -> Option<&mut RunningMoments<T>> {
        self.moments.get_mut(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.params.keys().cloned().collect()
    }

    /// `(name, tensor)` pairs for an optimizer step.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
            && self
                .moments
                .values()
                .all(|m| m.mean.iter().chain(&m.var).all(|v| v.is_finite()))
    }

    /// Copies gradients recorded on `tape` into the matching parameter slots.
    pub fn collect_grads(&mut self, tape: &Tape<T>, pass: &ForwardPass<T>) {
        for (name, &var) in &pass.params {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(var)) {
                p.set_grad(g.to_vec()).expect("gradient shape follows value shape");
            }
        }
    }

    /// Adopts the running moments produced by a training-mode forward pass.
    pub fn commit_moments(&mut self, pass: ForwardPass<T>) {
        for (name, m) in pass.moments {
            self.moments.insert(name, m);
        }
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        ModelWeights {
            config: self.config,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            moments: self
                .moments
                .iter()
                .map(|(k, m)| {
                    (
                        k.clone(),
                        RunningMoments {
                            mean: conv(&m.mean),
                            var: conv(&m.var),
                        },
                    )
                })
                .collect(),
        }
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor<T>>,
        moments: BTreeMap<String, RunningMoments<T>>,
    ) -> Self {
        Self {
            config,
            params,
            moments,
        }
    }
}

/// He-uniform convolution kernels, zero biases, unit gamma, zero beta.
pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let tensor = if name.ends_with(".weight") {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = (6.0 / fan_in).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
        } else if name.ends_with(".gamma") {
            Tensor::full(shape, T::one())
        } else {
            Tensor::zeros(shape)
        };
        params.insert(name, tensor);
    }
    let moments = config
        .norm_layers()
        .into_iter()
        .map(|(n, c)| (n, RunningMoments::new(c)))
        .collect();
    Ok(ModelWeights {
        config: *config,
        params,
        moments,
    })
}

/// Tape handles of one attention gate's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub wg: Var,
    pub bg: Var,
    pub wx: Var,
    pub bx: Var,
    pub psi: Var,
    pub bpsi: Var,
}

/// `alpha = sigmoid(psi(relu(W_g g + W_x x)))`, `gated = x * alpha`.
/// Returns `(gated, alpha)`.
pub fn attention_gate<T: Real>(tape: &mut Tape<T>, g: Var, x: Var, p: &GateVars) -> Result<(Var, Var)> {
    let gs = tape.value(g).dims4("attention_gate")?;
    let xs = tape.value(x).dims4("attention_gate")?;
    if (gs[0], gs[2], gs[3]) != (xs[0], xs[2], xs[3]) {
        return Err(TensorError::Shape {
            op: "attention_gate",
            lhs: gs.to_vec(),
            rhs: xs.to_vec(),
        }
        .into());
    }
    let a = tape.conv2d(g, p.wg, p.bg, 1, 0)?;
    let b = tape.conv2d(x, p.wx, p.bx, 1, 0)?;
    let s = tape.add(a, b)?;
    let r = tape.relu(s);
    let q = tape.conv2d(r, p.psi, p.bpsi, 1, 0)?;
    let alpha = tape.sigmoid(q);
    let gated = tape.mul(x, alpha)?;
    Ok((gated, alpha))
}

/// Handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub logits: Var,
    /// Post-activation outputs of every encoder, bottleneck and decoder block.
    pub layers: BTreeMap<String, Var>,
    /// Attention coefficients of each decoder level.
    pub alphas: BTreeMap<String, Var>,
    pub params: BTreeMap<String, Var>,
    pub moments: BTreeMap<String, RunningMoments<T>>,
}

struct Builder<'a, T: Real> {
    tape: &'a mut Tape<T>,
    weights: &'a ModelWeights<T>,
    mode: Mode,
    trainable: bool,
    params: BTreeMap<String, Var>,
    moments: BTreeMap<String, RunningMoments<T>>,
}

impl<T: Real> Builder<'_, T> {
    fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = self.weights.params[name].clone().with_requires_grad(self.trainable);
        let v = self.tape.leaf(t);
        self.params.insert(name.to_string(), v);
        v
    }

    fn conv(&mut self, x: Var, name: &str, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        Ok(self.tape.conv2d(x, w, b, 1, padding)?)
    }

    fn bn_relu(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.gamma"));
        let b = self.param(&format!("{name}.beta"));
        let mut m = self.moments.remove(name).unwrap_or_else(|| self.weights.moments[name].clone());
        let y = self.tape.batchnorm2d(x, g, b, &mut m, self.mode)?;
        self.moments.insert(name.to_string(), m);
        Ok(self.tape.relu(y))
    }

    fn block(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.conv(x, &format!("{name}.conv1"), 1)?;
        let y = self.bn_relu(y, &format!("{name}.bn1"))?;
        let y = self.conv(y, &format!("{name}.conv2"), 1)?;
        self.bn_relu(y, &format!("{name}.bn2"))
    }

    fn gate(&mut self, name: &str) -> GateVars {
        GateVars {
            wg: self.param(&format!("{name}.wg.weight")),
            bg: self.param(&format!("{name}.wg.bias")),
            wx: self.param(&format!("{name}.wx.weight")),
            bx: self.param(&format!("{name}.wx.bias")),
            psi: self.param(&format!("{name}.psi.weight")),
            bpsi: self.param(&format!("{name}.psi.bias")),
        }
    }
}

/// Runs the network on `input` (`[N,1,S,S]`) and returns per-pixel class
/// logits at full resolution.  With `trainable` set, every parameter leaf
/// requires a gradient.
pub fn forward<T: Real>(
    weights: &ModelWeights<T>,
    tape: &mut Tape<T>,
    input: Var,
    mode: Mode,
    trainable: bool,
) -> Result<ForwardPass<T>> {
    let cfg = weights.config;
    let s = cfg.input_size;
    let shape = tape.shape(input);
    if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
        return Err(ModelError::InputSize {
            expected: s,
            found: shape.to_vec(),
        });
    }
    let mut b = Builder {
        tape,
        weights,
        mode,
        trainable,
        params: BTreeMap::new(),
        moments: BTreeMap::new(),
    };
    let mut layers = BTreeMap::new();
    let mut alphas = BTreeMap::new();
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for level in 0..cfg.depth {
        let name = format!("enc{level}");
        let y = b.block(x, &name)?;
        layers.insert(name, y);
        skips.push(y);
        x = b.tape.maxpool2(y)?;
    }
    x = b.block(x, "bottleneck")?;
    layers.insert("bottleneck".to_string(), x);
    for level in (0..cfg.depth).rev() {
        let name = format!("dec{level}");
        let up = b.tape.upsample2(x)?;
        let up = b.conv(up, &format!("{name}.up.conv"), 1)?;
        let up = b.bn_relu(up, &format!("{name}.up.bn"))?;
        let gate = b.gate(&format!("{name}.gate"));
        let (gated, alpha) = attention_gate(b.tape, up, skips[level], &gate)?;
        alphas.insert(name.clone(), alpha);
        let cat = b.tape.concat_channels(gated, up)?;
        x = b.block(cat, &name)?;
        layers.insert(name, x);
    }
    let logits = b.conv(x, "head", 0)?;
    Ok(ForwardPass {
        logits,
        layers,
        alphas,
        params: b.params,
        moments: b.moments,
    })
}
