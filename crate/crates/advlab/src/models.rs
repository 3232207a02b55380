//! Anti-spoofing classifiers: two small CNN architectures over
//! single-channel spectrogram-like inputs.
//!
//! Architecture A is a max-feature-map network (each conv produces
//! twice the channels and competing halves are reduced with an
//! element-wise max). Architecture B uses ReLU convs gated by
//! squeeze-and-excitation blocks. The two share no parameter names, so
//! a checkpoint can never silently load into the wrong architecture.
//!
//! A classifier is built either for raw spectrograms (`[1, T, F]`) or
//! for encoder features (`[1, steps, model_dim]`); the input shape is
//! fixed at construction and recorded in checkpoints.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

use crate::checkpoint;
use crate::data::{Label, LabeledExample};
use crate::error::{LabError, Result};
use crate::seeds;
use crate::tensor::{
    batch_mean_grads, bind_params, collect_grads, ParamSet, SgdMomentum, Tape, Tensor, TensorError,
    Var, VarSet,
};

pub const CLASSES: usize = 2;

/// Width of the penultimate fully connected layer.
const HIDDEN: usize = 32;
/// Channels carried between blocks (after max-feature-map or gating).
const CHANNELS: usize = 8;
/// Squeeze-and-excitation bottleneck width.
const SE_BOTTLENECK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Max-feature-map CNN.
    A,
    /// Squeeze-and-excitation CNN.
    B,
}

impl Architecture {
    /// Parameter-name prefix; must differ between architectures.
    fn prefix(self) -> &'static str {
        match self {
            Architecture::A => "mfm",
            Architecture::B => "se",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::A => write!(f, "A"),
            Architecture::B => write!(f, "B"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Raw spectrogram image `[1, T, F]`.
    Raw,
    /// Encoder representation `[1, steps, model_dim]`.
    Features,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputMode::Raw => write!(f, "raw"),
            InputMode::Features => write!(f, "features"),
        }
    }
}

/// Output size of a conv/pool stage.
fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Spatial size after the fixed stack: conv(k3, s2, p1) → pool2 →
/// conv(k3, s1, p1) → pool2.
fn spatial_plan(h: usize, w: usize) -> Result<(usize, usize)> {
    let (mut h, mut w) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
    (h, w) = (h / 2, w / 2);
    (h, w) = (conv_out(h, 3, 1, 1), conv_out(w, 3, 1, 1));
    (h, w) = (h / 2, w / 2);
    if h == 0 || w == 0 {
        return Err(LabError::Config(
            "classifier input too small for the conv/pool stack".into(),
        ));
    }
    Ok((h, w))
}

/// Time-axis window of the average-pooling stem used in features
/// mode. Encoder features carry their class evidence in the coarse
/// per-step trajectory, not in step-level texture, so the stack
/// averages time down before the first conv; the largest window whose
/// output still fits the conv/pool stack is chosen (1 = no stem, which
/// also keeps raw mode unchanged). Deterministic in the input shape,
/// so init and forward always agree.
fn stem_window(mode: InputMode, h: usize, w: usize) -> usize {
    if mode == InputMode::Raw {
        return 1;
    }
    [8usize, 4, 2]
        .into_iter()
        .find(|&k| h % k == 0 && spatial_plan(h / k, w).is_ok())
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Classifier {
    arch: Architecture,
    mode: InputMode,
    input_shape: [usize; 3],
    params: ParamSet,
    seed: u64,
}

impl Classifier {
    /// Deterministically initialize a classifier for `input_shape`
    /// (`[1, H, W]`). Weights are uniform in ±1/√fan_in, biases zero.
    pub fn random_init(
        arch: Architecture,
        mode: InputMode,
        input_shape: [usize; 3],
        seed: u64,
    ) -> Result<Self> {
        if input_shape[0] != 1 {
            return Err(LabError::Config(format!(
                "classifier expects a single input channel, got {}",
                input_shape[0]
            )));
        }
        let stem = stem_window(mode, input_shape[1], input_shape[2]);
        let (fh, fw) = spatial_plan(input_shape[1] / stem, input_shape[2])?;
        let flat = CHANNELS * fh * fw;
        let mut rng = seeds::seeded_rng(seed, &format!("classifier/{arch}/init"));
        let mut params = ParamSet::new();
        let p = arch.prefix();

        fn conv(
            params: &mut ParamSet,
            rng: &mut impl rand::Rng,
            name: &str,
            c_in: usize,
            c_out: usize,
        ) {
            let fan_in = c_in * 9;
            let scale = 1.0 / (fan_in as f64).sqrt();
            params.insert(
                format!("{name}.weight"),
                Tensor::uniform(vec![c_out, c_in, 3, 3], scale, rng),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        }
        fn linear(
            params: &mut ParamSet,
            rng: &mut impl rand::Rng,
            name: &str,
            d_in: usize,
            d_out: usize,
        ) {
            let scale = 1.0 / (d_in as f64).sqrt();
            params.insert(
                format!("{name}.weight"),
                Tensor::uniform(vec![d_in, d_out], scale, rng),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![d_out]));
        }

        match arch {
            // Max-feature-map convs emit 2×CHANNELS and halve back.
            Architecture::A => {
                conv(&mut params, &mut rng, &format!("{p}_conv1"), 1, 2 * CHANNELS);
                conv(
                    &mut params,
                    &mut rng,
                    &format!("{p}_conv2"),
                    CHANNELS,
                    2 * CHANNELS,
                );
            }
            // SE convs emit CHANNELS, gated by a two-layer bottleneck.
            Architecture::B => {
                conv(&mut params, &mut rng, &format!("{p}_conv1"), 1, CHANNELS);
                conv(
                    &mut params,
                    &mut rng,
                    &format!("{p}_conv2"),
                    CHANNELS,
                    CHANNELS,
                );
                for block in 1..=2 {
                    linear(
                        &mut params,
                        &mut rng,
                        &format!("{p}_block{block}.squeeze"),
                        CHANNELS,
                        SE_BOTTLENECK,
                    );
                    linear(
                        &mut params,
                        &mut rng,
                        &format!("{p}_block{block}.excite"),
                        SE_BOTTLENECK,
                        CHANNELS,
                    );
                }
            }
        }
        linear(&mut params, &mut rng, &format!("{p}_fc1"), flat, HIDDEN);
        linear(&mut params, &mut rng, &format!("{p}_fc2"), HIDDEN, CLASSES);

        Ok(Classifier {
            arch,
            mode,
            input_shape,
            params,
            seed,
        })
    }

    /// Assemble a classifier from existing parameters (e.g. after
    /// joint training against a merged parameter set).
    pub fn from_parts(
        arch: Architecture,
        mode: InputMode,
        input_shape: [usize; 3],
        params: ParamSet,
        seed: u64,
    ) -> Result<Self> {
        let p = arch.prefix();
        for required in [format!("{p}_conv1.weight"), format!("{p}_fc2.bias")] {
            if !params.contains(&required) {
                return Err(LabError::Config(format!(
                    "classifier parameter set is missing '{required}'"
                )));
            }
        }
        Ok(Classifier {
            arch,
            mode,
            input_shape,
            params,
            seed,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn mode(&self) -> InputMode {
        self.mode
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Identifier recorded in adversarial pair files, e.g. `"A-raw"`.
    pub fn model_id(&self) -> String {
        format!("{}-{}", self.arch, self.mode)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(LabError::Data(format!(
                "classifier {} expects input shape {:?}, got {:?}",
                self.model_id(),
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Build the forward pass on a tape; `input` must be `[1, H, W]`.
    pub fn forward_logits(&self, tape: &mut Tape, vars: &VarSet, input: Var) -> Result<Var> {
        Ok(forward_logits_plain(self.arch, self.mode, tape, vars, input)?)
    }

    /// Class logits for one input.
    pub fn logits(&self, input: &Tensor) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &self.params, false);
        let x = tape.constant(input);
        let out = self.forward_logits(&mut tape, &vars, x)?;
        Ok(tape.data(out).to_vec())
    }

    /// Hard decision (argmax; ties resolve to the lower class index).
    pub fn predict(&self, input: &Tensor) -> Result<Label> {
        let logits = self.logits(input)?;
        let class = if logits[1] > logits[0] { 1 } else { 0 };
        Label::from_index(class)
    }

    /// Cross-entropy loss against `label` and its gradient with
    /// respect to the input, with parameters frozen. This is the
    /// quantity gradient-sign attacks climb.
    pub fn loss_input_grad(&self, input: &Tensor, label: Label) -> Result<(f64, Vec<f64>)> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &self.params, false);
        let x = tape.input(input, true);
        let logits = self.forward_logits(&mut tape, &vars, x)?;
        let loss = tape.cross_entropy(logits, &[label.index()])?;
        tape.backward(loss)?;
        let grad = tape.grad(x).expect("input was marked differentiable").to_vec();
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(LabError::NonFinite {
                context: format!("input gradient of classifier {}", self.model_id()),
            });
        }
        Ok((tape.scalar_value(loss), grad))
    }

    /// Fraction of examples classified correctly.
    pub fn accuracy(&self, examples: &[(Tensor, Label)]) -> Result<f64> {
        if examples.is_empty() {
            return Err(LabError::Data(
                "cannot measure accuracy on an empty set".into(),
            ));
        }
        let mut correct = 0usize;
        for (input, label) in examples {
            if self.predict(input)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// Architecture-specific conv block: conv → (max-feature-map | ReLU+SE).
fn conv_block(
    arch: Architecture,
    tape: &mut Tape,
    vars: &VarSet,
    input: Var,
    index: usize,
    stride: usize,
) -> std::result::Result<Var, TensorError> {
    let p = arch.prefix();
    let w = vars.var(&format!("{p}_conv{index}.weight"));
    let b = vars.var(&format!("{p}_conv{index}.bias"));
    let out = tape.conv2d(input, w, Some(b), stride, 1)?;
    match arch {
        Architecture::A => {
            let first = tape.slice(out, 0, 0, CHANNELS)?;
            let second = tape.slice(out, 0, CHANNELS, CHANNELS)?;
            tape.maximum(first, second)
        }
        Architecture::B => {
            let act = tape.relu(out);
            let pooled = tape.global_avg_pool(act)?;
            let row = tape.reshape(pooled, vec![1, CHANNELS])?;
            let sq_w = vars.var(&format!("{p}_block{index}.squeeze.weight"));
            let sq_b = vars.var(&format!("{p}_block{index}.squeeze.bias"));
            let ex_w = vars.var(&format!("{p}_block{index}.excite.weight"));
            let ex_b = vars.var(&format!("{p}_block{index}.excite.bias"));
            let s = tape.matmul(row, sq_w)?;
            let s = tape.add(s, sq_b)?;
            let s = tape.relu(s);
            let e = tape.matmul(s, ex_w)?;
            let e = tape.add(e, ex_b)?;
            let gate = tape.sigmoid(e);
            let gate = tape.reshape(gate, vec![CHANNELS])?;
            tape.scale_channels(act, gate)
        }
    }
}

/// Shared classifier skeleton: [features-mode time-averaging stem] →
/// block1 (stride 2) → pool2 → block2 → pool2 → flatten → fc → ReLU →
/// fc. Returns `[1, CLASSES]` logits.
pub(crate) fn forward_logits_plain(
    arch: Architecture,
    mode: InputMode,
    tape: &mut Tape,
    vars: &VarSet,
    input: Var,
) -> std::result::Result<Var, TensorError> {
    let p = arch.prefix();
    let shape = tape.shape(input);
    let stem = stem_window(mode, shape[1], shape[2]);
    let input = if stem > 1 {
        tape.avg_pool2d(input, stem, 1)?
    } else {
        input
    };
    let h = conv_block(arch, tape, vars, input, 1, 2)?;
    let h = tape.max_pool2d(h, 2)?;
    let h = conv_block(arch, tape, vars, h, 2, 1)?;
    let h = tape.max_pool2d(h, 2)?;
    let flat_len = tape.numel(h);
    let flat = tape.reshape(h, vec![1, flat_len])?;
    let h = tape.matmul(flat, vars.var(&format!("{p}_fc1.weight")))?;
    let h = tape.add(h, vars.var(&format!("{p}_fc1.bias")))?;
    let h = tape.relu(h);
    let h = tape.matmul(h, vars.var(&format!("{p}_fc2.weight")))?;
    tape.add(h, vars.var(&format!("{p}_fc2.bias")))
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            seed: 42,
        }
    }
}

/// Per-epoch training curve.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
}

/// Supervised training with cross-entropy and momentum SGD.
/// Deterministic given the seed; examples are visited in a seeded
/// shuffled order, strictly sequentially.
pub fn train(
    model: &mut Classifier,
    train_set: &[(Tensor, Label)],
    dev_set: &[(Tensor, Label)],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if train_set.is_empty() {
        return Err(LabError::Data("cannot train on an empty corpus".into()));
    }
    if config.batch_size == 0 || config.lr <= 0.0 {
        return Err(LabError::Config(
            "train batch_size and lr must be positive".into(),
        ));
    }
    for (input, _) in train_set.iter().chain(dev_set) {
        model.check_input(input)?;
    }

    let arch = model.arch;
    let mode = model.mode;
    let mut optimizer = SgdMomentum::new(config.lr, config.momentum);
    let mut shuffle_rng = seeds::seeded_rng(config.seed, "train/shuffle");
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let loss = batch_mean_grads(&mut model.params, batch.len(), |params, i| {
                let (input, label) = &train_set[batch[i]];
                let mut tape = Tape::new();
                let vars = bind_params(&mut tape, params, true);
                let x = tape.constant(input);
                let logits = forward_logits_plain(arch, mode, &mut tape, &vars, x)?;
                let loss = tape.cross_entropy(logits, &[label.index()])?;
                tape.backward(loss)?;
                Ok((tape.scalar_value(loss), collect_grads(&tape, &vars)?))
            })?;
            optimizer.step(&mut model.params)?;
            epoch_loss += loss;
            batches += 1;
        }
        model
            .params
            .ensure_finite(&format!("classifier parameters after epoch {epoch}"))?;
        history.train_loss.push(epoch_loss / batches as f64);
        if !dev_set.is_empty() {
            history.dev_accuracy.push(model.accuracy(dev_set)?);
        }
    }
    Ok(history)
}

/// Convert labeled spectrograms into raw-mode training pairs.
pub fn raw_examples(examples: &[LabeledExample]) -> Vec<(Tensor, Label)> {
    examples
        .iter()
        .map(|e| (e.spec.to_image_tensor(), e.label))
        .collect()
}

// ── Checkpointing ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ClassifierCheckpoint {
    kind: String,
    arch: Architecture,
    mode: InputMode,
    input_shape: [usize; 3],
    seed: u64,
    params: ParamSet,
}

pub const CLASSIFIER_KIND: &str = "classifier";

pub fn save_classifier(path: &Path, model: &Classifier) -> Result<()> {
    checkpoint::save_json(
        path,
        &ClassifierCheckpoint {
            kind: CLASSIFIER_KIND.to_string(),
            arch: model.arch,
            mode: model.mode,
            input_shape: model.input_shape,
            seed: model.seed,
            params: model.params.clone(),
        },
    )
}

/// Load a classifier; when `expected` is given, reject a checkpoint
/// whose architecture or input mode differs from the requested role.
pub fn load_classifier(
    path: &Path,
    expected: Option<(Architecture, InputMode)>,
) -> Result<Classifier> {
    let ckpt: ClassifierCheckpoint = checkpoint::load_json(path)?;
    checkpoint::ensure_kind(path, &ckpt.kind, CLASSIFIER_KIND)?;
    if let Some((arch, mode)) = expected {
        if arch != ckpt.arch || mode != ckpt.mode {
            return Err(LabError::Config(format!(
                "checkpoint {} holds a {}-{} classifier, expected {}-{}",
                path.display(),
                ckpt.arch,
                ckpt.mode,
                arch,
                mode
            )));
        }
    }
    Ok(Classifier {
        arch: ckpt.arch,
        mode: ckpt.mode,
        input_shape: ckpt.input_shape,
        params: ckpt.params,
        seed: ckpt.seed,
    })
}
