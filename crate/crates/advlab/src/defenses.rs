//! Passive defenses and the defender ablation suite.
//!
//! Two families: inference-time smoothing filters (Gaussian, median,
//! mean — all 3×3 with edge replication by default) and cascade
//! defenders that feed the classifier the final hidden state of a
//! frozen transformer encoder instead of the raw spectrogram.
//!
//! The suite builds seven named arms per target architecture:
//! `mel` (no defense), `gaussian`/`median`/`mean` (the mel classifier
//! behind a filter), `mock` (pretrained frozen encoder), `rand`
//! (random-init frozen encoder) and `scratch` (encoder and classifier
//! trained jointly from scratch on labels, with the pre-training epoch
//! budget added to its schedule so the comparison is compute-fair).

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::data::{Label, LabeledExample, Spectrogram};
use crate::encoder::{stack_frames, EncoderConfig, EncoderModel};
use crate::error::{LabError, Result};
use crate::models::{train, Architecture, Classifier, InputMode, TrainConfig, TrainHistory};
use crate::seeds;
use crate::tensor::{
    batch_mean_grads, bind_params, collect_grads, ParamSet, SgdMomentum, Tape, Tensor,
};

// ── Smoothing filters ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Gaussian,
    Median,
    Mean,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterKind::Gaussian => write!(f, "gaussian"),
            FilterKind::Median => write!(f, "median"),
            FilterKind::Mean => write!(f, "mean"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterKind,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Gaussian width; ignored by median and mean.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_kernel() -> usize {
    3
}

fn default_sigma() -> f64 {
    1.0
}

impl FilterConfig {
    pub fn new(kind: FilterKind) -> Self {
        FilterConfig {
            kind,
            kernel_size: default_kernel(),
            sigma: default_sigma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(LabError::Config(format!(
                "filter kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(LabError::Config(format!(
                "filter sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Normalized, truncated Gaussian weights for a k×k window.
fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut weights = Vec::with_capacity(k * k);
    for u in -r..=r {
        for v in -r..=r {
            let d2 = (u * u + v * v) as f64;
            weights.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// 2D sliding-window smoothing with edge replication padding; the
/// output has the same shape as the input.
pub fn apply_filter(spec: &Spectrogram, config: &FilterConfig) -> Result<Spectrogram> {
    config.validate()?;
    let k = config.kernel_size;
    let (frames, bins) = (spec.frames(), spec.bins());
    if k > frames || k > bins {
        return Err(LabError::Config(format!(
            "filter kernel {k} exceeds spectrogram dimensions {frames}x{bins}"
        )));
    }
    let r = (k / 2) as isize;
    let kernel = match config.kind {
        FilterKind::Gaussian => gaussian_kernel(k, config.sigma),
        FilterKind::Mean => vec![1.0 / (k * k) as f64; k * k],
        FilterKind::Median => Vec::new(),
    };
    let clamp = |i: isize, limit: usize| i.clamp(0, limit as isize - 1) as usize;
    let mut out = Vec::with_capacity(frames * bins);
    let mut window = Vec::with_capacity(k * k);
    for t in 0..frames as isize {
        for f in 0..bins as isize {
            window.clear();
            for u in -r..=r {
                for v in -r..=r {
                    window.push(spec.get(clamp(t + u, frames), clamp(f + v, bins)));
                }
            }
            let value = match config.kind {
                FilterKind::Median => {
                    window.sort_unstable_by(f64::total_cmp);
                    window[window.len() / 2] // k odd ⇒ k² odd, true median
                }
                _ => window.iter().zip(&kernel).map(|(x, w)| x * w).sum(),
            };
            out.push(value);
        }
    }
    Spectrogram::new(frames, bins, out)
}

// ── Defenders ───────────────────────────────────────────────────────

/// What a defender does to the spectrogram before classification.
#[derive(Debug, Clone)]
pub enum FrontEnd {
    Identity,
    Filter(FilterConfig),
    Encoder {
        model: Box<EncoderModel>,
        stack_factor: usize,
    },
}

impl FrontEnd {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FrontEnd::Identity => "identity",
            FrontEnd::Filter(_) => "filter",
            FrontEnd::Encoder { .. } => "encoder",
        }
    }

    fn expected_mode(&self) -> InputMode {
        match self {
            FrontEnd::Identity | FrontEnd::Filter(_) => InputMode::Raw,
            FrontEnd::Encoder { .. } => InputMode::Features,
        }
    }
}

/// A named front-end/classifier cascade. The input-mode invariant is
/// enforced here, at construction, so prediction can never pair an
/// encoder with a raw-input classifier.
#[derive(Debug, Clone)]
pub struct Defender {
    name: String,
    front_end: FrontEnd,
    classifier: Classifier,
}

impl Defender {
    pub fn new(name: impl Into<String>, front_end: FrontEnd, classifier: Classifier) -> Result<Self> {
        let name = name.into();
        if classifier.mode() != front_end.expected_mode() {
            return Err(LabError::Config(format!(
                "defender '{name}': {} front-end requires a {} classifier, got {}",
                front_end.kind_name(),
                front_end.expected_mode(),
                classifier.mode()
            )));
        }
        if let FrontEnd::Filter(config) = &front_end {
            config.validate()?;
        }
        Ok(Defender {
            name,
            front_end,
            classifier,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn front_end(&self) -> &FrontEnd {
        &self.front_end
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// Apply the front-end and classify. Pure: no state is mutated.
    pub fn predict(&self, spec: &Spectrogram) -> Result<(Vec<f64>, Label)> {
        let input = match &self.front_end {
            FrontEnd::Identity => spec.to_image_tensor(),
            FrontEnd::Filter(config) => apply_filter(spec, config)?.to_image_tensor(),
            FrontEnd::Encoder {
                model,
                stack_factor,
            } => model.features(spec, *stack_factor)?,
        };
        let logits = self.classifier.logits(&input)?;
        let class = if logits[1] > logits[0] { 1 } else { 0 };
        Ok((logits, Label::from_index(class)?))
    }

    /// Cross-entropy loss and its gradient with respect to the raw
    /// spectrogram, differentiated through the entire cascade. This is
    /// the white-box view of a defended model: attacking a defender
    /// directly (rather than transferring from a surrogate) climbs
    /// exactly this gradient. Smoothing filters are non-differentiable
    /// preprocessing here, so filter front-ends are rejected.
    pub fn loss_input_grad(&self, spec: &Spectrogram, label: Label) -> Result<(f64, Vec<f64>)> {
        match &self.front_end {
            FrontEnd::Identity => self
                .classifier
                .loss_input_grad(&spec.to_image_tensor(), label),
            FrontEnd::Filter(_) => Err(LabError::Config(format!(
                "defender '{}': smoothing front-ends have no input gradient",
                self.name
            ))),
            FrontEnd::Encoder {
                model,
                stack_factor,
            } => {
                if spec.frames() % stack_factor != 0 {
                    return Err(LabError::Data(format!(
                        "defender '{}': {} frames do not stack by {stack_factor} without padding",
                        self.name,
                        spec.frames()
                    )));
                }
                // Stacking frames of an exact multiple is a row-major
                // reshape, so the gradient of the stacked input is
                // laid out exactly like the spectrogram values.
                let stacked = stack_frames(spec, *stack_factor)?.to_tensor();
                let mut tape = Tape::new();
                let enc_vars = bind_params(&mut tape, model.params(), false);
                let clf_vars = bind_params(&mut tape, self.classifier.params(), false);
                let x = tape.input(&stacked, true);
                let layers =
                    crate::encoder::forward_layers_plain(model.config(), &mut tape, &enc_vars, x)?;
                let h_last = *layers.last().expect("encoder has ≥ 1 layer");
                let shape = tape.shape(h_last).to_vec();
                let image = tape.reshape(h_last, vec![1, shape[0], shape[1]])?;
                let logits = crate::models::forward_logits_plain(
                    self.classifier.arch(),
                    InputMode::Features,
                    &mut tape,
                    &clf_vars,
                    image,
                )?;
                let loss = tape.cross_entropy(logits, &[label.index()])?;
                tape.backward(loss)?;
                let grad = tape.grad(x).expect("input was marked differentiable").to_vec();
                if !grad.iter().all(|g| g.is_finite()) {
                    return Err(LabError::NonFinite {
                        context: format!("input gradient of defender {}", self.name),
                    });
                }
                Ok((tape.scalar_value(loss), grad))
            }
        }
    }

    /// Fraction of labeled spectrograms classified correctly.
    pub fn clean_accuracy(&self, examples: &[LabeledExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(LabError::Data(
                "cannot measure accuracy on an empty set".into(),
            ));
        }
        let correct: usize = examples
            .par_iter()
            .map(|e| {
                self.predict(&e.spec)
                    .map(|(_, label)| usize::from(label == e.label))
            })
            .sum::<Result<usize>>()?;
        Ok(correct as f64 / examples.len() as f64)
    }
}

// ── Suite construction ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Classifier training schedule shared by mel, mock and rand arms.
    pub train: TrainConfig,
    /// Joint epochs for the scratch arm; compute-fair default is the
    /// classifier epochs plus the encoder pre-training epochs.
    pub scratch_epochs: usize,
    pub stack_factor: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let scratch_epochs = train.epochs + crate::encoder::PretrainConfig::default().epochs;
        SuiteConfig {
            train,
            scratch_epochs,
            stack_factor: 2,
            seed: 42,
        }
    }
}

/// All defender arms for both architectures, plus the shared frozen
/// random-init encoder (needed again by the layer diagnostics).
#[derive(Debug, Clone)]
pub struct DefenderSuite {
    pub defenders: Vec<Defender>,
    pub random_encoder: EncoderModel,
    /// Per-arm training curves, keyed by defender name (filter arms
    /// share the mel entry and are omitted).
    pub histories: BTreeMap<String, TrainHistory>,
}

impl DefenderSuite {
    pub fn get(&self, name: &str) -> Option<&Defender> {
        self.defenders.iter().find(|d| d.name() == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.defenders.iter().map(Defender::name).collect()
    }
}

/// The seven arm names for one architecture, in report order.
pub fn arm_names(arch: Architecture) -> [String; 7] {
    ["mel", "gaussian", "median", "mean", "mock", "rand", "scratch"]
        .map(|arm| format!("{arch}-{arm}"))
}

/// Encode every example with a frozen encoder, in parallel (pure
/// inference; outputs are independent of thread count and order).
pub fn encode_examples(
    encoder: &EncoderModel,
    examples: &[LabeledExample],
    stack_factor: usize,
) -> Result<Vec<(Tensor, Label)>> {
    examples
        .par_iter()
        .map(|e| Ok((encoder.features(&e.spec, stack_factor)?, e.label)))
        .collect()
}

fn feature_shape(
    encoder: &EncoderModel,
    examples: &[LabeledExample],
    stack_factor: usize,
) -> Result<[usize; 3]> {
    let first = examples
        .first()
        .ok_or_else(|| LabError::Data("cannot build a suite from an empty corpus".into()))?;
    let steps = stack_frames(&first.spec, stack_factor)?.steps();
    Ok([1, steps, encoder.config().model_dim])
}

/// Build all 14 defender arms (7 per architecture) from a labeled
/// corpus and a pretrained encoder. Training is sequential and fully
/// seeded; the pretrained and random encoders are frozen — only the
/// scratch arm ever updates encoder weights, and it gets its own.
pub fn build_defender_suite(
    train_set: &[LabeledExample],
    dev_set: &[LabeledExample],
    pretrained: &EncoderModel,
    config: &SuiteConfig,
) -> Result<DefenderSuite> {
    if train_set.is_empty() {
        return Err(LabError::Data("cannot build a suite from an empty corpus".into()));
    }
    let raw_train: Vec<(Tensor, Label)> = train_set
        .iter()
        .map(|e| (e.spec.to_image_tensor(), e.label))
        .collect();
    let raw_dev: Vec<(Tensor, Label)> = dev_set
        .iter()
        .map(|e| (e.spec.to_image_tensor(), e.label))
        .collect();
    let raw_shape = {
        let s = raw_train[0].0.shape();
        [s[0], s[1], s[2]]
    };

    let random_encoder = EncoderModel::random_init(
        pretrained.config(),
        seeds::derive_seed(config.seed, "suite/rand-encoder"),
    )?;
    let feat_shape = feature_shape(pretrained, train_set, config.stack_factor)?;

    // Features of frozen encoders are shared across architectures.
    let mock_train = encode_examples(pretrained, train_set, config.stack_factor)?;
    let mock_dev = encode_examples(pretrained, dev_set, config.stack_factor)?;
    let rand_train = encode_examples(&random_encoder, train_set, config.stack_factor)?;
    let rand_dev = encode_examples(&random_encoder, dev_set, config.stack_factor)?;

    let mut defenders = Vec::with_capacity(14);
    let mut histories = BTreeMap::new();
    for arch in [Architecture::A, Architecture::B] {
        let arm_seed = |arm: &str| seeds::derive_seed(config.seed, &format!("suite/{arch}/{arm}"));
        let train_cfg = |arm: &str| TrainConfig {
            seed: seeds::derive_seed(config.seed, &format!("suite/{arch}/{arm}/train")),
            ..config.train.clone()
        };

        // Mel: undefended raw classifier; the three filters reuse it.
        let mut mel =
            Classifier::random_init(arch, InputMode::Raw, raw_shape, arm_seed("mel"))?;
        let history = train(&mut mel, &raw_train, &raw_dev, &train_cfg("mel"))?;
        histories.insert(format!("{arch}-mel"), history);
        for kind in [FilterKind::Gaussian, FilterKind::Median, FilterKind::Mean] {
            defenders.push(Defender::new(
                format!("{arch}-{kind}"),
                FrontEnd::Filter(FilterConfig::new(kind)),
                mel.clone(),
            )?);
        }
        defenders.push(Defender::new(
            format!("{arch}-mel"),
            FrontEnd::Identity,
            mel,
        )?);

        // Mock and rand: classifiers on frozen-encoder features.
        for (arm, encoder, feats, dev_feats) in [
            ("mock", pretrained, &mock_train, &mock_dev),
            ("rand", &random_encoder, &rand_train, &rand_dev),
        ] {
            let mut clf =
                Classifier::random_init(arch, InputMode::Features, feat_shape, arm_seed(arm))?;
            let history = train(&mut clf, feats, dev_feats, &train_cfg(arm))?;
            histories.insert(format!("{arch}-{arm}"), history);
            defenders.push(Defender::new(
                format!("{arch}-{arm}"),
                FrontEnd::Encoder {
                    model: Box::new(encoder.clone()),
                    stack_factor: config.stack_factor,
                },
                clf,
            )?);
        }

        // Scratch: joint supervised training from random init.
        let (scratch_encoder, scratch_clf, history) = train_scratch(
            arch,
            train_set,
            pretrained.config(),
            feat_shape,
            config,
            arm_seed("scratch"),
        )?;
        histories.insert(format!("{arch}-scratch"), history);
        defenders.push(Defender::new(
            format!("{arch}-scratch"),
            FrontEnd::Encoder {
                model: Box::new(scratch_encoder),
                stack_factor: config.stack_factor,
            },
            scratch_clf,
        )?);
    }

    // Report order: mel, filters, mock, rand, scratch per architecture.
    let order: Vec<String> = [Architecture::A, Architecture::B]
        .iter()
        .flat_map(|&a| arm_names(a))
        .collect();
    defenders.sort_by_key(|d| order.iter().position(|n| n == d.name()));

    Ok(DefenderSuite {
        defenders,
        random_encoder,
        histories,
    })
}

/// Joint label-supervised training of an encoder/classifier cascade
/// from random initialization (no masked pre-training). Returns the
/// trained pair and the per-epoch loss curve.
pub fn train_scratch(
    arch: Architecture,
    train_set: &[LabeledExample],
    encoder_config: &EncoderConfig,
    feat_shape: [usize; 3],
    config: &SuiteConfig,
    seed: u64,
) -> Result<(EncoderModel, Classifier, TrainHistory)> {
    if train_set.is_empty() {
        return Err(LabError::Data("cannot train on an empty corpus".into()));
    }
    let encoder =
        EncoderModel::random_init(encoder_config, seeds::derive_seed(seed, "encoder"))?;
    let classifier = Classifier::random_init(
        arch,
        InputMode::Features,
        feat_shape,
        seeds::derive_seed(seed, "classifier"),
    )?;

    let sequences: Vec<(Tensor, Label)> = train_set
        .iter()
        .map(|e| {
            stack_frames(&e.spec, config.stack_factor).map(|s| (s.to_tensor(), e.label))
        })
        .collect::<Result<_>>()?;

    // The reconstruction head never appears in the supervised loss, so
    // keep it out of the optimized set (it would otherwise demand a
    // gradient it can never receive). It stays at its initialization.
    let mut trunk = ParamSet::new();
    let mut head = ParamSet::new();
    for (name, tensor) in encoder.params().iter() {
        if name.starts_with("head.") {
            head.insert(name.clone(), tensor.clone());
        } else {
            trunk.insert(name.clone(), tensor.clone());
        }
    }
    let enc_config = encoder_config.clone();
    let mut joint = ParamSet::new();
    joint.merge_prefixed("enc", trunk);
    joint.merge_prefixed("clf", classifier.params().clone());

    let mut optimizer = SgdMomentum::new(config.train.lr, config.train.momentum);
    let mut shuffle_rng = seeds::seeded_rng(seed, "scratch/shuffle");
    let mut history = TrainHistory::default();
    for epoch in 0..config.scratch_epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.train.batch_size) {
            let loss = batch_mean_grads(&mut joint, batch.len(), |params, i| {
                let (seq, label) = &sequences[batch[i]];
                let mut tape = Tape::new();
                let vars = bind_params(&mut tape, params, true);
                let enc_vars = vars.scoped("enc");
                let clf_vars = vars.scoped("clf");
                let input = tape.constant(seq);
                let layers =
                    crate::encoder::forward_layers_plain(&enc_config, &mut tape, &enc_vars, input)?;
                let h_last = *layers.last().expect("≥1 layer");
                let shape = tape.shape(h_last).to_vec();
                let image = tape.reshape(h_last, vec![1, shape[0], shape[1]])?;
                let logits =
                    crate::models::forward_logits_plain(arch, InputMode::Features, &mut tape, &clf_vars, image)?;
                let loss = tape.cross_entropy(logits, &[label.index()])?;
                tape.backward(loss)?;
                Ok((tape.scalar_value(loss), collect_grads(&tape, &vars)?))
            })?;
            optimizer.step(&mut joint)?;
            epoch_loss += loss;
            batches += 1;
        }
        joint.ensure_finite(&format!("scratch parameters after epoch {epoch}"))?;
        history.train_loss.push(epoch_loss / batches as f64);
    }

    let mut trained_trunk = joint.extract_prefixed("enc");
    for (name, tensor) in head.iter() {
        trained_trunk.insert(name.clone(), tensor.clone());
    }
    let encoder = EncoderModel::from_parts(
        encoder_config.clone(),
        trained_trunk,
        seeds::derive_seed(seed, "encoder"),
    )?;
    let classifier = Classifier::from_parts(
        arch,
        InputMode::Features,
        feat_shape,
        joint.extract_prefixed("clf"),
        seeds::derive_seed(seed, "classifier"),
    )?;
    Ok((encoder, classifier, history))
}
