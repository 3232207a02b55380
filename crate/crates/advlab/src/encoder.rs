//! Mockingjay-lite: a small transformer encoder pre-trained by masked
//! frame prediction with an L1 reconstruction loss.
//!
//! Spectrograms are first downsampled by stacking `stack_factor`
//! consecutive frames into one step. During pre-training, contiguous
//! segments covering ~15% of the steps are corrupted — zeroed,
//! replaced with other random steps, or kept, with probabilities
//! 0.8/0.1/0.1 sampled once per utterance — and the encoder learns to
//! reconstruct the uncorrupted input from the corrupted one. The
//! per-layer hidden states h₀…h_K feed the LNSR diagnostic; h_K is the
//! representation consumed by the cascade defender.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint;
use crate::data::Spectrogram;
use crate::error::{LabError, Result};
use crate::seeds;
use crate::tensor::{
    batch_mean_grads, bind_params, collect_grads, ParamSet, SgdMomentum, Tape, Tensor, Var, VarSet,
};

// ── Frame stacking ──────────────────────────────────────────────────

/// A sequence of stacked frames: `steps` rows of dimension `dim`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    steps: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FrameSequence {
    pub fn new(steps: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != steps * dim {
            return Err(LabError::Data(format!(
                "frame sequence {steps}x{dim} expects {} values, got {}",
                steps * dim,
                values.len()
            )));
        }
        Ok(FrameSequence { steps, dim, values })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.steps, self.dim], self.values.clone())
            .expect("frame sequence is internally consistent")
    }
}

/// Stack `r_factor` consecutive frames into one step. If T is not
/// divisible by `r_factor`, the tail is padded with zero frames (the
/// default corpus has T=128, which divides evenly).
pub fn stack_frames(spec: &Spectrogram, r_factor: usize) -> Result<FrameSequence> {
    if r_factor == 0 {
        return Err(LabError::Config("stack_factor must be ≥ 1".into()));
    }
    let steps = spec.frames().div_ceil(r_factor);
    let dim = spec.bins() * r_factor;
    let mut values = vec![0.0; steps * dim];
    for frame in 0..spec.frames() {
        let step = frame / r_factor;
        let offset = (frame % r_factor) * spec.bins();
        for bin in 0..spec.bins() {
            values[step * dim + offset + bin] = spec.get(frame, bin);
        }
    }
    FrameSequence::new(steps, dim, values)
}

/// Invert [`stack_frames`]: recover a spectrogram of
/// `steps × r_factor` frames (including any zero padding).
pub fn unstack_frames(seq: &FrameSequence, r_factor: usize) -> Result<Spectrogram> {
    if r_factor == 0 || seq.dim % r_factor != 0 {
        return Err(LabError::Data(format!(
            "cannot unstack dim {} by factor {r_factor}",
            seq.dim
        )));
    }
    let bins = seq.dim / r_factor;
    let frames = seq.steps * r_factor;
    let mut values = vec![0.0; frames * bins];
    for frame in 0..frames {
        let step = frame / r_factor;
        let offset = (frame % r_factor) * bins;
        values[frame * bins..(frame + 1) * bins]
            .copy_from_slice(&seq.values[step * seq.dim + offset..step * seq.dim + offset + bins]);
    }
    Spectrogram::new(frames, bins, values)
}

// ── Masking policy ──────────────────────────────────────────────────

/// Which corruption was applied to the selected steps of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskCase {
    /// Selected steps zeroed.
    Zero,
    /// Selected steps replaced by other random steps of the same
    /// utterance.
    Random,
    /// Selected steps left unchanged (still marked in the mask).
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingPolicy {
    pub select_rate: f64,
    pub zero_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
    /// Contiguous segment length (C_num).
    pub segment_len: usize,
    /// Frames stacked per step (R_factor).
    pub stack_factor: usize,
    /// Sample the corruption case per segment instead of once per
    /// utterance.
    pub per_segment_case: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_rate: 0.15,
            zero_prob: 0.80,
            random_prob: 0.10,
            keep_prob: 0.10,
            segment_len: 3,
            stack_factor: 2,
            per_segment_case: false,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let total = self.zero_prob + self.random_prob + self.keep_prob;
        if (total - 1.0).abs() > 1e-9 {
            return Err(LabError::Config(format!(
                "masking case probabilities must sum to 1, got {total}"
            )));
        }
        if [self.zero_prob, self.random_prob, self.keep_prob]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(LabError::Config(
                "masking case probabilities must lie in [0,1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.select_rate) {
            return Err(LabError::Config(format!(
                "select_rate must lie in [0,1), got {}",
                self.select_rate
            )));
        }
        if self.segment_len == 0 || self.stack_factor == 0 {
            return Err(LabError::Config(
                "segment_len and stack_factor must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Result of corrupting one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingOutcome {
    pub corrupted: FrameSequence,
    /// True at every selected step.
    pub mask: Vec<bool>,
    /// Case(s) applied, one entry per segment (all equal unless
    /// `per_segment_case`); empty when nothing was selected.
    pub cases: Vec<MaskCase>,
}

/// Select ⌈select_rate·steps⌉ steps as disjoint contiguous segments of
/// `segment_len` (the last segment may be shorter to hit the count
/// exactly) and corrupt them according to the sampled case. Segments
/// are separated by at least one unselected step whenever the step
/// count allows it, so the segment structure is recoverable from the
/// mask.
pub fn apply_masking(
    seq: &FrameSequence,
    policy: &MaskingPolicy,
    seed: u64,
) -> Result<MaskingOutcome> {
    policy.validate()?;
    let steps = seq.steps;
    if policy.segment_len > steps {
        return Err(LabError::Config(format!(
            "segment_len {} exceeds utterance steps {steps}",
            policy.segment_len
        )));
    }
    let target = (policy.select_rate * steps as f64).ceil() as usize;
    if target == 0 {
        return Ok(MaskingOutcome {
            corrupted: seq.clone(),
            mask: vec![false; steps],
            cases: Vec::new(),
        });
    }
    let mut rng = seeds::seeded_rng(seed, "masking");

    // Segment lengths in position order: full segments, short one last.
    let full = target / policy.segment_len;
    let rem = target % policy.segment_len;
    let mut lengths = vec![policy.segment_len; full];
    if rem > 0 {
        lengths.push(rem);
    }
    let n_seg = lengths.len();

    // Place segments left to right with slack distributed uniformly
    // over the n_seg+1 gaps (stars and bars). A minimum gap of one
    // step keeps segments identifiable; drop that requirement only if
    // the utterance is too short for it.
    let min_gap = if steps >= target + (n_seg - 1) { 1 } else { 0 };
    let slack = steps - target - (n_seg - 1) * min_gap;
    let gaps = sample_composition(&mut rng, slack, n_seg + 1);

    let mut mask = vec![false; steps];
    let mut segments = Vec::with_capacity(n_seg);
    let mut pos = gaps[0];
    for (i, &len) in lengths.iter().enumerate() {
        if i > 0 {
            pos += min_gap + gaps[i];
        }
        segments.push((pos, len));
        for m in &mut mask[pos..pos + len] {
            *m = true;
        }
        pos += len;
    }
    debug_assert!(pos + gaps[n_seg] == steps);

    // Sample the corruption case(s), then apply. Case B draws its
    // replacement steps from the original, uncorrupted sequence.
    let draw_case = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.gen();
        if u < policy.zero_prob {
            MaskCase::Zero
        } else if u < policy.zero_prob + policy.random_prob {
            MaskCase::Random
        } else {
            MaskCase::Keep
        }
    };
    let cases: Vec<MaskCase> = if policy.per_segment_case {
        segments.iter().map(|_| draw_case(&mut rng)).collect()
    } else {
        let case = draw_case(&mut rng);
        vec![case; n_seg]
    };

    let mut corrupted = seq.clone();
    for ((start, len), case) in segments.iter().zip(&cases) {
        for step in *start..start + len {
            match case {
                MaskCase::Zero => {
                    corrupted.values[step * seq.dim..(step + 1) * seq.dim].fill(0.0);
                }
                MaskCase::Random => {
                    let mut other = rng.gen_range(0..steps - 1);
                    if other >= step {
                        other += 1; // uniform over steps ≠ step
                    }
                    let src = seq.step(other).to_vec();
                    corrupted.values[step * seq.dim..(step + 1) * seq.dim].copy_from_slice(&src);
                }
                MaskCase::Keep => {}
            }
        }
    }

    Ok(MaskingOutcome {
        corrupted,
        mask,
        cases,
    })
}

/// Uniformly sample a composition of `total` into `parts` nonnegative
/// integers (stars and bars: choose parts−1 bars among total+parts−1
/// positions; the stars between consecutive bars are the parts).
fn sample_composition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    assert!(parts >= 1);
    if parts == 1 {
        return vec![total];
    }
    let positions = total + parts - 1;
    let mut bars = rand::seq::index::sample(rng, positions, parts - 1).into_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for &bar in &bars {
        out.push(bar - prev);
        prev = bar + 1;
    }
    out.push(positions - prev);
    out
}

// ── Encoder model ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Transformer layers (the K of the LNSR diagnostic).
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Stacked-frame dimension (bins × stack_factor).
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            input_dim: crate::data::BINS * 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.ff_dim == 0
            || self.input_dim == 0
        {
            return Err(LabError::Config(
                "encoder dimensions must be positive".into(),
            ));
        }
        if self.model_dim % self.heads != 0 {
            return Err(LabError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: ParamSet,
    seed: u64,
}

impl EncoderModel {
    /// Deterministic initialization: every weight uniform in
    /// ±1/√fan_in, biases zero, layer-norm scale one.
    pub fn random_init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::seeded_rng(seed, "encoder/init");
        let mut params = ParamSet::new();
        let d = config.model_dim;
        let mut linear = |params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            params.insert(
                format!("{name}.weight"),
                Tensor::uniform(vec![fan_in, fan_out], scale, &mut rng),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        };
        linear(&mut params, "input_proj", config.input_dim, d);
        for layer in 0..config.layers {
            linear(&mut params, &format!("layer{layer}.attn.qkv"), d, 3 * d);
            linear(&mut params, &format!("layer{layer}.attn.out"), d, d);
            linear(&mut params, &format!("layer{layer}.ff.in"), d, config.ff_dim);
            linear(&mut params, &format!("layer{layer}.ff.out"), config.ff_dim, d);
            for norm in ["norm1", "norm2"] {
                params.insert(
                    format!("layer{layer}.{norm}.gamma"),
                    Tensor::filled(vec![d], 1.0),
                );
                params.insert(
                    format!("layer{layer}.{norm}.beta"),
                    Tensor::zeros(vec![d]),
                );
            }
        }
        linear(&mut params, "head", d, config.input_dim);
        Ok(EncoderModel {
            config: config.clone(),
            params,
            seed,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_input(&self, seq: &FrameSequence) -> Result<()> {
        if seq.dim() != self.config.input_dim {
            return Err(LabError::Data(format!(
                "encoder expects stacked-frame dim {}, got {}",
                self.config.input_dim,
                seq.dim()
            )));
        }
        Ok(())
    }

    /// Build the transformer forward pass on a tape, returning the
    /// per-layer outputs h₁…h_K. `input` must be `[steps, input_dim]`.
    pub fn forward_layers(&self, tape: &mut Tape, vars: &VarSet, input: Var) -> Result<Vec<Var>> {
        Ok(forward_layers_plain(&self.config, tape, vars, input)?)
    }

    /// Reconstruction head: predict the uncorrupted stacked frames
    /// from h_K.
    pub fn forward_prediction(&self, tape: &mut Tape, vars: &VarSet, h_last: Var) -> Result<Var> {
        Ok(forward_prediction_plain(tape, vars, h_last)?)
    }

    /// Assemble a model from existing parameters (e.g. after joint
    /// training against a merged parameter set).
    pub fn from_parts(config: EncoderConfig, params: ParamSet, seed: u64) -> Result<Self> {
        config.validate()?;
        for required in ["input_proj.weight", "head.weight", "head.bias"] {
            if !params.contains(required) {
                return Err(LabError::Config(format!(
                    "encoder parameter set is missing '{required}'"
                )));
            }
        }
        Ok(EncoderModel {
            config,
            params,
            seed,
        })
    }

    /// Hidden states h₀…h_K for a spectrogram. h₀ is the stacked-frame
    /// input itself; h₁…h_K are the transformer layer outputs.
    pub fn encode(&self, spec: &Spectrogram, stack_factor: usize) -> Result<Vec<Tensor>> {
        let seq = stack_frames(spec, stack_factor)?;
        self.encode_sequence(&seq)
    }

    /// As [`EncoderModel::encode`], starting from stacked frames.
    pub fn encode_sequence(&self, seq: &FrameSequence) -> Result<Vec<Tensor>> {
        self.check_input(seq)?;
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &self.params, false);
        let input = tape.constant(&seq.to_tensor());
        let layers = self.forward_layers(&mut tape, &vars, input)?;
        let mut states = Vec::with_capacity(layers.len() + 1);
        states.push(seq.to_tensor());
        for layer in layers {
            states.push(tape.value(layer));
        }
        Ok(states)
    }

    /// Final representation h_K as a 1-channel image tensor
    /// `[1, steps, model_dim]` for the downstream classifier.
    pub fn features(&self, spec: &Spectrogram, stack_factor: usize) -> Result<Tensor> {
        let states = self.encode(spec, stack_factor)?;
        let last = states.last().expect("layers ≥ 1");
        let shape = last.shape().to_vec();
        Tensor::new(vec![1, shape[0], shape[1]], last.data().to_vec()).map_err(Into::into)
    }

    /// Average L1 reconstruction error on the given utterances
    /// (masked-step positions only when `masked_only`). Measures how
    /// well the model denoises held-out corruptions; no training.
    pub fn reconstruction_l1(
        &self,
        corpus: &[Spectrogram],
        policy: &MaskingPolicy,
        seed: u64,
        masked_only: bool,
    ) -> Result<f64> {
        if corpus.is_empty() {
            return Err(LabError::Data("empty corpus".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, spec) in corpus.iter().enumerate() {
            let seq = stack_frames(spec, policy.stack_factor)?;
            self.check_input(&seq)?;
            let outcome = apply_masking(&seq, policy, seeds::derive_seed(seed, &i.to_string()))?;
            let mut tape = Tape::new();
            let vars = bind_params(&mut tape, &self.params, false);
            let input = tape.constant(&outcome.corrupted.to_tensor());
            let layers = self.forward_layers(&mut tape, &vars, input)?;
            let pred = self.forward_prediction(&mut tape, &vars, *layers.last().expect("≥1"))?;
            let pred_values = tape.data(pred);
            for step in 0..seq.steps() {
                if masked_only && !outcome.mask[step] {
                    continue;
                }
                let target = seq.step(step);
                let got = &pred_values[step * seq.dim()..(step + 1) * seq.dim()];
                total += target
                    .iter()
                    .zip(got)
                    .map(|(t, p)| (t - p).abs())
                    .sum::<f64>();
                count += seq.dim();
            }
        }
        if count == 0 {
            return Err(LabError::Data(
                "no steps selected for reconstruction measurement".into(),
            ));
        }
        Ok(total / count as f64)
    }
}

/// Fixed sinusoidal positional encodings for `steps` positions of
/// `model_dim` channels.
fn positional_encoding(config: &EncoderConfig, steps: usize) -> Tensor {
    let d = config.model_dim;
    let mut values = vec![0.0; steps * d];
    for t in 0..steps {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            values[t * d + 2 * i] = (t as f64 * rate).sin();
            values[t * d + 2 * i + 1] = (t as f64 * rate).cos();
        }
    }
    Tensor::new(vec![steps, d], values).expect("consistent dims")
}

/// Transformer forward pass over bound parameters: input projection
/// plus positional encodings, then `layers` post-norm blocks of
/// multi-head self-attention and a ReLU feed-forward. Returns h₁…h_K.
pub(crate) fn forward_layers_plain(
    config: &EncoderConfig,
    tape: &mut Tape,
    vars: &VarSet,
    input: Var,
) -> std::result::Result<Vec<Var>, crate::tensor::TensorError> {
    let steps = tape.shape(input)[0];
    let d = config.model_dim;
    let heads = config.heads;
    let head_dim = d / heads;

    let w_in = vars.var("input_proj.weight");
    let b_in = vars.var("input_proj.bias");
    let proj = tape.matmul(input, w_in)?;
    let proj = tape.add(proj, b_in)?;
    let pe = tape.constant(&positional_encoding(config, steps));
    let mut h = tape.add(proj, pe)?;

    let mut states = Vec::with_capacity(config.layers);
    for layer in 0..config.layers {
        let name = |s: &str| format!("layer{layer}.{s}");
        // Self-attention with fused QKV projection.
        let qkv_w = vars.var(&name("attn.qkv.weight"));
        let qkv_b = vars.var(&name("attn.qkv.bias"));
        let qkv = tape.matmul(h, qkv_w)?;
        let qkv = tape.add(qkv, qkv_b)?;
        let mut head_outputs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = tape.slice(qkv, 1, hd * head_dim, head_dim)?;
            let k = tape.slice(qkv, 1, d + hd * head_dim, head_dim)?;
            let v = tape.slice(qkv, 1, 2 * d + hd * head_dim, head_dim)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scalar_mul(scores, 1.0 / (head_dim as f64).sqrt());
            let attn = tape.softmax_last(scaled)?;
            head_outputs.push(tape.matmul(attn, v)?);
        }
        let concat = tape.concat(&head_outputs, 1)?;
        let out_w = vars.var(&name("attn.out.weight"));
        let out_b = vars.var(&name("attn.out.bias"));
        let attn_out = tape.matmul(concat, out_w)?;
        let attn_out = tape.add(attn_out, out_b)?;
        let res1 = tape.add(h, attn_out)?;
        let n1 = tape.layer_norm(
            res1,
            vars.var(&name("norm1.gamma")),
            vars.var(&name("norm1.beta")),
            LAYER_NORM_EPS,
        )?;
        // Feed-forward.
        let f1 = tape.matmul(n1, vars.var(&name("ff.in.weight")))?;
        let f1 = tape.add(f1, vars.var(&name("ff.in.bias")))?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, vars.var(&name("ff.out.weight")))?;
        let f2 = tape.add(f2, vars.var(&name("ff.out.bias")))?;
        let res2 = tape.add(n1, f2)?;
        h = tape.layer_norm(
            res2,
            vars.var(&name("norm2.gamma")),
            vars.var(&name("norm2.beta")),
            LAYER_NORM_EPS,
        )?;
        states.push(h);
    }
    Ok(states)
}

fn forward_prediction_plain(
    tape: &mut Tape,
    vars: &VarSet,
    h_last: Var,
) -> std::result::Result<Var, crate::tensor::TensorError> {
    let pred = tape.matmul(h_last, vars.var("head.weight"))?;
    tape.add(pred, vars.var("head.bias"))
}

// ── Pre-training ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Restrict the L1 loss to masked steps only (default: all steps).
    pub masked_only: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            masked_only: false,
            seed: 42,
        }
    }
}

/// Masked-prediction pre-training. Returns the per-epoch mean L1 loss.
/// Deterministic given the seed; labels never enter.
pub fn pretrain(
    model: &mut EncoderModel,
    corpus: &[Spectrogram],
    policy: &MaskingPolicy,
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(LabError::Data("cannot pretrain on an empty corpus".into()));
    }
    policy.validate()?;
    if config.batch_size == 0 || config.lr <= 0.0 {
        return Err(LabError::Config(
            "pretrain batch_size and lr must be positive".into(),
        ));
    }
    let sequences: Vec<FrameSequence> = corpus
        .iter()
        .map(|s| stack_frames(s, policy.stack_factor))
        .collect::<Result<_>>()?;
    for seq in &sequences {
        model.check_input(seq)?;
        if policy.segment_len > seq.steps() {
            return Err(LabError::Config(format!(
                "segment_len {} exceeds utterance steps {}",
                policy.segment_len,
                seq.steps()
            )));
        }
    }

    let enc_config = model.config.clone();
    let mask_root = seeds::derive_seed(config.seed, "pretrain/mask");
    let mut optimizer = SgdMomentum::new(config.lr, config.momentum);
    let mut shuffle_rng = seeds::seeded_rng(config.seed, "pretrain/shuffle");
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let loss = batch_mean_grads(&mut model.params, batch.len(), |params, i| {
                let utterance = batch[i];
                let seq = &sequences[utterance];
                let mask_seed = seeds::derive_seed(mask_root, &format!("{epoch}/{utterance}"));
                let outcome = apply_masking(seq, policy, mask_seed)
                    .expect("masking inputs validated before training");
                let mut tape = Tape::new();
                let vars = bind_params(&mut tape, params, true);
                let input = tape.constant(&outcome.corrupted.to_tensor());
                let layers = forward_layers_plain(&enc_config, &mut tape, &vars, input)?;
                let pred =
                    forward_prediction_plain(&mut tape, &vars, *layers.last().expect("≥1"))?;
                let target = tape.constant(&seq.to_tensor());
                let loss = if config.masked_only {
                    masked_l1(&mut tape, pred, target, &outcome.mask)?
                } else {
                    tape.l1_mean(pred, target)?
                };
                tape.backward(loss)?;
                Ok((tape.scalar_value(loss), collect_grads(&tape, &vars)?))
            })?;
            optimizer.step(&mut model.params)?;
            epoch_loss += loss;
            batches += 1;
        }
        model
            .params
            .ensure_finite(&format!("encoder parameters after epoch {epoch}"))?;
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}

/// Mean absolute error over masked steps only (mean of equal-size
/// per-step means, which equals the overall mean over selected cells).
fn masked_l1(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    mask: &[bool],
) -> std::result::Result<Var, crate::tensor::TensorError> {
    let selected: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if selected.is_empty() {
        // Nothing was masked; fall back to the full loss.
        return tape.l1_mean(pred, target);
    }
    let mut parts = Vec::with_capacity(selected.len());
    for &step in &selected {
        let p = tape.slice(pred, 0, step, 1)?;
        let t = tape.slice(target, 0, step, 1)?;
        parts.push(tape.l1_mean(p, t)?);
    }
    let stacked = tape.stack_scalars(&parts)?;
    Ok(tape.mean(stacked))
}

// ── Checkpointing ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct EncoderCheckpoint {
    kind: String,
    config: EncoderConfig,
    seed: u64,
    params: ParamSet,
}

pub const ENCODER_KIND: &str = "encoder";

pub fn save_encoder(path: &Path, model: &EncoderModel) -> Result<()> {
    checkpoint::save_json(
        path,
        &EncoderCheckpoint {
            kind: ENCODER_KIND.to_string(),
            config: model.config.clone(),
            seed: model.seed,
            params: model.params.clone(),
        },
    )
}

/// Load an encoder checkpoint; when `expected` is given, reject a
/// config mismatch.
pub fn load_encoder(path: &Path, expected: Option<&EncoderConfig>) -> Result<EncoderModel> {
    let ckpt: EncoderCheckpoint = checkpoint::load_json(path)?;
    checkpoint::ensure_kind(path, &ckpt.kind, ENCODER_KIND)?;
    ckpt.config.validate()?;
    if let Some(expected) = expected {
        if *expected != ckpt.config {
            return Err(LabError::Config(format!(
                "encoder config in {} does not match the experiment config",
                path.display()
            )));
        }
    }
    Ok(EncoderModel {
        config: ckpt.config,
        params: ckpt.params,
        seed: ckpt.seed,
    })
}
