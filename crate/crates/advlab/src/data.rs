//! Synthetic spectrogram corpus.
//!
//! Stands in for a real anti-spoofing dataset: every example is a
//! smooth random background (sum of 2D Gaussian bumps) plus three
//! harmonic ridges whose frame-wise amplitude modulation carries the
//! class: bona-fide ridges modulate slowly, spoofed ridges modulate
//! fast with phase jitter. The two classes share identical means (the
//! modulation phase is random), so nothing is linearly separable in
//! pixel space — a classifier has to pick up the temporal texture.
//!
//! `class_separation` interpolates the spoof parameters between "equal
//! to bona-fide" (0.0, indistinguishable classes) and the full effect
//! (1.0); `noise_level` scales the background field.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seeds;
use crate::tensor::Tensor;

/// Frames per generated utterance (T).
pub const FRAMES: usize = 128;
/// Frequency bins per generated utterance (F).
pub const BINS: usize = 40;
/// Generated values are clamped to `[-VALUE_BOUND, VALUE_BOUND]`, so
/// the attack sweep ε ∈ {0.1..16} spans "invisible" to "dominant"
/// relative to signal scale.
pub const VALUE_BOUND: f64 = 20.0;

// Texture constants, frozen after calibrating the default corpus.
const BUMPS_LABELED: usize = 8;
const BUMPS_UNLABELED: usize = 10;
const RIDGE_COUNT: usize = 3;
const RIDGE_BASE_AMPLITUDE: f64 = 8.0;
const RIDGE_MOD_DEPTH: f64 = 0.9;
const RIDGE_PROFILE_SIGMA: f64 = 1.0;
const RIDGE_PROFILE_SUPPORT: isize = 3;
const SLOW_CYCLES: (f64, f64) = (1.5, 2.5);
const FAST_CYCLES: (f64, f64) = (10.0, 16.0);
const PHASE_JITTER_SCALE: f64 = 0.4;

/// A T×F time–frequency matrix, stored row-major (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    values: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || bins == 0 {
            return Err(LabError::Data(format!(
                "spectrogram dimensions must be positive, got {frames}x{bins}"
            )));
        }
        if values.len() != frames * bins {
            return Err(LabError::Data(format!(
                "spectrogram {frames}x{bins} expects {} values, got {}",
                frames * bins,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(LabError::Data(format!(
                "spectrogram {frames}x{bins} contains non-finite values"
            )));
        }
        Ok(Spectrogram {
            frames,
            bins,
            values,
        })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Spectrogram {
            frames,
            bins,
            values: vec![0.0; frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    /// Elementwise sum; shapes must match. Used to reconstruct an
    /// adversarial example from original + delta (bit-exact: plain
    /// f64 addition, no rounding tricks).
    pub fn add(&self, other: &Spectrogram) -> Result<Spectrogram> {
        if self.frames != other.frames || self.bins != other.bins {
            return Err(LabError::Data(format!(
                "cannot add {}x{} and {}x{} spectrograms",
                self.frames, self.bins, other.frames, other.bins
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Spectrogram {
            frames: self.frames,
            bins: self.bins,
            values,
        })
    }

    /// Apply a function to every value (used by filters and tests).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Spectrogram {
        Spectrogram {
            frames: self.frames,
            bins: self.bins,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// View as a 1-channel image tensor `[1, T, F]` for the CNNs.
    pub fn to_image_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.frames, self.bins], self.values.clone())
            .expect("spectrogram is internally consistent")
    }

    /// Build from a `[1, T, F]` (or `[T, F]`) tensor.
    pub fn from_image_tensor(t: &Tensor) -> Result<Spectrogram> {
        let shape = t.shape();
        let (frames, bins) = match shape {
            [1, t, f] => (*t, *f),
            [t, f] => (*t, *f),
            other => {
                return Err(LabError::Data(format!(
                    "expected a [1,T,F] or [T,F] tensor, got {other:?}"
                )))
            }
        };
        Spectrogram::new(frames, bins, t.data().to_vec())
    }
}

impl Serialize for Spectrogram {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SpectrogramRecord {
            shape: [self.frames, self.bins],
            values: self.values.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Spectrogram {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let record = SpectrogramRecord::deserialize(deserializer)?;
        Spectrogram::new(record.shape[0], record.shape[1], record.values)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct SpectrogramRecord {
    shape: [usize; 2],
    values: Vec<f64>,
}

/// Binary anti-spoofing label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    BonaFide,
    Spoof,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::BonaFide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_index(index: usize) -> Result<Label> {
        match index {
            0 => Ok(Label::BonaFide),
            1 => Ok(Label::Spoof),
            other => Err(LabError::Data(format!(
                "label must be 0 (bona fide) or 1 (spoof), got {other}"
            ))),
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::BonaFide => Label::Spoof,
            Label::Spoof => Label::BonaFide,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.index() as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Label, String> {
        Label::from_index(v as usize).map_err(|e| e.to_string())
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::BonaFide => "bona-fide",
            Label::Spoof => "spoof",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub spec: Spectrogram,
    pub label: Label,
}

/// Parameters of a generated corpus. Splits draw from disjoint seed
/// streams derived from `seed`, so they never share examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub class_separation: f64,
    pub noise_level: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 2000,
            n_dev: 200,
            n_eval: 200,
            seed: 42,
            class_separation: 1.0,
            noise_level: 0.5,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_dev == 0 || self.n_eval == 0 {
            return Err(LabError::Config(
                "corpus split sizes must be positive".into(),
            ));
        }
        if self.class_separation < 0.0 || !self.class_separation.is_finite() {
            return Err(LabError::Config(
                "class_separation must be a finite nonnegative real".into(),
            ));
        }
        if self.noise_level <= 0.0 || !self.noise_level.is_finite() {
            return Err(LabError::Config(
                "noise_level must be a finite positive real".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "corpus/train",
            Split::Dev => "corpus/dev",
            Split::Eval => "corpus/eval",
        }
    }

    fn count(self, spec: &CorpusSpec) -> usize {
        match self {
            Split::Train => spec.n_train,
            Split::Dev => spec.n_dev,
            Split::Eval => spec.n_eval,
        }
    }
}

/// All three splits of a labeled corpus.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
}

/// Generate one split deterministically. Labels alternate example by
/// example, so every split is balanced.
pub fn generate_split(spec: &CorpusSpec, split: Split) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = seeds::seeded_rng(spec.seed, split.label());
    let n = split.count(spec);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::BonaFide
            } else {
                Label::Spoof
            };
            let spec = synthesize(
                &mut rng,
                label,
                spec.class_separation,
                spec.noise_level,
                BUMPS_LABELED,
            )?;
            Ok(LabeledExample { spec, label })
        })
        .collect()
}

pub fn generate_labeled_corpus(spec: &CorpusSpec) -> Result<LabeledCorpus> {
    Ok(LabeledCorpus {
        train: generate_split(spec, Split::Train)?,
        dev: generate_split(spec, Split::Dev)?,
        eval: generate_split(spec, Split::Eval)?,
    })
}

/// Unlabeled pre-training corpus. Same family of textures, but with a
/// different background density (10 bumps instead of 8) so the
/// pre-training distribution overlaps the labeled one without matching
/// it — a miniature of the usual pretraining/downstream domain shift.
pub fn generate_unlabeled_corpus(n: usize, seed: u64) -> Result<Vec<Spectrogram>> {
    let mut rng = seeds::seeded_rng(seed, "corpus/unlabeled");
    (0..n)
        .map(|_| {
            let label = if rng.gen_bool(0.5) {
                Label::Spoof
            } else {
                Label::BonaFide
            };
            synthesize(&mut rng, label, 1.0, 0.5, BUMPS_UNLABELED)
        })
        .collect()
}

/// One synthetic utterance: Gaussian-bump background plus harmonic
/// ridges with label-dependent temporal modulation.
fn synthesize(
    rng: &mut ChaCha8Rng,
    label: Label,
    class_separation: f64,
    noise_level: f64,
    n_bumps: usize,
) -> Result<Spectrogram> {
    let (t_len, f_len) = (FRAMES, BINS);
    let mut values = vec![0.0; t_len * f_len];

    // Smooth background field.
    for _ in 0..n_bumps {
        let t0 = rng.gen_range(0.0..t_len as f64);
        let f0 = rng.gen_range(0.0..f_len as f64);
        let sigma_t = rng.gen_range(6.0..24.0);
        let sigma_f = rng.gen_range(2.0..8.0);
        let amp = rng.gen_range(-4.0 * noise_level..4.0 * noise_level);
        for t in 0..t_len {
            let dt = (t as f64 - t0) / sigma_t;
            let row_factor = amp * (-0.5 * dt * dt).exp();
            if row_factor.abs() < 1e-12 {
                continue;
            }
            for f in 0..f_len {
                let df = (f as f64 - f0) / sigma_f;
                values[t * f_len + f] += row_factor * (-0.5 * df * df).exp();
            }
        }
    }

    // Harmonic ridges: evenly spaced bin centers, Gaussian cross-bin
    // profile, amplitude modulated over frames. The class signal is in
    // the modulation: slow and clean for bona fide, fast and
    // phase-jittered for spoof, interpolated by class_separation.
    let effect = match label {
        Label::BonaFide => 0.0,
        Label::Spoof => class_separation.min(1.0),
    };
    for r in 0..RIDGE_COUNT {
        let center = (f_len * (2 * r + 1)) / (2 * RIDGE_COUNT);
        let slow = rng.gen_range(SLOW_CYCLES.0..SLOW_CYCLES.1);
        let fast = rng.gen_range(FAST_CYCLES.0..FAST_CYCLES.1);
        let cycles = slow + effect * (fast - slow);
        let mut phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let jitter = effect * PHASE_JITTER_SCALE;

        let mut modulation = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if jitter > 0.0 {
                phase += rng.gen_range(-jitter..jitter);
            }
            let angle = std::f64::consts::TAU * cycles * t as f64 / t_len as f64 + phase;
            modulation.push(RIDGE_BASE_AMPLITUDE * (1.0 + RIDGE_MOD_DEPTH * angle.sin()));
        }

        for df in -RIDGE_PROFILE_SUPPORT..=RIDGE_PROFILE_SUPPORT {
            let f = center as isize + df;
            if f < 0 || f >= f_len as isize {
                continue;
            }
            let z = df as f64 / RIDGE_PROFILE_SIGMA;
            let profile = (-0.5 * z * z).exp();
            for t in 0..t_len {
                values[t * f_len + f as usize] += modulation[t] * profile;
            }
        }
    }

    for v in values.iter_mut() {
        *v = v.clamp(-VALUE_BOUND, VALUE_BOUND);
    }
    Spectrogram::new(t_len, f_len, values)
}

// ── JSONL persistence ───────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct LabeledRecord {
    label: Label,
    shape: [usize; 2],
    values: Vec<f64>,
}

/// Write one JSON record per line: `{"label":0|1,"shape":[T,F],"values":[...]}`.
pub fn save_labeled(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ex in examples {
        let record = LabeledRecord {
            label: ex.label,
            shape: [ex.spec.frames(), ex.spec.bins()],
            values: ex.spec.values().to_vec(),
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| LabError::json(path, e))?;
        out.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

pub fn load_labeled(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut expected_bins: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabeledRecord = serde_json::from_str(&line)
            .map_err(|e| LabError::json_line(path, lineno + 1, e))?;
        let spec = Spectrogram::new(record.shape[0], record.shape[1], record.values)
            .map_err(|e| LabError::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        match expected_bins {
            None => expected_bins = Some(spec.bins()),
            Some(expected) if expected != spec.bins() => {
                return Err(LabError::Data(format!(
                    "{}:{}: bin count mismatch: expected {expected}, found {}",
                    path.display(),
                    lineno + 1,
                    spec.bins()
                )))
            }
            _ => {}
        }
        examples.push(LabeledExample {
            spec,
            label: record.label,
        });
    }
    Ok(examples)
}

/// Same line format, with the `label` field omitted.
pub fn save_unlabeled(path: &Path, specs: &[Spectrogram]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for spec in specs {
        serde_json::to_writer(&mut out, spec).map_err(|e| LabError::json(path, e))?;
        out.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

pub fn load_unlabeled(path: &Path) -> Result<Vec<Spectrogram>> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut specs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: Spectrogram = serde_json::from_str(&line)
            .map_err(|e| LabError::json_line(path, lineno + 1, e))?;
        specs.push(spec);
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec {
            n_train: 4,
            n_dev: 2,
            n_eval: 2,
            ..CorpusSpec::default()
        };
        let a = generate_labeled_corpus(&spec).unwrap();
        let b = generate_labeled_corpus(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.eval, b.eval);
        let u1 = generate_unlabeled_corpus(3, 7).unwrap();
        let u2 = generate_unlabeled_corpus(3, 7).unwrap();
        assert_eq!(u1, u2);
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let spec = CorpusSpec {
            n_train: 10,
            n_dev: 10,
            n_eval: 10,
            ..CorpusSpec::default()
        };
        let corpus = generate_labeled_corpus(&spec).unwrap();
        assert_ne!(corpus.train[0].spec, corpus.dev[0].spec);
        assert_ne!(corpus.dev[0].spec, corpus.eval[0].spec);
        for split in [&corpus.train, &corpus.dev, &corpus.eval] {
            let spoof = split.iter().filter(|e| e.label == Label::Spoof).count();
            assert_eq!(spoof, 5);
        }
    }

    #[test]
    fn values_are_bounded_and_finite() {
        let spec = CorpusSpec {
            n_train: 8,
            n_dev: 1,
            n_eval: 1,
            ..CorpusSpec::default()
        };
        for ex in generate_split(&spec, Split::Train).unwrap() {
            assert!(ex
                .spec
                .values()
                .iter()
                .all(|v| v.is_finite() && v.abs() <= VALUE_BOUND));
        }
    }

    #[test]
    fn unlabeled_mean_magnitude_in_expected_range() {
        let specs = generate_unlabeled_corpus(50, 42).unwrap();
        let total: f64 = specs
            .iter()
            .flat_map(|s| s.values())
            .map(|v| v.abs())
            .sum();
        let count: usize = specs.iter().map(|s| s.values().len()).sum();
        let mean = total / count as f64;
        assert!(
            (0.1..=10.0).contains(&mean),
            "mean |value| {mean} outside [0.1, 10]"
        );
    }

    #[test]
    fn zero_separation_makes_classes_identically_distributed() {
        // With class_separation = 0 the generator consumes the same
        // random stream regardless of label, so the per-class value
        // statistics must agree closely.
        let spec = CorpusSpec {
            n_train: 60,
            n_dev: 1,
            n_eval: 1,
            class_separation: 0.0,
            ..CorpusSpec::default()
        };
        let train = generate_split(&spec, Split::Train).unwrap();
        let mean_of = |label: Label| {
            let (mut sum, mut n) = (0.0, 0usize);
            for ex in train.iter().filter(|e| e.label == label) {
                sum += ex.spec.values().iter().map(|v| v.abs()).sum::<f64>();
                n += ex.spec.values().len();
            }
            sum / n as f64
        };
        let bona = mean_of(Label::BonaFide);
        let spoof = mean_of(Label::Spoof);
        assert!(
            (bona - spoof).abs() < 0.1 * bona.max(spoof),
            "class means diverge at separation 0: {bona} vs {spoof}"
        );
    }

    #[test]
    fn save_load_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let spec = CorpusSpec {
            n_train: 3,
            n_dev: 1,
            n_eval: 1,
            ..CorpusSpec::default()
        };
        let examples = generate_split(&spec, Split::Train).unwrap();
        save_labeled(&path, &examples).unwrap();
        let loaded = load_labeled(&path).unwrap();
        assert_eq!(loaded, examples);

        let upath = dir.path().join("unlabeled.jsonl");
        let specs = generate_unlabeled_corpus(2, 1).unwrap();
        save_unlabeled(&upath, &specs).unwrap();
        assert_eq!(load_unlabeled(&upath).unwrap(), specs);
    }

    #[test]
    fn load_reports_line_context_on_malformed_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"label\":0,\"shape\":[1,2],\"values\":[0.0,1.0]}\nnot json\n",
        )
        .unwrap();
        let err = load_labeled(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn load_rejects_inconsistent_bin_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        std::fs::write(
            &path,
            "{\"label\":0,\"shape\":[1,2],\"values\":[0.0,1.0]}\n\
             {\"label\":1,\"shape\":[1,3],\"values\":[0.0,1.0,2.0]}\n",
        )
        .unwrap();
        let err = load_labeled(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 2") && msg.contains("found 3"), "got: {msg}");
    }

    #[test]
    fn load_empty_file_gives_empty_corpus() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_labeled(&path).unwrap().is_empty());
    }

    #[test]
    fn label_serde_uses_integers() {
        let json = serde_json::to_string(&Label::Spoof).unwrap();
        assert_eq!(json, "1");
        let back: Label = serde_json::from_str("0").unwrap();
        assert_eq!(back, Label::BonaFide);
        assert!(serde_json::from_str::<Label>("2").is_err());
    }
}
