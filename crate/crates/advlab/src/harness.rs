//! End-to-end experiment orchestration: a staged, resumable pipeline
//! with one output directory per run.
//!
//! Stages run in a fixed order — `data → pretrain → train → attack →
//! evaluate → lnsr` — and every stage records its artifacts plus their
//! SHA-256 hashes in `manifest.json`. A stage is considered done only
//! while its artifacts still exist and hash-match, so deleting or
//! editing a checkpoint automatically invalidates the stage. Because
//! every stage is deterministic under the global seed, re-running an
//! invalidated stage reproduces the original bytes.
//!
//! Seeding: every stage derives its RNG seed from the global seed and
//! the stage name via a stable hash ([`crate::seeds::derive_seed`]).
//! Seed fields inside nested configs are therefore *derived* values;
//! anything written for them in the config file is replaced at load
//! time so that one `seed` knob controls the whole run.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attacks::{save_pairs, load_pairs, AdversarialPair, AttackAlgorithm, AttackConfig};
use crate::checkpoint;
use crate::data::{self, CorpusSpec};
use crate::defenses::{
    build_defender_suite, Defender, FilterConfig, FrontEnd, SuiteConfig,
};
use crate::diagnostics::{
    curves_from_pairs, lnsr_comparison, write_curves_csv, write_lnsr_csv, RobustnessCurve,
    SweepConfig,
};
use crate::encoder::{
    load_encoder, pretrain, save_encoder, EncoderConfig, EncoderModel, MaskingPolicy,
    PretrainConfig,
};
use crate::error::{LabError, Result};
use crate::models::{load_classifier, save_classifier, Architecture, InputMode, TrainConfig};
use crate::seeds;

// ── Configuration ───────────────────────────────────────────────────

/// Full description of one experiment. Every field has a default, so
/// an empty JSON object (`{}`) runs the standard experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; all stage seeds are derived from it.
    pub seed: u64,
    /// Output directory owned by the run (manifest, checkpoints, CSVs).
    pub out_dir: PathBuf,
    /// Labeled corpus sizes and synthesis knobs.
    pub corpus: CorpusSpec,
    /// Unlabeled utterances for encoder pre-training.
    pub n_unlabeled: usize,
    pub masking: MaskingPolicy,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    /// Classifier schedule shared by the mel/mock/rand arms.
    pub train: TrainConfig,
    /// Joint epochs for the scratch arm. The default equals classifier
    /// epochs + pre-training epochs so the arm is compute-fair.
    pub scratch_epochs: usize,
    /// Attack grid used by the attack/evaluate stages.
    pub sweep: SweepConfig,
    /// Budgets (must appear in `sweep.epsilons`) at which the LNSR
    /// stage compares the pretrained and random encoders on PGD pairs.
    pub lnsr_epsilons: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pretrain = PretrainConfig::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("lab-out"),
            corpus: CorpusSpec::default(),
            n_unlabeled: 500,
            masking: MaskingPolicy::default(),
            encoder: EncoderConfig::default(),
            scratch_epochs: train.epochs + pretrain.epochs,
            pretrain,
            train,
            sweep: SweepConfig::default(),
            lnsr_epsilons: vec![8.0, 16.0],
        }
    }
}

impl ExperimentConfig {
    /// Read a config file; missing fields fall back to defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| LabError::json(path, e))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.masking.validate()?;
        self.encoder.validate()?;
        self.sweep.validate()?;
        if self.n_unlabeled == 0 {
            return Err(LabError::Config("n_unlabeled must be ≥ 1".into()));
        }
        if self.pretrain.epochs == 0 || self.train.epochs == 0 || self.scratch_epochs == 0 {
            return Err(LabError::Config("all epoch counts must be ≥ 1".into()));
        }
        let expected_dim = data::BINS * self.masking.stack_factor;
        if self.encoder.input_dim != expected_dim {
            return Err(LabError::Config(format!(
                "encoder input_dim {} does not match {} bins × stack factor {}",
                self.encoder.input_dim, data::BINS, self.masking.stack_factor
            )));
        }
        if self.lnsr_epsilons.is_empty() {
            return Err(LabError::Config("lnsr_epsilons must not be empty".into()));
        }
        if !self.sweep.algorithms.contains(&AttackAlgorithm::Pgd) {
            return Err(LabError::Config(
                "the LNSR stage consumes PGD pairs; the sweep must include pgd".into(),
            ));
        }
        for eps in &self.lnsr_epsilons {
            if !self.sweep.epsilons.contains(eps) {
                return Err(LabError::Config(format!(
                    "lnsr ε={eps} is not in the sweep ε grid {:?}",
                    self.sweep.epsilons
                )));
            }
        }
        Ok(())
    }

    /// Seed for a named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seeds::derive_seed(self.seed, stage)
    }

    /// Copy with every nested seed replaced by its derivation from the
    /// global seed. This is the form the manifest snapshots.
    pub fn resolved(&self) -> Self {
        let mut config = self.clone();
        config.corpus.seed = self.stage_seed("data");
        config.pretrain.seed = self.stage_seed("pretrain");
        config.train.seed = self.stage_seed("train");
        config.sweep.seed = self.stage_seed("attack");
        config
    }
}

// ── Manifest ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub status: StageStatus,
    /// Artifact paths relative to the output directory → SHA-256 hex.
    pub artifacts: BTreeMap<String, String>,
}

/// Persistent record of a run: the resolved config snapshot plus the
/// status and artifact hashes of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    fn fresh(config: ExperimentConfig) -> Self {
        RunManifest {
            config,
            stages: BTreeMap::new(),
        }
    }
}

/// Stage names in execution order.
pub const STAGES: [&str; 6] = ["data", "pretrain", "train", "attack", "evaluate", "lnsr"];

// ── Defender suite records ──────────────────────────────────────────

/// How to rebuild a defender's front-end from checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FrontEndSpec {
    Identity,
    Filter { config: FilterConfig },
    Encoder { checkpoint: String, stack_factor: usize },
}

/// One defender arm in the suite manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub name: String,
    pub front_end: FrontEndSpec,
    /// Classifier checkpoint path relative to the output directory.
    pub classifier: String,
}

// ── Lock file ───────────────────────────────────────────────────────

#[derive(Debug)]
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LabError::Locked {
                dir: dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(LabError::io(path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ── The runner ──────────────────────────────────────────────────────

/// A running experiment: exclusive owner of its output directory for
/// the lifetime of the value (lock file).
#[derive(Debug)]
pub struct Lab {
    config: ExperimentConfig,
    out: PathBuf,
    force: bool,
    manifest: RunManifest,
    _lock: LockGuard,
}

impl Lab {
    /// Validate the config, lock the output directory and reconcile
    /// the manifest. A directory previously used with a different
    /// config is rejected unless `force` is given, in which case the
    /// run starts over.
    pub fn open(config: &ExperimentConfig, force: bool) -> Result<Lab> {
        config.validate()?;
        let resolved = config.resolved();
        let out = resolved.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| LabError::io(&out, e))?;
        let lock = LockGuard::acquire(&out)?;

        let manifest_path = out.join("manifest.json");
        let manifest = if manifest_path.exists() {
            let existing: RunManifest = checkpoint::load_json(&manifest_path)?;
            if existing.config == resolved {
                existing
            } else if force {
                log::warn!("--force: discarding manifest for a different configuration");
                RunManifest::fresh(resolved.clone())
            } else {
                return Err(LabError::StaleConfig { dir: out });
            }
        } else {
            RunManifest::fresh(resolved.clone())
        };

        Ok(Lab {
            config: resolved,
            out,
            force,
            manifest,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    // ── Paths ───────────────────────────────────────────────────

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn pair_file(source: Architecture, algorithm: AttackAlgorithm, epsilon: f64) -> String {
        format!("attack/pairs-{source}-{algorithm}-eps{epsilon}.jsonl")
    }

    fn mel_classifier_file(arch: Architecture) -> String {
        format!("train/{arch}-mel-classifier.json")
    }

    /// Representative artifact used in missing-upstream messages.
    fn primary_artifact(stage: &str) -> &'static str {
        match stage {
            "data" => "data/train.jsonl",
            "pretrain" => "pretrain/encoder.json",
            "train" => "train/suite.json",
            "attack" => "attack",
            "evaluate" => "evaluate/curves.csv",
            "lnsr" => "lnsr/lnsr.csv",
            _ => "manifest.json",
        }
    }

    // ── Manifest bookkeeping ────────────────────────────────────

    fn save_manifest(&self) -> Result<()> {
        checkpoint::save_json(&self.path("manifest.json"), &self.manifest)
    }

    /// True while the stage is marked done AND all of its artifacts
    /// exist with matching hashes.
    pub fn stage_done(&self, stage: &str) -> bool {
        let Some(entry) = self.manifest.stages.get(stage) else {
            return false;
        };
        entry.status == StageStatus::Done
            && entry.artifacts.iter().all(|(rel, hash)| {
                checkpoint::sha256_file(&self.path(rel))
                    .map(|h| h == *hash)
                    .unwrap_or(false)
            })
    }

    fn require(&self, stage: &str, dep: &str) -> Result<()> {
        if self.stage_done(dep) {
            return Ok(());
        }
        Err(LabError::MissingUpstream {
            stage: stage.to_string(),
            missing: format!("lab {dep}"),
            path: self.path(Self::primary_artifact(dep)),
        })
    }

    fn run_stage<F>(&mut self, stage: &str, deps: &[&str], body: F) -> Result<bool>
    where
        F: FnOnce(&Self) -> Result<Vec<PathBuf>>,
    {
        for dep in deps {
            self.require(stage, dep)?;
        }
        if !self.force && self.stage_done(stage) {
            log::info!("stage {stage}: up to date, skipping");
            return Ok(false);
        }
        fs::create_dir_all(self.path(stage)).map_err(|e| LabError::io(self.path(stage), e))?;
        log::info!("stage {stage}: running");
        let started = Instant::now();
        let artifacts = body(self)?;
        let mut entry = StageEntry {
            status: StageStatus::Done,
            artifacts: BTreeMap::new(),
        };
        for path in artifacts {
            let rel = path
                .strip_prefix(&self.out)
                .map_err(|_| {
                    LabError::Config(format!(
                        "stage {stage} produced an artifact outside the run directory: {}",
                        path.display()
                    ))
                })?
                .to_string_lossy()
                .replace('\\', "/");
            entry.artifacts.insert(rel, checkpoint::sha256_file(&path)?);
        }
        self.manifest.stages.insert(stage.to_string(), entry);
        self.save_manifest()?;
        log::info!(
            "stage {stage}: done in {:.1}s",
            started.elapsed().as_secs_f64()
        );
        Ok(true)
    }

    // ── Stages ──────────────────────────────────────────────────

    /// Synthesize the labeled splits and the unlabeled corpus.
    pub fn data(&mut self) -> Result<bool> {
        self.run_stage("data", &[], |lab| {
            let corpus = data::generate_labeled_corpus(&lab.config.corpus)?;
            let unlabeled = data::generate_unlabeled_corpus(
                lab.config.n_unlabeled,
                lab.config.stage_seed("data/unlabeled"),
            )?;
            let splits = [
                ("data/train.jsonl", &corpus.train),
                ("data/dev.jsonl", &corpus.dev),
                ("data/eval.jsonl", &corpus.eval),
            ];
            let mut artifacts = Vec::new();
            for (rel, examples) in splits {
                let path = lab.path(rel);
                data::save_labeled(&path, examples)?;
                artifacts.push(path);
            }
            let path = lab.path("data/unlabeled.jsonl");
            data::save_unlabeled(&path, &unlabeled)?;
            artifacts.push(path);
            Ok(artifacts)
        })
    }

    /// Pre-train the encoder on masked-prediction reconstruction.
    pub fn pretrain(&mut self) -> Result<bool> {
        self.run_stage("pretrain", &["data"], |lab| {
            let unlabeled = data::load_unlabeled(&lab.path("data/unlabeled.jsonl"))?;
            let mut model = EncoderModel::random_init(
                &lab.config.encoder,
                lab.config.stage_seed("encoder-init"),
            )?;
            let losses = pretrain(&mut model, &unlabeled, &lab.config.masking, &lab.config.pretrain)?;
            let encoder_path = lab.path("pretrain/encoder.json");
            save_encoder(&encoder_path, &model)?;
            let history_path = lab.path("pretrain/history.json");
            checkpoint::save_json(&history_path, &losses)?;
            Ok(vec![encoder_path, history_path])
        })
    }

    /// Train the attacking models and the full defender suite.
    pub fn train(&mut self) -> Result<bool> {
        self.run_stage("train", &["data", "pretrain"], |lab| {
            let train_set = data::load_labeled(&lab.path("data/train.jsonl"))?;
            let dev_set = data::load_labeled(&lab.path("data/dev.jsonl"))?;
            let pretrained =
                load_encoder(&lab.path("pretrain/encoder.json"), Some(&lab.config.encoder))?;
            let suite_config = SuiteConfig {
                train: lab.config.train.clone(),
                scratch_epochs: lab.config.scratch_epochs,
                stack_factor: lab.config.masking.stack_factor,
                seed: lab.config.stage_seed("train"),
            };
            let suite = build_defender_suite(&train_set, &dev_set, &pretrained, &suite_config)?;

            let mut artifacts = Vec::new();
            let rand_path = lab.path("train/rand-encoder.json");
            save_encoder(&rand_path, &suite.random_encoder)?;
            artifacts.push(rand_path);

            let mut records = Vec::new();
            for defender in &suite.defenders {
                let name = defender.name();
                let arch = defender.classifier().arch();
                let (spec, classifier_rel) = match defender.front_end() {
                    FrontEnd::Identity => {
                        (FrontEndSpec::Identity, Self::mel_classifier_file(arch))
                    }
                    FrontEnd::Filter(config) => (
                        FrontEndSpec::Filter { config: *config },
                        // Filter arms protect the mel classifier.
                        Self::mel_classifier_file(arch),
                    ),
                    FrontEnd::Encoder { model, stack_factor } => {
                        let checkpoint_rel = if model.params() == pretrained.params() {
                            "pretrain/encoder.json".to_string()
                        } else if model.params() == suite.random_encoder.params() {
                            "train/rand-encoder.json".to_string()
                        } else {
                            let rel = format!("train/{name}-encoder.json");
                            let path = lab.path(&rel);
                            save_encoder(&path, model)?;
                            artifacts.push(path);
                            rel
                        };
                        (
                            FrontEndSpec::Encoder {
                                checkpoint: checkpoint_rel,
                                stack_factor: *stack_factor,
                            },
                            format!("train/{name}-classifier.json"),
                        )
                    }
                };
                let classifier_path = lab.path(&classifier_rel);
                if !artifacts.contains(&classifier_path) {
                    save_classifier(&classifier_path, defender.classifier())?;
                    artifacts.push(classifier_path);
                }
                records.push(ArmRecord {
                    name: name.to_string(),
                    front_end: spec,
                    classifier: classifier_rel,
                });
            }

            let suite_path = lab.path("train/suite.json");
            checkpoint::save_json(&suite_path, &records)?;
            artifacts.push(suite_path);
            let histories_path = lab.path("train/histories.json");
            checkpoint::save_json(&histories_path, &suite.histories)?;
            artifacts.push(histories_path);
            Ok(artifacts)
        })
    }

    /// Craft one adversarial pair set per (source arch, algorithm, ε).
    pub fn attack(&mut self) -> Result<bool> {
        self.run_stage("attack", &["data", "train"], |lab| {
            let eval = data::load_labeled(&lab.path("data/eval.jsonl"))?;
            let mut artifacts = Vec::new();
            for arch in [Architecture::A, Architecture::B] {
                let attacker = load_classifier(
                    &lab.path(&Self::mel_classifier_file(arch)),
                    Some((arch, InputMode::Raw)),
                )?;
                for &algorithm in &lab.config.sweep.algorithms {
                    for &epsilon in &lab.config.sweep.epsilons {
                        let cell = AttackConfig {
                            algorithm,
                            epsilon,
                            steps: lab.config.sweep.steps,
                            alpha: lab.config.sweep.alpha,
                            random_start: lab.config.sweep.random_start,
                            seed: seeds::derive_seed(
                                lab.config.sweep.seed,
                                &format!("{arch}/{algorithm}/{epsilon}"),
                            ),
                        };
                        let pairs = crate::attacks::attack_corpus(&attacker, &eval, &cell)?;
                        let path = lab.path(&Self::pair_file(arch, algorithm, epsilon));
                        save_pairs(&path, &pairs)?;
                        artifacts.push(path);
                    }
                }
            }
            Ok(artifacts)
        })
    }

    /// Score every defender on every transfer cell and write curves.csv.
    pub fn evaluate(&mut self) -> Result<bool> {
        self.run_stage("evaluate", &["data", "train", "attack"], |lab| {
            let eval = data::load_labeled(&lab.path("data/eval.jsonl"))?;
            let defenders = lab.load_suite()?;
            let mut curves: Vec<RobustnessCurve> = Vec::new();
            for (target, source) in [
                (Architecture::A, Architecture::B),
                (Architecture::B, Architecture::A),
            ] {
                let targets: Vec<&Defender> = defenders
                    .iter()
                    .filter(|d| d.classifier().arch() == target)
                    .collect();
                let mut cells = Vec::new();
                for &algorithm in &lab.config.sweep.algorithms {
                    for &epsilon in &lab.config.sweep.epsilons {
                        let pairs =
                            load_pairs(&lab.path(&Self::pair_file(source, algorithm, epsilon)))?;
                        cells.push((algorithm, epsilon, pairs));
                    }
                }
                curves.extend(curves_from_pairs(&targets, source, &eval, &cells)?);
            }
            let path = lab.path("evaluate/curves.csv");
            write_curves_csv(&path, &curves)?;
            Ok(vec![path])
        })
    }

    /// Compare layer-wise noise attenuation of the pretrained and
    /// random encoders on the stored PGD pairs and write lnsr.csv.
    pub fn lnsr(&mut self) -> Result<bool> {
        self.run_stage("lnsr", &["pretrain", "train", "attack"], |lab| {
            let mock =
                load_encoder(&lab.path("pretrain/encoder.json"), Some(&lab.config.encoder))?;
            let rand =
                load_encoder(&lab.path("train/rand-encoder.json"), Some(&lab.config.encoder))?;
            let mut loaded: Vec<(f64, Vec<AdversarialPair>)> = Vec::new();
            for &epsilon in &lab.config.lnsr_epsilons {
                let path =
                    lab.path(&Self::pair_file(Architecture::A, AttackAlgorithm::Pgd, epsilon));
                loaded.push((epsilon, load_pairs(&path)?));
            }
            let by_eps: Vec<(f64, &[AdversarialPair])> = loaded
                .iter()
                .map(|(eps, pairs)| (*eps, pairs.as_slice()))
                .collect();
            let rows =
                lnsr_comparison(&mock, &rand, lab.config.masking.stack_factor, &by_eps)?;
            let path = lab.path("lnsr/lnsr.csv");
            write_lnsr_csv(&path, &rows)?;
            Ok(vec![path])
        })
    }

    /// Run every stage in order, skipping the ones already done.
    pub fn all(&mut self) -> Result<()> {
        self.data()?;
        self.pretrain()?;
        self.train()?;
        self.attack()?;
        self.evaluate()?;
        self.lnsr()?;
        Ok(())
    }

    /// Rebuild the defender suite from checkpoints (report order).
    pub fn load_suite(&self) -> Result<Vec<Defender>> {
        let records: Vec<ArmRecord> = checkpoint::load_json(&self.path("train/suite.json"))?;
        records
            .into_iter()
            .map(|record| {
                let classifier = load_classifier(&self.path(&record.classifier), None)?;
                let front_end = match record.front_end {
                    FrontEndSpec::Identity => FrontEnd::Identity,
                    FrontEndSpec::Filter { config } => FrontEnd::Filter(config),
                    FrontEndSpec::Encoder {
                        checkpoint,
                        stack_factor,
                    } => FrontEnd::Encoder {
                        model: Box::new(load_encoder(
                            &self.path(&checkpoint),
                            Some(&self.config.encoder),
                        )?),
                        stack_factor,
                    },
                };
                Defender::new(record.name, front_end, classifier)
            })
            .collect()
    }
}
