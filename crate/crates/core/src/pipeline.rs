//! Two-stage training: distillation from a frozen teacher on unlabeled
//! text, then supervised contrastive finetuning on triplets.
//!
//! Both stages share one loop: seeded shuffles with the ragged tail
//! dropped, one Adam step per mini-batch, a dev evaluation at step 0 and
//! every `eval_interval` steps, a best-so-far checkpoint on strict
//! improvement, and early stopping after `patience` evaluated epochs
//! without improvement.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::bank::MemoryBank;
use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::data::{StsPairSet, Triplet, TripletSet, UnlabeledCorpus};
use crate::encoder::{Encoder, PROJECTION};
use crate::error::{Error, Result};
use crate::eval::sts_evaluate;
use crate::losses::{ckd_loss, kd_mse_loss, supervised_cl_loss, Temperature, DEFAULT_TEMPERATURE};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    DistillKd,
    DistillCkd,
    Finetune,
}

impl Stage {
    pub fn is_distill(self) -> bool {
        matches!(self, Stage::DistillKd | Stage::DistillCkd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::DistillKd => "distill-kd",
            Stage::DistillCkd => "distill-ckd",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distill-kd" => Ok(Stage::DistillKd),
            "distill-ckd" => Ok(Stage::DistillCkd),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Invalid(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub temperature: f64,
    pub bank_capacity: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Fill `wall_ms` in evaluation records. Off by default so logs stay
    /// byte-identical across reruns.
    pub record_wall_time: bool,
    /// Extra metadata stamped into saved checkpoints.
    pub tags: BTreeMap<String, String>,
}

/// Config-file keys understood by [`TrainConfig::apply`].
pub const TRAIN_KEYS: &[&str] = &[
    "stage",
    "batch_size",
    "learning_rate",
    "max_epochs",
    "eval_interval",
    "patience",
    "temperature",
    "bank_capacity",
    "seed",
    "checkpoint_dir",
];

impl TrainConfig {
    /// Desk-scale distillation defaults.
    pub fn distill(stage: Stage) -> Self {
        Self {
            stage,
            batch_size: 64,
            learning_rate: 1e-2,
            max_epochs: 20,
            eval_interval: 25,
            patience: 3,
            temperature: DEFAULT_TEMPERATURE,
            bank_capacity: 512,
            seed: 0,
            checkpoint_dir: None,
            record_wall_time: false,
            tags: BTreeMap::new(),
        }
    }

    /// Desk-scale finetuning defaults.
    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            max_epochs: 5,
            ..Self::distill(Stage::Finetune)
        }
    }

    /// The values used with 330M-parameter teachers: batch 512, queue of
    /// 65536, evaluation every 125 steps, patience 3, 20 epochs.
    pub fn large_scale_distill(stage: Stage) -> Self {
        Self {
            batch_size: 512,
            learning_rate: 2e-4,
            bank_capacity: 65536,
            eval_interval: 125,
            ..Self::distill(stage)
        }
    }

    /// Batch 128, 5 epochs, evaluation every 125 steps.
    pub fn large_scale_finetune() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 5e-5,
            eval_interval: 125,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be a non-negative number, got {}", self.learning_rate));
        }
        Temperature::new(self.temperature)?;
        if self.stage == Stage::DistillCkd && self.bank_capacity < self.batch_size {
            return bad(format!(
                "bank_capacity ({}) must be at least batch_size ({}) for contrastive distillation",
                self.bank_capacity, self.batch_size
            ));
        }
        Ok(())
    }

    /// Overrides fields from a config file. Unknown keys are rejected.
    pub fn apply(&mut self, file: &ConfigFile) -> Result<()> {
        file.check_keys(TRAIN_KEYS)?;
        self.apply_known(file)
    }

    /// Like [`apply`](Self::apply) but leaves unknown keys to the caller.
    pub fn apply_known(&mut self, file: &ConfigFile) -> Result<()> {
        if let Some(v) = file.get("stage")? {
            self.stage = v;
        }
        if let Some(v) = file.get("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = file.get("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = file.get("max_epochs")? {
            self.max_epochs = v;
        }
        if let Some(v) = file.get("eval_interval")? {
            self.eval_interval = v;
        }
        if let Some(v) = file.get("patience")? {
            self.patience = v;
        }
        if let Some(v) = file.get("temperature")? {
            self.temperature = v;
        }
        if let Some(v) = file.get("bank_capacity")? {
            self.bank_capacity = v;
        }
        if let Some(v) = file.get("seed")? {
            self.seed = v;
        }
        if let Some(v) = file.get::<String>("checkpoint_dir")? {
            self.checkpoint_dir = Some(PathBuf::from(v));
        }
        Ok(())
    }
}

/// One dev evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    /// Training loss of the step just taken; `None` before the first step.
    pub loss: Option<f64>,
    pub dev_rho: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_dev: Option<f64>,
    pub best_step: u64,
    pub best_checkpoint: Option<PathBuf>,
    pub epochs_since_improvement: usize,
    pub stopped_early: bool,
    /// Number of times the bank exceeded its capacity; always 0.
    #[serde(skip)]
    pub bank_overflows: usize,
    /// Highest bank fill observed at any step.
    #[serde(skip)]
    pub max_bank_fill: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub stage: Stage,
    pub state: RunState,
    pub history: Vec<EvalRecord>,
    pub losses: Vec<f64>,
}

impl RunReport {
    /// One JSON object per evaluation, newline-terminated.
    pub fn log_lines(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("record is plain data") + "\n")
            .collect()
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.log_lines()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub best: Encoder,
    pub report: RunReport,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn dev_score(student: &Encoder, dev: &StsPairSet) -> Result<Option<f64>> {
    Ok(sts_evaluate(&dev.name, &dev.pairs, student)?.rho)
}

fn better(candidate: Option<f64>, best: Option<f64>) -> bool {
    match (candidate, best) {
        (Some(c), Some(b)) => c > b,
        (Some(_), None) => true,
        (None, _) => false,
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    dev: &'a StsPairSet,
    student: Encoder,
    best: Encoder,
    state: RunState,
    history: Vec<EvalRecord>,
    losses: Vec<f64>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, dev: &'a StsPairSet, student: Encoder) -> Result<Self> {
        cfg.validate()?;
        if dev.pairs.len() < 2 {
            return Err(Error::Invalid(format!(
                "dev set {:?} needs at least two pairs, got {}",
                dev.name,
                dev.pairs.len()
            )));
        }
        if student.config.frozen {
            return Err(Error::Invalid("the student encoder must not be frozen".into()));
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            cfg,
            dev,
            best: student.clone(),
            student,
            state: RunState {
                epoch: 0,
                global_step: 0,
                best_dev: None,
                best_step: 0,
                best_checkpoint: None,
                epochs_since_improvement: 0,
                stopped_early: false,
                bank_overflows: 0,
                max_bank_fill: 0,
            },
            history: Vec::new(),
            losses: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Scores the current student; returns whether it is a new best.
    fn evaluate(&mut self, epoch: usize) -> Result<bool> {
        let rho = dev_score(&self.student, self.dev)?;
        self.history.push(EvalRecord {
            step: self.state.global_step,
            epoch,
            loss: self.losses.last().copied(),
            dev_rho: rho,
            wall_ms: self
                .cfg
                .record_wall_time
                .then(|| self.started.elapsed().as_millis() as u64),
        });
        let first = self.history.len() == 1;
        if !(first || better(rho, self.state.best_dev)) {
            return Ok(false);
        }
        self.state.best_dev = rho;
        self.state.best_step = self.state.global_step;
        self.state.epochs_since_improvement = 0;
        self.best = self.student.clone();
        if let Some(dir) = &self.cfg.checkpoint_dir {
            let path = dir.join(BEST_CHECKPOINT);
            let mut ck = Checkpoint::new(self.best.clone());
            ck.metadata.extend(self.cfg.tags.clone());
            ck.metadata.insert("stage".into(), self.cfg.stage.to_string());
            ck.metadata.insert("step".into(), self.state.global_step.to_string());
            ck.metadata.insert(
                "dev_rho".into(),
                rho.map_or_else(|| "none".into(), |r| format!("{r:?}")),
            );
            ck.save(&path)?;
            self.state.best_checkpoint = Some(path);
        }
        Ok(!first)
    }

    /// Runs the epoch loop. `step` computes one mini-batch loss on the
    /// tape given the bound student variables and example indices.
    fn run<F>(mut self, examples: usize, with_projection: bool, mut step: F) -> Result<StageOutcome>
    where
        F: FnMut(&Tape, &BTreeMap<String, Var>, &Encoder, &[usize], &mut RunState) -> Result<Var>,
    {
        let n = self.cfg.batch_size;
        if examples < n {
            return Err(Error::Invalid(format!(
                "need at least batch_size = {n} training examples, got {examples}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut adam = AdamState::new(self.cfg.learning_rate);
        let mut order: Vec<usize> = (0..examples).collect();

        self.evaluate(0)?;
        for epoch in 1..=self.cfg.max_epochs {
            order.shuffle(&mut rng);
            let mut evaluated = false;
            let mut improved = false;
            for batch in order.chunks_exact(n) {
                let tape = Tape::new();
                let vars = self.student.bind(&tape, with_projection)?;
                let loss = step(&tape, &vars, &self.student, batch, &mut self.state)?;
                self.losses.push(tape.item(loss)?);
                let grads = tape.backward(loss)?;
                adam_step(&mut self.student.params, &grads, &mut adam)?;
                self.state.global_step += 1;
                if self.state.global_step.is_multiple_of(self.cfg.eval_interval as u64) {
                    evaluated = true;
                    improved |= self.evaluate(epoch)?;
                }
            }
            self.state.epoch = epoch;
            if evaluated && !improved {
                self.state.epochs_since_improvement += 1;
            }
            if self.state.epochs_since_improvement >= self.cfg.patience {
                self.state.stopped_early = epoch < self.cfg.max_epochs;
                break;
            }
        }
        Ok(StageOutcome {
            best: self.best,
            report: RunReport {
                stage: self.cfg.stage,
                state: self.state,
                history: self.history,
                losses: self.losses,
            },
        })
    }
}

fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    tensor::gather_rows(t, rows)
}

/// Stage 1. The teacher is only read; the student (and its projection,
/// when dimensions differ) is trained with MSE or contrastive
/// distillation. For contrastive distillation the batch's teacher
/// embeddings enter the bank after that batch's loss is computed.
pub fn run_distill(
    teacher: &Encoder,
    mut student: Encoder,
    corpus: &UnlabeledCorpus,
    dev: &StsPairSet,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    if !cfg.stage.is_distill() {
        return Err(Error::Invalid(format!("run_distill needs a distill stage, got {}", cfg.stage)));
    }
    if !teacher.config.frozen {
        return Err(Error::Invalid("the teacher encoder must be frozen".into()));
    }
    if corpus.sentences.is_empty() {
        return Err(Error::Invalid("the distillation corpus is empty".into()));
    }
    let teacher_dim = teacher.output_dim();
    student.align_to_teacher(teacher_dim, cfg.seed);
    let with_projection = student.projection().is_some();

    let tokens = student.tokenize_batch(&corpus.sentences)?;
    let teacher_tokens = teacher.tokenize_batch(&corpus.sentences)?;
    let teacher_out = teacher.encode_tokens(&teacher_tokens)?;

    let tau = Temperature::new(cfg.temperature)?;
    let mut bank = MemoryBank::new(cfg.bank_capacity.max(1), teacher_dim)?;
    let stage = cfg.stage;

    let trainer = Trainer::new(cfg, dev, student)?;
    trainer.run(tokens.len(), with_projection, |tape, vars, student, batch, state| {
        let batch_tokens: Vec<Vec<usize>> = batch.iter().map(|&i| tokens[i].clone()).collect();
        let hs = student.forward(tape, vars, &batch_tokens)?;
        let ht_value = gather(&teacher_out, batch)?;
        let ht = tape.constant(ht_value.clone());
        let projection = vars.get(PROJECTION).copied();
        let loss = match stage {
            Stage::DistillKd => kd_mse_loss(tape, hs, ht, projection)?,
            _ => {
                let loss = ckd_loss(tape, hs, ht, &bank, tau, projection)?;
                bank.push(&ht_value)?;
                if bank.fill() > bank.capacity() {
                    state.bank_overflows += 1;
                }
                state.max_bank_fill = state.max_bank_fill.max(bank.fill());
                loss
            }
        };
        Ok(loss)
    })
}

/// Stage 2: supervised contrastive finetuning of the student alone, with a
/// fresh optimizer.
pub fn run_finetune(
    student: Encoder,
    triplets: &TripletSet,
    dev: &StsPairSet,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Invalid(format!("run_finetune needs the finetune stage, got {}", cfg.stage)));
    }
    if triplets.triplets.is_empty() {
        return Err(Error::Invalid("no finetuning triplets".into()));
    }
    let tokenize = |pick: fn(&Triplet) -> &crate::vocab::Sentence| {
        triplets
            .triplets
            .iter()
            .map(|t| crate::vocab::tokenize(pick(t), &student.vocab))
            .collect::<Result<Vec<_>>>()
    };
    let anchors = tokenize(|t| &t.anchor)?;
    let positives = tokenize(|t| &t.positive)?;
    let negatives = tokenize(|t| &t.negative)?;
    let tau = Temperature::new(cfg.temperature)?;

    let trainer = Trainer::new(cfg, dev, student)?;
    trainer.run(anchors.len(), false, |tape, vars, student, batch, _| {
        let pick = |src: &[Vec<usize>]| batch.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();
        let a = student.forward(tape, vars, &pick(&anchors))?;
        let p = student.forward(tape, vars, &pick(&positives))?;
        let n = student.forward(tape, vars, &pick(&negatives))?;
        supervised_cl_loss(tape, a, p, n, tau)
    })
}

/// Loads a student checkpoint for finetuning.
pub fn load_student(path: impl AsRef<Path>) -> Result<Encoder> {
    let ck = Checkpoint::load(path)?;
    if ck.encoder.config.frozen {
        return Err(Error::Invalid("checkpoint holds a frozen encoder, not a student".into()));
    }
    Ok(ck.encoder)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoOutcome {
    pub distilled: Encoder,
    pub finetuned: Encoder,
    pub distill: RunReport,
    pub finetune: RunReport,
}

/// Stage 1 then stage 2, threading the best distilled student into
/// finetuning.
pub fn run_disco(
    teacher: &Encoder,
    student: Encoder,
    corpus: &UnlabeledCorpus,
    triplets: &TripletSet,
    dev: &StsPairSet,
    distill_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
) -> Result<DiscoOutcome> {
    distill_cfg.validate()?;
    finetune_cfg.validate()?;
    let stage1 = run_distill(teacher, student, corpus, dev, distill_cfg)?;
    let stage2 = run_finetune(stage1.best.clone(), triplets, dev, finetune_cfg)?;
    Ok(DiscoOutcome {
        distilled: stage1.best,
        finetuned: stage2.best,
        distill: stage1.report,
        finetune: stage2.report,
    })
}
