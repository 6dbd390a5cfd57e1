//! `disco`: distillation, finetuning, evaluation, gradient checks and
//! run reports.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error.

mod artifacts;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use disco_core::checkpoint::Checkpoint;
use disco_core::config::ConfigFile;
use disco_core::data::{self, StsPairSet};
use disco_core::encoder::{make_synthetic_teacher, DEFAULT_TEACHER_DIM};
use disco_core::eval::{sts_evaluate_with, DEFAULT_POSITIVE_THRESHOLD};
use disco_core::gradsuite::{run_suite, LossKind, SuiteOptions};
use disco_core::pipeline::{load_student, TRAIN_KEYS};
use disco_core::synth::{synth_generate, SynthSizes};
use disco_core::{run_distill, run_finetune, Encoder, EncoderConfig, Stage, TrainConfig, Vocabulary};

use artifacts::RunSummary;

/// Directory searched for `distill.conf` / `finetune.conf` when `--config`
/// is not given.
const CONFIG_DIR_ENV: &str = "DISCO_CONFIG_DIR";
const DEFAULT_VOCAB_SIZE: usize = 2048;

#[derive(Parser, Debug)]
#[command(name = "disco", version, about = "Contrastive distillation of sentence encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage 1: distill a frozen teacher into a student on unlabeled text.
    Distill(DistillArgs),
    /// Stage 2: supervised contrastive finetuning on triplets.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on STS files.
    Evaluate(EvaluateArgs),
    /// Check loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Aggregate run directories into comparison tables.
    Report(ReportArgs),
    /// Write a deterministic synthetic corpus, triplets and STS sets.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Kd,
    Ckd,
}

impl Method {
    fn stage(self) -> Stage {
        match self {
            Method::Kd => Stage::DistillKd,
            Method::Ckd => Stage::DistillCkd,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Method::Kd => "kd",
            Method::Ckd => "ckd",
        }
    }
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("teacher_source").required(true).args(["teacher", "synthetic_teacher"])))]
#[command(group(ArgGroup::new("student_source").required(true).args(["student_init", "init_seed"])))]
struct DistillArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frozen teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Build the seeded synthetic teacher instead of loading one.
    #[arg(long, value_name = "SEED")]
    synthetic_teacher: Option<u64>,
    /// Student checkpoint to start from.
    #[arg(long, value_name = "CKPT")]
    student_init: Option<PathBuf>,
    /// Seed for a freshly initialized student.
    #[arg(long, value_name = "N")]
    init_seed: Option<u64>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long, value_enum, default_value = "ckd")]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    /// Record elapsed milliseconds in the training log.
    #[arg(long)]
    wall_time: bool,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    wall_time: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// STS file; repeat for several datasets.
    #[arg(long, required = true)]
    sts: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "off")]
    diagnostics: Switch,
    /// Gold score at or above which a pair counts as positive.
    #[arg(long, default_value_t = DEFAULT_POSITIVE_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Kd,
    Ckd,
    Cl,
    All,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    loss: LossArg,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Doubles every analytic gradient to exercise the failure path.
    #[arg(long, hide = true)]
    corrupt_gradients: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory; repeat for several.
    #[arg(long, required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2000)]
    corpus: usize,
    #[arg(long, default_value_t = 500)]
    triplets: usize,
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Distill(a) => distill(a),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report::run(&a.runs, &a.out),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Explicit `--config`, else `$DISCO_CONFIG_DIR/<name>` when present.
fn load_config(explicit: Option<&Path>, name: &str) -> Result<Option<ConfigFile>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(CONFIG_DIR_ENV) {
            Some(dir) if Path::new(&dir).join(name).is_file() => Path::new(&dir).join(name),
            _ => return Ok(None),
        },
    };
    Ok(Some(ConfigFile::load(&path)?))
}

/// Student and synthetic-teacher shape settings accepted next to the
/// training keys in a distill config.
struct ModelSettings {
    vocab_size: usize,
    teacher_dim: usize,
    student_embed_dim: usize,
    student_output_dim: usize,
    student_blocks: usize,
}

const MODEL_KEYS: &[&str] = &["vocab_size", "teacher_dim", "student_embed_dim", "student_output_dim", "student_blocks"];

impl ModelSettings {
    fn from_config(file: Option<&ConfigFile>) -> Result<Self> {
        let mut s = Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            teacher_dim: DEFAULT_TEACHER_DIM,
            student_embed_dim: 16,
            student_output_dim: DEFAULT_TEACHER_DIM,
            student_blocks: 0,
        };
        if let Some(f) = file {
            let get = |k: &str, d: usize| -> Result<usize> { Ok(f.get(k)?.unwrap_or(d)) };
            s.vocab_size = get("vocab_size", s.vocab_size)?;
            s.teacher_dim = get("teacher_dim", s.teacher_dim)?;
            s.student_embed_dim = get("student_embed_dim", s.student_embed_dim)?;
            s.student_output_dim = get("student_output_dim", s.student_output_dim)?;
            s.student_blocks = get("student_blocks", s.student_blocks)?;
        }
        Ok(s)
    }

    fn student_config(&self) -> EncoderConfig {
        if self.student_blocks == 0 {
            EncoderConfig::student(self.student_embed_dim, self.student_output_dim)
        } else {
            EncoderConfig::attention_student(self.student_embed_dim, self.student_blocks, self.student_output_dim)
        }
    }
}

fn train_config(base: TrainConfig, file: Option<&ConfigFile>, extra_keys: &[&str]) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(f) = file {
        let allowed: Vec<&str> = TRAIN_KEYS.iter().chain(extra_keys).copied().collect();
        f.check_keys(&allowed)?;
        cfg.apply_known(f)?;
    }
    Ok(cfg)
}

fn load_dev(path: &Path) -> Result<StsPairSet> {
    Ok(data::load_sts(path, "dev")?)
}

fn distill(args: DistillArgs) -> Result<bool> {
    let file = load_config(args.config.as_deref(), "distill.conf")?;
    let model = ModelSettings::from_config(file.as_ref())?;
    let mut cfg = train_config(TrainConfig::distill(args.method.stage()), file.as_ref(), MODEL_KEYS)?;
    if cfg.stage != args.method.stage() && file.as_ref().and_then(|f| f.raw("stage")).is_some() {
        bail!("config stage {} disagrees with --method {}", cfg.stage, args.method.as_str());
    }
    cfg.stage = args.method.stage();
    cfg.checkpoint_dir = Some(args.out.clone());
    cfg.record_wall_time = args.wall_time;
    cfg.tags = BTreeMap::from([("method".to_string(), args.method.as_str().to_string())]);
    cfg.validate()?;

    let teacher = match (&args.teacher, args.synthetic_teacher) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading teacher {}", path.display()))?;
            if !ck.encoder.config.frozen {
                bail!("{} is not a frozen teacher checkpoint", path.display());
            }
            ck.encoder
        }
        (None, Some(seed)) => {
            make_synthetic_teacher(seed, Vocabulary::new(model.vocab_size)?, model.teacher_dim)?
        }
        (None, None) => unreachable!("clap requires a teacher source"),
    };
    let student = match (&args.student_init, args.init_seed) {
        (Some(path), _) => load_student(path).with_context(|| format!("loading student {}", path.display()))?,
        (None, Some(seed)) => Encoder::init(seed, teacher.vocab, model.student_config())?,
        (None, None) => unreachable!("clap requires a student source"),
    };
    let corpus = data::load_unlabeled(&args.corpus)?;
    let dev = load_dev(&args.dev)?;

    let outcome = run_distill(&teacher, student, &corpus, &dev, &cfg)?;
    let summary = RunSummary::new("distill", args.method.as_str(), &cfg, &outcome);
    artifacts::write_training(&args.out, &summary, &outcome, &dev)?;
    println!(
        "distill-{}: best dev rho {} after {} steps; artifacts in {}",
        args.method.as_str(),
        artifacts::fmt_rho(outcome.report.state.best_dev),
        outcome.report.state.global_step,
        args.out.display()
    );
    Ok(true)
}

fn finetune(args: FinetuneArgs) -> Result<bool> {
    let file = load_config(args.config.as_deref(), "finetune.conf")?;
    let mut cfg = train_config(TrainConfig::finetune(), file.as_ref(), &[])?;
    if cfg.stage != Stage::Finetune {
        bail!("config stage {} is not valid for finetune", cfg.stage);
    }
    let input = Checkpoint::load(&args.student).with_context(|| format!("loading student {}", args.student.display()))?;
    if input.encoder.config.frozen {
        bail!("{} holds a frozen encoder, not a student", args.student.display());
    }
    let method = match input.metadata.get("method") {
        Some(m) if !m.starts_with("disco-") => format!("disco-{m}"),
        Some(m) => m.clone(),
        None => "finetune".to_string(),
    };
    cfg.checkpoint_dir = Some(args.out.clone());
    cfg.record_wall_time = args.wall_time;
    cfg.tags = BTreeMap::from([("method".to_string(), method.clone())]);
    cfg.validate()?;

    let triplets = data::load_triplets(&args.triplets)?;
    let dev = load_dev(&args.dev)?;
    let outcome = run_finetune(input.encoder, &triplets, &dev, &cfg)?;
    let summary = RunSummary::new("finetune", &method, &cfg, &outcome);
    artifacts::write_training(&args.out, &summary, &outcome, &dev)?;
    println!(
        "finetune: best dev rho {} after {} steps; artifacts in {}",
        artifacts::fmt_rho(outcome.report.state.best_dev),
        outcome.report.state.global_step,
        args.out.display()
    );
    Ok(true)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn evaluate(args: EvaluateArgs) -> Result<bool> {
    if !args.threshold.is_finite() {
        bail!("--threshold must be finite");
    }
    let ck = Checkpoint::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let threshold = (args.diagnostics == Switch::On).then_some(args.threshold);
    let mut reports = Vec::new();
    for path in &args.sts {
        let name = dataset_name(path);
        let set = data::load_sts(path, &name)?;
        reports.push(sts_evaluate_with(&set.name, &set.pairs, &ck.encoder, threshold)?);
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    artifacts::write_reports(&args.out, &reports)?;
    let method = ck.metadata.get("method").cloned().unwrap_or_else(|| "unknown".into());
    let summary = RunSummary::for_evaluation(&method, &ck, args.diagnostics == Switch::On);
    artifacts::write_summary(&args.out, &summary)?;
    print!("{}", disco_core::eval::render_table(&reports));
    Ok(true)
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let losses: Vec<LossKind> = match args.loss {
        LossArg::Kd => vec![LossKind::Kd],
        LossArg::Ckd => vec![LossKind::Ckd],
        LossArg::Cl => vec![LossKind::Cl],
        LossArg::All => LossKind::ALL.to_vec(),
    };
    let opts = SuiteOptions {
        trials: args.trials as usize,
        tol: args.tol,
        step: args.step,
        seed: args.seed,
        gradient_scale: if args.corrupt_gradients { 2.0 } else { 1.0 },
    };
    let trials = run_suite(&losses, &opts)?;
    let mut groups: BTreeMap<(LossKind, &str), (usize, usize, f64)> = BTreeMap::new();
    for t in &trials {
        let g = groups.entry((t.loss, t.variant)).or_insert((0, 0, 0.0));
        g.0 += 1;
        g.1 += usize::from(!t.report.passed());
        g.2 = g.2.max(t.report.worst().map_or(0.0, |e| e.error));
    }
    for ((loss, variant), (count, failed, worst)) in &groups {
        let status = if *failed == 0 { "ok" } else { "FAIL" };
        println!("{status:<4} {loss:<3} {variant:<15} trials {count:>3}  failed {failed:>3}  worst rel err {worst:.3e}");
    }
    let worst = trials
        .iter()
        .filter_map(|t| t.report.worst().map(|e| (t, e)))
        .max_by(|a, b| a.1.error.total_cmp(&b.1.error));
    let failed = trials.iter().filter(|t| !t.report.passed()).count();
    if failed == 0 {
        println!("all {} trials passed (tol {:e})", trials.len(), args.tol);
        return Ok(true);
    }
    if let Some((t, e)) = worst {
        eprintln!(
            "{failed} of {} trials failed; worst relative error {:.3e} in {} {} trial {} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            trials.len(),
            e.error,
            t.loss,
            t.variant,
            t.trial,
            e.param,
            e.index,
            e.analytic,
            e.numeric
        );
    }
    Ok(false)
}

fn synth(args: SynthArgs) -> Result<bool> {
    let sizes = SynthSizes {
        corpus: args.corpus,
        triplets: args.triplets,
        dev_pairs: args.dev,
        test_pairs: args.test,
        ..SynthSizes::default()
    };
    let vocab = Vocabulary::new(args.vocab_size)?;
    let data = synth_generate(args.seed, &sizes, &vocab)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    data::write_unlabeled(args.out.join("corpus.txt"), &data.corpus.sentences)?;
    data::write_triplets(args.out.join("triplets.tsv"), &data.triplets.triplets)?;
    data::write_sts(args.out.join("dev.tsv"), &data.dev.pairs)?;
    data::write_sts(args.out.join("test.tsv"), &data.test.pairs)?;
    println!(
        "wrote {} sentences, {} triplets, {} dev and {} test pairs to {}",
        data.corpus.sentences.len(),
        data.triplets.triplets.len(),
        data.dev.pairs.len(),
        data.test.pairs.len(),
        args.out.display()
    );
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_are_detected() {
        assert!(Cli::try_parse_from(["disco", "gradcheck", "--trials", "0"]).is_err());
        assert!(Cli::try_parse_from(["disco", "distill", "--dev", "d", "--out", "o", "--synthetic-teacher", "1", "--init-seed", "2"]).is_err());
        assert!(Cli::try_parse_from(["disco", "distill", "--corpus", "c", "--dev", "d", "--out", "o", "--synthetic-teacher", "1", "--teacher", "t", "--init-seed", "2"]).is_err());
        assert!(Cli::try_parse_from(["disco", "gradcheck", "--loss", "all", "--trials", "10", "--tol", "1e-4"]).is_ok());
    }

    #[test]
    fn dataset_names_come_from_file_stems() {
        assert_eq!(dataset_name(Path::new("/x/sts-b.dev.tsv")), "sts-b.dev");
    }
}
