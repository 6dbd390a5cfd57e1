//! Teacher, untrained student, KD-only, CKD-only and full DisCo on the
//! synthetic setup, scored on the synthetic test set.
//!
//! cargo run --release -p disco-core --example synthetic_disco [seed] [lr] [epochs] [finetune_lr] [tau] [finetune_eval_interval]

use std::time::Instant;

use disco_core::encoder::make_synthetic_teacher;
use disco_core::synth::{synth_generate, SynthSizes};
use disco_core::{run_distill, run_finetune, sts_evaluate, Encoder, EncoderConfig, Stage, TrainConfig, Vocabulary};

fn main() -> disco_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let ft_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let tau: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let ft_eval: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(5);

    let vocab = Vocabulary::new(2048)?;
    let data = synth_generate(seed, &SynthSizes::default(), &vocab)?;
    let teacher = make_synthetic_teacher(seed + 1, vocab, 32)?;
    let student = Encoder::init(seed + 2, vocab, EncoderConfig::student(16, 32))?;
    let score = |e: &Encoder| sts_evaluate("test", &data.test.pairs, e).map(|r| r.rho.unwrap_or(f64::NAN));
    println!("teacher  {:.4}", score(&teacher)?);
    println!("untrained {:.4}", score(&student)?);

    let mut distilled = Vec::new();
    for stage in [Stage::DistillKd, Stage::DistillCkd] {
        let t = Instant::now();
        let cfg = TrainConfig {
            learning_rate: lr,
            max_epochs: epochs,
            seed,
            temperature: tau,
            ..TrainConfig::distill(stage)
        };
        let out = run_distill(&teacher, student.clone(), &data.corpus, &data.dev, &cfg)?;
        println!(
            "{stage:<12} test {:.4} dev {:?} steps {} epochs {} {:?}",
            score(&out.best)?,
            out.report.state.best_dev,
            out.report.state.global_step,
            out.report.state.epoch,
            t.elapsed()
        );
        distilled.push(out.best);
    }
    for (name, d) in ["kd+ft", "ckd+ft"].iter().zip(&distilled) {
        let t = Instant::now();
        let cfg = TrainConfig { learning_rate: ft_lr, seed, temperature: tau, eval_interval: ft_eval, ..TrainConfig::finetune() };
        let out = run_finetune(d.clone(), &data.triplets, &data.dev, &cfg)?;
        println!("{name:<12} test {:.4} dev {:?} {:?}", score(&out.best)?, out.report.state.best_dev, t.elapsed());
        if std::env::var("VERBOSE").is_ok() {
            for r in &out.report.history {
                println!("  step {} loss {:?} dev {:?}", r.step, r.loss, r.dev_rho);
            }
        }
    }
    Ok(())
}
