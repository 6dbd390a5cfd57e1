//! Randomly parameterized instances of every loss, checked against finite
//! differences. Backs the `gradcheck` command.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::gradcheck::{compare_gradients, evaluate, GradCheckReport};
use crate::losses::{ckd_loss, kd_mse_loss, supervised_cl_loss, Temperature};
use crate::tape::{Params, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossKind {
    Kd,
    Ckd,
    Cl,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Kd, LossKind::Ckd, LossKind::Cl];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Kd => "kd",
            LossKind::Ckd => "ckd",
            LossKind::Cl => "cl",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kd" => Ok(LossKind::Kd),
            "ckd" => Ok(LossKind::Ckd),
            "cl" => Ok(LossKind::Cl),
            other => Err(Error::Invalid(format!("unknown loss {other:?}"))),
        }
    }
}

/// One checked instance: which loss, which variant, and the entry report.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub loss: LossKind,
    pub variant: &'static str,
    pub trial: usize,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("sizes agree")
}

type LossFn = Box<dyn Fn(&Tape, &BTreeMap<String, Var>) -> Result<Var>>;

struct Instance {
    variant: &'static str,
    params: Params,
    loss: LossFn,
}

fn instances(kind: LossKind, rng: &mut ChaCha8Rng) -> Vec<Instance> {
    let n = rng.random_range(2..5);
    let ds = rng.random_range(2..5);
    let dt = ds + rng.random_range(1..3);
    let tau = Temperature::new(rng.random_range(0.05..1.0)).expect("positive");
    match kind {
        LossKind::Kd => {
            let same = random(rng, n, ds);
            let wide = random(rng, n, dt);
            vec![
                Instance {
                    variant: "plain",
                    params: Params::from([("hs".into(), random(rng, n, ds))]),
                    loss: Box::new(move |t, v| kd_mse_loss(t, v["hs"], t.constant(same.clone()), None)),
                },
                Instance {
                    variant: "projected",
                    params: Params::from([("hs".into(), random(rng, n, ds)), ("m".into(), random(rng, dt, ds))]),
                    loss: Box::new(move |t, v| kd_mse_loss(t, v["hs"], t.constant(wide.clone()), Some(v["m"]))),
                },
            ]
        }
        LossKind::Ckd => {
            let ht = random(rng, n, ds);
            let ht_wide = random(rng, n, dt);
            let mut bank = MemoryBank::new(3 * n, ds).expect("positive");
            bank.push(&random(rng, 2 * n, ds)).expect("fits");
            let mut wide_bank = MemoryBank::new(2 * n, dt).expect("positive");
            wide_bank.push(&random(rng, n + 1, dt)).expect("fits");
            let empty = MemoryBank::new(n, ds).expect("positive");
            let ht2 = ht.clone();
            vec![
                Instance {
                    variant: "in-batch",
                    params: Params::from([("hs".into(), random(rng, n, ds))]),
                    loss: Box::new(move |t, v| ckd_loss(t, v["hs"], t.constant(ht.clone()), &empty, tau, None)),
                },
                Instance {
                    variant: "bank",
                    params: Params::from([("hs".into(), random(rng, n, ds))]),
                    loss: Box::new(move |t, v| ckd_loss(t, v["hs"], t.constant(ht2.clone()), &bank, tau, None)),
                },
                Instance {
                    variant: "bank-projected",
                    params: Params::from([("hs".into(), random(rng, n, ds)), ("m".into(), random(rng, dt, ds))]),
                    loss: Box::new(move |t, v| {
                        ckd_loss(t, v["hs"], t.constant(ht_wide.clone()), &wide_bank, tau, Some(v["m"]))
                    }),
                },
            ]
        }
        LossKind::Cl => vec![Instance {
            variant: "triplets",
            params: Params::from([
                ("anchor".into(), random(rng, n, ds)),
                ("positive".into(), random(rng, n, ds)),
                ("negative".into(), random(rng, n, ds)),
            ]),
            loss: Box::new(move |t, v| supervised_cl_loss(t, v["anchor"], v["positive"], v["negative"], tau)),
        }],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub tol: f64,
    pub step: f64,
    pub seed: u64,
    /// Scales every analytic gradient before comparison. Anything other
    /// than 1 simulates a broken backward pass.
    pub gradient_scale: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            trials: 10,
            tol: 1e-4,
            step: 1e-6,
            seed: 0,
            gradient_scale: 1.0,
        }
    }
}

/// Runs `opts.trials` random instances of every variant of each loss.
pub fn run_suite(losses: &[LossKind], opts: &SuiteOptions) -> Result<Vec<Trial>> {
    if opts.trials == 0 {
        return Err(Error::Invalid("at least one trial is required".into()));
    }
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::Invalid(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let mut out = Vec::new();
    for &kind in losses {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(kind as u64);
        for trial in 0..opts.trials {
            for inst in instances(kind, &mut rng) {
                let (_, mut grads) = evaluate(&inst.loss, &inst.params)?;
                if opts.gradient_scale != 1.0 {
                    for g in grads.values_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v *= opts.gradient_scale);
                    }
                }
                let report = compare_gradients(&inst.loss, &inst.params, &grads, opts.step, opts.tol)?;
                out.push(Trial {
                    loss: kind,
                    variant: inst.variant,
                    trial,
                    report,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_detects_corruption() {
        let opts = SuiteOptions { trials: 2, ..Default::default() };
        let trials = run_suite(&LossKind::ALL, &opts).unwrap();
        assert_eq!(trials.len(), 2 * (2 + 3 + 1));
        assert!(trials.iter().all(|t| t.report.passed()));

        let broken = SuiteOptions { gradient_scale: 2.0, ..opts };
        let trials = run_suite(&[LossKind::Kd], &broken).unwrap();
        assert!(trials.iter().any(|t| !t.report.passed()));
    }

    #[test]
    fn zero_trials_rejected() {
        let opts = SuiteOptions { trials: 0, ..Default::default() };
        assert!(run_suite(&[LossKind::Cl], &opts).is_err());
    }
}
