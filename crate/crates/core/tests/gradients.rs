//! Finite-difference checks of every loss and every encoder variant, and
//! the teacher-constant contract.

use std::collections::BTreeMap;

use disco_core::encoder::{make_synthetic_teacher, project, project_tensor, EncoderConfig, PROJECTION};
use disco_core::gradcheck::grad_check;
use disco_core::gradsuite::{run_suite, LossKind, SuiteOptions};
use disco_core::losses::{ckd_loss, kd_mse_loss, supervised_cl_loss, Temperature};
use disco_core::{Encoder, MemoryBank, Sentence, Tape, Tensor, Var, Vocabulary};
use proptest::prelude::*;

#[test]
fn every_loss_passes_ten_random_trials() {
    let trials = run_suite(&LossKind::ALL, &SuiteOptions::default()).unwrap();
    for kind in LossKind::ALL {
        let count = trials.iter().filter(|t| t.loss == kind).count();
        assert!(count >= 10, "{kind}: {count} trials");
    }
    assert!(trials.iter().any(|t| t.variant.contains("projected")));
    for t in &trials {
        assert!(t.report.passed(), "{} {} #{}: {:?}", t.loss, t.variant, t.trial, t.report.worst());
    }
}

#[test]
fn doubled_gradients_fail_every_loss() {
    let opts = SuiteOptions { trials: 1, gradient_scale: 2.0, ..Default::default() };
    for kind in LossKind::ALL {
        let trials = run_suite(&[kind], &opts).unwrap();
        assert!(trials.iter().all(|t| !t.report.passed()), "{kind}");
    }
}

fn batch(words: &[&str]) -> Vec<Sentence> {
    words.iter().map(|w| Sentence::new(*w).unwrap()).collect()
}

fn check_encoder(config: EncoderConfig, teacher_dim: usize) {
    let vocab = Vocabulary::new(11).unwrap();
    let mut student = Encoder::init(5, vocab, config).unwrap();
    student.align_to_teacher(teacher_dim, 5);
    let teacher = make_synthetic_teacher(6, vocab, teacher_dim).unwrap();
    let text = batch(&["red fox jumps", "a lazy dog", "fox and dog", "red red red"]);
    let tokens = student.tokenize_batch(&text).unwrap();
    let ht = teacher.encode(&text).unwrap();
    let mut bank = MemoryBank::new(8, teacher_dim).unwrap();
    bank.push(&teacher.encode(&batch(&["lazy red", "jumps"])).unwrap()).unwrap();
    let tau = Temperature::new(0.2).unwrap();
    let with_projection = student.projection().is_some();

    let loss = |tape: &Tape, vars: &BTreeMap<String, Var>| {
        let hs = student.forward(tape, vars, &tokens)?;
        let m = vars.get(PROJECTION).copied();
        let t = tape.constant(ht.clone());
        let kd = kd_mse_loss(tape, hs, t, m)?;
        let ckd = ckd_loss(tape, hs, t, &bank, tau, m)?;
        let a = tape.gather_rows(hs, &[0, 1])?;
        let p = tape.gather_rows(hs, &[2, 3])?;
        let n = tape.gather_rows(hs, &[3, 0])?;
        let cl = supervised_cl_loss(tape, a, p, n, tau)?;
        tape.add(tape.add(kd, ckd)?, cl)
    };
    let mut params = student.params.clone();
    if !with_projection {
        params.remove(PROJECTION);
    }
    let report = grad_check(loss, &params, 1e-6, 1e-4).unwrap();
    assert!(report.passed(), "{config:?}: {:?}", report.worst());
    if with_projection {
        assert!(report.entries.iter().any(|e| e.param == PROJECTION && e.analytic != 0.0));
    }
}

#[test]
fn mean_mlp_student_gradients() {
    check_encoder(EncoderConfig::student(4, 3), 3);
}

#[test]
fn mean_mlp_student_with_projection_gradients() {
    check_encoder(EncoderConfig::student(4, 3), 5);
}

#[test]
fn attention_student_gradients() {
    check_encoder(EncoderConfig::attention_student(4, 2, 3), 5);
}

#[test]
fn plain_mean_student_gradients() {
    let config = EncoderConfig {
        pooling: disco_core::encoder::Pooling::Mean,
        ..EncoderConfig::student(3, 3)
    };
    check_encoder(config, 3);
}

#[test]
fn teacher_receives_no_gradient() {
    let vocab = Vocabulary::new(13).unwrap();
    let teacher = make_synthetic_teacher(1, vocab, 4).unwrap();
    let student = Encoder::init(2, vocab, EncoderConfig::student(3, 4)).unwrap();
    let text = batch(&["one two", "three four five", "six"]);
    let before = teacher.params.clone();

    let tape = Tape::new();
    let tv = teacher.bind(&tape, false).unwrap();
    let sv = student.bind(&tape, false).unwrap();
    let ht = teacher.forward(&tape, &tv, &teacher.tokenize_batch(&text).unwrap()).unwrap();
    let hs = student.forward(&tape, &sv, &student.tokenize_batch(&text).unwrap()).unwrap();
    let bank = MemoryBank::new(4, 4).unwrap();
    let kd = kd_mse_loss(&tape, hs, ht, None).unwrap();
    let ckd = ckd_loss(&tape, hs, ht, &bank, Temperature::default(), None).unwrap();
    let grads = tape.backward(tape.add(kd, ckd).unwrap()).unwrap();
    // teacher leaves are constants, so only student parameters appear
    assert!(grads.keys().eq(student.params.keys()));
    assert!(grads.values().any(|g| g.data().iter().any(|v| *v != 0.0)));
    assert_eq!(teacher.params, before);
}

#[test]
fn detached_teacher_input_gets_zero_gradient() {
    let tape = Tape::new();
    let hs = tape.param("hs", &Tensor::from_rows(&[[0.3, 0.1], [0.2, -0.5]]).unwrap()).unwrap();
    let ht = tape.param("ht", &Tensor::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap()).unwrap();
    let bank = MemoryBank::new(2, 2).unwrap();
    let kd = kd_mse_loss(&tape, hs, ht, None).unwrap();
    let ckd = ckd_loss(&tape, hs, ht, &bank, Temperature::default(), None).unwrap();
    let grads = tape.backward(tape.add(kd, ckd).unwrap()).unwrap();
    assert!(grads["ht"].data().iter().all(|v| *v == 0.0));
    assert!(grads["hs"].data().iter().any(|v| *v != 0.0));
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn projection_is_linear(h1 in mat(3, 4), h2 in mat(3, 4), m in mat(5, 4), alpha in -5.0f64..5.0, beta in -5.0f64..5.0) {
        let combo: Vec<f64> = h1.data().iter().zip(h2.data()).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = project_tensor(&Tensor::matrix(3, 4, combo).unwrap(), &m).unwrap();
        let p1 = project_tensor(&h1, &m).unwrap();
        let p2 = project_tensor(&h2, &m).unwrap();
        for (i, l) in lhs.data().iter().enumerate() {
            let r = alpha * p1.data()[i] + beta * p2.data()[i];
            prop_assert!((l - r).abs() <= 1e-12 * r.abs().max(1.0), "{} vs {}", l, r);
        }
        let tape = Tape::new();
        let on_tape = project(&tape, tape.constant(h1.clone()), tape.constant(m.clone())).unwrap();
        prop_assert_eq!(tape.value(on_tape).unwrap(), p1);
    }
}
