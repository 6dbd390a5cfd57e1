//! Loss values against independent plain-f64 oracles, plus bank and
//! scale properties.

use disco_core::losses::{ckd_loss, kd_mse_loss, supervised_cl_loss, Temperature};
use disco_core::{MemoryBank, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if row.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
                break row;
            }
        })
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn oracle_cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Materializes the full similarity matrix against `candidates` and takes
/// softmax cross-entropy with target column `i` for row `i`.
fn oracle_info_nce(anchors: &[Vec<f64>], candidates: &[Vec<f64>], tau: f64) -> f64 {
    let n = anchors.len();
    let sim: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| candidates.iter().map(|c| oracle_cos(a, c) / tau).collect())
        .collect();
    let mut total = 0.0;
    for (i, row) in sim.iter().enumerate() {
        let denom: f64 = row.iter().map(|s| s.exp()).sum();
        total += -(row[i].exp() / denom).ln();
    }
    total / n as f64
}

fn ckd_value(hs: &[Vec<f64>], ht: &[Vec<f64>], bank: &MemoryBank, tau: f64) -> f64 {
    let tape = Tape::new();
    let s = tape.constant(tensor(hs));
    let t = tape.constant(tensor(ht));
    let loss = ckd_loss(&tape, s, t, bank, Temperature::new(tau).unwrap(), None).unwrap();
    tape.item(loss).unwrap()
}

#[test]
fn ckd_empty_bank_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for &n in &[2usize, 4, 8, 16] {
        for _ in 0..13 {
            let d = rng.random_range(2..9);
            let tau = rng.random_range(0.05..2.0);
            let hs = random_rows(&mut rng, n, d);
            let ht = random_rows(&mut rng, n, d);
            let bank = MemoryBank::new(4, d).unwrap();
            let got = ckd_value(&hs, &ht, &bank, tau);
            let want = oracle_info_nce(&hs, &ht, tau);
            assert!((got - want).abs() <= 1e-10, "n={n} d={d} tau={tau}: {got} vs {want}");
            cases += 1;
        }
    }
    assert!(cases >= 50);
}

#[test]
fn ckd_with_bank_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let (n, d, q) = (rng.random_range(1..6), rng.random_range(2..6), rng.random_range(1..12));
        let hs = random_rows(&mut rng, n, d);
        let ht = random_rows(&mut rng, n, d);
        let stored = random_rows(&mut rng, q, d);
        let mut bank = MemoryBank::new(q, d).unwrap();
        bank.push(&tensor(&stored)).unwrap();
        let mut candidates = ht.clone();
        candidates.extend(stored);
        let got = ckd_value(&hs, &ht, &bank, 0.3);
        let want = oracle_info_nce(&hs, &candidates, 0.3);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn kd_mse_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let (n, d) = (rng.random_range(1..10), rng.random_range(1..10));
        let hs = random_rows(&mut rng, n, d);
        let ht = random_rows(&mut rng, n, d);
        let mut want = 0.0;
        for i in 0..n {
            let mut sq = 0.0;
            for k in 0..d {
                sq += (hs[i][k] - ht[i][k]).powi(2);
            }
            want += sq / d as f64;
        }
        let tape = Tape::new();
        let loss = kd_mse_loss(&tape, tape.constant(tensor(&hs)), tape.constant(tensor(&ht)), None).unwrap();
        let got = tape.item(loss).unwrap();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn kd_mse_through_projection_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (n, ds, dt) = (5, 3, 4);
    let hs = random_rows(&mut rng, n, ds);
    let ht = random_rows(&mut rng, n, dt);
    let m = random_rows(&mut rng, dt, ds);
    let mut want = 0.0;
    for i in 0..n {
        for r in 0..dt {
            let p: f64 = (0..ds).map(|k| m[r][k] * hs[i][k]).sum();
            want += (p - ht[i][r]).powi(2) / dt as f64;
        }
    }
    let tape = Tape::new();
    let mv = tape.constant(tensor(&m));
    let loss = kd_mse_loss(&tape, tape.constant(tensor(&hs)), tape.constant(tensor(&ht)), Some(mv)).unwrap();
    assert!((tape.item(loss).unwrap() - want).abs() <= 1e-12);
}

/// Enumerates each anchor's 2N denominator terms one by one.
fn oracle_supervised(a: &[Vec<f64>], p: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let numerator = (oracle_cos(&a[i], &p[i]) / tau).exp();
        let mut denominator = 0.0;
        for j in 0..n {
            denominator += (oracle_cos(&a[i], &p[j]) / tau).exp();
            denominator += (oracle_cos(&a[i], &neg[j]) / tau).exp();
        }
        total -= (numerator / denominator).ln();
    }
    total / n as f64
}

#[test]
fn supervised_cl_matches_enumerated_denominators() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for n in 1..=4 {
        for _ in 0..10 {
            let d = rng.random_range(2..6);
            let tau = rng.random_range(0.05..1.5);
            let (a, p, neg) = (random_rows(&mut rng, n, d), random_rows(&mut rng, n, d), random_rows(&mut rng, n, d));
            let tape = Tape::new();
            let loss = supervised_cl_loss(
                &tape,
                tape.constant(tensor(&a)),
                tape.constant(tensor(&p)),
                tape.constant(tensor(&neg)),
                Temperature::new(tau).unwrap(),
            )
            .unwrap();
            let got = tape.item(loss).unwrap();
            let want = oracle_supervised(&a, &p, &neg, tau);
            assert!((got - want).abs() <= 1e-10, "n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn tabulated_contrastive_values() {
    let tape = Tape::new();
    let e1 = 1f64.exp();
    let hs = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    let loss = ckd_loss(&tape, hs, hs, &MemoryBank::new(2, 2).unwrap(), Temperature::new(1.0).unwrap(), None).unwrap();
    assert!((tape.item(loss).unwrap() - (-(e1 / (e1 + 1.0)).ln())).abs() < 1e-15);

    let single = tape.constant(Tensor::from_rows(&[[0.6, 0.8]]).unwrap());
    let other = tape.constant(Tensor::from_rows(&[[-3.0, 1.0]]).unwrap());
    let loss = ckd_loss(&tape, single, other, &MemoryBank::new(1, 2).unwrap(), Temperature::default(), None).unwrap();
    assert_eq!(tape.item(loss).unwrap(), 0.0);

    let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
    let n = tape.constant(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
    let one = Temperature::new(1.0).unwrap();
    let loss = supervised_cl_loss(&tape, a, a, n, one).unwrap();
    assert!((tape.item(loss).unwrap() - 0.31326168751822286).abs() < 1e-12);
    let loss = supervised_cl_loss(&tape, a, a, a, one).unwrap();
    assert!((tape.item(loss).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}

fn rows_strategy(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3),
        n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bank_is_fifo_and_bounded(capacity in 1usize..12, batches in prop::collection::vec(1usize..12, 1..8)) {
        let mut bank = MemoryBank::new(capacity, 1).unwrap();
        let mut model: std::collections::VecDeque<f64> = Default::default();
        let mut next = 0.0;
        prop_assert!(bank.is_empty());
        for size in batches {
            let rows: Vec<[f64; 1]> = (0..size).map(|k| [next + k as f64]).collect();
            let batch = Tensor::from_rows(&rows).unwrap();
            if size > capacity {
                prop_assert!(bank.push(&batch).is_err());
                continue;
            }
            bank.push(&batch).unwrap();
            for r in &rows {
                model.push_back(r[0]);
                next += 1.0;
            }
            while model.len() > capacity {
                model.pop_front();
            }
            prop_assert!(bank.fill() <= capacity);
            let stored: Vec<f64> = bank.iter().map(|r| r[0]).collect();
            prop_assert_eq!(stored, model.iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn ckd_is_invariant_to_bank_order(hs in rows_strategy(3..4, 3), ht in rows_strategy(3..4, 3), stored in rows_strategy(1..8, 3), tau in 0.05f64..1.0) {
        let mut forward = MemoryBank::new(stored.len(), 3).unwrap();
        forward.push(&tensor(&stored)).unwrap();
        let mut reversed_rows = stored.clone();
        reversed_rows.reverse();
        let mut reversed = MemoryBank::new(stored.len(), 3).unwrap();
        reversed.push(&tensor(&reversed_rows)).unwrap();
        let a = ckd_value(&hs, &ht, &forward, tau);
        let b = ckd_value(&hs, &ht, &reversed, tau);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn ckd_never_decreases_when_bank_grows(hs in rows_strategy(2..5, 3), ht_seed in 0u64..1000, stored in rows_strategy(1..10, 3), tau in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(ht_seed);
        let ht = random_rows(&mut rng, hs.len(), 3);
        let mut bank = MemoryBank::new(stored.len(), 3).unwrap();
        let mut previous = ckd_value(&hs, &ht, &bank, tau);
        for row in &stored {
            bank.push(&tensor(std::slice::from_ref(row))).unwrap();
            let now = ckd_value(&hs, &ht, &bank, tau);
            prop_assert!(now >= previous, "{} < {}", now, previous);
            previous = now;
        }
    }

    #[test]
    fn contrastive_losses_ignore_positive_rescaling(a in rows_strategy(3..4, 4), p in rows_strategy(3..4, 4), n in rows_strategy(3..4, 4), scales in prop::collection::vec(0.01f64..100.0, 9)) {
        let scaled = |rows: &[Vec<f64>], s: &[f64]| -> Vec<Vec<f64>> {
            rows.iter().zip(s).map(|(r, k)| r.iter().map(|x| x * k).collect()).collect()
        };
        let tau = Temperature::new(0.1).unwrap();
        let sup = |a: &[Vec<f64>], p: &[Vec<f64>], n: &[Vec<f64>]| {
            let tape = Tape::new();
            let l = supervised_cl_loss(&tape, tape.constant(tensor(a)), tape.constant(tensor(p)), tape.constant(tensor(n)), tau).unwrap();
            tape.item(l).unwrap()
        };
        let before = sup(&a, &p, &n);
        let after = sup(&scaled(&a, &scales[0..3]), &scaled(&p, &scales[3..6]), &scaled(&n, &scales[6..9]));
        prop_assert!((before - after).abs() <= 1e-9);

        let mut bank = MemoryBank::new(3, 4).unwrap();
        bank.push(&tensor(&n)).unwrap();
        let before = ckd_value(&a, &p, &bank, 0.1);
        let after = ckd_value(&scaled(&a, &scales[0..3]), &scaled(&p, &scales[3..6]), &bank, 0.1);
        prop_assert!((before - after).abs() <= 1e-9);
    }
}
