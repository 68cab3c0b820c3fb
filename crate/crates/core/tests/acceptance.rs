//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfbest::checkpoint::{decode, encode, Metadata};
use tfbest::data::{make_windows, DriveHistory, NormStats, SmartRecord, WindowSample};
use tfbest::eval::{aggregate_overlaps, confidence_margin};
use tfbest::gradcheck::{run_suite, GRAD_TOL};
use tfbest::layers::{causal_mask, sinusoidal_pe, AttentionScale, Graph, Init, MultiHeadAttention, ParamStore};
use tfbest::model::{ModelConfig, TfbestModel, Variant};
use tfbest::stats::student_t_quantile;
use tfbest::tensor::{Tape, Tensor};
use tfbest::train::{dataset_rmse, fit, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = fn() -> Outcome;

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let checks = run_suite(0).expect("suite runs");
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error()).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, max rel error {worst:.2e} (< {GRAD_TOL:e}), {:.1}s (< 60s){}",
            checks.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    )
}

fn confidence_rows() -> Outcome {
    // Row 59: two overlapping predictions.
    let r59 = confidence_margin(&[44.1328, 44.7142], 0.90).unwrap();
    let ok59 = within(r59.point_estimate, 44.42, 0.01)
        && within(r59.std_error, 0.29, 0.01)
        && within(r59.ci_low, 42.59, 0.01)
        && within(r59.ci_high, 46.26, 0.01);
    // Row 58: three predictions with standard error 0.28.
    let spread = 0.4834;
    let r58 = confidence_margin(&[43.40 - spread, 43.40, 43.40 + spread], 0.90).unwrap();
    let t2 = student_t_quantile(0.95, 2).unwrap();
    let half = r58.ci_high - r58.point_estimate;
    let ok58 = within(half, 0.815, 0.01)
        && within(r58.std_error, 0.28, 0.01)
        && within(r58.point_estimate, 43.40, 0.01)
        && within(t2, 2.9200, 1e-4);
    outcome(
        ok59 && ok58,
        format!(
            "row 59: {:.4} ± {:.4} ({:.4}, {:.4}); row 58: SE {:.4}, half-width {half:.4} (t = {t2:.4})",
            r59.point_estimate, r59.std_error, r59.ci_low, r59.ci_high, r58.std_error
        ),
    )
}

fn t_quantiles() -> Outcome {
    let q1 = student_t_quantile(0.95, 1).unwrap();
    let q2 = student_t_quantile(0.95, 2).unwrap();
    let q_big = student_t_quantile(0.95, 10_000).unwrap();
    outcome(
        within(q1, 6.313752, 1e-4) && within(q2, 2.919986, 1e-4) && within(q_big, 1.64487, 1e-3),
        format!("df=1 {q1:.6}, df=2 {q2:.6}, df=10000 {q_big:.6}"),
    )
}

fn positional_encoding() -> Outcome {
    let pe = sinusoidal_pe::<f64>(2, 4).unwrap();
    let mut worst: f64 = 0.0;
    for pos in 0..2 {
        for i in 0..2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / 4.0);
            worst = worst.max((pe.at(pos, 2 * i) - angle.sin()).abs());
            worst = worst.max((pe.at(pos, 2 * i + 1) - angle.cos()).abs());
        }
    }
    outcome(worst <= 1e-12, format!("pos 0..1, d_model 4: max deviation {worst:.1e}; pos 1 = {:?}", pe.row(1)))
}

fn history(days: usize) -> DriveHistory {
    let end = NaiveDate::from_ymd_opt(2021, 6, 1).unwrap();
    let records = (0..days)
        .map(|t| SmartRecord {
            date: end - chrono::Duration::days((days - 1 - t) as i64),
            serial: "W".into(),
            model: "M".into(),
            failure: t == days - 1,
            features: vec![Some(t as f64)],
        })
        .collect();
    DriveHistory::new(records).unwrap()
}

fn windowing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stats = NormStats { columns: vec!["c".into()], mean: vec![0.0], std: vec![1.0] };
    let mut mismatches = Vec::new();
    for _ in 0..50 {
        let d = rng.random_range(30..=120);
        let t = rng.random_range(5..=40);
        let windows = make_windows(&history(d), t, &stats).unwrap();
        let expected = common::brute_force_overlaps(d, t);
        let expected_windows = (0..d).filter(|&s| s + t <= d).count();
        let preds: Vec<Vec<f64>> = windows.iter().map(|w| vec![0.0; w.len()]).collect();
        let days = aggregate_overlaps(&windows, &preds).unwrap();
        let counts: Vec<usize> = (0..d)
            .map(|i| days.get(&("W".to_string(), i)).map_or(0, |p| p.preds.len()))
            .collect();
        if windows.len() != expected_windows || counts != expected {
            mismatches.push((d, t));
        }
    }
    outcome(mismatches.is_empty(), format!("50 random (D, T) pairs, mismatches: {mismatches:?}"))
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut masked_nonzero = 0usize;
    let mut worst_row_sum: f64 = 0.0;
    for _ in 0..20 {
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=8 / heads);
        let (lq, lk) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let masked = lq == lk && rng.random::<bool>();
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, &mut Init::new(rng.random()), "m", d, heads, AttentionScale::HeadDim).unwrap();
        for t in store.values_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.2..0.2);
            }
        }
        let xq: Vec<f64> = (0..lq * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xkv: Vec<f64> = (0..lk * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = masked.then(|| causal_mask(lq));

        let mut g = Graph::new(&store, false, 0);
        let q = g.input(Tensor::new(vec![lq, d], xq.clone()).unwrap());
        let kv = g.input(Tensor::new(vec![lk, d], xkv.clone()).unwrap());
        let y = mha.forward(&mut g, q, kv, mask.as_deref()).unwrap();
        let got = g.value(y).data().to_vec();

        let w = |id| common::mat(d, d, store.get(id).data());
        let b = |id: Option<_>| store.get(id.unwrap()).data().to_vec();
        let (want, weights) = common::mha_reference(
            &common::mat(lq, d, &xq),
            &common::mat(lk, d, &xkv),
            (&w(mha.query.weight), &b(mha.query.bias)),
            &w(mha.key.weight),
            (&w(mha.value.weight), &b(mha.value.bias)),
            (&w(mha.output.weight), &b(mha.output.bias)),
            heads,
            mask.as_deref(),
        );
        for (a, r) in got.iter().zip(want.iter().flatten()) {
            worst = worst.max((a - r).abs());
        }
        for hw in &weights {
            for row in hw {
                worst_row_sum = worst_row_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }

        // The engine's own attention weights.
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_fn(vec![lq, lk], |_| rng.random_range(-3.0..3.0)));
        let weights = tape.masked_softmax(logits, 1, mask.as_deref()).unwrap();
        let wv = tape.value(weights);
        for i in 0..lq {
            let row = wv.row(i);
            worst_row_sum = worst_row_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            if let Some(m) = &mask {
                masked_nonzero += (0..lk).filter(|&j| !m[i * lk + j] && row[j] != 0.0).count();
            }
        }
    }
    outcome(
        worst <= 1e-6 && masked_nonzero == 0 && worst_row_sum <= 1e-6,
        format!(
            "20 instances: max |diff| {worst:.1e}, nonzero masked weights {masked_nonzero}, max |row sum - 1| {worst_row_sum:.1e}"
        ),
    )
}

fn learning_signal() -> Outcome {
    let start = Instant::now();
    let data = common::synthetic_dataset(200, 16, 30, 3);
    let baseline = common::mean_predictor_rmse(&data.train, &data.val);
    let mut model = TfbestModel::<f32>::new(ModelConfig::new(Variant::Tfbest, 16), 1).unwrap();
    let cfg = TrainConfig { max_epochs: 20, seed: 2, ..TrainConfig::default() };
    let report = fit(&mut model, &data.train, &data.val, &cfg).unwrap();
    let elapsed = start.elapsed();
    let target = 0.6 * baseline;
    let reached = report.epochs.iter().find(|e| e.val_rmse.is_some_and(|v| v <= target)).map(|e| e.epoch);
    let learn_ok = reached.is_some() && elapsed < Duration::from_secs(30 * 60);

    // Capacity: memorize four windows.
    let small = common::synthetic_dataset(12, 16, 30, 11);
    let four: Vec<WindowSample> = small.train.iter().step_by(7).take(4).cloned().collect();
    let mut m4 = TfbestModel::<f32>::new(ModelConfig::new(Variant::Tfbest, 16), 1).unwrap();
    let cfg4 = TrainConfig { batch_size: 1, max_epochs: 200, seed: 2, ..TrainConfig::default() };
    fit(&mut m4, &four, &four, &cfg4).unwrap();
    let overfit = dataset_rmse(&m4, &four).unwrap();

    outcome(
        learn_ok && overfit < 0.5,
        format!(
            "{} train / {} val windows; mean predictor {baseline:.3}, target {target:.3}, best val {:.3} (epoch {}), first reached at epoch {}; {:.0}s; overfit 4 windows x 200 epochs: RMSE {overfit:.3}",
            data.train.len(),
            data.val.len(),
            report.best_rmse,
            report.best_epoch,
            reached.map_or("never".into(), |e| e.to_string()),
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_ordering() -> Outcome {
    let data = common::synthetic_dataset(200, 16, 30, 3);
    let budget = TrainConfig { batch_size: 64, max_epochs: 6, ..TrainConfig::default() };
    let config = |variant| ModelConfig {
        d_model: 32,
        d_ff: 32,
        ..ModelConfig::new(variant, 16)
    };
    let seeds = [11u64, 12, 13];
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for variant in [Variant::Tfbest, Variant::Dast] {
        let mut scores = Vec::new();
        for &seed in &seeds {
            let mut m = TfbestModel::<f32>::new(config(variant), seed).unwrap();
            let cfg = TrainConfig { seed, ..budget.clone() };
            let r = fit(&mut m, &data.train, &data.val, &cfg).unwrap();
            scores.push(r.best_rmse);
        }
        rows.push(format!("{variant} {:?}", scores.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()));
        scores.sort_by(f64::total_cmp);
        medians.push(scores[1]);
    }
    outcome(
        medians[0] <= medians[1],
        format!(
            "seeds {seeds:?}, d_model 32, 6 epochs, batch 64: {}; median tfbest {:.3} vs dast {:.3}",
            rows.join(", "),
            medians[0],
            medians[1]
        ),
    )
}

fn determinism() -> Outcome {
    let data = common::synthetic_dataset(20, 6, 30, 9);
    let train: Vec<WindowSample> = data.train.iter().take(150).cloned().collect();
    let cfg = ModelConfig { d_model: 16, heads: 2, enc_layers: 1, d_ff: 16, ..ModelConfig::new(Variant::Tfbest, 6) };
    let tc = TrainConfig { batch_size: 32, max_epochs: 3, seed: 5, ..TrainConfig::default() };
    let run = || {
        let mut m = TfbestModel::<f32>::new(cfg.clone(), 7).unwrap();
        fit(&mut m, &train, &[], &tc).unwrap();
        encode(&m, &Metadata::new())
    };
    let (a, b) = (run(), run());
    let (model, _) = decode(&a).unwrap();
    let (again, _) = decode(&encode(&model, &Metadata::new())).unwrap();
    let bit_equal = data.val.iter().chain(&data.test).all(|w| {
        let x = tfbest::train::window_tensor::<f32>(w).unwrap();
        let (p, q) = (model.predict(&x).unwrap(), again.predict(&x).unwrap());
        p.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    outcome(
        a == b && bit_equal,
        format!("checkpoints identical: {}, {} bytes; round-trip predictions bit-equal: {bit_equal}", a == b, a.len()),
    )
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("confidence rows 59/58", confidence_rows),
        ("student-t quantiles", t_quantiles),
        ("sinusoidal encoding", positional_encoding),
        ("windowing oracle", windowing),
        ("attention oracle", attention_oracle),
        ("learning signal", learning_signal),
        ("ablation ordering", ablation_ordering),
        ("determinism and persistence", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let o = run();
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}. {name}: {} [{:.1}s]", i + 1, o.detail, started.elapsed().as_secs_f64());
        if !o.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
