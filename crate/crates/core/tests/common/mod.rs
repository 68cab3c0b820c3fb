//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use tfbest::data::{prepare, synth_generate, synthetic_columns, Prepared, SplitBoundaries, SynthConfig};

/// Synthetic drives prepared with the default split and a 61-day cap.
pub fn synthetic_dataset(drives: usize, features: usize, window: usize, seed: u64) -> Prepared {
    let histories = synth_generate(&SynthConfig::new(drives, features, seed)).unwrap();
    prepare(histories, &synthetic_columns(features), window, 60, &SplitBoundaries::default()).unwrap()
}

/// RMSE of predicting the training-target mean everywhere.
pub fn mean_predictor_rmse(train: &[tfbest::data::WindowSample], eval: &[tfbest::data::WindowSample]) -> f64 {
    let all: Vec<f64> = train.iter().flat_map(|w| w.targets.iter().map(|&t| t as f64)).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let sq: Vec<f64> = eval.iter().flat_map(|w| w.targets.iter().map(move |&t| (t as f64 - mean).powi(2))).collect();
    (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
}

/// Row-major matrix helpers used by the attention oracle.
pub fn mat(rows: usize, cols: usize, data: &[f64]) -> Vec<Vec<f64>> {
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

fn project(x: &[Vec<f64>], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    let mut acc = b.map_or(0.0, |b| b[j]);
                    for (k, &xk) in row.iter().enumerate() {
                        acc += xk * w[k][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Multi-head attention written as explicit loops over queries and keys.
/// Returns the output and the per-head attention weights `[h][i][j]`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn mha_reference(
    xq: &[Vec<f64>],
    xkv: &[Vec<f64>],
    (wq, bq): (&[Vec<f64>], &[f64]),
    wk: &[Vec<f64>],
    (wv, bv): (&[Vec<f64>], &[f64]),
    (wo, bo): (&[Vec<f64>], &[f64]),
    heads: usize,
    mask: Option<&[bool]>,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let d = wq.len();
    let dk = d / heads;
    let q = project(xq, wq, Some(bq));
    let k = project(xkv, wk, None);
    let v = project(xkv, wv, Some(bv));
    let (lq, lk) = (xq.len(), xkv.len());
    let mut concat = vec![vec![0.0; d]; lq];
    let mut weights = vec![vec![vec![0.0; lk]; lq]; heads];
    for h in 0..heads {
        for i in 0..lq {
            let mut logits = vec![f64::NEG_INFINITY; lk];
            for j in 0..lk {
                if mask.is_none_or(|m| m[i * lk + j]) {
                    let mut dot = 0.0;
                    for c in h * dk..(h + 1) * dk {
                        dot += q[i][c] * k[j][c];
                    }
                    logits[j] = dot / (dk as f64).sqrt();
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| if z.is_finite() { (z - max).exp() } else { 0.0 }).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..lk {
                weights[h][i][j] = exps[j] / total;
                for c in h * dk..(h + 1) * dk {
                    concat[i][c] += weights[h][i][j] * v[j][c];
                }
            }
        }
    }
    (project(&concat, wo, Some(bo)), weights)
}

/// Brute-force overlap count per day for a drive of `d` days and window `t`.
pub fn brute_force_overlaps(d: usize, t: usize) -> Vec<usize> {
    let mut counts = vec![0; d];
    for start in 0..d {
        if start + t > d {
            continue;
        }
        for c in counts.iter_mut().skip(start).take(t) {
            *c += 1;
        }
    }
    counts
}
