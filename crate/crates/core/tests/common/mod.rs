#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use attrib_eval::data::Instance;
use attrib_eval::scorer::{Gateway, PairWeight, Scorer, SyntheticScorer, SyntheticScorerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scorer over tokens `t0..t{vocab}` with random weights and a few
/// interaction pairs, so Shapley values are not simply the linear weights.
pub fn random_spec(seed: u64, vocab: usize) -> SyntheticScorerSpec {
    let mut r = rng(seed);
    let weights: BTreeMap<String, Vec<f64>> = (0..vocab)
        .map(|t| {
            (
                format!("t{t}"),
                vec![r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5)],
            )
        })
        .collect();
    let pair_weights = (0..vocab / 2)
        .map(|_| PairWeight {
            tokens: (
                format!("t{}", r.gen_range(0..vocab)),
                format!("t{}", r.gen_range(0..vocab)),
            ),
            weights: vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)],
        })
        .collect();
    SyntheticScorerSpec {
        model_id: format!("random-{seed}"),
        labels: vec!["A".into(), "B".into()],
        bias: vec![0.0, 0.0],
        temperature: 1.0,
        weights,
        pair_weights,
    }
}

pub fn gateway(spec: SyntheticScorerSpec) -> Gateway {
    let labels = spec.labels.clone();
    let scorer: Arc<dyn Scorer> = Arc::new(SyntheticScorer::new(spec).unwrap());
    Gateway::new(scorer, labels)
}

pub fn random_instance(r: &mut ChaCha8Rng, id: &str, n: usize, vocab: usize) -> Instance {
    let tokens: Vec<String> = (0..n)
        .map(|_| format!("t{}", r.gen_range(0..vocab)))
        .collect();
    let mut rationale: Vec<u8> = (0..n).map(|_| u8::from(r.gen_bool(0.3))).collect();
    rationale[r.gen_range(0..n)] = 1;
    Instance {
        id: id.to_string(),
        tokens,
        segment_ids: vec![0; n],
        gold_label: "A".into(),
        rationale,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Average precision by sweeping every distinct score as a threshold and
/// summing precision × recall increments.
pub fn ap_threshold_sweep(scores: &[f64], rationale: &[u8]) -> f64 {
    let positives = rationale.iter().filter(|&&r| r == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| rationale[i] == 1).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// Survival function of the chi-square distribution by adaptive Simpson
/// integration of the density, with Γ(df/2) computed exactly.
pub fn chi_square_sf_by_integration(x: f64, df: u32) -> f64 {
    let k = df as f64 / 2.0;
    let ln_norm = k * std::f64::consts::LN_2 + ln_gamma_half_integer(df);
    let density = move |t: f64| {
        if t <= 0.0 {
            0.0
        } else {
            ((k - 1.0) * t.ln() - t / 2.0 - ln_norm).exp()
        }
    };
    let upper = (df as f64 + 40.0 * (2.0 * df as f64).sqrt() + 200.0).max(x + 200.0);
    // Split the range so each piece is smooth and well resolved.
    let pieces = 400;
    let h = (upper - x) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let a = x + i as f64 * h;
            adaptive_simpson(&density, a, a + h, 1e-15, 30)
        })
        .sum()
}

/// ln Γ(df/2) from the exact factorial forms.
pub fn ln_gamma_half_integer(df: u32) -> f64 {
    if df.is_multiple_of(2) {
        // Γ(m) = (m-1)!
        let m = df / 2;
        (1..m).map(|i| (i as f64).ln()).sum()
    } else {
        // Γ(m + 1/2) = √π · Π_{i=1..m} (i - 1/2)
        let m = (df - 1) / 2;
        0.5 * std::f64::consts::PI.ln() + (1..=m).map(|i| (i as f64 - 0.5).ln()).sum::<f64>()
    }
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let c = (a + b) / 2.0;
    let (fa, fb, fc) = (f(a), f(b), f(c));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_step(f, a, b, fa, fb, fc, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = (a + b) / 2.0;
    let (d, e) = ((a + c) / 2.0, (c + b) / 2.0);
    let (fd, fe) = (f(d), f(e));
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson_step(f, a, c, fa, fc, fd, left, tol / 2.0, depth - 1)
        + simpson_step(f, c, b, fc, fb, fe, right, tol / 2.0, depth - 1)
}
