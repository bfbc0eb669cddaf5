#![allow(dead_code)]

use attncap::captioner::{Captioner, CaptionerConfig, ImageAnnotation};
use attncap::interface::AttentionVector;
use attncap::tensor::{glorot, seeded_rng, softmax_slice, DenseArray, Rng};
use rand::Rng as _;

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Word-level Levenshtein distance by plain recursion, no memo.
pub fn levenshtein_oracle(a: &[String], b: &[String]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = levenshtein_oracle(ra, rb) + usize::from(x != y);
            let del = levenshtein_oracle(ra, b) + 1;
            let ins = levenshtein_oracle(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

pub fn wer_oracle(reference: &[String], hypothesis: &[String]) -> f64 {
    levenshtein_oracle(reference, hypothesis) as f64 / reference.len() as f64
}

/// `Err` with a reason unless `w` is strictly positive and sums to 1 within 1e-9.
pub fn strict_simplex(w: &[f64]) -> Result<(), String> {
    if w.is_empty() {
        return Err("empty vector".into());
    }
    if let Some(v) = w.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(format!("entry {v} is not strictly positive"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

pub fn random_simplex(l: usize, rng: &mut Rng) -> AttentionVector {
    let scores: Vec<f64> = (0..l).map(|_| rng.gen_range(-4.0..4.0)).collect();
    AttentionVector::new(softmax_slice(&scores).unwrap()).unwrap()
}

pub fn random_image(l: usize, d: usize, seed: u64) -> ImageAnnotation {
    let f = glorot(&[l, d], &mut seeded_rng(seed)).map(|v| v * 3.0);
    ImageAnnotation::new(f).unwrap()
}

pub fn random_captioner(grid: usize, d: usize, v: usize, max_len: usize, seed: u64) -> Captioner {
    let cfg = CaptionerConfig {
        regions: grid * grid,
        feature_dim: d,
        vocab_size: v,
        max_len,
        dropout_rate: 0.5,
        lambda: 0.01,
    };
    let mut m = Captioner::new(cfg, &mut seeded_rng(seed)).unwrap();
    // Glorot weights on tiny layers decode almost nothing but the end token;
    // widening them gives varied captions.
    let mut rng = seeded_rng(seed ^ 0xabcd);
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for n in names {
        for x in m.params.value_mut(&n).data_mut() {
            *x += rng.gen_range(-1.0..1.0);
        }
    }
    m
}

pub fn random_features(l: usize, d: usize, rng: &mut Rng) -> DenseArray {
    let data = (0..l * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    DenseArray::from_vec(&[l, d], data).unwrap()
}
