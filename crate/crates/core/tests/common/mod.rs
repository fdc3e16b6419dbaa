//! Brute-force loop oracles and shared fixtures for the integration tests.
#![allow(dead_code)]

use gzsl_core::params::{ImseParams, SmidParams};
use gzsl_core::tensor::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| (0..c).map(|j| t.at(i, j)).collect()).collect()
}

pub fn vec1(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.at(i, j)).abs());
        }
    }
    worst
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `x·W + b`, one output cell at a time.
pub fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (n_in, n_out) = w.dims2().unwrap();
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), n_in);
            (0..n_out)
                .map(|j| {
                    let mut s = b.data()[j];
                    for (k, xv) in row.iter().enumerate() {
                        s += xv * w.at(k, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn transpose(x: &Mat) -> Mat {
    let cols = x[0].len();
    (0..cols).map(|j| x.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

/// Cross-attention `softmax(QKᵀ)·V + residual`; also returns the logits.
fn attend(q: &Mat, k: &Mat, v: &Mat, residual: &Mat, scaled: bool) -> (Mat, Mat) {
    let d = q[0].len() as f64;
    let mut logits = Vec::new();
    let mut out = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let row: Vec<f64> = k
            .iter()
            .map(|kj| {
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                if scaled {
                    dot / d.sqrt()
                } else {
                    dot
                }
            })
            .collect();
        let w = softmax(&row);
        let mut o = residual[i].clone();
        for (j, wj) in w.iter().enumerate() {
            for (c, oc) in o.iter_mut().enumerate() {
                *oc += wj * v[j][c];
            }
        }
        logits.push(row);
        out.push(o);
    }
    (out, logits)
}

/// `(S̃, M)` for attributes attending to patches.
pub fn imse_attention(query: &Mat, residual: &Mat, patches: &Mat, p: &ImseParams<Tensor>, scaled: bool) -> (Mat, Mat) {
    let q = affine(query, &p.q_w, &p.q_b);
    let k = affine(patches, &p.k_w, &p.k_b);
    let v = affine(patches, &p.v_w, &p.v_b);
    attend(&q, &k, &v, residual, scaled)
}

pub fn smid_attention(patches: &Mat, attrs: &Mat, p: &SmidParams<Tensor>, scaled: bool) -> Mat {
    let q = affine(patches, &p.q_w, &p.q_b);
    let k = affine(attrs, &p.k_w, &p.k_b);
    let v = affine(attrs, &p.v_w, &p.v_b);
    attend(&q, &k, &v, patches, scaled).0
}

pub fn patch_mix(f_tilde: &Mat, p: &SmidParams<Tensor>) -> Mat {
    let t = transpose(f_tilde);
    let ex = map(&affine(&t, &p.ex_w, &p.ex_b), gelu);
    let se = map(&affine(&ex, &p.se_w, &p.se_b), gelu);
    let na = affine(&se, &p.na_w, &p.na_b);
    add(&transpose(&na), f_tilde)
}

pub fn fuse(features: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; features[0].len()];
    for (f, w) in features.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    out
}

/// Entropy of the student distribution times `KL(teacher ‖ student)`.
pub fn cross_granularity_kl(teacher: &[f64], student_logits: &[f64]) -> f64 {
    let q = softmax(student_logits);
    let mut h = 0.0;
    let mut kl = 0.0;
    for k in 0..q.len() {
        if q[k] > 0.0 {
            h -= q[k] * q[k].ln();
        }
        if teacher[k] > 0.0 {
            kl += teacher[k] * (teacher[k] / q[k]).ln();
        }
    }
    h * kl
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s == 0.0 || u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Deterministic proptest configuration.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x6A5E_11CE),
        failure_persistence: None,
        ..Default::default()
    }
}
