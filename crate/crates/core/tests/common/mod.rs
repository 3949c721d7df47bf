//! Oracles shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollnet::align::CostMatrix;
use rollnet::model::{is_learnable, multitask_loss, ModelConfig, ModelParams, Tensor};
use rollnet::rolls::Pianoroll;
use rollnet::synth::{Waveform, HOP, SAMPLE_RATE};
use sha2::{Digest, Sha256};

pub fn random_roll(rng: &mut ChaCha8Rng, f: usize, t: usize, m: usize, p: f64) -> Pianoroll {
    let data = (0..f * t * m).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
    Pianoroll::new(data, f, t, m, 31.25, "v").unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn bce_prob(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Unweighted `[roll, pitch, instrument]` BCE sums for one sample, by
/// triple loops in probability space. Logits are stored `[m][t][f]`.
pub fn loss_oracle(z: &[f64], y: &Pianoroll, valid: usize) -> [f64; 3] {
    let (f_n, t_n, m_n) = (y.n_pitch(), y.n_frames(), y.n_instruments());
    let at = |f: usize, t: usize, m: usize| sig(z[(m * t_n + t) * f_n + f]);
    let (mut roll, mut pitch, mut inst) = (0.0, 0.0, 0.0);
    for t in 0..valid {
        for f in 0..f_n {
            let mut pmax: f64 = 0.0;
            let mut ymax: f64 = 0.0;
            for m in 0..m_n {
                roll += bce_prob(at(f, t, m), y.get(f, t, m) as f64);
                pmax = pmax.max(at(f, t, m));
                ymax = ymax.max(y.get(f, t, m) as f64);
            }
            pitch += bce_prob(pmax, ymax);
        }
        for m in 0..m_n {
            let mut pmax: f64 = 0.0;
            let mut ymax: f64 = 0.0;
            for f in 0..f_n {
                pmax = pmax.max(at(f, t, m));
                ymax = ymax.max(y.get(f, t, m) as f64);
            }
            inst += bce_prob(pmax, ymax);
        }
    }
    [roll, pitch, inst]
}

/// Largest deviation of `multitask_loss` from [`loss_oracle`] over `cases` random 4x8x3 problems.
pub fn loss_oracle_sweep(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, t, m) = (4, 8, 3);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let y = random_roll(&mut rng, f, t, m, 0.3);
        let valid = if case % 5 == 0 { rng.gen_range(1..=t) } else { t };
        let z: Vec<f64> = (0..f * t * m).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let (loss, _) = multitask_loss(&Tensor::from_vec([1, m, t, f], z.clone()), &[&y], &[valid]).unwrap();
        let want = loss_oracle(&z, &y, valid);
        for (g, w) in [loss.l_roll, loss.l_p, loss.l_i].into_iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}

/// Largest `|w·l − ln 2|` over random labels with all-zero logits.
pub fn zero_logit_deviation(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let y = random_roll(&mut rng, 4, 8, 3, 0.4);
        let (loss, _) = multitask_loss(&Tensor::<f64>::zeros([1, 3, 8, 4]), &[&y], &[8]).unwrap();
        for w in loss.weighted() {
            worst = worst.max((w - std::f64::consts::LN_2).abs());
        }
    }
    worst
}

/// Central-difference check of the loss-to-logits gradient; returns the worst relative error.
pub fn loss_gradient_check(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let y = random_roll(&mut rng, 4, 8, 3, 0.3);
        let mut z: Vec<f64> = (0..96).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let total = |z: &[f64]| multitask_loss(&Tensor::from_vec([1, 3, 8, 4], z.to_vec()), &[&y], &[8]).unwrap().0.total();
        let (_, g) = multitask_loss(&Tensor::from_vec([1, 3, 8, 4], z.clone()), &[&y], &[8]).unwrap();
        for i in 0..z.len() {
            let orig = z[i];
            z[i] = orig + 1e-4;
            let hi = total(&z);
            z[i] = orig - 1e-4;
            let lo = total(&z);
            z[i] = orig;
            worst = worst.max(rel_err(g.data[i], (hi - lo) / 2e-4));
        }
    }
    worst
}

pub struct NetworkCheck {
    pub sampled: usize,
    pub nonzero: usize,
    pub max_rel_err: f64,
    pub elapsed: Duration,
}

/// Reduced network: 2 levels of 4 channels, 8 bins x 16 frames, two
/// instruments, batch of two with one partly masked sample. Parameters are
/// moved off the initial point (where residual branches are switched off)
/// before `samples` random parameters are checked by central differences.
pub fn reduced_network_check(seed: u64, samples: usize) -> NetworkCheck {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::new(2, "grad");
    cfg.widths = vec![4, 4];
    cfg.n_bins = 8;
    cfg.segment_frames = 16;
    let mut params = ModelParams::<f64>::init(cfg, 3).unwrap();
    let names: Vec<String> = params.tensors().keys().filter(|k| is_learnable(k)).cloned().collect();
    for n in &names {
        params.get_mut(n).unwrap().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    let x = Tensor::from_vec([2, 1, 16, 8], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let y0 = random_roll(&mut rng, 8, 16, 2, 0.2);
    let y1 = random_roll(&mut rng, 8, 16, 2, 0.2);
    let labels = [&y0, &y1];
    let valid = [16, 11];
    let loss = |p: &ModelParams<f64>| {
        let (z, _) = p.forward_train(&x).unwrap();
        multitask_loss(&z, &labels, &valid).unwrap().0.total()
    };
    let (z, cache) = params.forward_train(&x).unwrap();
    let (_, dz) = multitask_loss(&z, &labels, &valid).unwrap();
    let grads = params.backward(&cache, &dz).unwrap();
    drop(cache);
    for n in &names {
        assert_eq!(grads[n].len(), params.get(n).len(), "{n}");
    }
    let flat: Vec<(String, usize)> = names.iter().flat_map(|n| (0..params.get(n).len()).map(move |i| (n.clone(), i))).collect();
    let (mut worst, mut nonzero): (f64, usize) = (0.0, 0);
    for _ in 0..samples {
        let (name, i) = flat[rng.gen_range(0..flat.len())].clone();
        let eps = 1e-5;
        let orig = params.get(&name)[i];
        params.get_mut(&name).unwrap()[i] = orig + eps;
        let hi = loss(&params);
        params.get_mut(&name).unwrap()[i] = orig - eps;
        let lo = loss(&params);
        params.get_mut(&name).unwrap()[i] = orig;
        worst = worst.max(rel_err(grads[&name][i], (hi - lo) / (2.0 * eps)));
        nonzero += (grads[&name][i].abs() > 1e-9) as usize;
    }
    NetworkCheck { sampled: samples, nonzero, max_rel_err: worst, elapsed: start.elapsed() }
}

pub fn tones(parts: &[(f64, f64)], seconds: f64) -> Waveform {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            parts.iter().map(|&(hz, a)| a * (2.0 * PI * hz * t).sin()).sum::<f64>() as f32
        })
        .collect();
    Waveform { samples, sample_rate: SAMPLE_RATE }
}

/// Direct windowed DFT at `hz`, centered on sample `center`, Hann window of
/// `ceil(Q * sr / hz)` samples, normalized by the window sum.
pub fn windowed_dft(x: &[f32], center: usize, hz: f64) -> f64 {
    let q = 1.0 / (2f64.powf(1.0 / 12.0) - 1.0);
    let sr = SAMPLE_RATE as f64;
    let n = (q * sr / hz).ceil() as usize;
    let half = n / 2;
    let (mut re, mut im, mut wsum) = (0.0, 0.0, 0.0);
    for j in 0..n {
        let w = 0.5 - 0.5 * (2.0 * PI * j as f64 / n as f64).cos();
        let k = j as f64 - half as f64;
        let s = x[center + j - half] as f64;
        re += w * s * (2.0 * PI * hz * k / sr).cos();
        im -= w * s * (2.0 * PI * hz * k / sr).sin();
        wsum += w;
    }
    (re * re + im * im).sqrt() / wsum
}

/// Frames whose longest analysis window lies inside a signal of `len` samples.
pub fn interior(len: usize) -> Vec<usize> {
    let q = 1.0 / (2f64.powf(1.0 / 12.0) - 1.0);
    let half = (q * SAMPLE_RATE as f64 / 27.5).ceil() as usize / 2 + 1;
    (0..=(len - 1) / HOP).filter(|t| t * HOP >= half && t * HOP + half < len).collect()
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Top-down memoized recursion over the DTW recurrence.
pub fn dp_oracle(c: &CostMatrix, rows: usize, cols: usize, pen: f64) -> f64 {
    fn go(c: &CostMatrix, i: usize, j: usize, pen: f64, memo: &mut HashMap<(usize, usize), f64>) -> f64 {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if i == 0 && j == 0 {
            c.get(0, 0)
        } else {
            let mut best = f64::INFINITY;
            if i > 0 && j > 0 {
                best = best.min(go(c, i - 1, j - 1, pen, memo));
            }
            if i > 0 {
                best = best.min(go(c, i - 1, j, pen, memo) + pen);
            }
            if j > 0 {
                best = best.min(go(c, i, j - 1, pen, memo) + pen);
            }
            c.get(i, j) + best
        };
        memo.insert((i, j), v);
        v
    }
    go(c, rows - 1, cols - 1, pen, &mut HashMap::new())
}

pub fn auc_all_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// SHA-256 over every file below `root`: sorted relative paths and contents.
pub fn tree_hash(root: &Path) -> String {
    fn walk(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(root, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}
