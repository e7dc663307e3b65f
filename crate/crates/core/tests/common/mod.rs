//! Shared test fixtures and the naive dense TIES reference.
#![allow(dead_code)]

use std::path::Path;

use deltamerge::taskvec::compute_task_vector;
use deltamerge::tensorio::{write_checkpoint, Checkpoint, Dtype, Tensor};
use deltamerge::tiescore::{trim, TrimGranularity, TrimmedDelta};
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// The density grid swept by default.
pub const GRID: [f64; 6] = [0.01, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Tensors in name order; each entry is `(name, values)`.
pub type Dense = Vec<(String, Vec<f32>)>;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn below(rng: &mut Xoshiro256PlusPlus, n: u64) -> u64 {
    rng.next_u64() % n
}

pub fn unit(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Values with many exact ties and zeros, plus some generic floats.
pub fn random_value(rng: &mut Xoshiro256PlusPlus) -> f32 {
    match below(rng, 10) {
        0 => 0.0,
        1..=4 => (below(rng, 41) as i32 - 20) as f32 / 8.0,
        _ => (unit(rng) * 4.0 - 2.0) as f32,
    }
}

/// Tensor names and sizes summing to at most `max_total`.
pub fn random_layout(rng: &mut Xoshiro256PlusPlus, max_total: usize) -> Vec<(String, usize)> {
    let count = 1 + below(rng, 4) as usize;
    let mut names: Vec<String> = (0..count).map(|i| format!("layer{}.w", (i * 7 + 3) % 10)).collect();
    names.sort();
    names.dedup();
    let per = max_total / names.len();
    names
        .into_iter()
        .map(|n| {
            let size = 1 + below(rng, per as u64) as usize;
            (n, size)
        })
        .collect()
}

pub fn random_dense(rng: &mut Xoshiro256PlusPlus, layout: &[(String, usize)]) -> Dense {
    layout
        .iter()
        .map(|(n, len)| (n.clone(), (0..*len).map(|_| random_value(rng)).collect()))
        .collect()
}

pub fn to_checkpoint(d: &Dense, dtype: Dtype) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (n, v) in d {
        c.insert(n.clone(), Tensor::from_f32(dtype, vec![v.len()], v).unwrap()).unwrap();
    }
    c
}

/// `d` stored with the dtypes and shapes of `template`.
pub fn reshape_like(d: &Dense, template: &Checkpoint) -> Checkpoint {
    let mut c = Checkpoint::new();
    for ((n, v), (_, t)) in d.iter().zip(template.iter()) {
        c.insert(n.clone(), Tensor::from_f32(t.dtype(), t.shape().to_vec(), v).unwrap()).unwrap();
    }
    c
}

pub fn from_checkpoint(c: &Checkpoint) -> Dense {
    c.iter().map(|(n, t)| (n.to_string(), t.to_f32())).collect()
}

pub fn write_dense(d: &Dense, dtype: Dtype, path: &Path) {
    write_checkpoint(&to_checkpoint(d, dtype), path).unwrap();
}

pub fn n_keep(k: f64, numel: usize) -> usize {
    if k == 0.0 {
        0
    } else {
        ((k * numel as f64).round() as usize).max(1).min(numel)
    }
}

fn sgn(x: f32) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Keeps the `n` largest magnitudes among `positions` by full sort, ties by position.
fn keep_top(values: &[Vec<f32>], positions: Vec<(usize, usize)>, n: usize, keep: &mut [Vec<bool>]) {
    let mut positions = positions;
    positions.sort_by(|a, b| {
        let (x, y) = (values[a.0][a.1].abs(), values[b.0][b.1].abs());
        y.partial_cmp(&x).unwrap().then(a.cmp(b))
    });
    for &(t, i) in positions.iter().take(n) {
        keep[t][i] = true;
    }
}

/// Top-k trim of one task vector; returns the trimmed values and the kept count.
pub fn reference_trim(tau: &[Vec<f32>], k: f64, global: bool) -> (Vec<Vec<f32>>, usize) {
    let mut keep: Vec<Vec<bool>> = tau.iter().map(|t| vec![false; t.len()]).collect();
    if global {
        let total: usize = tau.iter().map(Vec::len).sum();
        let all = tau
            .iter()
            .enumerate()
            .flat_map(|(t, v)| (0..v.len()).map(move |i| (t, i)))
            .collect();
        keep_top(tau, all, n_keep(k, total), &mut keep);
    } else {
        for (t, v) in tau.iter().enumerate() {
            keep_top(tau, (0..v.len()).map(|i| (t, i)).collect(), n_keep(k, v.len()), &mut keep);
        }
    }
    let kept = keep.iter().flatten().filter(|&&b| b).count();
    let trimmed = tau
        .iter()
        .zip(&keep)
        .map(|(v, m)| v.iter().zip(m).map(|(&x, &b)| if b { x } else { 0.0 }).collect())
        .collect();
    (trimmed, kept)
}

/// Discard candidates of `prot` against `other`, in reservation order.
pub fn reference_candidates(prot: &[Vec<f32>], other: &[Vec<f32>]) -> Vec<(usize, usize)> {
    let mut d = Vec::new();
    for t in 0..prot.len() {
        for i in 0..prot[t].len() {
            let (p, o) = (prot[t][i], other[t][i]);
            if p != 0.0 && o != 0.0 && sgn(p) != sgn(o) && p.abs() < o.abs() {
                d.push((o.abs() - p.abs(), t, i));
            }
        }
    }
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    d.into_iter().map(|(_, t, i)| (t, i)).collect()
}

pub struct Reference {
    pub ks: Vec<f64>,
    pub lambda: f32,
    pub global: bool,
    pub normalize: bool,
    /// `(protected model, slack fraction)`.
    pub slack: Option<(usize, f64)>,
}

/// Dense single-threaded trim → elect → disjoint merge → `base + λ·τₘ`.
pub fn reference_ties(base: &Dense, models: &[Dense], r: &Reference) -> Dense {
    let tau: Vec<Vec<Vec<f32>>> = models
        .iter()
        .map(|m| m.iter().zip(base).map(|((_, x), (_, b))| x.iter().zip(b).map(|(x, b)| x - b).collect()).collect())
        .collect();
    let trimmed: Vec<(Vec<Vec<f32>>, usize)> = tau
        .iter()
        .zip(&r.ks)
        .map(|(t, &k)| reference_trim(t, k, r.global))
        .collect();

    let mut reserved: Vec<Vec<bool>> = base.iter().map(|(_, v)| vec![false; v.len()]).collect();
    if let Some((prot, s)) = r.slack {
        let d = reference_candidates(&trimmed[prot].0, &trimmed[1 - prot].0);
        let m = ((s * trimmed[prot].1 as f64).round() as usize).min(d.len());
        for &(t, i) in &d[..m] {
            reserved[t][i] = true;
        }
    }

    base.iter()
        .enumerate()
        .map(|(t, (name, b))| {
            let out = (0..b.len())
                .map(|i| {
                    let mut sum = 0f32;
                    for tr in &trimmed {
                        sum += tr.0[t][i];
                    }
                    let mut gamma = sgn(sum);
                    if reserved[t][i] {
                        gamma = sgn(trimmed[r.slack.unwrap().0].0[t][i]);
                    }
                    let mut acc = 0f32;
                    let mut agree = 0u32;
                    let mut nonzero = 0u32;
                    for tr in &trimmed {
                        let v = tr.0[t][i];
                        if v != 0.0 {
                            nonzero += 1;
                            if gamma != 0 && sgn(v) == gamma {
                                acc += v;
                                agree += 1;
                            }
                        }
                    }
                    let mean = if agree == 0 {
                        0.0
                    } else if r.normalize {
                        acc / nonzero as f32
                    } else {
                        acc / agree as f32
                    };
                    b[i] + r.lambda * mean
                })
                .collect();
            (name.clone(), out)
        })
        .collect()
}

pub fn bits(d: &Dense) -> Vec<u32> {
    d.iter().flat_map(|(_, v)| v.iter().map(|x| x.to_bits())).collect()
}

pub fn zeros_like(layout: &[(String, usize)]) -> Dense {
    layout.iter().map(|(n, len)| (n.clone(), vec![0.0; *len])).collect()
}

/// Two trimmed deltas over a shared random layout, with random densities from
/// [`GRID`] and a shared random granularity.
pub fn trimmed_pair(seed: u64) -> (TrimmedDelta, TrimmedDelta) {
    let mut r = rng(seed);
    let layout = random_layout(&mut r, 1_500);
    let base = to_checkpoint(&zeros_like(&layout), Dtype::F32);
    let granularity = if below(&mut r, 2) == 0 {
        TrimGranularity::Global
    } else {
        TrimGranularity::PerTensor
    };
    let next = |r: &mut Xoshiro256PlusPlus| {
        let k = GRID[below(r, 6) as usize];
        let tuned = to_checkpoint(&random_dense(r, &layout), Dtype::F32);
        trim(&compute_task_vector(&tuned, &base).unwrap(), k, granularity).unwrap()
    };
    let p = next(&mut r);
    let o = next(&mut r);
    (p, o)
}
