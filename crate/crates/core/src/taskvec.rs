//! Task-vector algebra: extraction, application, weighted averaging, task arithmetic
//! and DARE drop-and-rescale.
//!
//! All arithmetic runs in F32. Whenever several models contribute to one element the
//! terms are accumulated sequentially in ascending model index, so results do not
//! depend on how the elementwise loops are split across threads.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth;
use crate::select::CHUNK;
use crate::tensorio::{Checkpoint, CheckpointReader, Dtype, Fingerprint, Tensor, TensorMeta};

/// A dense F32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl DeltaTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} elements, got {}",
                values.len()
            )));
        }
        Ok(DeltaTensor { shape, values })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// `τ = θ_tuned − θ_init`, per tensor, in F32.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub base_fingerprint: Fingerprint,
    /// `None` for vectors that are not the difference of one tuned checkpoint,
    /// such as a merged vector.
    pub source_fingerprint: Option<Fingerprint>,
    pub deltas: BTreeMap<String, DeltaTensor>,
}

impl TaskVector {
    pub fn numel(&self) -> usize {
        self.deltas.values().map(DeltaTensor::numel).sum()
    }

    /// Multiplies every element by `c`.
    pub fn scaled(&self, c: f32) -> TaskVector {
        let mut out = self.clone();
        for d in out.deltas.values_mut() {
            d.values.par_iter_mut().for_each(|v| *v *= c);
        }
        out
    }
}

/// Whether `apply`/`merge` insist that task vectors were computed against the base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseCheck {
    #[default]
    Strict,
    AllowMismatch,
}

/// Per-model averaging weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragingWeights(Vec<f64>);

impl AveragingWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::invalid(format!("weight {w} is not finite")));
        }
        Ok(AveragingWeights(weights))
    }

    /// Two-model form: `(w, 1 − w)` with `w ∈ [0, 1]`.
    pub fn pair(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::invalid(format!("weight {w} outside [0, 1]")));
        }
        Ok(AveragingWeights(vec![w, 1.0 - w]))
    }

    pub fn uniform(n: usize) -> Self {
        AveragingWeights(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Errors unless `a` and `b` have the same tensor names and shapes.
pub(crate) fn check_structure(a: &Checkpoint, b: &Checkpoint, what: &str) -> Result<()> {
    let na: Vec<&str> = a.names().collect();
    let nb: Vec<&str> = b.names().collect();
    if na != nb {
        let missing: Vec<&&str> = na.iter().filter(|n| b.get(n).is_none()).collect();
        let extra: Vec<&&str> = nb.iter().filter(|n| a.get(n).is_none()).collect();
        return Err(Error::structure(format!(
            "{what}: tensor names differ (only in first: {missing:?}, only in second: {extra:?})"
        )));
    }
    for (name, ta) in a.iter() {
        let tb = b.get(name).unwrap();
        if ta.shape() != tb.shape() {
            return Err(Error::structure(format!(
                "{what}: tensor {name:?} has shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
    }
    Ok(())
}

fn check_vector_against(base: &Checkpoint, tv: &TaskVector) -> Result<()> {
    let names: Vec<&str> = base.names().collect();
    let tv_names: Vec<&str> = tv.deltas.keys().map(String::as_str).collect();
    if names != tv_names {
        return Err(Error::structure("task vector and base have different tensor names"));
    }
    for (name, t) in base.iter() {
        if t.shape() != tv.deltas[name].shape.as_slice() {
            return Err(Error::structure(format!(
                "tensor {name:?}: base shape {:?}, task vector shape {:?}",
                t.shape(),
                tv.deltas[name].shape
            )));
        }
    }
    Ok(())
}

fn check_fingerprint(base_fp: Fingerprint, tv: &TaskVector, check: BaseCheck) -> Result<()> {
    if check == BaseCheck::Strict && tv.base_fingerprint != base_fp {
        return Err(Error::BaseMismatch {
            expected: tv.base_fingerprint.to_hex(),
            found: base_fp.to_hex(),
        });
    }
    Ok(())
}

/// `tuned − base`, elementwise.
pub(crate) fn subtract(tuned: &[f32], base: &[f32]) -> Vec<f32> {
    tuned.par_iter().zip(base.par_iter()).map(|(t, b)| t - b).collect()
}

/// `Σ cᵢ·xᵢ` accumulated in ascending `i`, optionally added to `start` afterwards.
pub(crate) fn combine(terms: &[&[f32]], coeffs: &[f32], start: Option<&[f32]>) -> Vec<f32> {
    let len = terms.first().map_or(0, |t| t.len());
    let mut out = vec![0f32; len];
    out.par_iter_mut().enumerate().for_each(|(p, o)| {
        let mut acc = coeffs[0] * terms[0][p];
        for (t, c) in terms.iter().zip(coeffs).skip(1) {
            acc += c * t[p];
        }
        *o = match start {
            Some(s) => s[p] + acc,
            None => acc,
        };
    });
    out
}

/// DARE on one tensor: zero each element with probability `p` (keyed by
/// `(seed, name, index)`), rescale survivors by `1/(1−p)`.
pub(crate) fn dare_in_place(values: &mut [f32], p: f64, seed: u64, name: &str) {
    if p == 0.0 {
        return;
    }
    let rescale = 1.0f32 / (1.0f32 - p as f32);
    let stream = synth::tensor_stream(name);
    values.par_iter_mut().enumerate().for_each(|(i, v)| {
        if synth::unit_f64(synth::keyed_u64(seed, stream, i as u64)) < p {
            *v = 0.0;
        } else {
            *v *= rescale;
        }
    });
}

pub(crate) fn validate_drop(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("drop probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// `τ = tuned − base`.
pub fn compute_task_vector(tuned: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    check_structure(base, tuned, "tuned vs base")?;
    let mut deltas = BTreeMap::new();
    for (name, b) in base.iter() {
        let t = tuned.get(name).unwrap();
        deltas.insert(
            name.to_string(),
            DeltaTensor {
                shape: b.shape().to_vec(),
                values: subtract(&t.to_f32(), &b.to_f32()),
            },
        );
    }
    Ok(TaskVector {
        base_fingerprint: base.fingerprint(),
        source_fingerprint: Some(tuned.fingerprint()),
        deltas,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ApplyOptions {
    pub base_check: BaseCheck,
    /// Output storage dtype; defaults to each base tensor's dtype.
    pub output_dtype: Option<Dtype>,
}

/// `base + scale·τ`, narrowed to the output dtype.
pub fn apply_task_vector(
    base: &Checkpoint,
    tv: &TaskVector,
    scale: f32,
    opts: ApplyOptions,
) -> Result<Checkpoint> {
    check_vector_against(base, tv)?;
    check_fingerprint(base.fingerprint(), tv, opts.base_check)?;
    let mut out = Checkpoint::new();
    for (name, b) in base.iter() {
        let values = combine(&[&tv.deltas[name].values], &[scale], Some(&b.to_f32()));
        let dtype = opts.output_dtype.unwrap_or(b.dtype());
        out.insert(name, Tensor::from_f32(dtype, b.shape().to_vec(), &values)?)?;
    }
    Ok(out)
}

/// `Σ wᵢ·θᵢ`, written in the first model's dtypes.
pub fn weighted_average(models: &[Checkpoint], weights: &AveragingWeights) -> Result<Checkpoint> {
    if models.len() < 2 {
        return Err(Error::invalid("weighted averaging needs at least two models"));
    }
    if weights.0.len() != models.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} models",
            weights.0.len(),
            models.len()
        )));
    }
    for (i, m) in models.iter().enumerate().skip(1) {
        check_structure(&models[0], m, &format!("model 0 vs model {i}"))?;
    }
    let coeffs: Vec<f32> = weights.0.iter().map(|&w| w as f32).collect();
    let mut out = Checkpoint::new();
    for (name, first) in models[0].iter() {
        let values: Vec<Vec<f32>> = models.iter().map(|m| m.get(name).unwrap().to_f32()).collect();
        let terms: Vec<&[f32]> = values.iter().map(Vec::as_slice).collect();
        let merged = combine(&terms, &coeffs, None);
        out.insert(name, Tensor::from_f32(first.dtype(), first.shape().to_vec(), &merged)?)?;
    }
    Ok(out)
}

/// `base + Σ cᵢ·τᵢ`.
pub fn task_arithmetic_merge(
    base: &Checkpoint,
    tvs: &[TaskVector],
    coeffs: &[f64],
    opts: ApplyOptions,
) -> Result<Checkpoint> {
    if tvs.is_empty() {
        return Err(Error::invalid("task arithmetic needs at least one task vector"));
    }
    if coeffs.len() != tvs.len() {
        return Err(Error::invalid(format!(
            "{} coefficients for {} task vectors",
            coeffs.len(),
            tvs.len()
        )));
    }
    let base_fp = base.fingerprint();
    for tv in tvs {
        check_vector_against(base, tv)?;
        check_fingerprint(base_fp, tv, opts.base_check)?;
    }
    let coeffs: Vec<f32> = coeffs.iter().map(|&c| c as f32).collect();
    let mut out = Checkpoint::new();
    for (name, b) in base.iter() {
        let terms: Vec<&[f32]> = tvs.iter().map(|tv| tv.deltas[name].values.as_slice()).collect();
        let values = combine(&terms, &coeffs, Some(&b.to_f32()));
        let dtype = opts.output_dtype.unwrap_or(b.dtype());
        out.insert(name, Tensor::from_f32(dtype, b.shape().to_vec(), &values)?)?;
    }
    Ok(out)
}

/// DARE: drop each element with probability `p`, rescale survivors by `1/(1−p)`.
pub fn dare_drop(tv: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    validate_drop(p)?;
    let mut out = tv.clone();
    for (name, d) in out.deltas.iter_mut() {
        dare_in_place(&mut d.values, p, seed, name);
    }
    Ok(out)
}

/// Statistics of a task vector `tuned − base`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaStats {
    pub numel: u64,
    pub l2: f64,
    pub max_abs: f64,
    pub nonzero: u64,
    pub nonzero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiffReport {
    pub tensors: BTreeMap<String, DeltaStats>,
    pub total: DeltaStats,
}

/// Running sums behind [`DeltaStats`]; squares are accumulated in f64, chunk sums
/// combined in chunk order.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    numel: u64,
    sum_sq: f64,
    max_abs: f32,
    nonzero: u64,
}

impl Sums {
    fn of(delta: &[f32]) -> Self {
        let parts: Vec<Sums> = delta
            .par_chunks(CHUNK)
            .map(|c| Sums {
                numel: c.len() as u64,
                sum_sq: c.iter().map(|&x| (x as f64) * (x as f64)).sum(),
                max_abs: c.iter().fold(0f32, |m, x| m.max(x.abs())),
                nonzero: c.iter().filter(|&&x| x != 0.0).count() as u64,
            })
            .collect();
        parts.iter().fold(Sums::default(), |a, b| a.add(b))
    }

    fn add(self, o: &Sums) -> Sums {
        Sums {
            numel: self.numel + o.numel,
            sum_sq: self.sum_sq + o.sum_sq,
            max_abs: self.max_abs.max(o.max_abs),
            nonzero: self.nonzero + o.nonzero,
        }
    }

    fn stats(self) -> DeltaStats {
        DeltaStats {
            numel: self.numel,
            l2: self.sum_sq.sqrt(),
            max_abs: self.max_abs as f64,
            nonzero: self.nonzero,
            nonzero_fraction: if self.numel == 0 {
                0.0
            } else {
                self.nonzero as f64 / self.numel as f64
            },
        }
    }
}

fn diff_with(
    metas: &[TensorMeta],
    mut load: impl FnMut(&str) -> Result<(Vec<f32>, Vec<f32>)>,
) -> Result<DiffReport> {
    let mut report = DiffReport::default();
    let mut total = Sums::default();
    for m in metas {
        let (tuned, base) = load(&m.name)?;
        let sums = Sums::of(&subtract(&tuned, &base));
        total = total.add(&sums);
        report.tensors.insert(m.name.clone(), sums.stats());
    }
    report.total = total.stats();
    Ok(report)
}

fn check_metas(a: &[TensorMeta], b: &[TensorMeta]) -> Result<()> {
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name {
            return Err(Error::structure(format!("tensor names differ: {:?} vs {:?}", x.name, y.name)));
        }
        if x.shape != y.shape {
            return Err(Error::structure(format!(
                "tensor {:?} has shape {:?} vs {:?}",
                x.name, x.shape, y.shape
            )));
        }
    }
    if a.len() != b.len() {
        return Err(Error::structure(format!("{} tensors vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// L2 norm, max |δ| and non-zero fraction of `tuned − base`, per tensor and overall.
pub fn diff_checkpoints(base: &Checkpoint, tuned: &Checkpoint) -> Result<DiffReport> {
    check_structure(base, tuned, "base vs tuned")?;
    diff_with(&base.metas(), |name| {
        Ok((tuned.get(name).unwrap().to_f32(), base.get(name).unwrap().to_f32()))
    })
}

/// [`diff_checkpoints`] over files, one tensor at a time.
pub fn diff_files(base: &Path, tuned: &Path) -> Result<DiffReport> {
    let b = CheckpointReader::open(base)?;
    let t = CheckpointReader::open(tuned)?;
    check_metas(b.metas(), t.metas())?;
    diff_with(b.metas(), |name| Ok((t.read_f32(name)?, b.read_f32(name)?)))
}
