//! The TIES pipeline (trim, elect signs, disjoint merge, scale) for any number of
//! models, and the TIES-SV slack reservation that shields part of a protected
//! model's conflicting parameters.
//!
//! The functions here work on in-memory task vectors and are the reference building
//! blocks. [`ties_merge`] and [`run_recipe`] run the same arithmetic through the
//! streaming engine, which visits one tensor at a time.

mod engine;
mod recipe;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::select::{self, ascending_key, magnitude_key};
use crate::taskvec::{DeltaTensor, TaskVector};
use crate::tensorio::Fingerprint;

pub use engine::{
    merge_checkpoints, run_recipe, ties_merge, ElectionSummary, InputRecord, MergeManifest, MergeSummary,
    ModelRetention, OutputRecord,
};
pub(crate) use engine::{analyze_checkpoints, analyze_files};
pub use recipe::{Algorithm, MergeRecipe, TrimGranularity};

/// A task vector after magnitude trimming; discarded positions hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimmedDelta {
    pub base_fingerprint: Fingerprint,
    pub deltas: BTreeMap<String, DeltaTensor>,
    pub density: f64,
    pub granularity: TrimGranularity,
    /// Kept positions, including kept positions whose value is exactly zero.
    pub retained_total: u64,
    pub retained_per_tensor: BTreeMap<String, u64>,
}

impl TrimmedDelta {
    pub fn to_task_vector(&self) -> TaskVector {
        TaskVector {
            base_fingerprint: self.base_fingerprint,
            source_fingerprint: None,
            deltas: self.deltas.clone(),
        }
    }
}

/// Elected sign per position, in {−1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignTensor {
    pub signs: BTreeMap<String, Vec<i8>>,
}

/// Positions where the elected sign is overridden by the protected model's sign.
#[derive(Debug, Clone, PartialEq)]
pub struct SlackReservation {
    pub reserved: BTreeSet<(String, usize)>,
    pub slack_fraction: f64,
    pub protected_model: usize,
}

/// Positions kept by trimming at density `k` out of `numel`.
pub(crate) fn n_keep(k: f64, numel: u64) -> u64 {
    if k == 0.0 || numel == 0 {
        0
    } else {
        ((k * numel as f64).round() as u64).clamp(1, numel)
    }
}

#[inline]
pub(crate) fn sign(x: f32) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

#[inline]
pub(crate) fn magnitude(_: usize, x: f32) -> Option<u32> {
    Some(magnitude_key(x))
}

/// `sgn(Σᵢ τ̂ᵢ[p])`, summed in ascending model index.
#[inline]
pub(crate) fn elect_at(terms: &[&[f32]], p: usize) -> i8 {
    let mut sum = 0f32;
    for t in terms {
        sum += t[p];
    }
    sign(sum)
}

/// Mean of the values at `p` whose sign equals `gamma`; with `normalize` the divisor
/// is the number of non-zero values instead.
#[inline]
pub(crate) fn disjoint_at(terms: &[&[f32]], p: usize, gamma: i8, normalize: bool) -> f32 {
    if gamma == 0 {
        return 0.0;
    }
    let mut sum = 0f32;
    let mut agreeing = 0u32;
    let mut nonzero = 0u32;
    for t in terms {
        let v = t[p];
        if v != 0.0 {
            nonzero += 1;
            if sign(v) == gamma {
                sum += v;
                agreeing += 1;
            }
        }
    }
    if agreeing == 0 {
        0.0
    } else if normalize {
        sum / nonzero as f32
    } else {
        sum / agreeing as f32
    }
}

/// Selection key of a TIES-SV discard candidate: the protected value loses a sign
/// conflict by a strictly larger opposing magnitude. Ranked by the magnitude deficit.
#[inline]
pub(crate) fn deficit_key(protected: f32, other: f32) -> Option<u32> {
    let conflict = protected != 0.0 && other != 0.0 && sign(protected) != sign(other);
    (conflict && protected.abs() < other.abs()).then(|| ascending_key(other.abs() - protected.abs()))
}

pub(crate) fn zero_unkept(values: &mut [f32], keep: &[bool]) {
    values
        .par_iter_mut()
        .zip(keep.par_iter())
        .for_each(|(v, &k)| {
            if !k {
                *v = 0.0;
            }
        });
}

/// Per-tensor trim in place; returns the number kept.
pub(crate) fn trim_tensor(values: &mut [f32], k: f64) -> u64 {
    let n = n_keep(k, values.len() as u64);
    if n < values.len() as u64 {
        let keep = select::select_in_slice(values, n, magnitude);
        zero_unkept(values, &keep);
    }
    n
}

fn validate_density(k: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::invalid(format!("density {k} outside [0, 1]")));
    }
    Ok(())
}

/// Keeps the top-`k` fraction of positions by magnitude, per tensor or across the
/// whole vector. Ties at the threshold keep the smaller (tensor name, index) first.
pub fn trim(tv: &TaskVector, k: f64, granularity: TrimGranularity) -> Result<TrimmedDelta> {
    validate_density(k)?;
    let mut deltas = tv.deltas.clone();
    let mut retained_per_tensor = BTreeMap::new();
    match granularity {
        TrimGranularity::PerTensor => {
            for (name, d) in deltas.iter_mut() {
                retained_per_tensor.insert(name.clone(), trim_tensor(&mut d.values, k));
            }
        }
        TrimGranularity::Global => {
            let total = tv.numel() as u64;
            let slices: Vec<&[f32]> = tv.deltas.values().map(|d| d.values.as_slice()).collect();
            let masks = select::select_across(&slices, n_keep(k, total), |_, _, x| Some(magnitude_key(x)));
            for ((name, d), keep) in deltas.iter_mut().zip(&masks) {
                zero_unkept(&mut d.values, keep);
                retained_per_tensor.insert(name.clone(), keep.iter().filter(|&&b| b).count() as u64);
            }
        }
    }
    Ok(TrimmedDelta {
        base_fingerprint: tv.base_fingerprint,
        retained_total: retained_per_tensor.values().sum(),
        deltas,
        density: k,
        granularity,
        retained_per_tensor,
    })
}

fn check_same_layout(trimmed: &[TrimmedDelta]) -> Result<()> {
    let first = trimmed
        .first()
        .ok_or_else(|| Error::invalid("at least one trimmed delta is required"))?;
    for (i, t) in trimmed.iter().enumerate().skip(1) {
        let same = t.deltas.len() == first.deltas.len()
            && t.deltas.iter().zip(&first.deltas).all(|((na, a), (nb, b))| na == nb && a.shape == b.shape);
        if !same {
            return Err(Error::structure(format!("trimmed delta {i} differs in tensor layout from delta 0")));
        }
    }
    Ok(())
}

fn terms_for<'a>(trimmed: &'a [TrimmedDelta], name: &str) -> Vec<&'a [f32]> {
    trimmed.iter().map(|t| t.deltas[name].values.as_slice()).collect()
}

/// `γᵖ = sgn(Σᵢ τ̂ᵢᵖ)`; an exact zero sum elects 0.
pub fn elect_signs(trimmed: &[TrimmedDelta]) -> Result<SignTensor> {
    check_same_layout(trimmed)?;
    let signs = trimmed[0]
        .deltas
        .iter()
        .map(|(name, d)| {
            let terms = terms_for(trimmed, name);
            let g: Vec<i8> = (0..d.numel()).into_par_iter().map(|p| elect_at(&terms, p)).collect();
            (name.clone(), g)
        })
        .collect();
    Ok(SignTensor { signs })
}

/// Mean of the values agreeing with the elected sign at each position.
pub fn disjoint_merge(trimmed: &[TrimmedDelta], signs: &SignTensor, normalize: bool) -> Result<TaskVector> {
    check_same_layout(trimmed)?;
    let mut deltas = BTreeMap::new();
    for (name, d) in &trimmed[0].deltas {
        let g = signs
            .signs
            .get(name)
            .filter(|g| g.len() == d.numel())
            .ok_or_else(|| Error::structure(format!("sign tensor does not cover {name:?}")))?;
        let terms = terms_for(trimmed, name);
        let values = (0..d.numel())
            .into_par_iter()
            .map(|p| disjoint_at(&terms, p, g[p], normalize))
            .collect();
        deltas.insert(name.clone(), DeltaTensor { shape: d.shape.clone(), values });
    }
    Ok(TaskVector {
        base_fingerprint: trimmed[0].base_fingerprint,
        source_fingerprint: None,
        deltas,
    })
}

/// Reserves the `round(s × retained_total)` discard candidates of the protected model
/// with the smallest magnitude deficit (ties by tensor name, then index).
pub fn slack_reserve(trimmed: &[TrimmedDelta], protected_model: usize, s: f64) -> Result<SlackReservation> {
    if trimmed.len() != 2 {
        return Err(Error::invalid(format!(
            "slack reservation is defined for exactly 2 models, got {}",
            trimmed.len()
        )));
    }
    if protected_model > 1 {
        return Err(Error::invalid(format!("protected_model {protected_model} out of range")));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("slack {s} outside [0, 1]")));
    }
    check_same_layout(trimmed)?;
    let prot = &trimmed[protected_model];
    let other = &trimmed[1 - protected_model];
    let target = (s * prot.retained_total as f64).round() as u64;

    let names: Vec<&String> = prot.deltas.keys().collect();
    let p_slices: Vec<&[f32]> = prot.deltas.values().map(|d| d.values.as_slice()).collect();
    let o_slices: Vec<&[f32]> = other.deltas.values().map(|d| d.values.as_slice()).collect();
    let masks = select::select_across(&p_slices, target, |t, i, p| deficit_key(p, o_slices[t][i]));
    let reserved = masks
        .iter()
        .enumerate()
        .flat_map(|(t, m)| {
            let name = names[t];
            m.iter()
                .enumerate()
                .filter(|(_, &r)| r)
                .map(move |(i, _)| (name.clone(), i))
        })
        .collect();
    Ok(SlackReservation {
        reserved,
        slack_fraction: s,
        protected_model,
    })
}

impl SlackReservation {
    /// Overrides the elected sign at every reserved position with the protected sign.
    pub fn apply(&self, signs: &mut SignTensor, trimmed: &[TrimmedDelta]) -> Result<()> {
        let prot = trimmed
            .get(self.protected_model)
            .ok_or_else(|| Error::invalid("protected model missing from trimmed deltas"))?;
        for (name, p) in &self.reserved {
            let g = signs
                .signs
                .get_mut(name)
                .and_then(|g| g.get_mut(*p))
                .ok_or_else(|| Error::structure(format!("reserved position {name:?}[{p}] not in sign tensor")))?;
            *g = sign(prot.deltas[name].values[*p]);
        }
        Ok(())
    }
}
