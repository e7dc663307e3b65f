//! Streaming merge engine.
//!
//! Tensors are visited one at a time in name order, so at most the base, the model
//! deltas and one output buffer of a single tensor are resident. Parallelism is
//! inside a tensor. Global trimming and the slack ranking need whole-model order
//! statistics; they are found with extra histogram passes over the inputs before
//! the final pass that writes the output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    deficit_key, disjoint_at, elect_at, magnitude, n_keep, sign, trim_tensor, zero_unkept, Algorithm,
    MergeRecipe, TrimGranularity,
};
use crate::conflict::{pair_counts, AnalysisOptions, ConflictReport};
use crate::error::{Error, Result};
use crate::select::{self, Cut, CutCursor, RadixSelect, CHUNK};
use crate::taskvec::{combine, dare_in_place, subtract};
use crate::tensorio::{
    self, Checkpoint, CheckpointReader, CheckpointWriter, Dtype, Fingerprint, Tensor, TensorMeta,
};

/// Tensor names, shapes and default output dtypes shared by all inputs.
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    dtypes: Vec<Dtype>,
}

impl Layout {
    fn of(metas: &[TensorMeta]) -> Self {
        Layout {
            names: metas.iter().map(|m| m.name.clone()).collect(),
            shapes: metas.iter().map(|m| m.shape.clone()).collect(),
            dtypes: metas.iter().map(|m| m.dtype).collect(),
        }
    }

    fn check(&self, metas: &[TensorMeta], what: &str) -> Result<()> {
        let names: Vec<&str> = metas.iter().map(|m| m.name.as_str()).collect();
        if names != self.names.iter().map(String::as_str).collect::<Vec<_>>() {
            let missing: Vec<&String> = self.names.iter().filter(|n| !names.contains(&n.as_str())).collect();
            let extra: Vec<&&str> = names.iter().filter(|n| !self.names.iter().any(|m| m == *n)).collect();
            return Err(Error::structure(format!(
                "{what}: tensor names differ (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (m, shape) in metas.iter().zip(&self.shapes) {
            if &m.shape != shape {
                return Err(Error::structure(format!(
                    "{what}: tensor {:?} has shape {:?}, expected {:?}",
                    m.name, m.shape, shape
                )));
            }
        }
        Ok(())
    }

    fn numel(&self, t: usize) -> usize {
        self.shapes[t].iter().product()
    }
}

/// Per-tensor F32 access to the base and the models.
trait Inputs: Sync {
    fn layout(&self) -> &Layout;
    fn model_count(&self) -> usize;
    fn base(&self, t: usize) -> Result<Vec<f32>>;
    fn model(&self, i: usize, t: usize) -> Result<Vec<f32>>;
}

struct MemoryInputs<'a> {
    base: Option<&'a Checkpoint>,
    models: &'a [Checkpoint],
    layout: Layout,
}

impl<'a> MemoryInputs<'a> {
    fn new(base: Option<&'a Checkpoint>, models: &'a [Checkpoint]) -> Result<Self> {
        let reference = base.or(models.first()).ok_or_else(|| Error::invalid("no inputs"))?;
        let layout = Layout::of(&reference.metas());
        for (i, m) in models.iter().enumerate() {
            layout.check(&m.metas(), &format!("model {i}"))?;
        }
        Ok(MemoryInputs { base, models, layout })
    }
}

impl Inputs for MemoryInputs<'_> {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn model_count(&self) -> usize {
        self.models.len()
    }

    fn base(&self, t: usize) -> Result<Vec<f32>> {
        let base = self.base.ok_or_else(|| Error::invalid("no base checkpoint"))?;
        Ok(base.get(&self.layout.names[t]).unwrap().to_f32())
    }

    fn model(&self, i: usize, t: usize) -> Result<Vec<f32>> {
        Ok(self.models[i].get(&self.layout.names[t]).unwrap().to_f32())
    }
}

struct FileInputs {
    base: Option<CheckpointReader>,
    models: Vec<CheckpointReader>,
    layout: Layout,
}

impl FileInputs {
    fn open(base: Option<&Path>, models: &[PathBuf]) -> Result<Self> {
        let base = base.map(CheckpointReader::open).transpose()?;
        let models = models.iter().map(CheckpointReader::open).collect::<Result<Vec<_>>>()?;
        let reference = base.as_ref().or(models.first()).ok_or_else(|| Error::invalid("no inputs"))?;
        let layout = Layout::of(reference.metas());
        for m in &models {
            layout.check(m.metas(), &m.path().display().to_string())?;
        }
        Ok(FileInputs { base, models, layout })
    }
}

impl Inputs for FileInputs {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn model_count(&self) -> usize {
        self.models.len()
    }

    fn base(&self, t: usize) -> Result<Vec<f32>> {
        let base = self.base.as_ref().ok_or_else(|| Error::invalid("no base checkpoint"))?;
        base.read_f32(&self.layout.names[t])
    }

    fn model(&self, i: usize, t: usize) -> Result<Vec<f32>> {
        self.models[i].read_f32(&self.layout.names[t])
    }
}

/// Receives output tensors in name order.
trait Sink {
    fn put(&mut self, name: &str, dtype: Dtype, shape: &[usize], values: &[f32]) -> Result<()>;
}

impl Sink for Checkpoint {
    fn put(&mut self, name: &str, dtype: Dtype, shape: &[usize], values: &[f32]) -> Result<()> {
        self.insert(name, Tensor::from_f32(dtype, shape.to_vec(), values)?)
    }
}

impl Sink for CheckpointWriter {
    fn put(&mut self, name: &str, dtype: Dtype, _shape: &[usize], values: &[f32]) -> Result<()> {
        self.write_tensor(name, &tensorio::from_f32(values, dtype))
    }
}

/// Positions kept by trimming, per model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelRetention {
    pub total: u64,
    pub per_tensor: BTreeMap<String, u64>,
}

/// Outcome of sign election across all tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ElectionSummary {
    /// Per model: trimmed non-zero values dropped because their sign lost.
    pub discarded: Vec<u64>,
    /// Positions with non-zero trimmed values whose sum was exactly zero.
    pub zero_sum_positions: u64,
    /// Positions whose elected sign was set by the slack reservation.
    pub reserved: u64,
}

/// Statistics of one merge; empty for the linear algorithms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeSummary {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retained: Vec<ModelRetention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub election: Option<ElectionSummary>,
    /// Two-model merges: conflicts between the protected model (index
    /// `protected_model`, default 0) and the other model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict: Option<ConflictReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: PathBuf,
    pub fingerprint: Fingerprint,
    pub dtypes: Vec<Dtype>,
}

/// Written next to every merged checkpoint as `<output>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeManifest {
    pub recipe: MergeRecipe,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<InputRecord>,
    pub models: Vec<InputRecord>,
    pub output: OutputRecord,
    #[serde(flatten)]
    pub summary: MergeSummary,
}

impl MergeManifest {
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}

fn run(recipe: &MergeRecipe, inputs: &dyn Inputs, sink: Option<&mut dyn Sink>) -> Result<MergeSummary> {
    if recipe.algorithm.is_ties_family() {
        Ties::new(recipe, inputs).run(sink)
    } else {
        run_linear(recipe, inputs, sink)
    }
}

fn output_dtype(recipe: &MergeRecipe, layout: &Layout, t: usize) -> Dtype {
    recipe.output_dtype.unwrap_or(layout.dtypes[t])
}

fn run_linear(recipe: &MergeRecipe, inputs: &dyn Inputs, mut sink: Option<&mut dyn Sink>) -> Result<MergeSummary> {
    let coeffs: Vec<f32> = recipe.linear_coefficients().iter().map(|&c| c as f32).collect();
    let layout = inputs.layout();
    for (t, name) in layout.names.iter().enumerate() {
        let out = match recipe.algorithm {
            Algorithm::WeightedAverage => {
                let models = (0..inputs.model_count()).map(|i| inputs.model(i, t)).collect::<Result<Vec<_>>>()?;
                let terms: Vec<&[f32]> = models.iter().map(Vec::as_slice).collect();
                combine(&terms, &coeffs, None)
            }
            _ => {
                let base = inputs.base(t)?;
                let deltas = (0..inputs.model_count())
                    .map(|i| Ok(subtract(&inputs.model(i, t)?, &base)))
                    .collect::<Result<Vec<_>>>()?;
                let terms: Vec<&[f32]> = deltas.iter().map(Vec::as_slice).collect();
                combine(&terms, &coeffs, Some(&base))
            }
        };
        if let Some(s) = sink.as_deref_mut() {
            s.put(name, output_dtype(recipe, layout, t), &layout.shapes[t], &out)?;
        }
    }
    Ok(MergeSummary::default())
}

struct Ties<'a> {
    recipe: &'a MergeRecipe,
    inputs: &'a dyn Inputs,
    n: usize,
}

/// Election counts of one tensor.
struct TensorElection {
    discarded: Vec<u64>,
    zero_sum: u64,
    reserved: u64,
}

impl TensorElection {
    fn new(n: usize) -> Self {
        TensorElection {
            discarded: vec![0; n],
            zero_sum: 0,
            reserved: 0,
        }
    }

    fn add(mut self, o: TensorElection) -> Self {
        for (a, b) in self.discarded.iter_mut().zip(&o.discarded) {
            *a += b;
        }
        self.zero_sum += o.zero_sum;
        self.reserved += o.reserved;
        self
    }
}

impl<'a> Ties<'a> {
    fn new(recipe: &'a MergeRecipe, inputs: &'a dyn Inputs) -> Self {
        Ties {
            recipe,
            inputs,
            n: inputs.model_count(),
        }
    }

    fn layout(&self) -> &Layout {
        self.inputs.layout()
    }

    /// `τᵢ` for tensor `t`, after DARE for `dare_ties`.
    fn delta(&self, i: usize, t: usize, base: &[f32]) -> Result<Vec<f32>> {
        let mut d = subtract(&self.inputs.model(i, t)?, base);
        if self.recipe.algorithm == Algorithm::DareTies {
            let seed = self.recipe.seed.wrapping_add(i as u64);
            dare_in_place(&mut d, self.recipe.drop_p, seed, &self.layout().names[t]);
        }
        Ok(d)
    }

    fn trim(&self, i: usize, values: &mut [f32], cursors: &mut Option<Vec<CutCursor>>) -> u64 {
        match cursors {
            None => trim_tensor(values, self.recipe.densities[i]),
            Some(cursors) => {
                let mut keep = vec![false; values.len()];
                let kept = cursors[i].apply(values.len(), |j| magnitude(j, values[j]), &mut keep);
                zero_unkept(values, &keep);
                kept
            }
        }
    }

    /// Whole-model thresholds for global trimming, one per model.
    fn global_cuts(&self) -> Result<Vec<Cut>> {
        let layout = self.layout();
        let total: u64 = (0..layout.names.len()).map(|t| layout.numel(t) as u64).sum();
        let mut sels: Vec<RadixSelect> = self
            .recipe
            .densities
            .iter()
            .map(|&k| {
                let target = n_keep(k, total);
                if target == total {
                    RadixSelect::everything(total)
                } else {
                    RadixSelect::new(target)
                }
            })
            .collect();
        loop {
            let passes: Vec<_> = sels.iter().map(RadixSelect::pass).collect();
            if passes.iter().all(Option::is_none) {
                break;
            }
            let mut hists: Vec<Vec<u64>> = passes.iter().map(|_| select::empty_histogram()).collect();
            for t in 0..layout.names.len() {
                let base = self.inputs.base(t)?;
                for (i, pass) in passes.iter().enumerate() {
                    if let Some(pass) = *pass {
                        let d = self.delta(i, t, &base)?;
                        select::add_histogram(&mut hists[i], &select::histogram(&d, pass, magnitude));
                    }
                }
            }
            for (sel, (pass, hist)) in sels.iter_mut().zip(passes.iter().zip(&hists)) {
                if pass.is_some() {
                    sel.feed(hist);
                }
            }
        }
        Ok(sels.iter().map(|s| s.cut().unwrap()).collect())
    }

    fn trim_cursors(cuts: &Option<Vec<Cut>>) -> Option<Vec<CutCursor>> {
        cuts.as_ref().map(|c| c.iter().map(|&c| CutCursor::new(c)).collect())
    }

    /// Base and trimmed deltas of tensor `t`; returns the kept counts too.
    fn trimmed(&self, t: usize, cursors: &mut Option<Vec<CutCursor>>) -> Result<(Vec<f32>, Vec<Vec<f32>>, Vec<u64>)> {
        let base = self.inputs.base(t)?;
        let mut deltas = Vec::with_capacity(self.n);
        let mut kept = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut d = self.delta(i, t, &base)?;
            kept.push(self.trim(i, &mut d, cursors));
            deltas.push(d);
        }
        Ok((base, deltas, kept))
    }

    /// The cut over discard candidates for TIES-SV.
    fn slack_cut(&self, cuts: &Option<Vec<Cut>>, prot: usize) -> Result<Cut> {
        let layout = self.layout();
        let k = self.recipe.densities[prot];
        let retained: u64 = match cuts {
            Some(_) => {
                let total: u64 = (0..layout.names.len()).map(|t| layout.numel(t) as u64).sum();
                n_keep(k, total)
            }
            None => (0..layout.names.len()).map(|t| n_keep(k, layout.numel(t) as u64)).sum(),
        };
        let target = (self.recipe.slack * retained as f64).round() as u64;
        let mut sel = RadixSelect::new(target);
        while let Some(pass) = sel.pass() {
            let mut hist = select::empty_histogram();
            let mut cursors = Self::trim_cursors(cuts);
            for t in 0..layout.names.len() {
                let (_, d, _) = self.trimmed(t, &mut cursors)?;
                let (p, o) = (&d[prot], &d[1 - prot]);
                select::add_histogram(&mut hist, &select::histogram(p, pass, |j, x| deficit_key(x, o[j])));
            }
            sel.feed(&hist);
        }
        Ok(sel.cut().unwrap())
    }

    fn run(&self, mut sink: Option<&mut dyn Sink>) -> Result<MergeSummary> {
        let recipe = self.recipe;
        let layout = self.layout();
        let cuts = match recipe.trim_granularity {
            TrimGranularity::Global => Some(self.global_cuts()?),
            TrimGranularity::PerTensor => None,
        };
        let slack = match (recipe.algorithm, recipe.protected_model) {
            (Algorithm::TiesSv, Some(prot)) if recipe.slack > 0.0 => Some((self.slack_cut(&cuts, prot)?, prot)),
            _ => None,
        };

        let lambda = recipe.scale as f32;
        let focus = recipe.protected_model.unwrap_or(0);
        let mut retention = vec![ModelRetention::default(); self.n];
        let mut election = TensorElection::new(self.n);
        let mut conflicts = Vec::new();
        let mut cursors = Self::trim_cursors(&cuts);
        let mut slack_cursor = slack.map(|(cut, prot)| (CutCursor::new(cut), prot));

        for (t, name) in layout.names.iter().enumerate() {
            let (base, deltas, kept) = self.trimmed(t, &mut cursors)?;
            for (r, &k) in retention.iter_mut().zip(&kept) {
                r.total += k;
                r.per_tensor.insert(name.clone(), k);
            }
            if self.n == 2 {
                let other = 1 - focus;
                conflicts.push((
                    name.clone(),
                    pair_counts(&deltas[focus], &deltas[other], kept[focus], kept[other]),
                ));
            }
            let Some(sink) = sink.as_deref_mut() else {
                continue;
            };
            let reserved = slack_cursor.as_mut().map(|(cursor, prot)| {
                let (p, o) = (&deltas[*prot], &deltas[1 - *prot]);
                let mut mask = vec![false; base.len()];
                cursor.apply(base.len(), |j| deficit_key(p[j], o[j]), &mut mask);
                (mask, *prot)
            });
            let terms: Vec<&[f32]> = deltas.iter().map(Vec::as_slice).collect();
            let (out, counts) = merge_tensor(
                &terms,
                reserved.as_ref().map(|(m, p)| (m.as_slice(), *p)),
                &base,
                lambda,
                recipe.normalize,
            );
            election = election.add(counts);
            sink.put(name, output_dtype(recipe, layout, t), &layout.shapes[t], &out)?;
        }

        Ok(MergeSummary {
            retained: retention,
            election: Some(ElectionSummary {
                discarded: election.discarded,
                zero_sum_positions: election.zero_sum,
                reserved: election.reserved,
            }),
            conflict: (self.n == 2).then(|| ConflictReport::from_tensors(conflicts)),
        })
    }
}

/// Elect, reserve, disjoint-merge and scale one tensor: `base + λ·τₘ`.
fn merge_tensor(
    terms: &[&[f32]],
    reserved: Option<(&[bool], usize)>,
    base: &[f32],
    lambda: f32,
    normalize: bool,
) -> (Vec<f32>, TensorElection) {
    let n = terms.len();
    let mut out = vec![0f32; base.len()];
    let counts = out
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut st = TensorElection::new(n);
            for (j, o) in chunk.iter_mut().enumerate() {
                let p = c * CHUNK + j;
                let mut gamma = elect_at(terms, p);
                if gamma == 0 && terms.iter().any(|t| t[p] != 0.0) {
                    st.zero_sum += 1;
                }
                if let Some((mask, prot)) = reserved {
                    if mask[p] {
                        gamma = sign(terms[prot][p]);
                        st.reserved += 1;
                    }
                }
                for (i, t) in terms.iter().enumerate() {
                    if t[p] != 0.0 && sign(t[p]) != gamma {
                        st.discarded[i] += 1;
                    }
                }
                *o = base[p] + lambda * disjoint_at(terms, p, gamma, normalize);
            }
            st
        })
        .reduce(|| TensorElection::new(n), TensorElection::add);
    (out, counts)
}

/// Runs a recipe on in-memory checkpoints. `recipe.models` must name as many models
/// as are passed; the paths themselves are not read.
pub fn merge_checkpoints(
    recipe: &MergeRecipe,
    base: Option<&Checkpoint>,
    models: &[Checkpoint],
) -> Result<(Checkpoint, MergeSummary)> {
    recipe.validate()?;
    if recipe.models.len() != models.len() {
        return Err(Error::invalid(format!(
            "recipe names {} models, {} given",
            recipe.models.len(),
            models.len()
        )));
    }
    if base.is_none() && recipe.algorithm != Algorithm::WeightedAverage {
        return Err(Error::invalid("recipe needs a base checkpoint"));
    }
    let inputs = MemoryInputs::new(base, models)?;
    let mut out = Checkpoint::new();
    let summary = run(recipe, &inputs, Some(&mut out))?;
    Ok((out, summary))
}

/// TIES, TIES-SV or DARE-TIES on in-memory checkpoints.
pub fn ties_merge(recipe: &MergeRecipe, base: &Checkpoint, models: &[Checkpoint]) -> Result<Checkpoint> {
    if !recipe.algorithm.is_ties_family() {
        return Err(Error::invalid(format!("{:?} is not a TIES algorithm", recipe.algorithm)));
    }
    Ok(merge_checkpoints(recipe, Some(base), models)?.0)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

/// Runs a recipe from files, writes the merged checkpoint to `out` and its manifest
/// to `<out>.manifest.json`.
pub fn run_recipe(recipe: &MergeRecipe, out: &Path) -> Result<MergeManifest> {
    recipe.validate()?;
    let input_paths: Vec<&PathBuf> = recipe.base.iter().chain(&recipe.models).collect();
    if input_paths.iter().any(|p| same_file(p, out)) {
        return Err(Error::invalid(format!("output {} is also an input", out.display())));
    }
    let inputs = FileInputs::open(recipe.base.as_deref(), &recipe.models)?;
    let record = |r: &CheckpointReader| -> Result<InputRecord> {
        Ok(InputRecord {
            path: r.path().to_path_buf(),
            fingerprint: r.fingerprint()?,
        })
    };
    let base = inputs.base.as_ref().map(record).transpose()?;
    let models = inputs.models.iter().map(record).collect::<Result<Vec<_>>>()?;

    let layout = &inputs.layout;
    let dtypes: Vec<Dtype> = (0..layout.names.len()).map(|t| output_dtype(recipe, layout, t)).collect();
    let mut writer = CheckpointWriter::create(
        out,
        layout
            .names
            .iter()
            .zip(&layout.shapes)
            .zip(&dtypes)
            .map(|((n, s), &d)| (n.clone(), d, s.clone())),
        None,
    )?;
    let summary = run(recipe, &inputs, Some(&mut writer))?;
    let fingerprint = writer.finish()?;

    let mut distinct = Vec::new();
    for d in dtypes {
        if !distinct.contains(&d) {
            distinct.push(d);
        }
    }
    let manifest = MergeManifest {
        recipe: recipe.clone(),
        base,
        models,
        output: OutputRecord {
            path: out.to_path_buf(),
            fingerprint,
            dtypes: distinct,
        },
        summary,
    };
    let path = MergeManifest::path_for(out);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn analysis_recipe(opts: AnalysisOptions, base: PathBuf, protected: PathBuf, other: PathBuf) -> Result<MergeRecipe> {
    let mut recipe = MergeRecipe::new(Algorithm::Ties, Some(base), vec![protected, other]);
    recipe.densities = vec![opts.k_protected, opts.k_other];
    recipe.protected_model = Some(0);
    recipe.trim_granularity = opts.granularity;
    recipe.validate()?;
    Ok(recipe)
}

fn conflict_of(summary: MergeSummary) -> ConflictReport {
    summary.conflict.expect("two-model runs report conflicts")
}

pub(crate) fn analyze_files(base: &Path, protected: &Path, other: &Path, opts: AnalysisOptions) -> Result<ConflictReport> {
    let recipe = analysis_recipe(opts, base.into(), protected.into(), other.into())?;
    let inputs = FileInputs::open(recipe.base.as_deref(), &recipe.models)?;
    Ok(conflict_of(run(&recipe, &inputs, None)?))
}

pub(crate) fn analyze_checkpoints(
    base: &Checkpoint,
    protected: &Checkpoint,
    other: &Checkpoint,
    opts: AnalysisOptions,
) -> Result<ConflictReport> {
    let recipe = analysis_recipe(opts, "base".into(), "protected".into(), "other".into())?;
    let models = [protected.clone(), other.clone()];
    let inputs = MemoryInputs::new(Some(base), &models)?;
    Ok(conflict_of(run(&recipe, &inputs, None)?))
}
