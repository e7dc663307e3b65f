//! Hyperparameter grid search: every assignment of the grid is materialized into a
//! recipe, merged, and scored by an external evaluation hook.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensorio::Fingerprint;
use crate::tiescore::{run_recipe, MergeManifest, MergeRecipe};

/// Density grid used when a spec lists no grid.
pub const DEFAULT_GRID: [f64; 6] = [0.01, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Placeholder replaced by the candidate path in the hook command.
pub const CANDIDATE_PLACEHOLDER: &str = "{candidate}";

/// One value per swept field, keyed by field name.
pub type Assignment = BTreeMap<String, Value>;

const RECIPE_KEYS: [&str; 13] = [
    "algorithm",
    "base",
    "models",
    "densities",
    "scale",
    "slack",
    "protected_model",
    "trim_granularity",
    "normalize",
    "drop_p",
    "seed",
    "output_dtype",
    "weights",
];

/// The evaluation command: a shell command line, or an argument vector run directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalCommand {
    Shell(String),
    Argv(Vec<String>),
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// A recipe document; swept fields may be left out.
    pub recipe_template: Value,
    /// Field → candidate values. Fields are recipe keys, or `kN` / `wN` for the
    /// density / weight of model `N` (1-based). Defaults to every density over
    /// [`DEFAULT_GRID`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<BTreeMap<String, Vec<Value>>>,
    pub eval_command: EvalCommand,
    /// Directory for candidate checkpoints.
    pub workdir: PathBuf,
    #[serde(default)]
    pub keep_candidates: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<f64>,
    /// Candidates merged and evaluated at once.
    #[serde(default = "one")]
    pub parallel: usize,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub root: Option<PathBuf>,
}

impl SweepSpec {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: SweepSpec = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        spec.root = path.parent().map(Path::to_path_buf);
        Ok(spec)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn workdir(&self) -> PathBuf {
        self.resolve(&self.workdir)
    }

    fn model_count(&self) -> usize {
        self.recipe_template
            .get("models")
            .and_then(Value::as_array)
            .map_or(0, Vec::len)
    }

    /// The grid in effect, with the default density grid filled in.
    pub fn effective_grid(&self) -> BTreeMap<String, Vec<Value>> {
        match &self.grid {
            Some(g) => g.clone(),
            None => (1..=self.model_count())
                .map(|i| (format!("k{i}"), DEFAULT_GRID.iter().map(|&k| Value::from(k)).collect()))
                .collect(),
        }
    }

    /// Builds the recipe for one assignment.
    pub fn materialize(&self, assignment: &Assignment) -> Result<MergeRecipe> {
        let mut doc = self.recipe_template.clone();
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::invalid("recipe_template must be an object"))?;
        for (field, value) in assignment {
            match indexed_field(field) {
                Some((array, n)) => {
                    let slot = obj.entry(array).or_insert_with(|| Value::Array(Vec::new()));
                    let items = slot
                        .as_array_mut()
                        .ok_or_else(|| Error::invalid(format!("recipe_template.{array} must be an array")))?;
                    if items.len() < n {
                        items.resize(n, Value::Null);
                    }
                    items[n - 1] = value.clone();
                }
                None => {
                    obj.insert(field.clone(), value.clone());
                }
            }
        }
        let mut recipe: MergeRecipe = serde_json::from_value(doc)
            .map_err(|e| Error::invalid(format!("recipe for {}: {e}", describe(assignment))))?;
        if let Some(root) = &self.root {
            recipe.resolve_paths(root);
        }
        recipe.validate()?;
        Ok(recipe)
    }
}

/// `kN` → ("densities", N), `wN` → ("weights", N).
fn indexed_field(field: &str) -> Option<(&'static str, usize)> {
    let array = match field.as_bytes().first()? {
        b'k' => "densities",
        b'w' => "weights",
        _ => return None,
    };
    let n: usize = field[1..].parse().ok()?;
    (n >= 1 && field[1..] == n.to_string()).then_some((array, n))
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `field=value` pairs, comma separated.
pub fn describe(assignment: &Assignment) -> String {
    assignment
        .iter()
        .map(|(k, v)| format!("{k}={}", value_text(v)))
        .collect::<Vec<_>>()
        .join(",")
}

/// Full Cartesian product of the grid. Fields are taken in sorted name order with
/// the first field varying slowest.
pub fn enumerate_grid(spec: &SweepSpec) -> Result<Vec<Assignment>> {
    let grid = spec.effective_grid();
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid has no fields"));
    }
    let n_models = spec.model_count();
    for (field, values) in &grid {
        let known = match indexed_field(field) {
            Some((_, n)) => n <= n_models,
            None => RECIPE_KEYS.contains(&field.as_str()),
        };
        if !known {
            return Err(Error::invalid(format!("sweep field {field:?} is not a recipe field")));
        }
        if values.is_empty() {
            return Err(Error::invalid(format!("sweep field {field:?} has no values")));
        }
    }
    let fields: Vec<(&String, &Vec<Value>)> = grid.iter().collect();
    let total: usize = fields.iter().map(|(_, v)| v.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut digits = vec![0usize; fields.len()];
    for _ in 0..total {
        out.push(
            fields
                .iter()
                .zip(&digits)
                .map(|((f, v), &d)| ((*f).clone(), v[d].clone()))
                .collect(),
        );
        for pos in (0..digits.len()).rev() {
            digits[pos] += 1;
            if digits[pos] < fields[pos].1.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
    Ok(out)
}

/// Scores a candidate checkpoint; higher is better.
pub trait Evaluator: Sync {
    fn evaluate(&self, candidate: &Path, assignment: &Assignment) -> Result<f64>;
}

/// Runs the external hook command.
#[derive(Debug, Clone)]
pub struct CommandHook {
    pub command: EvalCommand,
    pub timeout: Option<Duration>,
}

impl Evaluator for CommandHook {
    fn evaluate(&self, candidate: &Path, assignment: &Assignment) -> Result<f64> {
        run_eval_hook(&self.command, candidate, assignment, self.timeout)
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "'\\''"))
}

fn env_name(field: &str) -> String {
    let upper: String = field
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("MERGE_PARAM_{upper}")
}

/// Parses the last non-empty line of `stdout` as a finite decimal.
pub fn parse_score(stdout: &str) -> Result<f64> {
    let line = stdout
        .lines()
        .map(str::trim).rfind(|l| !l.is_empty())
        .ok_or_else(|| Error::Hook("no output".into()))?;
    let score: f64 = line
        .parse()
        .map_err(|_| Error::Hook(format!("output {line:?} is not a number")))?;
    if !score.is_finite() {
        return Err(Error::Hook(format!("score {line:?} is not finite")));
    }
    Ok(score)
}

/// Runs `command` on `candidate`. The path replaces `{candidate}` (shell-quoted for
/// the string form) and is exported as `MERGE_CANDIDATE`; each assigned field is
/// exported as `MERGE_PARAM_<FIELD>`.
pub fn run_eval_hook(
    command: &EvalCommand,
    candidate: &Path,
    assignment: &Assignment,
    timeout: Option<Duration>,
) -> Result<f64> {
    let path = candidate.to_string_lossy();
    let mut cmd = match command {
        EvalCommand::Shell(line) => {
            let mut c = Command::new("sh");
            c.arg("-c").arg(line.replace(CANDIDATE_PLACEHOLDER, &shell_quote(&path)));
            c
        }
        EvalCommand::Argv(argv) => {
            let (program, args) = argv
                .split_first()
                .ok_or_else(|| Error::invalid("eval_command is empty"))?;
            let mut c = Command::new(program.replace(CANDIDATE_PLACEHOLDER, &path));
            c.args(args.iter().map(|a| a.replace(CANDIDATE_PLACEHOLDER, &path)));
            c
        }
    };
    cmd.env("MERGE_CANDIDATE", candidate);
    for (field, value) in assignment {
        cmd.env(env_name(field), value_text(value));
    }
    let context = describe(assignment);
    let fail = |msg: String| Error::Hook(format!("candidate {context}: {msg}"));

    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| fail(format!("cannot start: {e}")))?;
    let drain = |pipe: Option<Box<dyn Read + Send>>| {
        std::thread::spawn(move || {
            let mut buf = Vec::new();
            if let Some(mut p) = pipe {
                let _ = p.read_to_end(&mut buf);
            }
            String::from_utf8_lossy(&buf).into_owned()
        })
    };
    let stdout = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let stderr = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));

    let status = match timeout {
        None => child.wait().map_err(|e| fail(e.to_string()))?,
        Some(limit) => {
            let start = Instant::now();
            loop {
                if let Some(status) = child.try_wait().map_err(|e| fail(e.to_string()))? {
                    break status;
                }
                if start.elapsed() >= limit {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(fail(format!("timed out after {:.1} s", limit.as_secs_f64())));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    };
    let out = stdout.join().unwrap_or_default();
    let err = stderr.join().unwrap_or_default();
    if !status.success() {
        let tail = err.lines().last().unwrap_or("").trim();
        return Err(fail(format!("{status}{}", if tail.is_empty() { String::new() } else { format!(": {tail}") })));
    }
    parse_score(&out).map_err(|e| fail(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    /// Position in enumeration order.
    pub index: usize,
    pub assignment: Assignment,
    pub score: f64,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCandidate {
    pub index: usize,
    pub assignment: Assignment,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Successful candidates, best first; equal scores in enumeration order.
    pub ranked: Vec<ScoredCandidate>,
    pub failed: Vec<FailedCandidate>,
    pub best: ScoredCandidate,
    pub best_recipe: MergeRecipe,
    /// Where the best candidate checkpoint was left.
    pub best_path: PathBuf,
}

enum Outcome {
    Scored { score: f64, manifest: Box<MergeManifest> },
    Failed(String),
}

/// Candidate and manifest paths for enumeration index `i`.
pub fn candidate_path(workdir: &Path, i: usize) -> PathBuf {
    workdir.join(format!("candidate-{i:04}.safetensors"))
}

fn remove_candidate(path: &Path) {
    let _ = std::fs::remove_file(path);
    let _ = std::fs::remove_file(MergeManifest::path_for(path));
}

/// Grid search with the spec's command hook.
pub fn grid_search(spec: &SweepSpec) -> Result<SweepResult> {
    let hook = CommandHook {
        command: spec.eval_command.clone(),
        timeout: spec.timeout_secs.map(Duration::from_secs_f64),
    };
    grid_search_with(spec, &hook)
}

/// Grid search with any evaluator.
pub fn grid_search_with(spec: &SweepSpec, evaluator: &dyn Evaluator) -> Result<SweepResult> {
    let assignments = enumerate_grid(spec)?;
    if let Some(t) = spec.timeout_secs {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::invalid(format!("timeout_secs {t} must be positive")));
        }
    }
    let workdir = spec.workdir();
    std::fs::create_dir_all(&workdir).map_err(|e| Error::io(&workdir, e))?;

    let attempt = |i: usize, assignment: &Assignment| -> Outcome {
        let path = candidate_path(&workdir, i);
        let run = || -> Result<(f64, MergeManifest)> {
            let recipe = spec.materialize(assignment)?;
            let manifest = run_recipe(&recipe, &path)?;
            Ok((evaluator.evaluate(&path, assignment)?, manifest))
        };
        match run() {
            Ok((score, manifest)) => Outcome::Scored { score, manifest: Box::new(manifest) },
            Err(e) => {
                remove_candidate(&path);
                Outcome::Failed(e.to_string())
            }
        }
    };

    let mut ranked = Vec::new();
    let mut failed = Vec::new();
    let mut best: Option<(ScoredCandidate, MergeRecipe)> = None;
    let batch = spec.parallel.max(1);
    for (chunk_no, chunk) in assignments.chunks(batch).enumerate() {
        let outcomes: Vec<Outcome> = if chunk.len() == 1 {
            vec![attempt(chunk_no * batch, &chunk[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        let attempt = &attempt;
                        s.spawn(move || attempt(chunk_no * batch + j, a))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("candidate thread")).collect()
            })
        };
        for (j, outcome) in outcomes.into_iter().enumerate() {
            let index = chunk_no * batch + j;
            let assignment = chunk[j].clone();
            match outcome {
                Outcome::Failed(reason) => failed.push(FailedCandidate {
                    index,
                    assignment,
                    reason,
                }),
                Outcome::Scored { score, manifest } => {
                    let cand = ScoredCandidate {
                        index,
                        assignment,
                        score,
                        fingerprint: manifest.output.fingerprint,
                    };
                    let better = best.as_ref().is_none_or(|(b, _)| score > b.score);
                    if better {
                        if let Some((old, _)) = best.take() {
                            if !spec.keep_candidates {
                                remove_candidate(&candidate_path(&workdir, old.index));
                            }
                        }
                        best = Some((cand.clone(), manifest.recipe));
                    } else if !spec.keep_candidates {
                        remove_candidate(&candidate_path(&workdir, index));
                    }
                    ranked.push(cand);
                }
            }
        }
    }

    let Some((best, best_recipe)) = best else {
        let reasons: Vec<String> = failed.iter().take(3).map(|f| f.reason.clone()).collect();
        return Err(Error::Hook(format!(
            "all {} candidates failed (first: {})",
            failed.len(),
            reasons.join("; ")
        )));
    };
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    Ok(SweepResult {
        best_path: candidate_path(&workdir, best.index),
        ranked,
        failed,
        best,
        best_recipe,
    })
}

/// Tab-separated table: one row per candidate in rank order, then failures.
pub fn result_table(result: &SweepResult) -> String {
    let mut out = String::from("rank\tindex\tscore\tassignment\tfingerprint\n");
    for (rank, c) in result.ranked.iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            rank + 1,
            c.index,
            c.score,
            describe(&c.assignment),
            c.fingerprint
        );
    }
    for f in &result.failed {
        let _ = writeln!(out, "-\t{}\tfailed\t{}\t{}", f.index, describe(&f.assignment), f.reason);
    }
    let _ = writeln!(
        out,
        "# best\t{}\t{}\t{}",
        result.best.index,
        result.best.score,
        describe(&result.best.assignment)
    );
    out
}
