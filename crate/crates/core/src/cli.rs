//! The `deltamerge` command line.
//!
//! Exit codes: 0 on success, 1 for validation errors (including bad usage), 2 for
//! I/O errors and malformed checkpoint files. Reports go to standard output as a
//! tab-separated table (`--format table`) or a JSON document (`--format doc`);
//! diagnostics go to standard error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::conflict::{self, AnalysisOptions};
use crate::error::{Error, Result};
use crate::sweep::{self, SweepSpec};
use crate::synth::{self, SynthSpec};
use crate::taskvec;
use crate::tensorio::{self, CheckpointReader};
use crate::tiescore::{run_recipe, MergeManifest, MergeRecipe, TrimGranularity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Doc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Granularity {
    PerTensor,
    Global,
}

impl From<Granularity> for TrimGranularity {
    fn from(g: Granularity) -> Self {
        match g {
            Granularity::PerTensor => TrimGranularity::PerTensor,
            Granularity::Global => TrimGranularity::Global,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "deltamerge", version, about = "Merge fine-tuned checkpoints through their task vectors")]
struct Cli {
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List the tensors of a checkpoint.
    Inspect { path: PathBuf },
    /// Statistics of the task vector `tuned − base`.
    Diff { base: PathBuf, tuned: PathBuf },
    /// Run a merge recipe.
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sign-conflict report between two models fine-tuned from the same base.
    Analyze {
        #[arg(long)]
        protected: PathBuf,
        #[arg(long)]
        other: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        trim: TrimArgs,
    },
    /// Conflict reports of a series of checkpoints against one protected model.
    Series {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        protected: PathBuf,
        /// Comma-separated checkpoint paths, in series order.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated labels, one per checkpoint (default: the paths).
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        tags: Vec<String>,
        #[command(flatten)]
        trim: TrimArgs,
    },
    /// Grid search over recipe hyperparameters with an evaluation hook.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Generate a synthetic checkpoint, or a directory holding a synthetic series.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write `base.safetensors` and this many `step-NN.safetensors` into `--out`.
        #[arg(long)]
        series_steps: Option<usize>,
        /// Task-vector growth per series step.
        #[arg(long, default_value_t = 1.0)]
        growth: f64,
    },
}

#[derive(Debug, clap::Args)]
struct TrimArgs {
    #[arg(long, default_value_t = 0.2)]
    k_protected: f64,
    #[arg(long, default_value_t = 1.0)]
    k_other: f64,
    #[arg(long, value_enum, default_value_t = Granularity::Global)]
    granularity: Granularity,
}

impl TrimArgs {
    fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            k_protected: self.k_protected,
            k_other: self.k_other,
            granularity: self.granularity.into(),
        }
    }
}

fn doc<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

fn shape_text(shape: &[usize]) -> String {
    format!(
        "[{}]",
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    )
}

fn inspect(path: &Path, format: Format) -> Result<String> {
    let reader = CheckpointReader::open(path)?;
    let fingerprint = reader.fingerprint()?;
    let metas = reader.metas();
    let params: usize = metas.iter().map(|m| m.numel()).sum();
    let bytes: u64 = metas.iter().map(|m| m.byte_len()).sum();
    Ok(match format {
        Format::Doc => doc(&json!({
            "path": path,
            "fingerprint": fingerprint,
            "metadata": reader.metadata(),
            "tensors": metas.iter().map(|m| json!({
                "name": m.name,
                "dtype": m.dtype,
                "shape": m.shape,
                "data_offsets": [m.data_offsets.0, m.data_offsets.1],
                "bytes": m.byte_len(),
            })).collect::<Vec<_>>(),
            "total_tensors": metas.len(),
            "total_params": params,
            "total_bytes": bytes,
        })),
        Format::Table => {
            let mut out = String::from("name\tdtype\tshape\tbegin\tend\tbytes\n");
            for m in metas {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    m.name,
                    m.dtype,
                    shape_text(&m.shape),
                    m.data_offsets.0,
                    m.data_offsets.1,
                    m.byte_len()
                );
            }
            let _ = writeln!(out, "# total\t{} tensors\t{params} params\t{bytes} bytes", metas.len());
            let _ = writeln!(out, "# fingerprint\t{fingerprint}");
            out
        }
    })
}

fn diff(base: &Path, tuned: &Path, format: Format) -> Result<String> {
    let report = taskvec::diff_files(base, tuned)?;
    Ok(match format {
        Format::Doc => doc(&report),
        Format::Table => {
            let mut out = String::from("tensor\tnumel\tl2\tmax_abs\tnonzero_fraction\n");
            let row = |out: &mut String, name: &str, s: &taskvec::DeltaStats| {
                let _ = writeln!(out, "{name}\t{}\t{}\t{}\t{}", s.numel, s.l2, s.max_abs, s.nonzero_fraction);
            };
            for (name, s) in &report.tensors {
                row(&mut out, name, s);
            }
            row(&mut out, "# total", &report.total);
            out
        }
    })
}

fn merge(recipe: &Path, out: &Path, format: Format) -> Result<String> {
    let recipe = MergeRecipe::from_file(recipe)?;
    let manifest = run_recipe(&recipe, out)?;
    Ok(match format {
        Format::Doc => doc(&manifest),
        Format::Table => {
            let mut s = String::from("key\tvalue\n");
            let _ = writeln!(s, "output\t{}", manifest.output.path.display());
            let _ = writeln!(s, "fingerprint\t{}", manifest.output.fingerprint);
            let _ = writeln!(s, "manifest\t{}", MergeManifest::path_for(out).display());
            for (i, r) in manifest.summary.retained.iter().enumerate() {
                let _ = writeln!(s, "retained.{i}\t{}", r.total);
            }
            if let Some(e) = &manifest.summary.election {
                for (i, d) in e.discarded.iter().enumerate() {
                    let _ = writeln!(s, "discarded.{i}\t{d}");
                }
                let _ = writeln!(s, "zero_sum_positions\t{}", e.zero_sum_positions);
                let _ = writeln!(s, "reserved\t{}", e.reserved);
            }
            if let Some(c) = &manifest.summary.conflict {
                let _ = writeln!(s, "conflicts\t{}", c.conflicts);
                let _ = writeln!(s, "discard_proportion\t{}", c.discard_proportion);
            }
            s
        }
    })
}

fn series(
    base: &Path,
    protected: &Path,
    checkpoints: &[PathBuf],
    tags: &[String],
    opts: AnalysisOptions,
    format: Format,
) -> Result<String> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("--checkpoints lists no checkpoints"));
    }
    let tags: Vec<String> = if tags.is_empty() {
        checkpoints.iter().map(|p| p.display().to_string()).collect()
    } else if tags.len() == checkpoints.len() {
        tags.to_vec()
    } else {
        return Err(Error::invalid(format!(
            "{} tags for {} checkpoints",
            tags.len(),
            checkpoints.len()
        )));
    };
    let pairs: Vec<(String, PathBuf)> = tags.into_iter().zip(checkpoints.iter().cloned()).collect();
    let records = conflict::series_files(base, protected, &pairs, opts)?;
    Ok(match format {
        Format::Doc => doc(&records),
        Format::Table => conflict::series_table(&records),
    })
}

fn synth_cmd(spec: &Path, out: &Path, steps: Option<usize>, growth: f64, format: Format) -> Result<String> {
    let spec = SynthSpec::from_file(spec)?;
    let mut written = Vec::new();
    match steps {
        None => written.push((out.to_path_buf(), synth::write_synth_checkpoint(&spec, out)?)),
        Some(steps) => {
            let series = synth::generate_ct_series(&spec, steps, growth)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let base = out.join("base.safetensors");
            written.push((base.clone(), synth::write_synth_checkpoint(&spec, &base)?));
            let width = steps.to_string().len().max(2);
            for (i, ckpt) in series.iter().enumerate() {
                let path = out.join(format!("step-{:0width$}.safetensors", i + 1));
                written.push((path.clone(), tensorio::write_checkpoint(ckpt, &path)?));
            }
        }
    }
    Ok(match format {
        Format::Doc => doc(&written
            .iter()
            .map(|(p, f)| json!({"path": p, "fingerprint": f}))
            .collect::<Vec<_>>()),
        Format::Table => {
            let mut s = String::from("path\tfingerprint\n");
            for (p, f) in &written {
                let _ = writeln!(s, "{}\t{f}", p.display());
            }
            s
        }
    })
}

fn execute(cli: Cli) -> Result<String> {
    let format = cli.format;
    match cli.command {
        Command::Inspect { path } => inspect(&path, format),
        Command::Diff { base, tuned } => diff(&base, &tuned, format),
        Command::Merge { recipe, out } => merge(&recipe, &out, format),
        Command::Analyze {
            protected,
            other,
            base,
            trim,
        } => {
            let report = conflict::analyze_files(&base, &protected, &other, trim.options())?;
            Ok(match format {
                Format::Doc => doc(&report),
                Format::Table => conflict::report_table(&report),
            })
        }
        Command::Series {
            base,
            protected,
            checkpoints,
            tags,
            trim,
        } => series(&base, &protected, &checkpoints, &tags, trim.options(), format),
        Command::Sweep { spec } => {
            let spec = SweepSpec::from_file(&spec)?;
            let result = sweep::grid_search(&spec)?;
            Ok(match format {
                Format::Doc => doc(&result),
                Format::Table => sweep::result_table(&result),
            })
        }
        Command::Synth {
            spec,
            out,
            series_steps,
            growth,
        } => synth_cmd(&spec, &out, series_steps, growth, format),
    }
}

/// Parses `args` (including the program name), runs the command, writes the report
/// to `stdout` and returns the exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 1 };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::invalid("--threads must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(cli)),
            Err(e) => Err(Error::invalid(format!("cannot start {n} threads: {e}"))),
        },
        None => execute(cli),
    };
    match result {
        Ok(report) => {
            let _ = stdout.write_all(report.as_bytes()).and_then(|_| stdout.flush());
            0
        }
        Err(e) => {
            eprintln!("deltamerge: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> ! {
    let code = run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code)
}
