//! Conflict analysis along a synthetic continual-training trajectory: as the
//! other task vector grows, more of the protected model is discarded.

use deltamerge::conflict::{series_analysis, series_table, AnalysisOptions, SeriesRecord};
use deltamerge::synth::{generate_checkpoint, generate_ct_series, SynthSpec, TensorSpec};
use deltamerge::taskvec::{apply_task_vector, compute_task_vector, ApplyOptions, BaseCheck};
use deltamerge::tensorio::Dtype;

fn main() -> deltamerge::Result<()> {
    let spec = SynthSpec::uniform(
        7,
        vec![
            TensorSpec { name: "attn".into(), shape: vec![64, 64], dtype: Dtype::F32 },
            TensorSpec { name: "mlp".into(), shape: vec![64, 256], dtype: Dtype::F32 },
        ],
    );
    let base = generate_checkpoint(&spec)?;
    // protected model: base plus a quarter of the difference of two unrelated draws
    let unrelated = generate_checkpoint(&SynthSpec { seed: 8, ..spec.clone() })?;
    let delta = compute_task_vector(&unrelated, &generate_checkpoint(&SynthSpec { seed: 9, ..spec.clone() })?)?;
    let lenient = ApplyOptions { base_check: BaseCheck::AllowMismatch, output_dtype: None };
    let protected = apply_task_vector(&base, &delta, 0.25, lenient)?;

    let series = generate_ct_series(&spec, 8, 0.1)?;
    let reports = series_analysis(&base, &protected, &series, AnalysisOptions::default())?;
    let records: Vec<SeriesRecord> = reports
        .into_iter()
        .enumerate()
        .map(|(i, report)| SeriesRecord { tag: format!("step-{}", i + 1), report })
        .collect();
    print!("{}", series_table(&records));
    Ok(())
}
