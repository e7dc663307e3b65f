//! Grid search over TIES densities with a shell evaluation hook. The hook scores a
//! candidate by how close its first density is to 0.4.

use deltamerge::sweep::{grid_search, result_table, EvalCommand, SweepSpec};
use deltamerge::synth::{write_synth_checkpoint, SynthSpec, TensorSpec};
use deltamerge::tensorio::Dtype;
use serde_json::json;

fn main() -> deltamerge::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let tensors = vec![TensorSpec { name: "w".into(), shape: vec![32, 32], dtype: Dtype::F16 }];
    for (seed, name) in ["base", "m1", "m2"].iter().enumerate() {
        write_synth_checkpoint(&SynthSpec::uniform(seed as u64, tensors.clone()), dir.path().join(format!("{name}.safetensors")))?;
    }

    let mut spec: SweepSpec = serde_json::from_value(json!({
        "recipe_template": {
            "algorithm": "ties",
            "base": "base.safetensors",
            "models": ["m1.safetensors", "m2.safetensors"],
            "densities": [0.2, 1.0]
        },
        "grid": {"k1": [0.01, 0.2, 0.4, 0.6, 0.8, 1.0]},
        "eval_command": "awk -v k=\"$MERGE_PARAM_K1\" 'BEGIN { print -(k - 0.4)^2 }'",
        "workdir": "candidates",
        "parallel": 2
    }))
    .expect("valid sweep spec");
    spec.root = Some(dir.path().to_path_buf());
    assert!(matches!(spec.eval_command, EvalCommand::Shell(_)));

    let result = grid_search(&spec)?;
    print!("{}", result_table(&result));
    println!("best densities: {:?}", result.best_recipe.densities);
    Ok(())
}
