//! TIES on a four-parameter example, in memory and through a recipe file with a
//! manifest.

use deltamerge::tensorio::{read_checkpoint, write_checkpoint, Checkpoint, Dtype, Tensor};
use deltamerge::tiescore::{run_recipe, ties_merge, Algorithm, MergeRecipe};

fn model(values: &[f32]) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.insert("w", Tensor::from_f32(Dtype::F32, vec![values.len()], values).unwrap()).unwrap();
    c
}

fn main() -> deltamerge::Result<()> {
    let base = model(&[0.0; 4]);
    let m1 = model(&[2.0, -1.0, 0.5, 3.0]);
    let m2 = model(&[1.0, 1.0, -2.0, -3.0]);

    // keep the top half of each task vector, elect signs, average the agreeing values
    let mut recipe = MergeRecipe::new(Algorithm::Ties, Some("base.safetensors".into()), vec!["m1.safetensors".into(), "m2.safetensors".into()]);
    recipe.densities = vec![0.5, 0.5];
    let merged = ties_merge(&recipe, &base, &[m1.clone(), m2.clone()])?;
    println!("in memory: {:?}", merged.get("w").unwrap().to_f32());

    let dir = tempfile::tempdir().expect("temp dir");
    for (name, c) in [("base", &base), ("m1", &m1), ("m2", &m2)] {
        write_checkpoint(c, dir.path().join(format!("{name}.safetensors")))?;
    }
    recipe.resolve_paths(dir.path());
    let out = dir.path().join("merged.safetensors");
    let manifest = run_recipe(&recipe, &out)?;
    println!("on disk:   {:?}", read_checkpoint(&out)?.get("w").unwrap().to_f32());
    println!("retained per model: {:?}", manifest.summary.retained.iter().map(|r| r.total).collect::<Vec<_>>());
    println!("output fingerprint: {}", manifest.output.fingerprint);
    Ok(())
}
