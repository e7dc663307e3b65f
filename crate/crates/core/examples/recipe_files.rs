//! Drive the command-line interface in process: synthesize inputs, write a
//! recipe, merge, and inspect the result.

use std::path::Path;

use serde_json::json;

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["deltamerge"];
    argv.extend_from_slice(args);
    deltamerge::cli::run(argv, &mut std::io::stdout())
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let at = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let write = |name: &str, v: serde_json::Value| std::fs::write(Path::new(&at(name)), v.to_string()).unwrap();

    for (seed, name) in ["base", "m1", "m2"].iter().enumerate() {
        write(&format!("{name}.json"), json!({"seed": seed, "tensors": [{"name": "w", "shape": [4, 4], "dtype": "F16"}]}));
        assert_eq!(cli(&["synth", "--spec", &at(&format!("{name}.json")), "--out", &at(&format!("{name}.safetensors"))]), 0);
    }
    // paths inside a recipe are relative to the recipe file
    write(
        "recipe.json",
        json!({
            "algorithm": "dare_ties",
            "base": "base.safetensors",
            "models": ["m1.safetensors", "m2.safetensors"],
            "densities": [0.6, 0.6],
            "drop_p": 0.3,
            "seed": 5
        }),
    );
    assert_eq!(cli(&["merge", "--recipe", &at("recipe.json"), "--out", &at("merged.safetensors")]), 0);
    assert_eq!(cli(&["inspect", &at("merged.safetensors")]), 0);
    assert_eq!(cli(&["--format", "doc", "diff", &at("base.safetensors"), &at("merged.safetensors")]), 0);
}
