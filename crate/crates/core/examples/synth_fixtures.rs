//! Deterministic synthetic checkpoints: the same spec always yields the same
//! bytes, and the delta statistics of constant fixtures have a closed form.

use deltamerge::synth::{generate_checkpoint, Distribution, SynthSpec, TensorSpec};
use deltamerge::taskvec::diff_checkpoints;
use deltamerge::tensorio::Dtype;

fn main() -> deltamerge::Result<()> {
    let tensors = vec![
        TensorSpec { name: "embed".into(), shape: vec![16, 8], dtype: Dtype::BF16 },
        TensorSpec { name: "head".into(), shape: vec![8], dtype: Dtype::F32 },
    ];
    let spec = SynthSpec::uniform(2024, tensors.clone());
    let a = generate_checkpoint(&spec)?;
    let b = generate_checkpoint(&spec)?;
    println!("fingerprint {} (reproducible: {})", a.fingerprint(), a.fingerprint() == b.fingerprint());

    let constant = |value| SynthSpec {
        distribution: Distribution::Constant { value },
        ..SynthSpec::uniform(0, tensors.clone())
    };
    let report = diff_checkpoints(&generate_checkpoint(&constant(0.25))?, &generate_checkpoint(&constant(1.25))?)?;
    for (name, s) in &report.tensors {
        println!("{name:6} numel {:4} l2 {:.4} (sqrt(numel) = {:.4})", s.numel, s.l2, (s.numel as f64).sqrt());
    }
    Ok(())
}
