//! TIES with a slack reservation: a protected model keeps some of the parameters
//! it would lose at sign election.

use deltamerge::synth::{generate_checkpoint, ConflictInjection, Distribution, SynthSpec, TensorSpec};
use deltamerge::tensorio::Dtype;
use deltamerge::tiescore::{merge_checkpoints, Algorithm, MergeRecipe};

fn main() -> deltamerge::Result<()> {
    let tensors = vec![TensorSpec { name: "w".into(), shape: vec![100, 100], dtype: Dtype::F32 }];
    let base = generate_checkpoint(&SynthSpec {
        distribution: Distribution::Constant { value: 0.0 },
        ..SynthSpec::uniform(0, tensors.clone())
    })?;
    let protected = generate_checkpoint(&SynthSpec::uniform(1, tensors.clone()))?;
    // the other model disagrees in sign with the protected one on 30% of positions
    let other = generate_checkpoint(&SynthSpec {
        conflict: Some(ConflictInjection { reference_seed: 1, fraction: 0.3 }),
        ..SynthSpec::uniform(2, tensors)
    })?;

    for slack in [0.0, 0.04, 0.2, 1.0] {
        let mut recipe = MergeRecipe::new(Algorithm::TiesSv, Some("base".into()), vec!["p".into(), "o".into()]);
        recipe.densities = vec![1.0, 1.0];
        recipe.protected_model = Some(0);
        recipe.slack = slack;
        let (_, summary) = merge_checkpoints(&recipe, Some(&base), &[protected.clone(), other.clone()])?;
        let election = summary.election.expect("ties summary");
        let conflict = summary.conflict.expect("ties_sv summary");
        println!(
            "slack {slack:4}: retained {} of the protected model, {} would be discarded, {} reserved",
            summary.retained[0].total, conflict.discarded_protected, election.reserved
        );
    }
    Ok(())
}
