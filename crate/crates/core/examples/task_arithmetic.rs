//! Task vectors, weighted averaging, task arithmetic and DARE on a small pair of
//! fine-tuned models.

use deltamerge::taskvec::{
    compute_task_vector, dare_drop, task_arithmetic_merge, weighted_average, ApplyOptions, AveragingWeights,
};
use deltamerge::tensorio::{Checkpoint, Dtype, Tensor};

fn model(values: &[f32]) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.insert("w", Tensor::from_f32(Dtype::F32, vec![values.len()], values).unwrap()).unwrap();
    c
}

fn main() -> deltamerge::Result<()> {
    let base = model(&[0.0, 1.0, -1.0, 0.5]);
    let lang = model(&[0.4, 1.2, -1.0, 0.1]);
    let chat = model(&[-0.2, 1.0, -0.4, 0.9]);

    let tau_lang = compute_task_vector(&lang, &base)?;
    let tau_chat = compute_task_vector(&chat, &base)?;
    println!("tau_lang = {:?}", tau_lang.deltas["w"].values);
    println!("tau_chat = {:?}", tau_chat.deltas["w"].values);

    let avg = weighted_average(&[lang.clone(), chat.clone()], &AveragingWeights::pair(0.7)?)?;
    println!("0.7/0.3 average  = {:?}", avg.get("w").unwrap().to_f32());

    let ta = task_arithmetic_merge(&base, &[tau_lang.clone(), tau_chat], &[1.0, 1.0], ApplyOptions::default())?;
    println!("base + both      = {:?}", ta.get("w").unwrap().to_f32());

    // survivors are rescaled by 1/(1-p), so the expectation is unchanged
    let dropped = dare_drop(&tau_lang, 0.5, 42)?;
    println!("DARE p=0.5       = {:?}", dropped.deltas["w"].values);
    Ok(())
}
