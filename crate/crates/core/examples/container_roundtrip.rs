//! Write a checkpoint, read one tensor back lazily, and confirm the canonical
//! serialization survives a round trip.

use std::collections::BTreeMap;

use deltamerge::tensorio::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointReader, Dtype, Tensor};

fn main() -> deltamerge::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("tiny.safetensors");

    let mut ckpt = Checkpoint::new();
    ckpt.insert("mlp.up", Tensor::from_f32(Dtype::BF16, vec![2, 3], &[0.5, -1.0, 2.0, 0.0, 1.5, -0.25])?)?;
    ckpt.insert("embed", Tensor::from_f32(Dtype::F16, vec![4], &[1.0, 2.0, 3.0, 4.0])?)?;
    ckpt.set_metadata(Some(BTreeMap::from([("format".to_string(), "pt".to_string())])));
    let fingerprint = write_checkpoint(&ckpt, &path)?;
    println!("wrote {} ({fingerprint})", path.display());

    let reader = CheckpointReader::open(&path)?;
    for meta in reader.metas() {
        println!("{:10} {:5} {:?} bytes {}..{}", meta.name, meta.dtype, meta.shape, meta.data_offsets.0, meta.data_offsets.1);
    }
    println!("mlp.up = {:?}", reader.read_f32("mlp.up")?);

    let again = dir.path().join("again.safetensors");
    write_checkpoint(&read_checkpoint(&path)?, &again)?;
    let same = std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap();
    println!("second serialization identical: {same}");
    Ok(())
}
