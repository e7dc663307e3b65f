//! Deterministic synthetic checkpoints for tests, oracles and benchmarks.
//!
//! Every value is a pure function of `(seed, tensor name, flat index)`: the element at
//! index `i` of tensor `name` is output `i` of a SplitMix64 sequence seeded with
//! `seed ^ fnv1a64(name)`. Because SplitMix64's state advances by a constant, output
//! `i` can be computed directly, so generation order and thread count never matter.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::select::{self, Cut, CutCursor, RadixSelect};
use crate::tensorio::{self, Checkpoint, CheckpointWriter, Dtype, Fingerprint, Tensor};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tweak for choosing sign-flipped positions.
const FLIP_STREAM: u64 = 0x5EED_F11B_0000_0001;
/// Stream tweak for the task-vector direction of CT series.
const DIRECTION_STREAM: u64 = 0x5EED_D1EC_0000_0002;

/// SplitMix64 (Steele, Lea and Flood), with the published constants.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Output `index` (0-based) of the SplitMix64 sequence seeded with `seed ^ stream`.
#[inline]
pub fn keyed_u64(seed: u64, stream: u64, index: u64) -> u64 {
    mix64((seed ^ stream).wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Per-tensor stream id.
pub fn tensor_stream(name: &str) -> u64 {
    fnv1a64(name.as_bytes())
}

/// Uniform in `[0, 1)` from the top 53 bits.
#[inline]
pub fn unit_f64(z: u64) -> f64 {
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on the odd grid `(2k+1)·2⁻²³ − 1`, `k < 2²³`: symmetric in `(−1, 1)`,
/// never zero, exact in F32.
#[inline]
pub fn symmetric_f32(z: u64) -> f32 {
    let k = (z >> 41) as u32;
    (2 * k + 1) as f32 * (1.0 / (1u32 << 23) as f32) - 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    Uniform,
    Constant {
        value: f32,
    },
}

/// Makes the generated signs agree with a reference checkpoint everywhere except on
/// exactly `round(fraction × total elements)` positions, where they are opposite.
/// The reference is the same spec generated with `reference_seed` and no injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictInjection {
    pub reference_seed: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub tensors: Vec<TensorSpec>,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub conflict: Option<ConflictInjection>,
}

impl SynthSpec {
    pub fn uniform(seed: u64, tensors: Vec<TensorSpec>) -> Self {
        SynthSpec {
            seed,
            tensors,
            distribution: Distribution::Uniform,
            conflict: None,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::invalid(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.name == tensorio::METADATA_KEY {
                return Err(Error::invalid(format!("tensor name {:?} is reserved", t.name)));
            }
        }
        if let Distribution::Constant { value } = self.distribution {
            if !value.is_finite() {
                return Err(Error::invalid("constant value must be finite"));
            }
        }
        if let Some(c) = self.conflict {
            if !(0.0..=1.0).contains(&c.fraction) {
                return Err(Error::invalid(format!(
                    "conflict fraction {} outside [0, 1]",
                    c.fraction
                )));
            }
        }
        Ok(())
    }

    fn sorted_tensors(&self) -> Vec<&TensorSpec> {
        let mut v: Vec<&TensorSpec> = self.tensors.iter().collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn raw_value(dist: Distribution, seed: u64, stream: u64, i: usize) -> f32 {
    match dist {
        Distribution::Uniform => symmetric_f32(keyed_u64(seed, stream, i as u64)),
        Distribution::Constant { value } => value,
    }
}

fn flip_key(seed: u64, stream: u64, i: usize) -> u32 {
    (keyed_u64(seed, stream ^ FLIP_STREAM, i as u64) >> 32) as u32
}

/// Validated spec plus the precomputed flip selection.
struct Generator<'a> {
    spec: &'a SynthSpec,
    flip: Option<(ConflictInjection, CutCursor)>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SynthSpec) -> Result<Self> {
        spec.validate()?;
        let flip = match spec.conflict {
            None => None,
            Some(inj) => {
                let total: usize = spec.tensors.iter().map(|t| numel(&t.shape)).sum();
                let target = (inj.fraction * total as f64).round() as u64;
                let mut sel = RadixSelect::new(target);
                let tensors = spec.sorted_tensors();
                while let Some(pass) = sel.pass() {
                    let mut hist = select::empty_histogram();
                    for t in &tensors {
                        let stream = tensor_stream(&t.name);
                        let h = (0..numel(&t.shape))
                            .into_par_iter()
                            .fold(select::empty_histogram, |mut h, i| {
                                if let Some(b) = pass.bucket(flip_key(spec.seed, stream, i)) {
                                    h[b] += 1;
                                }
                                h
                            })
                            .reduce(select::empty_histogram, |mut a, b| {
                                select::add_histogram(&mut a, &b);
                                a
                            });
                        select::add_histogram(&mut hist, &h);
                    }
                    sel.feed(&hist);
                }
                let cut = sel.cut().unwrap_or(Cut::Nothing);
                Some((inj, CutCursor::new(cut)))
            }
        };
        Ok(Generator { spec, flip })
    }

    /// Values of the next tensor; tensors must be requested in sorted-name order
    /// when conflict injection is active.
    fn values(&mut self, t: &TensorSpec) -> Vec<f32> {
        let n = numel(&t.shape);
        let seed = self.spec.seed;
        let dist = self.spec.distribution;
        let stream = tensor_stream(&t.name);
        let mut out: Vec<f32> = (0..n)
            .into_par_iter()
            .map(|i| raw_value(dist, seed, stream, i))
            .collect();
        if let Some((inj, cursor)) = &mut self.flip {
            let mut flipped = vec![false; n];
            cursor.apply(n, |i| Some(flip_key(seed, stream, i)), &mut flipped);
            out.par_iter_mut()
                .zip(flipped.par_iter())
                .enumerate()
                .for_each(|(i, (v, &flip))| {
                    let reference = raw_value(dist, inj.reference_seed, stream, i);
                    let aligned = v.abs().copysign(reference);
                    *v = if flip { -aligned } else { aligned };
                });
        }
        out
    }
}

/// Generates the checkpoint described by `spec`.
pub fn generate_checkpoint(spec: &SynthSpec) -> Result<Checkpoint> {
    let mut gen = Generator::new(spec)?;
    let mut ckpt = Checkpoint::new();
    for t in spec.sorted_tensors() {
        let values = gen.values(t);
        ckpt.insert(t.name.clone(), Tensor::from_f32(t.dtype, t.shape.clone(), &values)?)?;
    }
    Ok(ckpt)
}

/// Streams the checkpoint described by `spec` to `path`, one tensor at a time.
pub fn write_synth_checkpoint(spec: &SynthSpec, path: impl AsRef<Path>) -> Result<Fingerprint> {
    let mut gen = Generator::new(spec)?;
    let mut writer = CheckpointWriter::create(
        path,
        spec.tensors
            .iter()
            .map(|t| (t.name.clone(), t.dtype, t.shape.clone())),
        None,
    )?;
    for t in spec.sorted_tensors() {
        let values = gen.values(t);
        writer.write_tensor(&t.name, &tensorio::from_f32(&values, t.dtype))?;
    }
    writer.finish()
}

/// The fixed synthetic task-vector direction used by [`generate_ct_series`].
pub fn ct_direction(spec: &SynthSpec, name: &str, len: usize) -> Vec<f32> {
    let stream = tensor_stream(name) ^ DIRECTION_STREAM;
    (0..len)
        .into_par_iter()
        .map(|i| symmetric_f32(keyed_u64(spec.seed, stream, i as u64)))
        .collect()
}

/// A synthetic continual-training trajectory: checkpoint `i` (1-based) is
/// `base + (g·i)·τ` for the generated base and a fixed direction `τ`, so the task
/// vector's magnitude grows linearly with the step.
pub fn generate_ct_series(spec: &SynthSpec, steps: usize, growth: f64) -> Result<Vec<Checkpoint>> {
    if steps == 0 {
        return Err(Error::invalid("series needs at least one step"));
    }
    if !growth.is_finite() || growth < 0.0 {
        return Err(Error::invalid(format!("growth {growth} must be finite and >= 0")));
    }
    let base = generate_checkpoint(spec)?;
    let mut directions = Vec::new();
    for (name, t) in base.iter() {
        directions.push((name.to_string(), t.to_f32(), ct_direction(spec, name, t.numel())));
    }
    (1..=steps)
        .map(|step| {
            let coeff = (growth * step as f64) as f32;
            let mut ckpt = Checkpoint::new();
            for (name, base_values, tau) in &directions {
                let t = base.get(name).unwrap();
                let values: Vec<f32> = base_values
                    .par_iter()
                    .zip(tau.par_iter())
                    .map(|(&b, &d)| b + coeff * d)
                    .collect();
                ckpt.insert(name.clone(), Tensor::from_f32(t.dtype(), t.shape().to_vec(), &values)?)?;
            }
            Ok(ckpt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec::uniform(
            seed,
            vec![
                TensorSpec {
                    name: "w".into(),
                    shape: vec![4],
                    dtype: Dtype::F32,
                },
                TensorSpec {
                    name: "b".into(),
                    shape: vec![3, 5],
                    dtype: Dtype::F16,
                },
            ],
        )
    }

    #[test]
    fn splitmix_reference_vector() {
        // Published first output for seed 0.
        assert_eq!(SplitMix64::new(0).next_u64(), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn keyed_access_matches_sequential_stream() {
        let mut rng = SplitMix64::new(42 ^ 7);
        for i in 0..100 {
            assert_eq!(keyed_u64(42, 7, i), rng.next_u64());
        }
    }

    #[test]
    fn symmetric_mapping_is_nonzero_and_bounded() {
        assert_eq!(symmetric_f32(0), 2f32.powi(-23) - 1.0);
        assert_eq!(symmetric_f32(u64::MAX), 1.0 - 2f32.powi(-23));
        assert_eq!(symmetric_f32(1u64 << 63), 2f32.powi(-23));
        let mut rng = SplitMix64::new(9);
        for _ in 0..10_000 {
            let v = symmetric_f32(rng.next_u64());
            assert!(v != 0.0 && v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_checkpoint(&spec(1)).unwrap();
        assert_eq!(a.to_bytes(), generate_checkpoint(&spec(1)).unwrap().to_bytes());
        let b = generate_checkpoint(&spec(2)).unwrap();
        assert_ne!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
    }

    #[test]
    fn streaming_writer_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(5);
        s.conflict = Some(ConflictInjection {
            reference_seed: 6,
            fraction: 0.3,
        });
        let path = dir.path().join("s.safetensors");
        let fp = write_synth_checkpoint(&s, &path).unwrap();
        let mem = generate_checkpoint(&s).unwrap();
        assert_eq!(fp, mem.fingerprint());
        assert_eq!(std::fs::read(&path).unwrap(), mem.to_bytes());
    }

    #[test]
    fn injected_flips_are_exact() {
        let mut s = spec(11);
        s.tensors[1].dtype = Dtype::F32;
        let reference = generate_checkpoint(&SynthSpec { seed: 12, ..s.clone() }).unwrap();
        for f in [0.0, 0.1, 0.5, 0.9, 1.0] {
            s.conflict = Some(ConflictInjection {
                reference_seed: 12,
                fraction: f,
            });
            let c = generate_checkpoint(&s).unwrap();
            let mut flips = 0;
            for (name, t) in c.iter() {
                for (x, r) in t.to_f32().iter().zip(reference.get(name).unwrap().to_f32()) {
                    if x.signum() != r.signum() {
                        flips += 1;
                    }
                }
            }
            assert_eq!(flips, (f * 19.0f64).round() as usize, "fraction {f}");
        }
    }

    #[test]
    fn validation_errors() {
        let mut s = spec(1);
        s.tensors[1].name = "w".into();
        assert!(generate_checkpoint(&s).is_err());
        let mut s = spec(1);
        s.conflict = Some(ConflictInjection {
            reference_seed: 0,
            fraction: 1.5,
        });
        assert!(s.validate().is_err());
        let mut s = spec(1);
        s.distribution = Distribution::Constant { value: f32::NAN };
        assert!(s.validate().is_err());
    }

    #[test]
    fn ct_series_shapes() {
        let s = spec(3);
        let base = generate_checkpoint(&s).unwrap();
        let one = generate_ct_series(&s, 1, 0.5).unwrap();
        assert_eq!(one.len(), 1);
        let tau = ct_direction(&s, "w", 4);
        let expect: Vec<f32> = base
            .get("w")
            .unwrap()
            .to_f32()
            .iter()
            .zip(&tau)
            .map(|(b, d)| b + 0.5 * d)
            .collect();
        assert_eq!(one[0].get("w").unwrap().to_f32(), expect);

        let flat = generate_ct_series(&s, 4, 0.0).unwrap();
        assert!(flat.iter().all(|c| c == &base));
        assert!(generate_ct_series(&s, 0, 1.0).is_err());
        assert!(generate_ct_series(&s, 2, -1.0).is_err());
    }
}
