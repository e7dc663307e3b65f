//! Exact selection of the `n` smallest `u32` keys with two 16-bit histogram passes.
//!
//! The data is never sorted or buffered: each pass only needs a histogram, so the
//! keys can be streamed from disk and histograms from parallel workers can be summed
//! in any order. Ties at the threshold key are resolved by the caller's canonical
//! element order (tensor name, then flat index) through [`CutCursor`].
//!
//! Floating-point magnitudes are selected through their bit patterns: for
//! non-negative IEEE floats the numeric order equals the unsigned order of the bits.

use rayon::prelude::*;

pub(crate) const BUCKETS: usize = 1 << 16;

/// Elements per parallel work unit.
pub(crate) const CHUNK: usize = 1 << 16;

/// Key for "largest magnitude first": smaller key means larger `|x|`.
#[inline]
pub(crate) fn magnitude_key(x: f32) -> u32 {
    0x7FFF_FFFF - (x.to_bits() & 0x7FFF_FFFF)
}

/// Key for "smallest non-negative value first".
#[inline]
pub(crate) fn ascending_key(x: f32) -> u32 {
    debug_assert!(x >= 0.0);
    x.to_bits()
}

/// Which keys a histogram pass counts, and into which bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pass {
    High,
    Low { high: u32 },
}

impl Pass {
    #[inline]
    pub(crate) fn bucket(self, key: u32) -> Option<usize> {
        match self {
            Pass::High => Some((key >> 16) as usize),
            Pass::Low { high } if key >> 16 == high => Some((key & 0xFFFF) as usize),
            Pass::Low { .. } => None,
        }
    }
}

/// The kept set: all keys below `key`, plus the first `take_equal` keys equal to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Cut {
    Nothing,
    Everything,
    Threshold { key: u32, below: u64, take_equal: u64 },
}

/// State machine driving the passes for one selection.
#[derive(Debug, Clone)]
pub(crate) struct RadixSelect {
    target: u64,
    count: u64,
    state: State,
}

#[derive(Debug, Clone)]
enum State {
    High,
    Low { high: u32, below: u64 },
    Done(Cut),
}

impl RadixSelect {
    /// Selects `min(target, number of keys seen)` smallest keys.
    pub(crate) fn new(target: u64) -> Self {
        let state = if target == 0 {
            State::Done(Cut::Nothing)
        } else {
            State::High
        };
        RadixSelect {
            target,
            count: target,
            state,
        }
    }

    /// A selection already known to take every one of `total` candidates.
    pub(crate) fn everything(total: u64) -> Self {
        RadixSelect {
            target: total,
            count: total,
            state: if total == 0 {
                State::Done(Cut::Nothing)
            } else {
                State::Done(Cut::Everything)
            },
        }
    }

    /// The pass still needed, if any.
    pub(crate) fn pass(&self) -> Option<Pass> {
        match self.state {
            State::High => Some(Pass::High),
            State::Low { high, .. } => Some(Pass::Low { high }),
            State::Done(_) => None,
        }
    }

    pub(crate) fn cut(&self) -> Option<Cut> {
        match self.state {
            State::Done(c) => Some(c),
            _ => None,
        }
    }

    /// Number of keys that will be selected; known after the first pass.
    #[cfg(test)]
    pub(crate) fn selected(&self) -> u64 {
        match self.state {
            State::Done(Cut::Nothing) => 0,
            _ => self.count,
        }
    }

    /// Consumes the histogram for the current pass.
    pub(crate) fn feed(&mut self, hist: &[u64]) {
        debug_assert_eq!(hist.len(), BUCKETS);
        match self.state {
            State::High => {
                let total: u64 = hist.iter().sum();
                self.count = self.target.min(total);
                if self.count == 0 {
                    self.state = State::Done(Cut::Nothing);
                } else if self.count == total {
                    self.state = State::Done(Cut::Everything);
                } else {
                    let (bucket, below) = locate(hist, 0, self.count - 1);
                    self.state = State::Low {
                        high: bucket as u32,
                        below,
                    };
                }
            }
            State::Low { high, below } => {
                let (bucket, below) = locate(hist, below, self.count - 1);
                self.state = State::Done(Cut::Threshold {
                    key: (high << 16) | bucket as u32,
                    below,
                    take_equal: self.count - below,
                });
            }
            State::Done(_) => panic!("radix selection already finished"),
        }
    }
}

/// Finds the bucket holding the element of 0-based `rank`, given `offset` elements
/// known to lie below every bucket. Returns the bucket and the count below it.
fn locate(hist: &[u64], offset: u64, rank: u64) -> (usize, u64) {
    let mut acc = offset;
    for (bucket, &freq) in hist.iter().enumerate() {
        if acc + freq > rank {
            return (bucket, acc);
        }
        acc += freq;
    }
    unreachable!("rank {rank} beyond histogram total {acc}")
}

pub(crate) fn empty_histogram() -> Vec<u64> {
    vec![0; BUCKETS]
}

pub(crate) fn add_histogram(into: &mut [u64], from: &[u64]) {
    for (a, b) in into.iter_mut().zip(from) {
        *a += b;
    }
}

/// Histogram of `key(i, x)` over `values`, skipping elements whose key is `None`.
/// Exact integer counts, so the result does not depend on scheduling.
pub(crate) fn histogram<F>(values: &[f32], pass: Pass, key: F) -> Vec<u64>
where
    F: Fn(usize, f32) -> Option<u32> + Sync,
{
    if values.len() <= CHUNK {
        let mut hist = empty_histogram();
        for (i, &x) in values.iter().enumerate() {
            if let Some(b) = key(i, x).and_then(|k| pass.bucket(k)) {
                hist[b] += 1;
            }
        }
        return hist;
    }
    values
        .par_chunks(CHUNK)
        .enumerate()
        .fold(empty_histogram, |mut hist, (c, chunk)| {
            let base = c * CHUNK;
            for (i, &x) in chunk.iter().enumerate() {
                if let Some(b) = key(base + i, x).and_then(|k| pass.bucket(k)) {
                    hist[b] += 1;
                }
            }
            hist
        })
        .reduce(empty_histogram, |mut a, b| {
            add_histogram(&mut a, &b);
            a
        })
}

/// Applies a [`Cut`] across a sequence of tensors visited in canonical order,
/// tracking how many threshold-equal keys are still to be taken.
#[derive(Debug, Clone)]
pub(crate) struct CutCursor {
    cut: Cut,
    equal_left: u64,
}

impl CutCursor {
    pub(crate) fn new(cut: Cut) -> Self {
        let equal_left = match cut {
            Cut::Threshold { take_equal, .. } => take_equal,
            _ => 0,
        };
        CutCursor { cut, equal_left }
    }

    /// Writes into `keep[i]` whether element `i` is selected; `key` returns `None`
    /// for elements that are not candidates. Returns the number selected.
    pub(crate) fn apply<F>(&mut self, len: usize, key: F, keep: &mut [bool]) -> u64
    where
        F: Fn(usize) -> Option<u32> + Sync,
    {
        debug_assert_eq!(keep.len(), len);
        match self.cut {
            Cut::Nothing => {
                keep.iter_mut().for_each(|k| *k = false);
                0
            }
            Cut::Everything => keep
                .par_iter_mut()
                .enumerate()
                .map(|(i, k)| {
                    *k = key(i).is_some();
                    *k as u64
                })
                .sum(),
            Cut::Threshold { key: t, .. } => {
                // Equal-key quota per chunk comes from a prefix sum over chunk counts,
                // so the chosen positions match a sequential scan exactly.
                let equal_counts: Vec<u64> = (0..len.div_ceil(CHUNK))
                    .into_par_iter()
                    .map(|c| {
                        (c * CHUNK..((c + 1) * CHUNK).min(len))
                            .filter(|&i| key(i) == Some(t))
                            .count() as u64
                    })
                    .collect();
                let mut quotas = Vec::with_capacity(equal_counts.len());
                let mut left = self.equal_left;
                for &n in &equal_counts {
                    let q = n.min(left);
                    quotas.push(q);
                    left -= q;
                }
                self.equal_left = left;
                keep.par_chunks_mut(CHUNK)
                    .zip(quotas.par_iter())
                    .enumerate()
                    .map(|(c, (chunk, &quota))| {
                        let mut taken = 0u64;
                        let mut kept = 0u64;
                        for (j, k) in chunk.iter_mut().enumerate() {
                            *k = match key(c * CHUNK + j) {
                                Some(x) if x < t => true,
                                Some(x) if x == t && taken < quota => {
                                    taken += 1;
                                    true
                                }
                                _ => false,
                            };
                            kept += *k as u64;
                        }
                        kept
                    })
                    .sum()
            }
        }
    }
}

/// Selects the `n` smallest keys of a single slice, ties by index. Returns the mask.
pub(crate) fn select_in_slice<F>(values: &[f32], n: u64, key: F) -> Vec<bool>
where
    F: Fn(usize, f32) -> Option<u32> + Sync,
{
    let mut sel = RadixSelect::new(n);
    while let Some(pass) = sel.pass() {
        let hist = histogram(values, pass, &key);
        sel.feed(&hist);
    }
    let mut keep = vec![false; values.len()];
    CutCursor::new(sel.cut().unwrap()).apply(values.len(), |i| key(i, values[i]), &mut keep);
    keep
}

/// Selects the `n` smallest keys across `slices` visited in order, ties by (slice,
/// index). `key` receives the slice number, the index and the value. Returns one
/// mask per slice.
pub(crate) fn select_across<F>(slices: &[&[f32]], n: u64, key: F) -> Vec<Vec<bool>>
where
    F: Fn(usize, usize, f32) -> Option<u32> + Sync,
{
    let mut sel = RadixSelect::new(n);
    while let Some(pass) = sel.pass() {
        let mut hist = empty_histogram();
        for (s, values) in slices.iter().enumerate() {
            add_histogram(&mut hist, &histogram(values, pass, |i, x| key(s, i, x)));
        }
        sel.feed(&hist);
    }
    let mut cursor = CutCursor::new(sel.cut().unwrap());
    slices
        .iter()
        .enumerate()
        .map(|(s, values)| {
            let mut keep = vec![false; values.len()];
            cursor.apply(values.len(), |i| key(s, i, values[i]), &mut keep);
            keep
        })
        .collect()
}
