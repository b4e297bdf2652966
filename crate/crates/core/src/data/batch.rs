use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::DialogDataset;

/// One training unit: round `round` of dialog `example`, predicted from
/// the caption plus all earlier rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Unit {
    pub example: usize,
    pub round: usize,
}

/// All units in file order.
pub fn units(ds: &DialogDataset) -> Vec<Unit> {
    ds.examples
        .iter()
        .enumerate()
        .flat_map(|(e, ex)| (0..ex.rounds.len()).map(move |r| Unit { example: e, round: r }))
        .collect()
}

/// Batches for one pass over `ds`. With `shuffle` the units are permuted
/// by a generator seeded from `seed`; the final partial batch is kept.
pub fn batch_iterator(
    ds: &DialogDataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> impl Iterator<Item = Vec<Unit>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut all = units(ds);
    if shuffle {
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let batches: Vec<Vec<Unit>> = all.chunks(batch_size).map(<[Unit]>::to_vec).collect();
    batches.into_iter()
}

/// Seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64 + 1)
}
