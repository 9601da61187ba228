use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, DatasetManifest, Split, SplitRatios};
use crate::seed::{mix_seed, stable_hash};

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Minimum records a populated class needs before it can be stratified.
pub const MIN_CLASS_SIZE: usize = 3;

/// Largest-remainder apportionment of `n` items over the three split ratios.
/// Leftover items go to the largest fractional parts; ties prefer train, then
/// val, then test.
pub fn largest_remainder(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = ratios.as_array().map(|r| r * n as f64);
    // Absorb representation error such as 0.6 * 5 = 2.9999999999999996.
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut leftover = n.saturating_sub(assigned);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Assigns every record to train/val/test, class by class.
///
/// Each class's records are sorted by path and shuffled with a generator seeded
/// from `(seed, class name)`, so the assignment depends only on the seed and
/// the set of paths, never on record order or on other classes.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    ratios.validate()?;
    manifest.validate()?;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let class = manifest
            .taxonomy
            .index_of(&r.label)
            .ok_or_else(|| DatasetError::UnknownClass(r.label.clone()))?;
        by_class.entry(class).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(DatasetError::TooFewClasses(by_class.len()));
    }

    let mut out = manifest.clone();
    for (class, mut members) in by_class {
        let name = manifest.taxonomy.classes()[class].as_str();
        if members.len() < MIN_CLASS_SIZE {
            return Err(DatasetError::ClassTooSmall {
                class: name.to_string(),
                count: members.len(),
            });
        }
        members.sort_by(|&a, &b| manifest.records[a].path.cmp(&manifest.records[b].path));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stable_hash(name.as_bytes())));
        members.shuffle(&mut rng);

        let counts = largest_remainder(members.len(), &ratios);
        let mut cursor = members.iter();
        for (split, count) in SPLITS.iter().zip(counts) {
            for &idx in cursor.by_ref().take(count) {
                out.records[idx].split = *split;
            }
        }
    }
    out.split_seed = Some(seed);
    out.split_ratios = ratios;
    Ok(out)
}
