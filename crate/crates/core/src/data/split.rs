use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    /// Patch indices in split order.
    pub indices: Vec<usize>,
}

/// Shuffles `0..patch_count` with `seed` and cuts it into train/val/test
/// splits of the requested sizes.
pub fn split_random(patch_count: usize, counts: [usize; 3], seed: u64) -> Result<[DatasetSplit; 3]> {
    let requested: usize = counts.iter().sum();
    if requested > patch_count {
        return Err(Error::invalid("split_random", format!("requested {requested} samples but only {patch_count} patches exist")));
    }
    let order = rng::permutation(&mut rng::rng_for(seed, &[0x5417]), patch_count);
    let mut start = 0;
    let splits = SplitName::ALL.map(|name| {
        let n = counts[name as usize];
        let indices = order[start..start + n].to_vec();
        start += n;
        DatasetSplit { name, indices }
    });
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_disjointness_and_coverage() {
        let [train, val, test] = split_random(10, [7, 1, 2], 0).unwrap();
        assert_eq!((train.indices.len(), val.indices.len(), test.indices.len()), (7, 1, 2));
        let mut all: Vec<usize> = [&train, &val, &test].iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(val.name, SplitName::Val);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(split_random(50, [30, 10, 10], 4).unwrap(), split_random(50, [30, 10, 10], 4).unwrap());
        assert_ne!(split_random(50, [30, 10, 10], 4).unwrap(), split_random(50, [30, 10, 10], 5).unwrap());
    }

    #[test]
    fn oversubscription_is_an_error() {
        assert!(split_random(10, [8, 2, 1], 0).is_err());
    }

    #[test]
    fn names_round_trip() {
        for n in SplitName::ALL {
            assert_eq!(SplitName::parse(n.as_str()), Some(n));
        }
        assert_eq!(SplitName::parse("dev"), None);
    }
}
