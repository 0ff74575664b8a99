use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Flavor, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    /// Train : test ratio, e.g. `Ratio(8, 2)`.
    Ratio(u32, u32),
    /// Exact identity counts for train and test.
    Counts(usize, usize),
}

/// Identity-level train/test partition after a seeded shuffle.
/// Both sides keep the input order of their members.
pub fn make_split(identities: &[String], spec: SplitSpec, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n = identities.len();
    let (train_n, test_n) = match spec {
        SplitSpec::Ratio(a, b) => {
            if a + b == 0 {
                return Err(Error::Config("split ratio 0:0".into()));
            }
            let t = ((n as f64) * a as f64 / (a + b) as f64).round() as usize;
            (t, n - t)
        }
        SplitSpec::Counts(a, b) => {
            if a + b > n {
                return Err(Error::Config(format!("split of {a}+{b} identities from {n}")));
            }
            (a, b)
        }
    };
    if train_n == 0 || test_n == 0 {
        return Err(Error::Config(format!(
            "split leaves an empty side ({train_n} train, {test_n} test)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train: Vec<usize> = order[..train_n].to_vec();
    let mut test: Vec<usize> = order[train_n..train_n + test_n].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| identities[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

/// Gallery/probe roles for the images of one test identity. Face-style data
/// sends half of the images (rounded down) to the probe set, reid-style data one.
pub fn gallery_probe(count: usize, flavor: Flavor, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let probes = match flavor {
        _ if count < 2 => 0,
        Flavor::FaceStyle => count / 2,
        Flavor::ReidStyle => 1,
    };
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut roles = vec![Split::TestGallery; count];
    for &i in &order[..probes] {
        roles[i] = Split::TestProbe;
    }
    roles
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn eight_two_ratio() {
        let (train, test) = make_split(&ids(10), SplitSpec::Ratio(8, 2), 7).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
    }

    #[test]
    fn same_seed_same_split() {
        let a = make_split(&ids(30), SplitSpec::Ratio(8, 2), 3).unwrap();
        let b = make_split(&ids(30), SplitSpec::Ratio(8, 2), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_for_many_seeds() {
        let all = ids(25);
        for seed in 0..100 {
            let (train, test) = make_split(&all, SplitSpec::Ratio(8, 2), seed).unwrap();
            assert!(train.iter().all(|t| !test.contains(t)));
            assert_eq!(train.len() + test.len(), all.len());
        }
    }

    #[test]
    fn empty_side_is_rejected() {
        assert!(make_split(&ids(2), SplitSpec::Ratio(1, 0), 0).is_err());
        assert!(make_split(&ids(3), SplitSpec::Counts(3, 1), 0).is_err());
        assert!(make_split(&ids(3), SplitSpec::Counts(0, 3), 0).is_err());
    }

    #[test]
    fn probe_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let face = gallery_probe(6, Flavor::FaceStyle, &mut rng);
        assert_eq!(face.iter().filter(|&&s| s == Split::TestProbe).count(), 3);
        let reid = gallery_probe(6, Flavor::ReidStyle, &mut rng);
        assert_eq!(reid.iter().filter(|&&s| s == Split::TestProbe).count(), 1);
        assert_eq!(gallery_probe(1, Flavor::FaceStyle, &mut rng), vec![Split::TestGallery]);
    }
}
