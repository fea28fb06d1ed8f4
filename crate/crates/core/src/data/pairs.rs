use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, ImageSample, PairExample};
use crate::error::{Error, Result};

#[derive(Default)]
struct SubjectIndex<'a> {
    profiles: BTreeMap<u32, Vec<&'a ImageSample>>,
    frontals: BTreeMap<u32, Vec<&'a ImageSample>>,
}

impl<'a> SubjectIndex<'a> {
    fn new(samples: &'a [ImageSample]) -> Self {
        let mut idx = SubjectIndex::default();
        let mut sorted: Vec<&ImageSample> = samples.iter().collect();
        sorted.sort_by_key(|s| s.sample_id);
        for s in sorted {
            let map = match s.domain {
                Domain::Profile => &mut idx.profiles,
                Domain::Frontal => &mut idx.frontals,
            };
            map.entry(s.subject_id).or_default().push(s);
        }
        idx
    }
}

/// Draws `batch_size` pairs, exactly half genuine (`label_y == 0`) followed by
/// half impostor. Genuine pairs pick a subject uniformly among those with both
/// views; impostor pairs pick an ordered pair of distinct subjects uniformly.
pub fn sample_pair_batch<'a, R: Rng + ?Sized>(
    samples: &'a [ImageSample],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<PairExample<'a>>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch_size must be even and positive, got {batch_size}"
        )));
    }
    let idx = SubjectIndex::new(samples);
    let genuine_subjects: Vec<u32> = idx
        .profiles
        .keys()
        .copied()
        .filter(|s| idx.frontals.contains_key(s))
        .collect();
    if genuine_subjects.is_empty() {
        return Err(Error::Data(
            "no subject has both a profile and a frontal sample".into(),
        ));
    }
    let profile_subjects: Vec<u32> = idx.profiles.keys().copied().collect();
    let frontal_subjects: Vec<u32> = idx.frontals.keys().copied().collect();
    let impostor_possible = profile_subjects
        .iter()
        .any(|p| frontal_subjects.iter().any(|f| f != p));
    if !impostor_possible {
        return Err(Error::Data(
            "impostor pairs need at least two distinct subjects".into(),
        ));
    }

    let half = batch_size / 2;
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..half {
        let s = genuine_subjects[rng.random_range(0..genuine_subjects.len())];
        let p = &idx.profiles[&s];
        let f = &idx.frontals[&s];
        out.push(PairExample {
            profile: p[rng.random_range(0..p.len())],
            frontal: f[rng.random_range(0..f.len())],
            label_y: 0,
        });
    }
    let mut drawn = 0;
    while drawn < half {
        let s = profile_subjects[rng.random_range(0..profile_subjects.len())];
        let others = frontal_subjects.len() - usize::from(idx.frontals.contains_key(&s));
        if others == 0 {
            continue;
        }
        let mut k = rng.random_range(0..others);
        let t = *frontal_subjects
            .iter()
            .find(|&&t| {
                if t == s {
                    return false;
                }
                if k == 0 {
                    return true;
                }
                k -= 1;
                false
            })
            .expect("k < others");
        let p = &idx.profiles[&s];
        let f = &idx.frontals[&t];
        out.push(PairExample {
            profile: p[rng.random_range(0..p.len())],
            frontal: f[rng.random_range(0..f.len())],
            label_y: 1,
        });
        drawn += 1;
    }
    Ok(out)
}

/// Cross-validation protocol: disjoint subject folds with a fixed number of
/// genuine and impostor test pairs per subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldProtocol {
    pub n_folds: usize,
    pub same_pairs_per_subject: usize,
    pub diff_pairs_per_subject: usize,
    /// Pre-set subject -> fold map; drawn at random when empty.
    #[serde(skip)]
    pub subject_assignment: BTreeMap<u32, usize>,
}

impl Default for FoldProtocol {
    fn default() -> Self {
        FoldProtocol {
            n_folds: 10,
            same_pairs_per_subject: 7,
            diff_pairs_per_subject: 7,
            subject_assignment: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fold<'a> {
    pub index: usize,
    pub train_subjects: BTreeSet<u32>,
    pub test_subjects: BTreeSet<u32>,
    pub test_pairs: Vec<PairExample<'a>>,
}

impl Fold<'_> {
    pub fn n_genuine(&self) -> usize {
        self.test_pairs.iter().filter(|p| p.is_genuine()).count()
    }

    pub fn n_impostor(&self) -> usize {
        self.test_pairs.len() - self.n_genuine()
    }

    /// Samples belonging to this fold's training subjects.
    pub fn train_samples(&self, samples: &[ImageSample]) -> Vec<ImageSample> {
        samples
            .iter()
            .filter(|s| self.train_subjects.contains(&s.subject_id))
            .cloned()
            .collect()
    }
}

fn draw_distinct<R: Rng + ?Sized>(len: usize, amount: usize, rng: &mut R) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if amount <= len {
        return index::sample(rng, len, amount).into_vec();
    }
    // More pairs requested than distinct combinations exist: cycle through
    // reshuffled permutations.
    let mut out = Vec::with_capacity(amount);
    while out.len() < amount {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(rng);
        out.extend(perm.into_iter().take(amount - out.len()));
    }
    out
}

/// [`build_folds`] with the fold RNG seeded from `seed`; every command that
/// splits subjects goes through here so their splits agree.
pub fn seeded_folds<'a>(
    samples: &'a [ImageSample],
    protocol: &FoldProtocol,
    seed: u64,
) -> Result<Vec<Fold<'a>>> {
    build_folds(samples, protocol, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Partitions subjects into `protocol.n_folds` groups (sizes differ by at
/// most one) and builds each fold's test pairs from its own subjects only.
///
/// A fold holding a single subject has no impostor candidates; its impostor
/// list is left empty and evaluating it is a protocol error.
pub fn build_folds<'a, R: Rng + ?Sized>(
    samples: &'a [ImageSample],
    protocol: &FoldProtocol,
    rng: &mut R,
) -> Result<Vec<Fold<'a>>> {
    let subjects = super::subject_ids(samples);
    if protocol.n_folds == 0 || subjects.len() < protocol.n_folds {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {} folds",
            subjects.len(),
            protocol.n_folds
        )));
    }
    let assignment = if protocol.subject_assignment.is_empty() {
        let mut shuffled = subjects.clone();
        shuffled.shuffle(rng);
        let n = shuffled.len();
        shuffled
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i * protocol.n_folds / n))
            .collect::<BTreeMap<u32, usize>>()
    } else {
        let a = protocol.subject_assignment.clone();
        if subjects.iter().any(|s| !a.contains_key(s))
            || a.values().any(|&f| f >= protocol.n_folds)
        {
            return Err(Error::Config(
                "subject_assignment must map every subject to a valid fold".into(),
            ));
        }
        a
    };

    let idx = SubjectIndex::new(samples);
    let empty = Vec::new();
    let mut folds = Vec::with_capacity(protocol.n_folds);
    for k in 0..protocol.n_folds {
        let test_subjects: BTreeSet<u32> = assignment
            .iter()
            .filter(|(_, &f)| f == k)
            .map(|(&s, _)| s)
            .collect();
        let train_subjects: BTreeSet<u32> = subjects
            .iter()
            .copied()
            .filter(|s| !test_subjects.contains(s))
            .collect();
        let mut test_pairs = Vec::new();
        for &s in &test_subjects {
            let profiles = idx.profiles.get(&s).unwrap_or(&empty);
            let frontals = idx.frontals.get(&s).unwrap_or(&empty);
            let combos = profiles.len() * frontals.len();
            for c in draw_distinct(combos, protocol.same_pairs_per_subject, rng) {
                test_pairs.push(PairExample {
                    profile: profiles[c / frontals.len()],
                    frontal: frontals[c % frontals.len()],
                    label_y: 0,
                });
            }
            let others: Vec<&ImageSample> = test_subjects
                .iter()
                .filter(|&&t| t != s)
                .flat_map(|t| idx.frontals.get(t).unwrap_or(&empty).iter().copied())
                .collect();
            let combos = profiles.len() * others.len();
            for c in draw_distinct(combos, protocol.diff_pairs_per_subject, rng) {
                test_pairs.push(PairExample {
                    profile: profiles[c / others.len()],
                    frontal: others[c % others.len()],
                    label_y: 1,
                });
            }
        }
        folds.push(Fold {
            index: k,
            train_subjects,
            test_subjects,
            test_pairs,
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fake(n_subjects: u32, frontal: usize, profile: usize) -> Vec<ImageSample> {
        let mut out = Vec::new();
        let mut id = 0;
        for s in 0..n_subjects {
            for (domain, count) in [(Domain::Frontal, frontal), (Domain::Profile, profile)] {
                for _ in 0..count {
                    out.push(ImageSample {
                        pixels: vec![0.0; 1],
                        shape: ImageShape::new(1, 1, 1),
                        subject_id: s,
                        domain,
                        yaw_deg: if domain == Domain::Profile { 45.0 } else { 0.0 },
                        sample_id: id,
                    });
                    id += 1;
                }
            }
        }
        out
    }

    #[test]
    fn batch_of_128_is_balanced() {
        let data = fake(5, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_pair_batch(&data, 128, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        assert_eq!(batch.iter().filter(|p| p.label_y == 0).count(), 64);
        for p in &batch {
            assert_eq!(p.profile.domain, Domain::Profile);
            assert_eq!(p.frontal.domain, Domain::Frontal);
            assert_eq!(
                p.label_y == 0,
                p.profile.subject_id == p.frontal.subject_id
            );
        }
    }

    #[test]
    fn two_subjects_batch_of_two() {
        let data = fake(2, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_pair_batch(&data, 2, &mut rng).unwrap();
        assert_eq!(batch[0].label_y, 0);
        assert_eq!(batch[1].label_y, 1);
    }

    #[test]
    fn errors_on_odd_or_degenerate_input() {
        let data = fake(3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            sample_pair_batch(&data, 3, &mut rng),
            Err(Error::Config(_))
        ));
        let single = fake(1, 2, 2);
        assert!(matches!(
            sample_pair_batch(&single, 2, &mut rng),
            Err(Error::Data(_))
        ));
        let frontal_only = fake(3, 2, 0);
        assert!(matches!(
            sample_pair_batch(&frontal_only, 2, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn genuine_subject_choice_is_uniform() {
        let data = fake(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let b = sample_pair_batch(&data, 2, &mut rng).unwrap();
            counts[b[0].profile.subject_id as usize] += 1;
        }
        for c in counts {
            assert!((3133..=3533).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn same_rng_state_same_batch() {
        let data = fake(4, 2, 2);
        let a = sample_pair_batch(&data, 16, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_pair_batch(&data, 16, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let ids = |v: &[PairExample]| {
            v.iter()
                .map(|p| (p.profile.sample_id, p.frontal.sample_id))
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn default_protocol_folds_have_350_plus_350() {
        let data = fake(500, 10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let folds = build_folds(&data, &FoldProtocol::default(), &mut rng).unwrap();
        assert_eq!(folds.len(), 10);
        let mut all = BTreeSet::new();
        for f in &folds {
            assert_eq!(f.test_subjects.len(), 50);
            assert_eq!(f.n_genuine(), 350);
            assert_eq!(f.n_impostor(), 350);
            assert!(f.train_subjects.is_disjoint(&f.test_subjects));
            assert_eq!(f.train_subjects.len() + f.test_subjects.len(), 500);
            for p in &f.test_pairs {
                assert!(f.test_subjects.contains(&p.profile.subject_id));
                assert!(f.test_subjects.contains(&p.frontal.subject_id));
                assert_eq!(p.label_y == 0, p.profile.subject_id == p.frontal.subject_id);
            }
            for s in &f.test_subjects {
                assert!(all.insert(*s), "subject {s} in two folds");
            }
        }
        assert_eq!(all.len(), 500);
    }

    #[test]
    fn one_subject_per_fold() {
        let data = fake(10, 2, 2);
        let folds =
            build_folds(&data, &FoldProtocol::default(), &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert!(folds.iter().all(|f| f.test_subjects.len() == 1));
        assert!(folds.iter().all(|f| f.n_impostor() == 0));
    }

    #[test]
    fn too_few_subjects_for_folds() {
        let data = fake(4, 2, 2);
        assert!(matches!(
            build_folds(&data, &FoldProtocol::default(), &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }
}
