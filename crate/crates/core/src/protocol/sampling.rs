//! Leakage filtering and episode sampling.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::downsample_mask;
use crate::error::{Error, Result};
use crate::network::{EpisodeInput, ShotInput};
use crate::par::Exec;
use crate::protocol::dataset::{DatasetIndex, ImageStore};
use crate::protocol::folds::FoldSpec;
use crate::tensor::Tensor;

pub const TRAIN_IMAGE_CAP: usize = 750;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// How an episode's class is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampling {
    /// Uniform over eligible classes, then images of that class.
    #[default]
    ClassFirst,
    /// Uniform over eligible images, then one of the image's eligible classes.
    ImageFirst,
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-first" => Ok(Sampling::ClassFirst),
            "image-first" => Ok(Sampling::ImageFirst),
            other => Err(Error::Config(format!(
                "unknown sampling `{}` (expected class-first or image-first)",
                other
            ))),
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampling::ClassFirst => "class-first",
            Sampling::ImageFirst => "image-first",
        })
    }
}

/// Drops images showing any test class, then keeps at most `cap` randomly
/// chosen images per train class. Kept images stay available to all of
/// their train classes.
pub fn filter_train_images(index: &DatasetIndex, spec: &FoldSpec, cap: usize, seed: u64) -> Result<DatasetIndex> {
    if cap == 0 {
        return Err(Error::Usage("image cap must be >= 1".into()));
    }
    let clean: Vec<usize> = (0..index.images.len())
        .filter(|&i| index.images[i].classes.is_disjoint(&spec.test))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = BTreeSet::new();
    for &c in &spec.train {
        let with: Vec<usize> = clean
            .iter()
            .copied()
            .filter(|&i| index.images[i].classes.contains(&c))
            .collect();
        if with.is_empty() {
            return Err(Error::Data(format!("train class {} has no images after filtering", c)));
        }
        if with.len() <= cap {
            keep.extend(with);
        } else {
            keep.extend(sample(&mut rng, with.len(), cap).into_iter().map(|j| with[j]));
        }
    }
    let images = keep.into_iter().map(|i| index.images[i].clone()).collect();
    DatasetIndex::new(images, index.classes, index.root.clone())
}

/// One K-shot episode as image indices into its dataset index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class: usize,
    pub support: Vec<usize>,
    pub query: usize,
}

fn eligible(index: &DatasetIndex, classes: &BTreeSet<usize>, k: usize) -> Vec<(usize, Vec<usize>)> {
    classes
        .iter()
        .map(|&c| (c, index.images_with(c)))
        .filter(|(_, imgs)| imgs.len() > k)
        .collect()
}

pub fn sample_episode(
    index: &DatasetIndex,
    spec: &FoldSpec,
    split: Split,
    k: usize,
    sampling: Sampling,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Usage("K must be >= 1".into()));
    }
    let classes = match split {
        Split::Train => &spec.train,
        Split::Test => &spec.test,
    };
    let pool = eligible(index, classes, k);
    if pool.is_empty() {
        return Err(Error::Data(format!("no class has at least {} images", k + 1)));
    }
    let (class, images) = match sampling {
        Sampling::ClassFirst => pool.choose(rng).expect("non-empty").clone(),
        Sampling::ImageFirst => {
            let candidates: Vec<usize> = (0..index.images.len())
                .filter(|&i| pool.iter().any(|(c, _)| index.images[i].classes.contains(c)))
                .collect();
            let img = *candidates.choose(rng).expect("non-empty");
            let options: Vec<&(usize, Vec<usize>)> = pool
                .iter()
                .filter(|(c, _)| index.images[img].classes.contains(c))
                .collect();
            let (class, imgs) = *options.choose(rng).expect("image has an eligible class");
            let mut rest: Vec<usize> = imgs.iter().copied().filter(|&i| i != img).collect();
            rest.shuffle(rng);
            let support: Vec<usize> = rest.into_iter().take(k).collect();
            return Ok(Episode {
                class: *class,
                support,
                query: img,
            });
        }
    };
    let picks: Vec<usize> = sample(rng, images.len(), k + 1).into_iter().map(|j| images[j]).collect();
    Ok(Episode {
        class,
        support: picks[..k].to_vec(),
        query: picks[k],
    })
}

/// Features, resampled support masks, and the query target for one episode.
pub fn episode_input(store: &ImageStore, ep: &Episode, exec: Exec) -> Result<(EpisodeInput<f32>, Tensor<f32>)> {
    let query_img = store.image(ep.query)?;
    let query = (*store.pyramid(exec, ep.query)?).clone();
    let shots = ep
        .support
        .iter()
        .map(|&i| {
            let features = (*store.pyramid(exec, i)?).clone();
            let mask = store.image(i)?.mask(ep.class);
            let masks = downsample_mask(&mask, &features)?;
            Ok(ShotInput { features, masks })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        EpisodeInput {
            query,
            shots,
            out_size: query_img.size(),
        },
        query_img.mask(ep.class),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::dataset::{ImageEntry, ImageSource};
    use crate::protocol::folds::{build_folds, FoldScheme};

    fn index(tags: &[&[usize]], classes: usize) -> DatasetIndex {
        let images = tags
            .iter()
            .enumerate()
            .map(|(i, t)| ImageEntry {
                id: format!("i{}", i),
                source: ImageSource::Path(format!("i{}.msht", i).into()),
                classes: t.iter().copied().collect(),
            })
            .collect();
        DatasetIndex::new(images, classes, "").unwrap()
    }

    #[test]
    fn filter_drops_test_classes() {
        let idx = index(&[&[0], &[1, 4], &[1], &[2], &[3], &[5]], 8);
        let spec = build_folds(8, 0, FoldScheme::Contiguous).unwrap();
        let out = filter_train_images(&idx, &spec, 10, 0);
        assert!(matches!(out, Err(Error::Data(_))));
        let idx = index(&[&[0], &[1, 4], &[2], &[3], &[4], &[5], &[6], &[7]], 8);
        let out = filter_train_images(&idx, &spec, 10, 0).unwrap();
        let ids: Vec<_> = out.images.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["i2", "i3", "i4", "i5", "i6", "i7"]);
    }

    #[test]
    fn cap_is_exact_and_seeded() {
        let tags: Vec<&[usize]> = (0..1000).map(|_| &[1usize][..]).chain([&[0usize][..]]).collect();
        let idx = index(&tags, 4);
        let spec = FoldSpec::custom([1].into(), [0].into(), 4).unwrap();
        let a = filter_train_images(&idx, &spec, 750, 3).unwrap();
        assert_eq!(a.images.len(), 750);
        assert_eq!(a, filter_train_images(&idx, &spec, 750, 3).unwrap());
        assert_ne!(a, filter_train_images(&idx, &spec, 750, 4).unwrap());
    }

    #[test]
    fn episodes_are_distinct_and_on_class() {
        let tags: Vec<Vec<usize>> = (0..30).map(|i| vec![i % 3, (i + 1) % 4]).collect();
        let refs: Vec<&[usize]> = tags.iter().map(|v| v.as_slice()).collect();
        let idx = index(&refs, 4);
        let spec = FoldSpec::custom([0, 1, 2].into(), [3].into(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for sampling in [Sampling::ClassFirst, Sampling::ImageFirst] {
            for k in [1, 5] {
                for _ in 0..50 {
                    let ep = sample_episode(&idx, &spec, Split::Train, k, sampling, &mut rng).unwrap();
                    assert_eq!(ep.support.len(), k);
                    let all: BTreeSet<_> = ep.support.iter().chain([&ep.query]).collect();
                    assert_eq!(all.len(), k + 1);
                    assert!(spec.train.contains(&ep.class));
                    assert!(all.iter().all(|&&i| idx.images[i].classes.contains(&ep.class)));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let tags: Vec<Vec<usize>> = (0..20).map(|i| vec![i % 4]).collect();
        let refs: Vec<&[usize]> = tags.iter().map(|v| v.as_slice()).collect();
        let idx = index(&refs, 4);
        let spec = build_folds(4, 2, FoldScheme::Contiguous).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| sample_episode(&idx, &spec, Split::Test, 1, Sampling::ClassFirst, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert!(run(5).iter().all(|e| e.class == 2));
    }

    #[test]
    fn no_eligible_class() {
        let idx = index(&[&[0], &[1]], 4);
        let spec = FoldSpec::custom([0, 1].into(), [].into(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_episode(&idx, &spec, Split::Train, 1, Sampling::ClassFirst, &mut rng);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
