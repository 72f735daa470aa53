//! Cross-validation folds over class ids.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FOLDS: usize = 4;

pub const PASCAL_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldScheme {
    /// Fold `i` holds out classes `[i*n/4, (i+1)*n/4)`.
    Contiguous,
    /// Fold `i` holds out classes `{4x + i}`.
    Interleaved,
}

impl FromStr for FoldScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contiguous" => Ok(FoldScheme::Contiguous),
            "interleaved" => Ok(FoldScheme::Interleaved),
            other => Err(Error::Config(format!(
                "unknown fold scheme `{}` (expected contiguous or interleaved)",
                other
            ))),
        }
    }
}

impl fmt::Display for FoldScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FoldScheme::Contiguous => "contiguous",
            FoldScheme::Interleaved => "interleaved",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold: usize,
    pub scheme: Option<FoldScheme>,
    pub test: BTreeSet<usize>,
    pub train: BTreeSet<usize>,
}

impl FoldSpec {
    /// Explicit class split; the sets must be disjoint and inside `[0, classes)`.
    pub fn custom(train: BTreeSet<usize>, test: BTreeSet<usize>, classes: usize) -> Result<Self> {
        if let Some(c) = train.intersection(&test).next() {
            return Err(Error::Config(format!("class {} is both a train and a test class", c)));
        }
        if let Some(c) = train.iter().chain(&test).find(|&&c| c >= classes) {
            return Err(Error::Config(format!("class {} outside [0, {})", c, classes)));
        }
        Ok(Self {
            fold: 0,
            scheme: None,
            test,
            train,
        })
    }
}

pub fn build_folds(classes: usize, fold: usize, scheme: FoldScheme) -> Result<FoldSpec> {
    if fold >= FOLDS {
        return Err(Error::Usage(format!("fold {} outside 0..{}", fold, FOLDS)));
    }
    if classes == 0 || classes % FOLDS != 0 {
        return Err(Error::Usage(format!(
            "{} classes cannot be split into {} folds",
            classes, FOLDS
        )));
    }
    let per = classes / FOLDS;
    let test: BTreeSet<usize> = match scheme {
        FoldScheme::Contiguous => (fold * per..(fold + 1) * per).collect(),
        FoldScheme::Interleaved => (0..per).map(|x| FOLDS * x + fold).collect(),
    };
    let train = (0..classes).filter(|c| !test.contains(c)).collect();
    Ok(FoldSpec {
        fold,
        scheme: Some(scheme),
        test,
        train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pascal_contiguous_fold_zero() {
        let f = build_folds(20, 0, FoldScheme::Contiguous).unwrap();
        let names: Vec<_> = f.test.iter().map(|&c| PASCAL_CLASSES[c]).collect();
        assert_eq!(names, ["aeroplane", "bicycle", "bird", "boat", "bottle"]);
        assert_eq!(f.train.len(), 15);
    }

    #[test]
    fn coco_interleaved_fold_one() {
        let f = build_folds(80, 1, FoldScheme::Interleaved).unwrap();
        assert_eq!(f.test.len(), 20);
        assert_eq!(f.test.iter().next(), Some(&1));
        assert_eq!(f.test.iter().last(), Some(&77));
        assert!(f.test.iter().all(|c| c % 4 == 1));
    }

    #[test]
    fn partitions() {
        for classes in [20, 80] {
            for scheme in [FoldScheme::Contiguous, FoldScheme::Interleaved] {
                let mut all = BTreeSet::new();
                for i in 0..4 {
                    let f = build_folds(classes, i, scheme).unwrap();
                    assert!(f.test.is_disjoint(&f.train));
                    assert_eq!(f.test.len() + f.train.len(), classes);
                    for c in &f.test {
                        assert!(all.insert(*c));
                    }
                }
                assert_eq!(all, (0..classes).collect());
            }
        }
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(build_folds(20, 4, FoldScheme::Contiguous), Err(Error::Usage(_))));
        assert!(matches!(build_folds(10, 0, FoldScheme::Contiguous), Err(Error::Usage(_))));
        assert!(matches!("diagonal".parse::<FoldScheme>(), Err(Error::Config(_))));
        assert!(FoldSpec::custom([0, 1].into(), [1].into(), 4).is_err());
    }
}
