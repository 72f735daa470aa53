//! Pixel-count IoU accumulators, pooled per class across episodes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fneg: u64,
}

impl Counts {
    /// `TP / (TP + FP + FN)`, or `None` when the denominator is zero.
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fneg;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fneg += other.fneg;
    }

    /// Counts for the positive label `positive` of two binary masks.
    pub fn from_masks(pred: &[u8], truth: &[u8], positive: u8) -> Self {
        let mut c = Counts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == positive, t == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fneg += 1,
                (false, false) => {}
            }
        }
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalResult {
    pub per_class: BTreeMap<usize, Counts>,
    pub foreground: Counts,
    pub background: Counts,
    pub episodes: usize,
}

impl EvalResult {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one episode's binary prediction against its binary truth.
    pub fn add(&mut self, class: usize, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        if let Some(v) = pred.iter().chain(truth).find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {} outside {{0,1}}", v)));
        }
        let fg = Counts::from_masks(pred, truth, 1);
        self.per_class.entry(class).or_default().merge(&fg);
        self.foreground.merge(&fg);
        self.background.merge(&Counts::from_masks(pred, truth, 0));
        self.episodes += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalResult) {
        for (c, counts) in &other.per_class {
            self.per_class.entry(*c).or_default().merge(counts);
        }
        self.foreground.merge(&other.foreground);
        self.background.merge(&other.background);
        self.episodes += other.episodes;
    }

    /// Classes seen in some episode whose IoU denominator is zero.
    pub fn excluded_classes(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .filter(|(_, c)| c.iou().is_none())
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn class_ious(&self) -> BTreeMap<usize, f64> {
        self.per_class
            .iter()
            .filter_map(|(k, c)| c.iou().map(|v| (*k, v)))
            .collect()
    }

    /// Mean over classes of pooled per-class IoU.
    pub fn miou(&self) -> Result<f64> {
        let ious = self.class_ious();
        if ious.is_empty() {
            return Err(Error::Usage("no accumulated pixels to score".into()));
        }
        Ok(ious.values().sum::<f64>() / ious.len() as f64)
    }

    /// Mean of foreground and background IoU; a side with a zero
    /// denominator is left out.
    pub fn fb_iou(&self) -> Result<f64> {
        let parts: Vec<f64> = [self.foreground.iou(), self.background.iou()]
            .into_iter()
            .flatten()
            .collect();
        if parts.is_empty() {
            return Err(Error::Usage("no accumulated pixels to score".into()));
        }
        Ok(parts.iter().sum::<f64>() / parts.len() as f64)
    }
}

pub fn miou(results: &EvalResult) -> Result<f64> {
    results.miou()
}

pub fn fb_iou(results: &EvalResult) -> Result<f64> {
    results.fb_iou()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_of_four() {
        let mut r = EvalResult::new();
        r.add(0, &[1, 1, 1, 1, 0], &[1, 1, 1, 0, 0]).unwrap();
        assert_eq!(r.per_class[&0], Counts { tp: 3, fp: 1, fneg: 0 });
        assert_eq!(r.miou().unwrap(), 0.75);
    }

    #[test]
    fn perfect_and_disjoint() {
        let mut r = EvalResult::new();
        r.add(2, &[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!(r.miou().unwrap(), 1.0);
        assert_eq!(r.fb_iou().unwrap(), 1.0);
        let mut r = EvalResult::new();
        r.add(2, &[1, 0], &[0, 1]).unwrap();
        assert_eq!(r.miou().unwrap(), 0.0);
    }

    #[test]
    fn all_foreground_on_half_foreground() {
        let mut r = EvalResult::new();
        r.add(0, &[1, 1], &[1, 0]).unwrap();
        assert_eq!(r.fb_iou().unwrap(), 0.25);
    }

    #[test]
    fn pooling_differs_from_episode_mean() {
        let mut r = EvalResult::new();
        r.add(0, &[1, 0, 0, 0], &[1, 0, 0, 0]).unwrap();
        r.add(0, &[0, 0, 0, 0], &[1, 1, 1, 0]).unwrap();
        assert_eq!(r.miou().unwrap(), 0.25);
    }

    #[test]
    fn empty_is_usage_error() {
        let r = EvalResult::new();
        assert!(matches!(r.miou(), Err(Error::Usage(_))));
        assert!(matches!(r.fb_iou(), Err(Error::Usage(_))));
        let mut r = EvalResult::new();
        r.add(1, &[0, 0], &[0, 0]).unwrap();
        assert_eq!(r.excluded_classes(), vec![1]);
        assert!(matches!(r.miou(), Err(Error::Usage(_))));
        assert_eq!(r.fb_iou().unwrap(), 1.0);
    }

    #[test]
    fn bad_inputs() {
        let mut r = EvalResult::new();
        assert!(matches!(r.add(0, &[1], &[1, 0]), Err(Error::Shape(_))));
        assert!(matches!(r.add(0, &[2], &[1]), Err(Error::Data(_))));
    }
}
