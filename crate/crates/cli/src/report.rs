//! CSV reports and PGM previews.

use std::fmt::Write;

use mshnet::gradcheck::GradCheckReport;
use mshnet::protocol::{EvalResult, StepLog};
use mshnet::{Result, Tensor};

use crate::config::{Mode, RunConfig};

/// Comment lines carrying the mode, seed and full resolved config.
pub fn header(mode: Mode, cfg: &RunConfig) -> String {
    format!(
        "# mshnet {}\n# seed: {}\n# config: {}\n",
        mode.name(),
        cfg.seed(),
        cfg.to_json()
    )
}

pub fn loss_csv(mode: Mode, cfg: &RunConfig, log: &[StepLog]) -> String {
    let mut s = header(mode, cfg);
    s.push_str("step,lr,loss\n");
    for l in log {
        writeln!(s, "{},{:e},{:e}", l.step, l.lr, l.loss).unwrap();
    }
    s
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |v| format!("{:.6}", v))
}

pub fn eval_csv(mode: Mode, cfg: &RunConfig, fold: usize, r: &EvalResult) -> Result<String> {
    let mut s = header(mode, cfg);
    writeln!(s, "# episodes: {}", r.episodes).unwrap();
    let excluded = r.excluded_classes();
    if !excluded.is_empty() {
        writeln!(s, "# excluded (zero denominator): {:?}", excluded).unwrap();
    }
    s.push_str("fold,class,TP,FP,FN,IoU\n");
    for (c, n) in &r.per_class {
        writeln!(s, "{},{},{},{},{},{}", fold, c, n.tp, n.fp, n.fneg, fmt_iou(n.iou())).unwrap();
    }
    writeln!(s, "{},mIoU,,,,{:.6}", fold, r.miou()?).unwrap();
    writeln!(s, "{},FB-IoU,,,,{:.6}", fold, r.fb_iou()?).unwrap();
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub sim: String,
    pub fold_miou: Vec<(usize, f64)>,
    pub params: usize,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.fold_miou.iter().map(|(_, v)| v).sum::<f64>() / self.fold_miou.len() as f64
    }
}

/// Allowed shortfall of the both-similarity model against the best single one.
pub const ABLATION_MARGIN: f64 = 0.02;

/// Whether `both` reaches the best single-similarity mean minus the margin.
pub fn ablation_direction_holds(rows: &[AblationRow]) -> bool {
    let mean = |name: &str| rows.iter().find(|r| r.sim == name).map(AblationRow::mean);
    match (mean("both"), mean("gps"), mean("cosine")) {
        (Some(b), Some(g), Some(c)) => b >= g.max(c) - ABLATION_MARGIN,
        _ => false,
    }
}

pub fn ablation_csv(mode: Mode, cfg: &RunConfig, rows: &[AblationRow]) -> String {
    let mut s = header(mode, cfg);
    let holds = ablation_direction_holds(rows);
    writeln!(
        s,
        "# direction (both >= best single - {}): {}",
        ABLATION_MARGIN,
        if holds { "holds" } else { "FLAGGED" }
    )
    .unwrap();
    let folds: Vec<String> = rows
        .first()
        .map(|r| r.fold_miou.iter().map(|(f, _)| format!("fold{}", f)).collect())
        .unwrap_or_default();
    writeln!(s, "sim,{},mean_mIoU,params", folds.join(",")).unwrap();
    for r in rows {
        let vals: Vec<String> = r.fold_miou.iter().map(|(_, v)| format!("{:.6}", v)).collect();
        writeln!(s, "{},{},{:.6},{}", r.sim, vals.join(","), r.mean(), r.params).unwrap();
    }
    s
}

pub fn gradcheck_csv(mode: Mode, cfg: &RunConfig, reports: &[(u64, GradCheckReport)], tol: f64) -> String {
    let mut s = header(mode, cfg);
    s.push_str("seed,tensor,max_rel_error,checked,skipped,status\n");
    for (seed, r) in reports {
        writeln!(
            s,
            "{},{},{:e},{},{},{}",
            seed,
            r.param,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed(tol) { "pass" } else { "FAIL" }
        )
        .unwrap();
    }
    s
}

/// Binary 8-bit PGM of a `[1, H, W]` map, min-max scaled to 0..=255.
pub fn pgm(map: &Tensor<f32>) -> Vec<u8> {
    let (_, h, w) = map.chw();
    let data = map.plane(0);
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(data.iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}
