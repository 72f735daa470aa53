//! Episodic training and evaluation loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::MshNet;
use crate::par::Exec;
use crate::params::{exp_lr_decay, sgd_step, ParamSet};
use crate::protocol::dataset::ImageStore;
use crate::protocol::folds::FoldSpec;
use crate::protocol::metrics::EvalResult;
use crate::protocol::sampling::{episode_input, sample_episode, Episode, Sampling, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub episodes: usize,
    pub seed: u64,
    pub sampling: Sampling,
    pub split: Split,
}

/// Samples `episodes` episodes up front, scores them concurrently against a
/// read-only parameter set, and merges the counts in sampling order.
pub fn run_evaluation(
    net: &MshNet,
    params: &ParamSet<f32>,
    store: &ImageStore,
    spec: &FoldSpec,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<EvalResult> {
    if cfg.episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let episodes = (0..cfg.episodes)
        .map(|_| sample_episode(store.index(), spec, cfg.split, cfg.k, cfg.sampling, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let scored = exec.map_slice(&episodes, |ep| score_episode(net, params, store, ep));
    let mut total = EvalResult::new();
    for r in scored {
        total.merge(&r?);
    }
    Ok(total)
}

fn score_episode(net: &MshNet, params: &ParamSet<f32>, store: &ImageStore, ep: &Episode) -> Result<EvalResult> {
    let (input, target) = episode_input(store, ep, Exec::Sequential)?;
    let (logits, _, _) = net.predict(params, &input, Exec::Sequential)?;
    let truth: Vec<u8> = target.data().iter().map(|&v| v as u8).collect();
    let mut r = EvalResult::new();
    r.add(ep.class, &logits.mask(), &truth)?;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub batch: usize,
    pub steps: usize,
    /// Optimizer steps per learning-rate decay step.
    pub steps_per_epoch: usize,
    pub k: usize,
    pub seed: u64,
    pub sampling: Sampling,
    /// Invoke the checkpoint callback every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 0.0005,
            gamma: 0.9,
            batch: 10,
            steps: 100,
            steps_per_epoch: 100,
            k: 1,
            seed: 0,
            sampling: Sampling::ClassFirst,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.k == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("training needs lr > 0, batch >= 1, k >= 1, steps_per_epoch >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Batch mean of the total training loss.
    pub loss: f64,
}

pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub log: Vec<StepLog>,
}

/// Episodic SGD: per step, a batch of train-split episodes is run
/// concurrently; gradients are summed in batch order, averaged, and applied.
pub fn run_training(
    net: &MshNet,
    init: ParamSet<f32>,
    store: &ImageStore,
    spec: &FoldSpec,
    cfg: &TrainConfig,
    exec: Exec,
    on_checkpoint: &mut dyn FnMut(usize, &ParamSet<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.check_params(&init)?;
    if spec.train.is_empty() {
        return Err(Error::Data("no train classes".into()));
    }
    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let episodes = (0..cfg.batch)
            .map(|_| sample_episode(store.index(), spec, Split::Train, cfg.k, cfg.sampling, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let results = exec.map_slice(&episodes, |ep| {
            let (input, target) = episode_input(store, ep, Exec::Sequential)?;
            net.loss_and_grads(&params, &input, &target, Exec::Sequential)
        });
        let mut sums: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
        let mut loss = 0.0;
        for r in results {
            let (report, grads, _) = r?;
            if !report.total.is_finite() {
                return Err(Error::Numerical(format!("loss is {} at step {}", report.total, step)));
            }
            loss += report.total;
            for (id, g) in grads {
                match &mut sums[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        for (id, g) in sums.into_iter().enumerate() {
            if let Some(g) = g {
                params.accumulate_grad(id, &g.scale(scale))?;
            }
        }
        params.fill_missing_grads();
        let lr = exp_lr_decay(cfg.lr, cfg.gamma, (step / cfg.steps_per_epoch) as u64);
        sgd_step(&mut params, lr, cfg.momentum, cfg.weight_decay)?;
        if params.iter().any(|p| !p.value.all_finite()) {
            return Err(Error::Numerical(format!("parameters became non-finite at step {}", step)));
        }
        log.push(StepLog {
            step,
            lr,
            loss: loss * scale,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, &params)?;
        }
    }
    Ok(TrainOutcome { params, log })
}
