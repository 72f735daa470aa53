//! One function per mode; each writes its artifacts under the output directory.

use std::collections::BTreeSet;
use std::path::PathBuf;

use mshnet::backbone::{FeatureSource, TinyBackbone, FIRST_BLOCK};
use mshnet::gradcheck::{op_suite, TOLERANCE};
use mshnet::io::write_atomic;
use mshnet::network::{checkpoint_bytes, load_checkpoint};
use mshnet::protocol::{
    build_folds, episode_input, filter_train_images, materialize, run_evaluation, run_training, sample_episode,
    synth_index, DatasetIndex, EvalConfig, EvalResult, FoldSpec, ImageStore, Split, TrainConfig,
};
use mshnet::{Error, Exec, MshNet, NetConfig, ParamSet, Result, SimMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BackboneChoice, DatasetConfig, Mode, RunConfig, SimChoice, SplitChoice};
use crate::report;

/// What a finished run produced, for the terminal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Summary {
    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }
}

pub fn run(mode: Mode, cfg: &RunConfig, exec: Exec) -> Result<Summary> {
    cfg.validate(mode)?;
    std::fs::create_dir_all(&cfg.out)?;
    match mode {
        Mode::SynthData => synth_data(cfg),
        Mode::Train => train(cfg, exec),
        Mode::Eval => eval(cfg, exec),
        Mode::Ablate => ablate(cfg, exec),
        Mode::EnergyMap => energy_map(cfg, exec),
        Mode::GradCheck => grad_check(cfg),
    }
}

pub fn dataset_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    match cfg.dataset.as_ref().expect("validated") {
        DatasetConfig::Index(p) => DatasetIndex::load(p),
        DatasetConfig::Synth(s) => synth_index(&s.to_config()),
    }
}

pub fn feature_source(cfg: &RunConfig) -> Result<FeatureSource> {
    Ok(match cfg.backbone {
        BackboneChoice::Tiny => FeatureSource::Tiny(TinyBackbone::new(cfg.tiny_config())?),
        BackboneChoice::Replay => FeatureSource::Replay(cfg.features.clone().expect("validated")),
    })
}

pub fn fold_spec(cfg: &RunConfig, fold: usize, classes: usize) -> Result<FoldSpec> {
    if let (Some(train), Some(test)) = (&cfg.train_classes, &cfg.test_classes) {
        return FoldSpec::custom(train.clone(), test.clone(), classes);
    }
    let scheme = cfg
        .scheme
        .map(|s| s.scheme())
        .unwrap_or(mshnet::protocol::FoldScheme::Contiguous);
    build_folds(classes, fold, scheme)
}

fn network(cfg: &RunConfig, store: &ImageStore, sim: SimMode) -> Result<MshNet> {
    let layout = match store.source() {
        FeatureSource::Tiny(b) => b.config().layout(),
        FeatureSource::Replay(_) => store.pyramid(Exec::Sequential, 0)?.layout(),
    };
    MshNet::new(NetConfig::new(layout, cfg.hidden, sim))
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        gamma: cfg.gamma,
        batch: cfg.batch,
        steps: cfg.steps,
        steps_per_epoch: cfg.steps_per_epoch,
        k: cfg.k,
        seed: cfg.seed(),
        sampling: cfg.sampling.sampling(),
        checkpoint_every: cfg.checkpoint_every,
    }
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        k: cfg.k,
        episodes: cfg.episodes,
        seed: cfg.seed(),
        sampling: cfg.sampling.sampling(),
        split: match cfg.eval_split {
            SplitChoice::Train => Split::Train,
            SplitChoice::Test => Split::Test,
        },
    }
}

/// Trains from the seeded initialization on the leakage-filtered train images.
fn train_params(
    cfg: &RunConfig,
    net: &MshNet,
    store: &ImageStore,
    spec: &FoldSpec,
    exec: Exec,
    on_checkpoint: &mut dyn FnMut(usize, &ParamSet<f32>) -> Result<()>,
) -> Result<(ParamSet<f32>, Vec<mshnet::protocol::StepLog>)> {
    let filtered = filter_train_images(store.index(), spec, cfg.train_cap, cfg.seed())?;
    let train_store = ImageStore::new(filtered, store.source().clone());
    let out = run_training(
        net,
        net.init_params(cfg.seed()),
        &train_store,
        spec,
        &train_config(cfg),
        exec,
        on_checkpoint,
    )?;
    Ok((out.params, out.log))
}

fn synth_data(cfg: &RunConfig) -> Result<Summary> {
    let index = dataset_index(cfg)?;
    let files = materialize(&index, &cfg.out)?;
    let mut s = Summary::default();
    s.write(cfg.out.join("index.tsv"), files.to_text().as_bytes())?;
    s.lines.push(format!(
        "wrote {} images over {} classes to {}",
        files.images.len(),
        files.classes,
        cfg.out.display()
    ));
    Ok(s)
}

fn train(cfg: &RunConfig, exec: Exec) -> Result<Summary> {
    let index = dataset_index(cfg)?;
    let spec = fold_spec(cfg, cfg.fold, index.classes)?;
    let store = ImageStore::new(index, feature_source(cfg)?);
    let net = network(cfg, &store, cfg.sim.mode())?;
    let ckpt = cfg.out.join("checkpoint.mshc");
    let mut save = |_: usize, p: &ParamSet<f32>| write_atomic(&ckpt, &checkpoint_bytes(p));
    let (params, log) = train_params(cfg, &net, &store, &spec, exec, &mut save)?;
    let mut s = Summary::default();
    s.write(ckpt, &checkpoint_bytes(&params))?;
    s.write(
        cfg.out.join("train_loss.csv"),
        report::loss_csv(Mode::Train, cfg, &log).as_bytes(),
    )?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        s.lines.push(format!(
            "trained {} steps: loss {:.4} -> {:.4}",
            log.len(),
            first.loss,
            last.loss
        ));
    } else {
        s.lines.push("zero steps: wrote the initial parameters".into());
    }
    Ok(s)
}

fn load_params(cfg: &RunConfig, net: &MshNet) -> Result<ParamSet<f32>> {
    let params = load_checkpoint(cfg.checkpoint_path())?;
    net.check_params(&params)?;
    Ok(params)
}

fn eval(cfg: &RunConfig, exec: Exec) -> Result<Summary> {
    let index = dataset_index(cfg)?;
    let spec = fold_spec(cfg, cfg.fold, index.classes)?;
    let store = ImageStore::new(index, feature_source(cfg)?);
    let net = network(cfg, &store, cfg.sim.mode())?;
    let params = load_params(cfg, &net)?;
    let r = run_evaluation(&net, &params, &store, &spec, &eval_config(cfg), exec)?;
    let mut s = Summary::default();
    s.write(
        cfg.out.join("eval.csv"),
        report::eval_csv(Mode::Eval, cfg, cfg.fold, &r)?.as_bytes(),
    )?;
    s.lines.push(summary_line(cfg.fold, &r)?);
    Ok(s)
}

fn summary_line(fold: usize, r: &EvalResult) -> Result<String> {
    Ok(format!(
        "fold {}: mIoU {:.4}, FB-IoU {:.4} over {} episodes",
        fold,
        r.miou()?,
        r.fb_iou()?,
        r.episodes
    ))
}

fn ablate(cfg: &RunConfig, exec: Exec) -> Result<Summary> {
    let index = dataset_index(cfg)?;
    let classes = index.classes;
    let store = ImageStore::new(index, feature_source(cfg)?);
    let folds = cfg.ablate_folds.clone().unwrap_or_else(|| vec![cfg.fold]);
    let mut rows = Vec::new();
    for sim in [SimChoice::Both, SimChoice::Gps, SimChoice::Cosine] {
        let net = network(cfg, &store, sim.mode())?;
        let mut fold_miou = Vec::new();
        for &fold in &folds {
            let spec = fold_spec(cfg, fold, classes)?;
            let (params, _) = train_params(cfg, &net, &store, &spec, exec, &mut |_, _| Ok(()))?;
            let r = run_evaluation(&net, &params, &store, &spec, &eval_config(cfg), exec)?;
            fold_miou.push((fold, r.miou()?));
        }
        rows.push(report::AblationRow {
            sim: sim.mode().name().to_string(),
            fold_miou,
            params: net.init_params(cfg.seed()).num_elements(),
        });
    }
    let mut s = Summary::default();
    s.write(
        cfg.out.join("ablation.csv"),
        report::ablation_csv(Mode::Ablate, cfg, &rows).as_bytes(),
    )?;
    for r in &rows {
        s.lines.push(format!("{}: mean mIoU {:.4}, {} parameters", r.sim, r.mean(), r.params));
    }
    if !report::ablation_direction_holds(&rows) {
        s.lines.push(format!(
            "note: both-similarity mIoU trails the best single similarity by more than {}",
            report::ABLATION_MARGIN
        ));
    }
    Ok(s)
}

/// Energy maps of one seeded episode from the configured split.
fn energy_map(cfg: &RunConfig, exec: Exec) -> Result<Summary> {
    let index = dataset_index(cfg)?;
    let spec = fold_spec(cfg, cfg.fold, index.classes)?;
    let store = ImageStore::new(index, feature_source(cfg)?);
    let net = network(cfg, &store, cfg.sim.mode())?;
    let params = load_params(cfg, &net)?;
    let ecfg = eval_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let ep = sample_episode(store.index(), &spec, ecfg.split, cfg.k, ecfg.sampling, &mut rng)?;
    let (input, _) = episode_input(&store, &ep, exec)?;
    let maps = net.energy_maps(&params, &input, exec)?;
    let mut s = Summary::default();
    for (i, (gps, cos)) in maps.iter().enumerate() {
        for (name, map) in [("gps", gps), ("cos", cos)] {
            if let Some(m) = map {
                let stem = format!("energy_b{}_{}", FIRST_BLOCK + i, name);
                s.write(cfg.out.join(format!("{}.msht", stem)), &m.to_bytes())?;
                s.write(cfg.out.join(format!("{}.pgm", stem)), &report::pgm(m))?;
            }
        }
    }
    s.lines.push(format!(
        "episode class {} query {}: wrote {} files",
        ep.class,
        store.index().images[ep.query].id,
        s.files.len()
    ));
    Ok(s)
}

fn grad_check(cfg: &RunConfig) -> Result<Summary> {
    let mut reports = Vec::new();
    for seed in cfg.seed()..cfg.seed() + cfg.grad_seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        reports.extend(op_suite(cfg.epsilon, &mut rng)?.into_iter().map(|r| (seed, r)));
    }
    let mut s = Summary::default();
    s.write(
        cfg.out.join("gradcheck.csv"),
        report::gradcheck_csv(Mode::GradCheck, cfg, &reports, TOLERANCE).as_bytes(),
    )?;
    let failed: BTreeSet<String> = reports
        .iter()
        .filter(|(_, r)| !r.passed(TOLERANCE))
        .map(|(seed, r)| format!("{} (seed {})", r.param, seed))
        .collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    s.lines.push(format!(
        "{} checks over {} seeds, worst relative error {:.2e}",
        reports.len(),
        cfg.grad_seeds,
        worst
    ));
    if !failed.is_empty() {
        let list: Vec<String> = failed.into_iter().collect();
        return Err(Error::Numerical(format!(
            "gradient check failed for {}; table in {}",
            list.join(", "),
            s.files[0].display()
        )));
    }
    Ok(s)
}

/// Exit status for an error: 1 config or usage, 2 data, 3 numerical or state.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) => 1,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Shape(_) => 2,
        Error::Numerical(_) | Error::State(_) => 3,
    }
}
