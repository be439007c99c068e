//! Training procedures: backbone and head pre-training, the two restoration
//! stages, and prompt-only task addition. Each procedure unfreezes exactly
//! its own parameter groups; everything else is bound as constants, so
//! frozen groups never even receive gradients.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{DECODER, ENCODER};
use crate::data::{Dataset, Sampler};
use crate::error::{bail, Result};
use crate::heads::{combined_stage2_loss, task_loss, Target, TaskKind, TaskSpec, HEADS};
use crate::image;
use crate::model::Model;
use crate::nn::{Adam, ParamKey, Session};
use crate::rng;
use crate::scenes;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
    AddTask,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::AddTask => "add_task",
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: String,
    pub task_id: String,
    pub loss: f64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Step number of the first step (non-zero when resuming).
    pub start_step: u64,
    /// Per-encoder-layer weights of the feature restoration loss.
    pub lambdas: Vec<f64>,
    /// Cosine-decay the learning rate to zero over the run.
    pub cosine: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            start_step: 0,
            lambdas: vec![1.0; 3],
            cosine: false,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bail!(Config, "learning_rate must be positive, got {}", self.learning_rate);
        }
        Ok(())
    }

    fn lr_at(&self, k: usize) -> f64 {
        if self.cosine {
            self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / self.steps.max(1) as f64).cos())
        } else {
            self.learning_rate
        }
    }

    /// Seed for the `k`-th step of this run, independent of batch contents.
    fn step_seed(&self, k: usize, salt: u64) -> u64 {
        rng::derive(rng::derive(self.seed, salt), self.start_step + k as u64)
    }
}

struct Run<'a> {
    stage: Stage,
    opts: &'a TrainOptions,
    opt: Adam,
    clock: Instant,
    log: &'a mut dyn FnMut(&StepRecord),
}

impl<'a> Run<'a> {
    fn new(stage: Stage, opts: &'a TrainOptions, log: &'a mut dyn FnMut(&StepRecord)) -> Result<Self> {
        opts.validate()?;
        Ok(Run { stage, opts, opt: Adam::new(opts.learning_rate), clock: Instant::now(), log })
    }

    fn apply(&mut self, model: &mut Model, k: usize, grads: BTreeMap<ParamKey, Tensor>) {
        self.opt.lr = self.opts.lr_at(k);
        self.opt.step(&mut model.store, &grads);
    }

    fn record(&mut self, k: usize, task: &str, loss: f64, terms: BTreeMap<String, f64>) -> Result<()> {
        if !loss.is_finite() {
            bail!(State, "{} loss became non-finite at step {}", self.stage.name(), self.opts.start_step + k as u64);
        }
        let rec = StepRecord {
            step: self.opts.start_step + k as u64,
            stage: self.stage.name().to_string(),
            task_id: task.to_string(),
            loss,
            wall_time: self.clock.elapsed().as_secs_f64(),
            terms,
        };
        (self.log)(&rec);
        Ok(())
    }
}

/// Reconstruction MSE on freshly generated toy scenes.
pub fn pretrain_autoencoder(model: &mut Model, opts: &TrainOptions, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
    model.store.set_trainable(|g| g == ENCODER || g == DECODER);
    let size = model.config.encoder.image_size;
    let mut run = Run::new(Stage::Pretrain, opts, log)?;
    for k in 0..opts.steps {
        let base = opts.step_seed(k, 1);
        let imgs: Vec<Tensor> =
            (0..opts.batch_size).map(|i| scenes::generate(size, rng::derive(base, i as u64)).image).collect();
        let x = image::stack(&imgs);
        let (loss, grads) = {
            let tape = Tape::new();
            let s = Session::train(&tape, &model.store);
            let xv = s.constant(x.clone());
            let loss = model.reconstruct(&s, xv)?.sub(xv).sqr().mean_all();
            let value = loss.value().item();
            (value, s.gradients(&mut tape.backward(loss)))
        };
        run.apply(model, k, grads);
        run.record(k, "autoencoder", loss, BTreeMap::new())?;
    }
    model.store.freeze_all();
    Ok(())
}

/// Trains the classifier and segmenter on clean toy scenes, alternating steps.
pub fn pretrain_heads(model: &mut Model, opts: &TrainOptions, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
    model.store.set_trainable(|g| g == HEADS);
    let size = model.config.encoder.image_size;
    let mut run = Run::new(Stage::Pretrain, opts, log)?;
    for k in 0..opts.steps {
        let base = opts.step_seed(k, 2);
        let sc: Vec<scenes::Scene> = (0..opts.batch_size).map(|i| scenes::generate(size, rng::derive(base, i as u64))).collect();
        let x = image::stack(&sc.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
        let (kind, target, name) = if k % 2 == 0 {
            (TaskKind::Classification, Target::Classes(sc.iter().map(|s| s.class_id).collect()), "classifier")
        } else {
            (TaskKind::Segmentation, Target::Masks(sc.iter().flat_map(|s| s.mask.clone()).collect()), "segmenter")
        };
        let (loss, grads) = {
            let tape = Tape::new();
            let s = Session::train(&tape, &model.store);
            let loss = task_loss(&s, s.constant(x), kind, &target, &model.heads)?;
            let value = loss.value().item();
            (value, s.gradients(&mut tape.backward(loss)))
        };
        run.apply(model, k, grads);
        run.record(k, name, loss, BTreeMap::new())?;
    }
    model.store.freeze_all();
    Ok(())
}

/// Gradients of one stage-1 step: `L_CFRM + L_Control` at a uniformly
/// sampled timestep.
pub fn stage1_step(
    model: &Model,
    clean: &Tensor,
    degraded: &Tensor,
    lambdas: &[f64],
    seed: u64,
) -> Result<(f64, f64, BTreeMap<ParamKey, Tensor>)> {
    let mut r = rng::seeded(seed);
    let t = r.random_range(0..model.controller.schedule().steps());
    let eps = Tensor::randn(&model.latent_shape(clean.dim(0)), 1.0, &mut r);
    let tape = Tape::new();
    let s = Session::train(&tape, &model.store);
    let terms = model.stage1_terms(&s, clean, degraded, t, &eps, lambdas)?;
    let (lc, lz) = (terms.cfrm.value().item(), terms.control.value().item());
    let total = terms.cfrm.add(terms.control);
    let grads = s.gradients(&mut tape.backward(total));
    Ok((lc, lz, grads))
}

pub fn run_stage1(model: &mut Model, data: &Dataset, opts: &TrainOptions, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
    if data.is_empty() {
        bail!(Config, "stage 1 needs a non-empty restoration dataset");
    }
    if opts.lambdas.len() != model.config.encoder.layers {
        bail!(Config, "{} layer weights for {} encoder layers", opts.lambdas.len(), model.config.encoder.layers);
    }
    let groups = Model::stage1_groups();
    model.store.set_trainable(|g| groups.iter().any(|x| x == g));
    let mut sampler = Sampler::new(data.len(), opts.batch_size, opts.seed);
    for _ in 0..opts.start_step {
        sampler.next_batch();
    }
    let mut run = Run::new(Stage::Stage1, opts, log)?;
    for k in 0..opts.steps {
        let batch = data.batch(&sampler.next_batch());
        let (lc, lz, grads) = stage1_step(model, &batch.clean, &batch.degraded, &opts.lambdas, opts.step_seed(k, 3))?;
        run.apply(model, k, grads);
        let terms = BTreeMap::from([("cfrm".to_string(), lc), ("control".to_string(), lz)]);
        run.record(k, "pir", lc + lz, terms)?;
    }
    model.store.freeze_all();
    Ok(())
}

/// One task's weighted loss on a batch, with gradients for the currently
/// trainable groups.
pub fn stage2_step(
    model: &Model,
    spec: &TaskSpec,
    degraded: &Tensor,
    target: &Target,
    seed: u64,
) -> Result<(f64, BTreeMap<ParamKey, Tensor>)> {
    let noise_seeds: Vec<u64> = (0..degraded.dim(0)).map(|i| rng::derive(seed, i as u64)).collect();
    let tape = Tape::new();
    let s = Session::train(&tape, &model.store);
    let restored = model.restore(&s, s.constant(degraded.clone()), Some(&spec.task_id), model.initial_noise(&noise_seeds))?;
    let loss = task_loss(&s, restored, spec.kind, target, &model.heads)?;
    let weighted = combined_stage2_loss(&[(spec.beta, loss)])?;
    let value = weighted.value().item();
    Ok((value, s.gradients(&mut tape.backward(weighted))))
}

/// Task order of a round-robin schedule: step `k` trains task `k mod N`.
pub fn round_robin(num_tasks: usize, steps: usize, start: u64) -> Vec<usize> {
    (0..steps).map(|k| ((start + k as u64) % num_tasks as u64) as usize).collect()
}

fn train_tasks(
    model: &mut Model,
    stage: Stage,
    tasks: &[(TaskSpec, Dataset)],
    opts: &TrainOptions,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<()> {
    let mut samplers: Vec<Sampler> = tasks
        .iter()
        .enumerate()
        .map(|(i, (_, d))| Sampler::new(d.len(), opts.batch_size, rng::derive(opts.seed, 100 + i as u64)))
        .collect();
    let schedule = round_robin(tasks.len(), opts.steps, opts.start_step);
    for &i in &round_robin(tasks.len(), opts.start_step as usize, 0) {
        samplers[i].next_batch();
    }
    let mut run = Run::new(stage, opts, log)?;
    for (k, &i) in schedule.iter().enumerate() {
        let (spec, data) = &tasks[i];
        let batch = data.batch(&samplers[i].next_batch());
        let target = batch.target(spec.kind)?;
        let (loss, grads) = stage2_step(model, spec, &batch.degraded, &target, opts.step_seed(k, 4))?;
        run.apply(model, k, grads);
        run.record(k, &spec.task_id, loss, BTreeMap::new())?;
    }
    model.store.freeze_all();
    Ok(())
}

fn check_tasks(model: &Model, tasks: &[(TaskSpec, Dataset)]) -> Result<()> {
    for (spec, data) in tasks {
        spec.validate()?;
        if data.is_empty() {
            bail!(Config, "task {} has no data", spec.task_id);
        }
        if model.task_kind(&spec.task_id)? != spec.kind {
            bail!(Config, "task {} is registered with a different kind", spec.task_id);
        }
    }
    Ok(())
}

/// Registers every task not yet known, then trains all adapter groups
/// round-robin over the tasks.
pub fn run_stage2(model: &mut Model, tasks: &[(TaskSpec, Dataset)], opts: &TrainOptions, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
    if tasks.is_empty() {
        bail!(Config, "stage 2 needs at least one task");
    }
    for (spec, _) in tasks {
        if model.task_kind(&spec.task_id).is_err() {
            model.add_task(&spec.task_id, spec.kind)?;
        }
    }
    check_tasks(model, tasks)?;
    let groups = model.stage2_groups();
    model.store.set_trainable(|g| groups.iter().any(|x| x == g));
    train_tasks(model, Stage::Stage2, tasks, opts, log)
}

/// Registers a new task and trains only the groups created for it (for the
/// shared adapter, just its prompt) on that task's data alone.
pub fn add_task(model: &mut Model, spec: &TaskSpec, data: Dataset, opts: &TrainOptions, log: &mut dyn FnMut(&StepRecord)) -> Result<Vec<String>> {
    let groups = model.add_task(&spec.task_id, spec.kind)?;
    if groups.is_empty() {
        bail!(Config, "adapter variant {} has no per-task parameters to train", model.config.variant);
    }
    let tasks = [(spec.clone(), data)];
    check_tasks(model, &tasks)?;
    model.store.set_trainable(|g| groups.iter().any(|x| x == g));
    train_tasks(model, Stage::AddTask, &tasks, opts, log)?;
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradations::{CorruptionType, DegradationKind};
    use crate::model::ModelConfig;

    fn small_data(n: usize) -> Dataset {
        let sc = scenes::generate_many(n, 64, 1);
        Dataset::synthesize(&sc, &[DegradationKind::new(CorruptionType::GaussianNoise, 3).unwrap()], 2).unwrap()
    }

    fn spec(id: &str, kind: TaskKind) -> TaskSpec {
        TaskSpec { task_id: id.into(), kind, beta: 1.0, manifest: "unused".into(), head_checkpoint: None }
    }

    #[test]
    fn round_robin_counts() {
        let s = round_robin(3, 300, 0);
        for t in 0..3 {
            assert_eq!(s.iter().filter(|&&x| x == t).count(), 100);
        }
        assert_eq!(round_robin(3, 2, 4), vec![1, 2]);
    }

    #[test]
    fn stage1_touches_only_its_groups() {
        let mut m = Model::new(ModelConfig::default(), 0).unwrap();
        let before = m.store.digests();
        let opts = TrainOptions { steps: 2, batch_size: 2, ..TrainOptions::default() };
        let mut n = 0;
        run_stage1(&mut m, &small_data(4), &opts, &mut |_| n += 1).unwrap();
        assert_eq!(n, 2);
        let after = m.store.digests();
        for (g, d) in &before {
            let trained = Model::stage1_groups().contains(g);
            assert_eq!(after[g] != *d, trained, "group {g}");
        }
    }

    #[test]
    fn stage2_gradients_skip_frozen_groups() {
        let mut m = Model::new(ModelConfig::default(), 0).unwrap();
        m.add_task("cls", TaskKind::Classification).unwrap();
        let groups = m.stage2_groups();
        m.store.set_trainable(|g| groups.iter().any(|x| x == g));
        let data = small_data(2);
        let b = data.batch(&[0, 1]);
        let (_, grads) = stage2_step(&m, &spec("cls", TaskKind::Classification), &b.degraded, &b.target(TaskKind::Classification).unwrap(), 1).unwrap();
        assert!(!grads.is_empty());
        assert!(grads.keys().all(|k| groups.contains(&k.group)), "{:?}", grads.keys().map(|k| &k.group).collect::<Vec<_>>());
    }

    #[test]
    fn add_task_changes_only_the_new_prompt() {
        let mut m = Model::new(ModelConfig::default(), 0).unwrap();
        let data = small_data(2);
        let opts = TrainOptions { steps: 2, batch_size: 2, learning_rate: 1e-2, ..TrainOptions::default() };
        run_stage2(&mut m, &[(spec("pir", TaskKind::Pir), data.clone())], &opts, &mut |_| {}).unwrap();
        let before = m.store.digests();
        let groups = add_task(&mut m, &spec("seg", TaskKind::Segmentation), data.clone(), &opts, &mut |_| {}).unwrap();
        assert_eq!(groups, vec!["prompts.seg".to_string()]);
        let after = m.store.digests();
        for (g, d) in &before {
            assert_eq!(&after[g], d, "group {g} changed");
        }
        assert_eq!(after.len(), before.len() + 1);
        assert!(matches!(
            add_task(&mut m, &spec("seg", TaskKind::Segmentation), data, &opts, &mut |_| {}),
            Err(crate::Error::Registry(_))
        ));
    }
}
