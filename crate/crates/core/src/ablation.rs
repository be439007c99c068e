//! Toy-scale ablations: the four restoration-module configurations
//! (baseline, without CFRM, without TFA, full) and the four adapter
//! variants, trained with equal step budgets from one pretrained backbone.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::degradations::{CorruptionType, DegradationKind};
use crate::error::{bail, Result};
use crate::eval::{evaluate, EvalOptions, EvalTask};
use crate::heads::{TaskKind, TaskSpec};
use crate::model::{Model, ModelConfig};
use crate::scenes;
use crate::tfa::{audit_tuned_params, TfaVariant};
use crate::trainer::{run_stage1, run_stage2, StepRecord, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    pub train_images: usize,
    pub test_images: usize,
    pub degradation: DegradationKind,
    pub stage1: TrainOptions,
    pub stage2: TrainOptions,
    pub tasks: Vec<TaskKind>,
    /// Stage-2 loss weight of the restoration task; the other tasks use 1.
    pub pir_beta: f64,
    /// Also run the adapter-variant comparison.
    pub variants: bool,
    /// Wall-clock budget in seconds; rows not started in time are marked
    /// incomplete.
    pub budget_secs: Option<f64>,
    pub eval_workers: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions {
            seeds: vec![0, 1, 2],
            train_images: 200,
            test_images: 50,
            degradation: DegradationKind::new(CorruptionType::GaussianNoise, 3).expect("valid severity"),
            stage1: TrainOptions { steps: 400, batch_size: 4, learning_rate: 1e-3, ..TrainOptions::default() },
            stage2: TrainOptions { steps: 300, batch_size: 4, learning_rate: 3e-3, ..TrainOptions::default() },
            tasks: vec![TaskKind::Pir, TaskKind::Classification, TaskKind::Segmentation],
            pir_beta: 100.0,
            variants: true,
            budget_secs: None,
            eval_workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `modules` or `variants`.
    pub table: String,
    pub name: String,
    pub seed: u64,
    pub tuned_params: usize,
    pub completed: bool,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn find(&self, name: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name && r.seed == seed)
    }

    pub fn to_markdown(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::from("| table | config | seed | tuned params | PSNR | SSIM | ACC | mIoU |\n|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let name = if r.completed { r.name.clone() } else { format!("{} (incomplete)", r.name) };
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                r.table, name, r.seed, r.tuned_params, f(r.psnr), f(r.ssim), f(r.accuracy), f(r.miou)
            ));
        }
        s
    }
}

pub const BASELINE: &str = "baseline";
pub const WITHOUT_CFRM: &str = "w/o CFRM";
pub const WITHOUT_TFA: &str = "w/o TFA";
pub const FULL: &str = "full";

fn task_id(kind: TaskKind) -> String {
    kind.name().to_string()
}

pub struct ToyData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Train and held-out sets of toy scenes under one corruption.
pub fn toy_data(train_images: usize, test_images: usize, size: usize, kind: DegradationKind, seed: u64) -> Result<ToyData> {
    let tr = scenes::generate_many(train_images, size, seed);
    let te = scenes::generate_many(test_images, size, seed.wrapping_add(0x5eed_0000));
    Ok(ToyData {
        train: Dataset::synthesize(&tr, &[kind], seed.wrapping_add(1))?,
        test: Dataset::synthesize(&te, &[kind], seed.wrapping_add(2))?,
    })
}

fn derived(base: &Model, config: ModelConfig, seed: u64, from: &Model, groups: &[String]) -> Result<Model> {
    let mut m = Model::new(config, seed)?;
    let mut pre = Model::backbone_groups();
    pre.extend(Model::head_groups());
    m.load_groups(&base.store, &pre)?;
    m.load_groups(&from.store, groups)?;
    Ok(m)
}

struct Ctx<'a> {
    opts: &'a AblationOptions,
    data: &'a ToyData,
    clock: Instant,
    log: &'a mut dyn FnMut(&StepRecord),
}

impl Ctx<'_> {
    fn over_budget(&self) -> bool {
        self.opts.budget_secs.is_some_and(|b| self.clock.elapsed().as_secs_f64() > b)
    }

    fn specs(&self) -> Vec<(TaskSpec, Dataset)> {
        self.opts
            .tasks
            .iter()
            .map(|&k| {
                let beta = if k == TaskKind::Pir { self.opts.pir_beta } else { 1.0 };
                let spec = TaskSpec { task_id: task_id(k), kind: k, beta, manifest: "toy".into(), head_checkpoint: None };
                (spec, self.data.train.clone())
            })
            .collect()
    }

    fn stage1(&mut self, base: &Model, config: ModelConfig, seed: u64) -> Result<Model> {
        let mut m = derived(base, config, seed, base, &[])?;
        let o = TrainOptions { seed, ..self.opts.stage1.clone() };
        run_stage1(&mut m, &self.data.train, &o, self.log)?;
        Ok(m)
    }

    fn stage2(&mut self, from: &Model, config: ModelConfig, seed: u64) -> Result<Model> {
        let mut m = derived(from, config, seed, from, &Model::stage1_groups())?;
        let o = TrainOptions { seed, ..self.opts.stage2.clone() };
        run_stage2(&mut m, &self.specs(), &o, self.log)?;
        Ok(m)
    }

    fn score(&self, m: &Model, table: &str, name: &str, seed: u64, tuned: usize) -> Result<AblationRow> {
        let tasks: Vec<EvalTask> =
            self.opts.tasks.iter().map(|&k| EvalTask { task_id: task_id(k), kind: k, data: &self.data.test }).collect();
        let eo = EvalOptions { seed, workers: self.opts.eval_workers, batch_size: 10 };
        let r = evaluate(m, &tasks, &eo)?;
        let get = |k: TaskKind, metric: &str| r.summary_value("restored", &task_id(k), metric);
        Ok(AblationRow {
            table: table.into(),
            name: name.into(),
            seed,
            tuned_params: tuned,
            completed: true,
            psnr: get(TaskKind::Pir, "psnr"),
            ssim: get(TaskKind::Pir, "ssim"),
            accuracy: get(TaskKind::Classification, "accuracy"),
            miou: get(TaskKind::Segmentation, "miou"),
        })
    }
}

fn skipped(table: &str, name: &str, seed: u64, tuned: usize) -> AblationRow {
    AblationRow {
        table: table.into(),
        name: name.into(),
        seed,
        tuned_params: tuned,
        completed: false,
        psnr: None,
        ssim: None,
        accuracy: None,
        miou: None,
    }
}

fn tuned(m: &Model, groups: &[String]) -> usize {
    groups.iter().map(|g| m.store.numel(g)).sum()
}

/// Runs every configuration for every seed. `base` supplies the pretrained
/// encoder, decoder and heads; its other groups are ignored.
pub fn run_ablation(base: &Model, opts: &AblationOptions, log: &mut dyn FnMut(&StepRecord)) -> Result<AblationTable> {
    if opts.seeds.is_empty() || opts.tasks.is_empty() {
        bail!(Config, "ablation needs at least one seed and one task");
    }
    let data = toy_data(opts.train_images, opts.test_images, base.config.encoder.image_size, opts.degradation, 0xab1a)?;
    let mut cx = Ctx { opts, data: &data, clock: Instant::now(), log };
    let mut table = AblationTable::default();
    let cfg = |cfrm: bool, tfa: bool, variant: TfaVariant| ModelConfig { use_cfrm: cfrm, use_tfa: tfa, variant, ..base.config.clone() };
    let shared = TfaVariant::SharedTfaPerTaskPrompt;
    let s1 = Model::stage1_groups();
    let k = opts.tasks.len();
    let ch = &base.config.encoder.channels;
    let dim = base.config.prompt_dim;
    for &seed in &opts.seeds {
        // The two stage-1 runs are shared by the configurations that differ
        // only in the adapter.
        let modules = [(BASELINE, false, false), (WITHOUT_CFRM, false, true), (WITHOUT_TFA, true, false), (FULL, true, true)];
        let mut stage1: [Option<Model>; 2] = [None, None];
        for (name, use_cfrm, use_tfa) in modules {
            if cx.over_budget() {
                table.rows.push(skipped("modules", name, seed, 0));
                continue;
            }
            let slot = usize::from(use_cfrm);
            if stage1[slot].is_none() {
                stage1[slot] = Some(cx.stage1(base, cfg(use_cfrm, false, shared), seed)?);
            }
            let from = stage1[slot].as_ref().expect("stage 1 ran");
            let mut trained: Vec<String> = s1.iter().filter(|g| use_cfrm || *g != crate::cfrm::CFRM).cloned().collect();
            let m = if use_tfa {
                let m = cx.stage2(from, cfg(use_cfrm, true, shared), seed)?;
                trained.extend(m.stage2_groups());
                m
            } else {
                derived(base, cfg(use_cfrm, false, shared), seed, from, &s1)?
            };
            let row = cx.score(&m, "modules", name, seed, tuned(&m, &trained))?;
            table.rows.push(row);
        }
        if !opts.variants {
            continue;
        }
        for variant in [TfaVariant::MultiAdapter, TfaVariant::MultiTfa, TfaVariant::SharedTfaSinglePrompt, shared] {
            let count = audit_tuned_params(variant, k, ch, dim);
            if cx.over_budget() {
                table.rows.push(skipped("variants", variant.name(), seed, count));
                continue;
            }
            let from = match stage1[1].take() {
                Some(m) => m,
                None => cx.stage1(base, cfg(true, false, shared), seed)?,
            };
            let m = cx.stage2(&from, cfg(true, true, variant), seed)?;
            stage1[1] = Some(from);
            table.rows.push(cx.score(&m, "variants", variant.name(), seed, count)?);
        }
    }
    Ok(table)
}
