use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use restora_core::ablation::{run_ablation, AblationOptions, AblationRow};
use restora_core::checkpoint::Checkpoint;
use restora_core::config::RunConfig;
use restora_core::data::Dataset;
use restora_core::degradations::{build_manifest, CorruptionType, DegradationKind};
use restora_core::error::Error;
use restora_core::eval::{evaluate, reconstruction_psnr, EvalOptions, EvalTask};
use restora_core::heads::{TaskKind, TaskSpec};
use restora_core::metrics::EvalReport;
use restora_core::model::Model;
use restora_core::trainer::{self, TrainOptions};
use restora_core::{scenes, Result};

use crate::plots;
use crate::run::{file_digest, RunDir};
use crate::Common;

const CHECKPOINT: &str = "checkpoint.tar";

/// Config file, then `--set` overrides, then dedicated flags.
fn resolve(c: &Common, steps_key: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(),
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.set("seed", s);
    }
    if let Some(g) = &c.gate {
        cfg.set("model.gate", g);
    }
    if let Some(w) = c.workers {
        cfg.set("workers", w);
    }
    if let (Some(k), Some(s)) = (steps_key, c.steps) {
        cfg.set(k, s);
    }
    Ok(cfg)
}

fn path_arg(cfg: &RunConfig, flag: Option<PathBuf>, key: &str, what: &str) -> Result<PathBuf> {
    match flag.or_else(|| cfg.get(key).map(PathBuf::from)) {
        Some(p) if p.exists() => Ok(p),
        Some(p) => Err(Error::State(format!("{what} {} does not exist", p.display()))),
        None => Err(Error::State(format!("no {what} given (pass --init or set {key})"))),
    }
}

fn load_stage(path: &Path, stages: &[&str]) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if !stages.contains(&ck.meta.stage.as_str()) {
        return Err(Error::State(format!(
            "{} is a {} checkpoint; expected one of {:?}",
            path.display(),
            ck.meta.stage,
            stages
        )));
    }
    Ok(ck)
}

/// Fresh model from the run config with `groups` copied from `from`.
fn model_from(cfg: &RunConfig, from: &Checkpoint, groups: &[String]) -> Result<Model> {
    let mut m = Model::new(cfg.model_config()?, cfg.seed()?)?;
    m.load_groups(&from.store, groups).map_err(|e| match e {
        Error::State(msg) => Error::State(format!("incompatible checkpoint: {msg}")),
        other => other,
    })?;
    Ok(m)
}

fn save_checkpoint(run: &mut RunDir, model: &Model, seed: u64, stage: &str, step: u64) -> Result<()> {
    let ck = Checkpoint::from_model(model, seed, stage, step);
    let p = run.file(CHECKPOINT);
    ck.save(&p)?;
    run.digests.insert("checkpoint".into(), ck.digest());
    run.digests.insert(CHECKPOINT.into(), file_digest(&p)?);
    for (g, d) in model.store.digests() {
        run.digests.insert(format!("group/{g}"), d);
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(cfg: &RunConfig, key: &str, default: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    cfg.get(key)
        .unwrap_or(default)
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("{key}: {s:?}: {e}"))))
        .collect()
}

pub fn synth(c: &Common, clean: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(c, None)?;
    let seed = cfg.seed()?;
    let mut run = RunDir::create(&c.out, &cfg)?;
    let clean_dir = match clean.or_else(|| cfg.get("synth.clean_dir").map(PathBuf::from)) {
        Some(d) => d,
        None => {
            let n = cfg.parse_or("synth.toy_images", 20usize)?;
            let size = cfg.parse_or("synth.image_size", 64usize)?;
            let dir = run.file("clean");
            scenes::write_dir(&dir, &scenes::generate_many(n, size, seed))?;
            dir
        }
    };
    let types: Vec<CorruptionType> = parse_list(&cfg, "synth.kinds", "gaussian_noise")?;
    let severities: Vec<u8> = parse_list(&cfg, "synth.severities", "3")?;
    let mut kinds = Vec::new();
    for &t in &types {
        for &s in &severities {
            kinds.push(DegradationKind::new(t, s).map_err(|e| Error::Config(e.to_string()))?);
        }
    }
    let mut manifest = build_manifest(&clean_dir, &kinds, seed)?;
    manifest.render_degraded(&run.file("degraded"))?;
    let missing = manifest.missing_files();
    if !missing.is_empty() {
        return Err(Error::State(format!("manifest references missing files: {missing:?}")));
    }
    manifest.relative_to(&run.path);
    let mp = run.file("manifest.jsonl");
    manifest.write(&mp)?;
    run.digests.insert("manifest".into(), manifest.digest());
    for f in files_under(&run.path)? {
        let name = f.strip_prefix(&run.path).unwrap_or(&f).to_string_lossy().into_owned();
        run.digests.insert(format!("file/{name}"), file_digest(&f)?);
    }
    let n = manifest.entries.len();
    let digest = run.finish()?;
    println!("synth: {n} degraded images, manifest {}, digest {digest}", mp.display());
    Ok(())
}

/// Every file below `dir`, sorted.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn pretrain_defaults() -> (TrainOptions, TrainOptions) {
    let ae = TrainOptions { steps: 2000, batch_size: 8, learning_rate: 2e-3, cosine: true, ..TrainOptions::default() };
    let heads = TrainOptions { steps: 2000, batch_size: 16, ..ae.clone() };
    (ae, heads)
}

fn pretrain_model(cfg: &RunConfig, run: &mut RunDir) -> Result<Model> {
    let (ae, heads) = pretrain_defaults();
    let ae = cfg.train_options("pretrain", ae)?;
    let heads = cfg.train_options("heads", heads)?;
    let mut m = Model::new(cfg.model_config()?, cfg.seed()?)?;
    trainer::pretrain_autoencoder(&mut m, &ae, &mut |r| run.record(r))?;
    trainer::pretrain_heads(&mut m, &heads, &mut |r| run.record(r))?;
    Ok(m)
}

pub fn pretrain(c: &Common) -> Result<()> {
    let cfg = resolve(c, Some("pretrain.steps"))?;
    let mut run = RunDir::create(&c.out, &cfg)?;
    run.open_log()?;
    let m = pretrain_model(&cfg, &mut run)?;
    let size = m.config.encoder.image_size;
    let held_out: Vec<_> = scenes::generate_many(cfg.parse_or("pretrain.eval_images", 50)?, size, 0x4e1d_0ff5).into_iter().map(|s| s.image).collect();
    let psnr = reconstruction_psnr(&m, &held_out, 10)?;
    let steps = cfg.train_options("pretrain", pretrain_defaults().0)?.steps as u64;
    save_checkpoint(&mut run, &m, cfg.seed()?, "pretrain", steps)?;
    run.write("metrics.json", serde_json::json!({ "reconstruction_psnr": psnr }).to_string().as_bytes())?;
    let digest = run.finish()?;
    println!("pretrain: held-out reconstruction PSNR {psnr:.2} dB, digest {digest}");
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Config(format!("manifest {} does not exist", path.display())));
    }
    Dataset::load(path)
}

pub fn stage1(c: &Common, init: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(c, Some("stage1.steps"))?;
    let manifest = PathBuf::from(cfg.require("stage1.manifest")?);
    let defaults = TrainOptions { steps: 1000, ..TrainOptions::default() };
    let mut opts = cfg.train_options("stage1", defaults)?;
    let (mut m, seed) = match resume {
        Some(p) => {
            let ck = load_stage(&p, &["stage1"])?;
            opts.start_step = ck.meta.step;
            let seed = ck.meta.seed;
            (ck.into_model()?, seed)
        }
        None => {
            let p = path_arg(&cfg, init, "init", "pretrained checkpoint")?;
            let ck = load_stage(&p, &["pretrain"])?;
            let mut groups = Model::backbone_groups();
            groups.extend(Model::head_groups());
            (model_from(&cfg, &ck, &groups)?, cfg.seed()?)
        }
    };
    let data = load_dataset(&manifest)?;
    let mut run = RunDir::create(&c.out, &cfg)?;
    run.open_log()?;
    trainer::run_stage1(&mut m, &data, &opts, &mut |r| run.record(r))?;
    save_checkpoint(&mut run, &m, seed, "stage1", opts.start_step + opts.steps as u64)?;
    let digest = run.finish()?;
    println!("stage1: {} steps, digest {digest}", opts.steps);
    Ok(())
}

fn task_data(cfg: &RunConfig, eval: bool) -> Result<Vec<(TaskSpec, Dataset)>> {
    let specs = cfg.tasks()?;
    if specs.is_empty() {
        return Err(Error::Config("no task.<id>.* blocks configured".into()));
    }
    specs
        .into_iter()
        .map(|s| {
            let key = format!("task.{}.eval_manifest", s.task_id);
            let path = match cfg.get(&key) {
                Some(p) if eval => PathBuf::from(p),
                _ => s.manifest.clone(),
            };
            let d = load_dataset(&path)?;
            Ok((s, d))
        })
        .collect()
}

pub fn stage2(c: &Common, init: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(c, Some("stage2.steps"))?;
    let p = path_arg(&cfg, init, "init", "stage-1 checkpoint")?;
    let ck = load_stage(&p, &["stage1"])?;
    let mut groups = Model::backbone_groups();
    groups.extend(Model::head_groups());
    groups.extend(Model::stage1_groups());
    let mut m = model_from(&cfg, &ck, &groups)?;
    let defaults = TrainOptions { steps: 500, learning_rate: 1e-4, ..TrainOptions::default() };
    let opts = cfg.train_options("stage2", defaults)?;
    let tasks = task_data(&cfg, false)?;
    let mut run = RunDir::create(&c.out, &cfg)?;
    run.open_log()?;
    trainer::run_stage2(&mut m, &tasks, &opts, &mut |r| run.record(r))?;
    save_checkpoint(&mut run, &m, cfg.seed()?, "stage2", opts.steps as u64)?;
    let digest = run.finish()?;
    println!("stage2: {} steps over {} tasks, digest {digest}", opts.steps, tasks.len());
    Ok(())
}

pub fn add_task(c: &Common, init: Option<PathBuf>, task: Option<String>) -> Result<()> {
    let cfg = resolve(c, Some("add_task.steps"))?;
    let p = path_arg(&cfg, init, "init", "stage-2 checkpoint")?;
    let ck = load_stage(&p, &["stage2", "add_task"])?;
    let seed = ck.meta.seed;
    let mut m = ck.into_model()?;
    let id = match task.or_else(|| cfg.get("add_task.id").map(String::from)) {
        Some(t) => t,
        None => return Err(Error::Config("no task given (pass --task or set add_task.id)".into())),
    };
    let spec = cfg.task(&id)?;
    let data = load_dataset(&spec.manifest)?;
    let defaults = TrainOptions { steps: 200, learning_rate: 1e-4, ..TrainOptions::default() };
    let opts = cfg.train_options("add_task", defaults)?;
    let mut run = RunDir::create(&c.out, &cfg)?;
    run.open_log()?;
    let groups = trainer::add_task(&mut m, &spec, data, &opts, &mut |r| run.record(r))?;
    save_checkpoint(&mut run, &m, seed, "add_task", opts.steps as u64)?;
    let digest = run.finish()?;
    println!("add-task: trained {groups:?}, digest {digest}");
    Ok(())
}

/// source -> [(severity, value)]
type Curves = BTreeMap<String, Vec<(f64, f64)>>;

fn severity_plots(run: &mut RunDir, report: &EvalReport) -> Result<()> {
    let mut curves: BTreeMap<(String, String), Curves> = BTreeMap::new();
    for r in &report.rows {
        let Some(Ok(kind)) = r.degradation.rsplit_once("_s").map(|(k, s)| format!("{k}:{s}").parse::<DegradationKind>()) else {
            continue;
        };
        curves
            .entry((r.task.clone(), r.metric.clone()))
            .or_default()
            .entry(format!("{} {}", r.source, kind.name))
            .or_default()
            .push((f64::from(kind.severity), r.value.0));
    }
    for ((task, metric), series) in curves {
        let series: Vec<(String, Vec<(f64, f64)>)> = series.into_iter().collect();
        let svg = plots::line_chart(&format!("{task}: {metric}"), "severity", &series);
        run.write(&format!("plot_{task}_{metric}.svg"), svg.as_bytes())?;
    }
    Ok(())
}

pub fn eval(c: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(c, None)?;
    let p = path_arg(&cfg, checkpoint, "eval.checkpoint", "checkpoint")?;
    let ck = Checkpoint::load(&p)?;
    let ck_digest = ck.digest();
    let m = ck.into_model()?;
    let tasks = task_data(&cfg, true)?;
    let eval_tasks: Vec<EvalTask> =
        tasks.iter().map(|(s, d)| EvalTask { task_id: s.task_id.clone(), kind: s.kind, data: d }).collect();
    let opts = EvalOptions {
        seed: cfg.seed()?,
        workers: cfg.parse_or("workers", 1)?,
        batch_size: cfg.parse_or("eval.batch_size", 8)?,
    };
    let mut report = evaluate(&m, &eval_tasks, &opts)?;
    report.config_digest = cfg.digest();
    report.checkpoint_digest = ck_digest;
    let mut run = RunDir::create(&c.out, &cfg)?;
    run.write("report.json", report.to_json().as_bytes())?;
    run.write("report.csv", report.to_csv().as_bytes())?;
    if c.plots {
        severity_plots(&mut run, &report)?;
    }
    let digest = run.finish()?;
    for (k, v) in &report.summary {
        println!("{k}: {:.4}", v.0);
    }
    println!("eval: report digest {}, digest {digest}", report.digest());
    Ok(())
}

pub fn ablate(c: &Common, init: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(c, Some("ablate.stage1.steps"))?;
    let mut run = RunDir::create(&c.out, &cfg)?;
    run.open_log()?;
    let base = match init.or_else(|| cfg.get("init").map(PathBuf::from)) {
        Some(p) => {
            let ck = load_stage(&p, &["pretrain"])?;
            let mut groups = Model::backbone_groups();
            groups.extend(Model::head_groups());
            model_from(&cfg, &ck, &groups)?
        }
        None => pretrain_model(&cfg, &mut run)?,
    };
    let d = AblationOptions::default();
    let seeds: Vec<u64> = parse_list(&cfg, "ablate.seeds", "0,1,2")?;
    let tasks: Vec<TaskKind> = parse_list(&cfg, "ablate.tasks", "pir,classification,segmentation")?;
    let budget: f64 = cfg.parse_or("ablate.budget_secs", f64::INFINITY)?;
    let opts = AblationOptions {
        seeds,
        train_images: cfg.parse_or("ablate.train_images", d.train_images)?,
        test_images: cfg.parse_or("ablate.test_images", d.test_images)?,
        degradation: cfg.parse_or("ablate.degradation", d.degradation)?,
        stage1: cfg.train_options("ablate.stage1", d.stage1.clone())?,
        stage2: cfg.train_options("ablate.stage2", d.stage2.clone())?,
        tasks,
        variants: cfg.parse_or("ablate.variants", true)?,
        pir_beta: cfg.parse_or("ablate.pir_beta", d.pir_beta)?,
        budget_secs: budget.is_finite().then_some(budget),
        eval_workers: cfg.parse_or("workers", 1)?,
    };
    let table = run_ablation(&base, &opts, &mut |r| run.record(r))?;
    run.write("ablation.json", serde_json::to_string_pretty(&table).expect("table serializes").as_bytes())?;
    let md = table.to_markdown();
    run.write("ablation.md", md.as_bytes())?;
    if c.plots {
        type Column = fn(&AblationRow) -> Option<f64>;
        let metrics: [(&str, Column); 4] =
            [("psnr", |r| r.psnr), ("ssim", |r| r.ssim), ("accuracy", |r| r.accuracy), ("miou", |r| r.miou)];
        for (name, get) in metrics {
            let mut by_cfg: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for r in table.rows.iter().filter(|r| r.completed) {
                if let Some(v) = get(r) {
                    let e = by_cfg.entry(format!("{}:{}", r.table, r.name)).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            if by_cfg.is_empty() {
                continue;
            }
            let bars: Vec<(String, f64)> = by_cfg.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
            run.write(&format!("ablation_{name}.svg"), plots::bar_chart(&format!("mean {name} over seeds"), &bars).as_bytes())?;
        }
    }
    let digest = run.finish()?;
    print!("{md}");
    println!("ablate: digest {digest}");
    Ok(())
}
