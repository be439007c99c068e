//! Evaluation of a model on per-task datasets, producing an [`EvalReport`]
//! with a row per (source, task, degradation, metric).
//!
//! Samples are processed in fixed batches of `batch_size` consecutive
//! indices; workers pick up whole batches and results are merged in index
//! order, so the report does not depend on the worker count.

use std::collections::BTreeMap;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::heads::TaskKind;
use crate::metrics::{self, EvalReport, Metric, MetricRow};
use crate::model::Model;
use crate::nn::Session;
use crate::rng;
use crate::scenes::{IGNORE_LABEL, NUM_SEG_CLASSES};
use crate::tensor::Tensor;

pub const SOURCES: [&str; 2] = ["lq", "restored"];

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub workers: usize,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { seed: 0, workers: 1, batch_size: 8 }
    }
}

pub struct EvalTask<'a> {
    pub task_id: String,
    pub kind: TaskKind,
    pub data: &'a Dataset,
}

#[derive(Clone, Debug)]
enum Score {
    Image { psnr: f64, ssim: f64 },
    Class { correct: bool },
    Mask { counts: Vec<(u64, u64)> },
}

fn score(model: &Model, s: &Session, kind: TaskKind, x: &Tensor, clean: &Tensor, data: &Dataset, idx: &[usize]) -> Result<Vec<Score>> {
    match kind {
        TaskKind::Pir => (0..idx.len())
            .map(|i| {
                let (a, b) = (x.narrow(0, i, 1), clean.narrow(0, i, 1));
                Ok(Score::Image { psnr: metrics::psnr(&a, &b, 1.0)?, ssim: metrics::ssim_default(&a, &b)? })
            })
            .collect(),
        TaskKind::Classification => {
            let logits = model.heads.classifier.forward(s, s.constant(x.clone())).value();
            let k = logits.dim(1);
            idx.iter()
                .enumerate()
                .map(|(i, &j)| match data.samples[j].class_id {
                    Some(c) => Ok(Score::Class { correct: metrics::argmax(&logits.data()[i * k..(i + 1) * k]) == c }),
                    None => bail!(Config, "classification sample {j} has no class id"),
                })
                .collect()
        }
        TaskKind::Segmentation => {
            let logits = model.heads.segmenter.forward(s, s.constant(x.clone())).value();
            let pred = metrics::predict_mask(&logits);
            let hw = pred.len() / idx.len();
            idx.iter()
                .enumerate()
                .map(|(i, &j)| match &data.samples[j].mask {
                    Some(m) => Ok(Score::Mask {
                        counts: metrics::iou_counts(&pred[i * hw..(i + 1) * hw], m, NUM_SEG_CLASSES, IGNORE_LABEL)?,
                    }),
                    None => bail!(Config, "segmentation sample {j} has no mask"),
                })
                .collect()
        }
    }
}

/// `[lq, restored]` scores for every sample in `idx`.
fn eval_batch(model: &Model, task: &EvalTask, idx: &[usize], seed: u64) -> Result<Vec<[Score; 2]>> {
    let b = task.data.batch(idx);
    let tape = Tape::new();
    let s = Session::inference(&tape, &model.store);
    let seeds: Vec<u64> = idx.iter().map(|&i| rng::derive(seed, i as u64)).collect();
    let adapter = model.task_kind(&task.task_id).is_ok().then_some(task.task_id.as_str());
    let restored = model.restore(&s, s.constant(b.degraded.clone()), adapter, model.initial_noise(&seeds))?.value();
    let lq = score(model, &s, task.kind, &b.degraded, &b.clean, task.data, idx)?;
    let rs = score(model, &s, task.kind, &restored, &b.clean, task.data, idx)?;
    Ok(lq.into_iter().zip(rs).map(|(a, b)| [a, b]).collect())
}

fn eval_task(model: &Model, task: &EvalTask, opts: &EvalOptions) -> Result<Vec<[Score; 2]>> {
    let n = task.data.len();
    let chunks: Vec<Vec<usize>> =
        (0..n).step_by(opts.batch_size).map(|a| (a..(a + opts.batch_size).min(n)).collect()).collect();
    let seed = rng::derive(opts.seed, rng::derive(0x7a5c, task.task_id.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64))));
    let workers = opts.workers.clamp(1, chunks.len().max(1));
    let mut results: Vec<Option<Result<Vec<[Score; 2]>>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|sc| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let chunks = &chunks;
                sc.spawn(move || {
                    (w..chunks.len()).step_by(workers).map(|c| (c, eval_batch(model, task, &chunks[c], seed))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (c, r) in h.join().expect("eval worker panicked") {
                results[c] = Some(r);
            }
        }
    });
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r.expect("every chunk evaluated")?);
    }
    Ok(out)
}

fn aggregate(scores: &[&Score]) -> Vec<(&'static str, f64)> {
    let n = scores.len() as f64;
    match scores.first() {
        Some(Score::Image { .. }) => {
            let (mut p, mut q) = (0.0, 0.0);
            for s in scores {
                if let Score::Image { psnr, ssim } = s {
                    p += psnr;
                    q += ssim;
                }
            }
            vec![("psnr", p / n), ("ssim", q / n)]
        }
        Some(Score::Class { .. }) => {
            let c = scores.iter().filter(|s| matches!(s, Score::Class { correct: true })).count();
            vec![("accuracy", c as f64 / n)]
        }
        Some(Score::Mask { counts }) => {
            let mut total = vec![(0u64, 0u64); counts.len()];
            for s in scores {
                if let Score::Mask { counts } = s {
                    for (t, c) in total.iter_mut().zip(counts) {
                        t.0 += c.0;
                        t.1 += c.1;
                    }
                }
            }
            vec![("miou", metrics::miou_from_counts(&total).value)]
        }
        None => vec![],
    }
}

/// Evaluates every task on the degraded input (`lq`) and on the restored
/// output. Digests in the returned report are left empty for the caller.
pub fn evaluate(model: &Model, tasks: &[EvalTask], opts: &EvalOptions) -> Result<EvalReport> {
    if opts.batch_size == 0 {
        bail!(Config, "eval batch size must be positive");
    }
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    for task in tasks {
        if task.data.is_empty() {
            bail!(Config, "task {} has no evaluation data", task.task_id);
        }
        // A model without registered tasks (before stage 2) restores
        // without adapters; otherwise every evaluated task must be known.
        if model.config.use_tfa && !model.tasks().is_empty() {
            match model.task_kind(&task.task_id) {
                Ok(k) if k == task.kind => {}
                Ok(k) => bail!(Config, "task {} is registered as {k}, evaluated as {}", task.task_id, task.kind),
                Err(_) => bail!(Config, "task {} is not registered in the checkpoint", task.task_id),
            }
        }
        let scores = eval_task(model, task, opts)?;
        let mut by_deg: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in task.data.samples.iter().enumerate() {
            by_deg.entry(s.degradation.as_str()).or_default().push(i);
        }
        for (si, source) in SOURCES.iter().enumerate() {
            for (deg, idx) in &by_deg {
                let sel: Vec<&Score> = idx.iter().map(|&i| &scores[i][si]).collect();
                for (metric, value) in aggregate(&sel) {
                    rows.push(MetricRow {
                        source: source.to_string(),
                        task: task.task_id.clone(),
                        degradation: deg.to_string(),
                        metric: metric.to_string(),
                        value: Metric(value),
                        samples: idx.len(),
                    });
                }
            }
            let all: Vec<&Score> = scores.iter().map(|s| &s[si]).collect();
            for (metric, value) in aggregate(&all) {
                summary.insert(format!("{source}/{}/{metric}", task.task_id), Metric(value));
            }
        }
    }
    Ok(EvalReport { config_digest: String::new(), checkpoint_digest: String::new(), summary, rows })
}

/// Mean per-image PSNR of plain encode/decode on `images`, in batches.
pub fn reconstruction_psnr(model: &Model, images: &[Tensor], batch_size: usize) -> Result<f64> {
    if images.is_empty() || batch_size == 0 {
        bail!(Argument, "need at least one image and a positive batch size");
    }
    let mut total = 0.0;
    for chunk in images.chunks(batch_size) {
        let x = crate::image::stack(chunk);
        let tape = Tape::new();
        let s = Session::inference(&tape, &model.store);
        let y = model.reconstruct(&s, s.constant(x.clone()))?.value();
        total += metrics::psnr(&y, &x, 1.0)? * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradations::{CorruptionType, DegradationKind};
    use crate::model::ModelConfig;
    use crate::scenes;

    #[test]
    fn report_is_independent_of_worker_count() {
        let mut m = Model::new(ModelConfig::default(), 0).unwrap();
        m.add_task("pir", TaskKind::Pir).unwrap();
        m.add_task("seg", TaskKind::Segmentation).unwrap();
        let kinds = [
            DegradationKind::new(CorruptionType::GaussianNoise, 1).unwrap(),
            DegradationKind::new(CorruptionType::Fog, 2).unwrap(),
        ];
        let data = Dataset::synthesize(&scenes::generate_many(5, 64, 3), &kinds, 4).unwrap();
        let tasks = [
            EvalTask { task_id: "pir".into(), kind: TaskKind::Pir, data: &data },
            EvalTask { task_id: "seg".into(), kind: TaskKind::Segmentation, data: &data },
        ];
        let opts = EvalOptions { seed: 1, workers: 1, batch_size: 3 };
        let a = evaluate(&m, &tasks, &opts).unwrap();
        let b = evaluate(&m, &tasks, &EvalOptions { workers: 3, ..opts }).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.rows.len(), 2 * 2 * (2 + 1));
        assert!(a.summary_value("lq", "pir", "psnr").unwrap().is_finite());
        let bad = [EvalTask { task_id: "pir".into(), kind: TaskKind::Classification, data: &data }];
        assert!(matches!(evaluate(&m, &bad, &opts), Err(crate::Error::Config(_))));
    }
}
