//! Flat `key = value` run configuration with `include` and typed views.
//!
//! ```text
//! # comment
//! include = base.cfg
//! model.cfrm_groups = 4
//! train.steps = 200
//! task.cls.kind = classification
//! task.cls.beta = 1.0
//! task.cls.manifest = data/cls.jsonl
//! ```
//!
//! Later assignments override earlier ones; an included file is spliced in
//! at the point of the `include` line. Relative include paths resolve
//! against the including file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::heads::{TaskKind, TaskSpec};
use crate::model::ModelConfig;
use crate::trainer::TrainOptions;

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::new();
        cfg.merge_file(path, &mut Vec::new())?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        cfg.merge_text(text, None, &mut Vec::new())?;
        Ok(cfg)
    }

    fn merge_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        let canon = path.canonicalize().map_err(|e| Error::io(path, e))?;
        if stack.contains(&canon) {
            bail!(Config, "include cycle through {}", path.display());
        }
        if stack.len() >= MAX_INCLUDE_DEPTH {
            bail!(Config, "includes nested deeper than {MAX_INCLUDE_DEPTH}");
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        stack.push(canon);
        let r = self.merge_text(&text, Some(path), stack);
        stack.pop();
        r
    }

    fn merge_text(&mut self, text: &str, origin: Option<&Path>, stack: &mut Vec<PathBuf>) -> Result<()> {
        let where_ = |n: usize| match origin {
            Some(p) => format!("{}:{}", p.display(), n + 1),
            None => format!("line {}", n + 1),
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "{}: expected key = value", where_(n));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                bail!(Config, "{}: bad key {k:?}", where_(n));
            }
            if k == "include" {
                let base = origin.and_then(Path::parent).unwrap_or(Path::new("."));
                self.merge_file(&base.join(v), stack)?;
            } else {
                self.values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Applies `key=value` overrides, as given on a command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.as_ref().split_once('=') else {
                bail!(Config, "override {:?} is not key=value", o.as_ref());
            };
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        match self.get(key) {
            Some(v) => Ok(v),
            None => bail!(Config, "missing required key {key}"),
        }
    }

    fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))))
                .collect(),
        }
    }

    /// Canonical text: one sorted `key = value` line per entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse_or("seed", 0)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let mut c = d.clone();
        c.encoder.channels = self.list_or("model.channels", d.encoder.channels.clone())?;
        c.encoder.layers = c.encoder.channels.len();
        c.encoder.image_size = self.parse_or("model.image_size", d.encoder.image_size)?;
        c.encoder.latent_channels = self.parse_or("model.latent_channels", d.encoder.latent_channels)?;
        c.cfrm_groups = self.parse_or("model.cfrm_groups", d.cfrm_groups)?;
        c.use_cfrm = self.parse_or("model.use_cfrm", d.use_cfrm)?;
        c.use_tfa = self.parse_or("model.use_tfa", d.use_tfa)?;
        c.controller_hidden = self.parse_or("model.controller_hidden", d.controller_hidden)?;
        c.diffusion_steps = self.parse_or("model.diffusion_steps", d.diffusion_steps)?;
        c.beta_start = self.parse_or("model.beta_start", d.beta_start)?;
        c.beta_end = self.parse_or("model.beta_end", d.beta_end)?;
        c.sample_steps = self.parse_or("model.sample_steps", d.sample_steps)?;
        c.prompt_dim = self.parse_or("model.prompt_dim", d.prompt_dim)?;
        c.variant = self.get("model.variant").map(str::parse).transpose().map_err(as_config)?.unwrap_or(d.variant);
        c.gate = self.get("model.gate").map(str::parse).transpose().map_err(as_config)?.unwrap_or(d.gate);
        c.validate()?;
        Ok(c)
    }

    /// Options under `prefix` (`pretrain`, `stage1`, ...), falling back to
    /// the given defaults.
    pub fn train_options(&self, prefix: &str, defaults: TrainOptions) -> Result<TrainOptions> {
        let k = |name: &str| format!("{prefix}.{name}");
        let o = TrainOptions {
            steps: self.parse_or(&k("steps"), defaults.steps)?,
            batch_size: self.parse_or(&k("batch_size"), defaults.batch_size)?,
            learning_rate: self.parse_or(&k("learning_rate"), defaults.learning_rate)?,
            seed: self.parse_or(&k("seed"), self.seed()?)?,
            start_step: defaults.start_step,
            lambdas: self.list_or(&k("lambdas"), defaults.lambdas)?,
            cosine: self.parse_or(&k("cosine"), defaults.cosine)?,
        };
        o.validate()?;
        Ok(o)
    }

    /// Every `task.<id>.*` block, in id order.
    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        let mut ids: Vec<&str> = self
            .values
            .keys()
            .filter_map(|k| k.strip_prefix("task."))
            .filter_map(|k| k.rsplit_once('.').map(|(id, _)| id))
            .collect();
        ids.dedup();
        ids.into_iter().map(|id| self.task(id)).collect()
    }

    pub fn task(&self, id: &str) -> Result<TaskSpec> {
        let k = |name: &str| format!("task.{id}.{name}");
        let kind: TaskKind = self.require(&k("kind"))?.parse().map_err(as_config)?;
        let spec = TaskSpec {
            task_id: id.to_string(),
            kind,
            beta: self.parse_or(&k("beta"), 1.0)?,
            manifest: PathBuf::from(self.require(&k("manifest"))?),
            head_checkpoint: self.get(&k("head_checkpoint")).map(PathBuf::from),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Argument(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn include_and_override_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "seed = 1\nmodel.cfrm_groups = 2 # inline\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "seed = 5\ninclude = base.cfg\ntrain.steps = 3\n").unwrap();
        let mut c = RunConfig::load(&dir.path().join("run.cfg")).unwrap();
        assert_eq!(c.seed().unwrap(), 1);
        assert_eq!(c.model_config().unwrap().cfrm_groups, 2);
        let d = c.digest();
        c.apply_overrides(&["seed=9"]).unwrap();
        assert_eq!(c.seed().unwrap(), 9);
        assert_ne!(c.digest(), d);
        assert_eq!(RunConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn include_cycle_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.cfg"), "include = b.cfg\n").unwrap();
        std::fs::write(dir.path().join("b.cfg"), "include = a.cfg\n").unwrap();
        assert!(matches!(RunConfig::load(&dir.path().join("a.cfg")), Err(Error::Config(_))));
    }

    #[test]
    fn tasks_and_bad_values() {
        let c = RunConfig::parse_str(
            "task.seg.kind = seg\ntask.seg.manifest = s.jsonl\ntask.cls.kind = classification\ntask.cls.beta = 0.5\ntask.cls.manifest = c.jsonl\n",
        )
        .unwrap();
        let t = c.tasks().unwrap();
        assert_eq!(t.iter().map(|s| s.task_id.as_str()).collect::<Vec<_>>(), ["cls", "seg"]);
        assert_eq!(t[0].beta, 0.5);
        assert_eq!(t[1].kind, TaskKind::Segmentation);
        for bad in ["task.x.kind = pir\ntask.x.manifest = m\ntask.x.beta = -1", "model.gate = tanh", "seed = abc", "no equals"] {
            let r = RunConfig::parse_str(bad).and_then(|c| {
                c.seed()?;
                c.model_config()?;
                c.tasks()
            });
            assert!(matches!(r, Err(Error::Config(_))), "{bad}: {r:?}");
        }
    }
}
