//! The assembled restorer: restoration-augmented encoder, latent controller,
//! adapter-augmented decoder, plus the frozen task heads.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{Controller, Decoder, Encoder, EncoderConfig, FeatureHook, NoiseSchedule, CONTROLLER, DECODER, ENCODER, TUNER};
use crate::cfrm::{cfrm_feature_loss, CfrmStack, CFRM};
use crate::error::{bail, Result};
use crate::heads::{Heads, TaskKind, HEADS};
use crate::nn::{Builder, ParamStore, Session};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::tfa::{Fusion, GateKind, TfaVariant, DEFAULT_PROMPT_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cfrm_groups: usize,
    /// When false the encoder runs without restoration blocks.
    pub use_cfrm: bool,
    /// When false the decoder runs without adapters.
    pub use_tfa: bool,
    pub controller_hidden: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Denoising steps at inference.
    pub sample_steps: usize,
    pub prompt_dim: usize,
    pub variant: TfaVariant,
    pub gate: GateKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            cfrm_groups: 4,
            use_cfrm: true,
            use_tfa: true,
            controller_hidden: 32,
            diffusion_steps: 50,
            beta_start: 0.002,
            beta_end: 0.4,
            sample_steps: 1,
            prompt_dim: DEFAULT_PROMPT_DIM,
            variant: TfaVariant::SharedTfaPerTaskPrompt,
            gate: GateKind::Softmax,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.diffusion_steps < 2 || !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            bail!(Config, "invalid noise schedule: {} steps, beta {}..{}", self.diffusion_steps, self.beta_start, self.beta_end);
        }
        if self.sample_steps == 0 || self.sample_steps > self.diffusion_steps {
            bail!(Config, "sample_steps must be in 1..={}", self.diffusion_steps);
        }
        if self.prompt_dim == 0 || self.controller_hidden < 4 {
            bail!(Config, "prompt_dim and controller_hidden must be positive (hidden >= 4)");
        }
        for &c in &self.encoder.channels {
            crate::cfrm::CfrmConfig::new(c, self.cfrm_groups)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub heads: Heads,
    pub cfrm: CfrmStack,
    pub controller: Controller,
    pub fusion: Fusion,
    tasks: Vec<(String, TaskKind)>,
    rng: Rng,
}

/// Stage-1 loss terms.
pub struct Stage1Terms<'t> {
    pub cfrm: Var<'t>,
    pub control: Var<'t>,
}

impl Model {
    /// Builds every module with weights drawn from `seed`. Groups are
    /// created in a fixed order so the same seed always gives the same
    /// weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed);
        let mut b = Builder::new(&mut store, &mut r);
        let encoder = Encoder::new(&mut b, &config.encoder);
        let decoder = Decoder::new(&mut b, &config.encoder);
        let heads = Heads::new(&mut b);
        let cfrm = CfrmStack::new(&mut b, &config.encoder.channels, config.cfrm_groups)?;
        let schedule = NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end);
        let controller = Controller::new(&mut b, &config.encoder, config.controller_hidden, schedule);
        let fusion = Fusion::new(&mut b, config.variant, &config.encoder.channels, config.prompt_dim, config.gate);
        Ok(Model { config, store, encoder, decoder, heads, cfrm, controller, fusion, tasks: Vec::new(), rng: r })
    }

    pub fn tasks(&self) -> &[(String, TaskKind)] {
        &self.tasks
    }

    pub fn task_kind(&self, task_id: &str) -> Result<TaskKind> {
        match self.tasks.iter().find(|(t, _)| t == task_id) {
            Some((_, k)) => Ok(*k),
            None => bail!(Lookup, "task {task_id:?} is not registered"),
        }
    }

    /// Registers a task and returns the parameter groups created for it.
    pub fn add_task(&mut self, task_id: &str, kind: TaskKind) -> Result<Vec<String>> {
        if self.tasks.iter().any(|(t, _)| t == task_id) {
            bail!(Registry, "task {task_id:?} is already registered");
        }
        let mut b = Builder::new(&mut self.store, &mut self.rng);
        let groups = self.fusion.add_task(&mut b, task_id)?;
        self.tasks.push((task_id.to_string(), kind));
        Ok(groups)
    }

    /// Replaces the listed groups with those of `other`; shapes must match.
    pub fn load_groups(&mut self, other: &ParamStore, groups: &[String]) -> Result<()> {
        for g in groups {
            let Some(src) = other.group(g) else {
                bail!(State, "parameter group {g:?} missing from the source checkpoint");
            };
            let Some(dst) = self.store.group(g) else {
                bail!(State, "model has no parameter group {g:?}");
            };
            if src.params().len() != dst.params().len() {
                bail!(State, "group {g:?}: {} tensors in source, {} expected", src.params().len(), dst.params().len());
            }
            for (name, t) in dst.params() {
                match src.params().get(name) {
                    Some(v) if v.shape() == t.shape() => {}
                    Some(v) => bail!(State, "{g}/{name}: shape {:?} in source, {:?} expected", v.shape(), t.shape()),
                    None => bail!(State, "{g}/{name} missing from source"),
                }
            }
            let frozen = dst.frozen;
            let mut copy = src.clone();
            copy.frozen = frozen;
            self.store.insert_group(g, copy);
        }
        Ok(())
    }

    pub fn backbone_groups() -> Vec<String> {
        [ENCODER, DECODER].map(String::from).to_vec()
    }

    pub fn stage1_groups() -> Vec<String> {
        [CFRM, CONTROLLER, TUNER].map(String::from).to_vec()
    }

    pub fn head_groups() -> Vec<String> {
        vec![HEADS.to_string()]
    }

    /// Groups trained in stage 2.
    pub fn stage2_groups(&self) -> Vec<String> {
        self.fusion.groups()
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        self.config.encoder.latent_shape(batch)
    }

    /// One `N(0,1)` latent per seed, stacked.
    pub fn initial_noise(&self, seeds: &[u64]) -> Tensor {
        let shape = self.latent_shape(1);
        let parts: Vec<Tensor> =
            seeds.iter().map(|&s| Tensor::randn(&shape, 1.0, &mut rng::seeded(s))).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::cat(&refs, 0)
    }

    fn restoration_hook(&self) -> Option<&dyn for<'t> FeatureHook<'t>> {
        self.config.use_cfrm.then_some(&self.cfrm as &dyn for<'t> FeatureHook<'t>)
    }

    /// Degraded batch → restored batch in `[0,1]`. `task` selects the
    /// adapter prompt; `None` (or a model without adapters) decodes plainly.
    pub fn restore<'t>(&self, s: &Session<'t>, degraded: Var<'t>, task: Option<&str>, noise: Tensor) -> Result<Var<'t>> {
        let (pyramid, control) = self.encoder.encode(s, degraded, self.restoration_hook())?;
        let z0 = self.controller.sample(s, control, noise, self.config.sample_steps)?;
        match task {
            Some(t) if self.config.use_tfa => {
                let mut run = self.fusion.hook(s, &pyramid, t)?;
                self.decoder.decode(s, z0, Some(&mut run))
            }
            _ => self.decoder.decode(s, z0, None),
        }
    }

    /// Plain autoencoder reconstruction.
    pub fn reconstruct<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, z) = self.encoder.encode(s, x, None)?;
        self.decoder.decode(s, z, None)
    }

    /// Feature restoration loss against the vanilla encoder on the clean
    /// image, and the latent loss `mean((z0 - ẑ0^t)²)` at timestep `t`.
    pub fn stage1_terms<'t>(
        &self,
        s: &Session<'t>,
        clean: &Tensor,
        degraded: &Tensor,
        t: usize,
        eps: &Tensor,
        lambdas: &[f64],
    ) -> Result<Stage1Terms<'t>> {
        let (clear, z0) = self.encoder.encode(s, s.constant(clean.clone()), None)?;
        let (restored, control) = self.encoder.encode(s, s.constant(degraded.clone()), self.restoration_hook())?;
        let cfrm = if self.config.use_cfrm {
            cfrm_feature_loss(&restored, &clear, lambdas)?
        } else {
            s.constant(Tensor::scalar(0.0))
        };
        let z0v = z0.value();
        let zt = self.controller.schedule().add_noise(&z0v, eps, t)?;
        let pred = self.controller.predict(s, s.constant(zt), t, control)?;
        let control_loss = pred.sub(s.constant((*z0v).clone())).sqr().mean_all();
        Ok(Stage1Terms { cfrm, control: control_loss })
    }
}
