//! Task feature adapter: per-decoder-layer gated fusion of restored encoder
//! features, steered by a task prompt that is threaded through the layers
//! like an LSTM cell state.
//!
//! For decoder layer `i` with encoder feature `F` and decoder feature `L`:
//!
//! ```text
//! f     = gate(θ_f(F))          θ_x(F) = avgpool(gelu(conv1x1(instnorm(F)))) ∈ R^D
//! i     = gate(θ_i(F))
//! C'    = f ⊙ C + i ⊙ tanh(θ_c(F))
//! o     = tanh(ξ(C'))
//! F'    = F ⊙ sigmoid(ψ(o)) + F
//! L'    = ω([F', L]) + L
//! ```
//!
//! `gate` is a softmax over the `D` prompt entries by default; a sigmoid
//! can be selected instead. `ψ` and `ω` are zero-initialized, so a fresh
//! adapter leaves the decoder features untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{DecoderHook, FeaturePyramid};
use crate::error::{bail, Error, Result};
use crate::nn::{instance_norm, Builder, Conv2d, ConvInit, Linear, ParamKey, ParamStore, Scope, Session};
use crate::tensor::Tensor;

pub const TFA: &str = "tfa";
pub const DEFAULT_PROMPT_DIM: usize = 64;
const SHARED_PROMPT: &str = "shared";

pub fn prompt_group(task: &str) -> String {
    format!("prompts.{task}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    #[default]
    Softmax,
    Sigmoid,
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(GateKind::Softmax),
            "sigmoid" => Ok(GateKind::Sigmoid),
            _ => bail!(Argument, "gate must be softmax or sigmoid, got {s:?}"),
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateKind::Softmax => "softmax",
            GateKind::Sigmoid => "sigmoid",
        })
    }
}

impl GateKind {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            GateKind::Softmax => x.softmax(1),
            GateKind::Sigmoid => x.sigmoid(),
        }
    }
}

/// A registered task prompt `C_0` of dimension `D`, stored as the single
/// tensor of group `prompts.<task_id>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskPrompt {
    pub task_id: String,
    key: ParamKey,
}

impl TaskPrompt {
    pub fn key(&self) -> &ParamKey {
        &self.key
    }

    pub fn value(&self, store: &ParamStore) -> Tensor {
        store.get(&self.key).expect("registered prompt is stored").clone()
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(&self.key).map_or(0, Tensor::numel)
    }
}

/// Task-id → prompt registry.
#[derive(Clone, Debug, Default)]
pub struct PromptBank {
    dim: usize,
    prompts: BTreeMap<String, TaskPrompt>,
}

impl PromptBank {
    pub fn new(dim: usize) -> Self {
        PromptBank { dim, prompts: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Registers `task_id` with a fresh `N(0, 0.02²)` prompt.
    pub fn register(&mut self, b: &mut Builder, task_id: &str) -> Result<TaskPrompt> {
        if task_id.is_empty() || task_id.contains(['/', ' ']) {
            bail!(Registry, "invalid task id {task_id:?}");
        }
        if self.prompts.contains_key(task_id) {
            bail!(Registry, "task {task_id:?} is already registered");
        }
        let key = Scope::new(prompt_group(task_id)).key("c0");
        let c0 = Tensor::randn(&[self.dim], 0.02, b.rng);
        b.add(key.clone(), c0);
        let p = TaskPrompt { task_id: task_id.to_string(), key };
        self.prompts.insert(task_id.to_string(), p.clone());
        Ok(p)
    }

    pub fn get(&self, task_id: &str) -> Result<&TaskPrompt> {
        self.prompts.get(task_id).ok_or_else(|| Error::Lookup(format!("no prompt registered for task {task_id:?}")))
    }

    pub fn tasks(&self) -> Vec<String> {
        self.prompts.keys().cloned().collect()
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.prompts.contains_key(task_id)
    }
}

/// `θ_x`: instance norm → 1×1 conv to `D` → GELU → global average pool.
#[derive(Clone, Debug)]
struct PromptProjection {
    conv: Conv2d,
}

impl PromptProjection {
    fn forward<'t>(&self, s: &Session<'t>, normed: Var<'t>) -> Var<'t> {
        self.conv.forward(s, normed).gelu().mean_axes(&[2, 3], false)
    }
}

#[derive(Clone, Debug)]
pub struct TfaLayer {
    channels: usize,
    dim: usize,
    theta_f: PromptProjection,
    theta_i: PromptProjection,
    theta_c: PromptProjection,
    xi: Linear,
    psi: Linear,
    omega: Conv2d,
}

impl TfaLayer {
    pub fn new(b: &mut Builder, scope: &Scope, channels: usize, dim: usize) -> Self {
        let proj = |b: &mut Builder, name: &str| PromptProjection {
            conv: Conv2d::same(b, &scope.pp(name), channels, dim, 1, ConvInit::Default),
        };
        TfaLayer {
            channels,
            dim,
            theta_f: proj(b, "theta_f"),
            theta_i: proj(b, "theta_i"),
            theta_c: proj(b, "theta_c"),
            xi: Linear::new(b, &scope.pp("xi"), dim, dim, ConvInit::Default),
            psi: Linear::new(b, &scope.pp("psi"), dim, channels, ConvInit::Zeros),
            omega: Conv2d::same(b, &scope.pp("omega"), 2 * channels, channels, 1, ConvInit::Zeros),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Forget and input gates `(B,D)` for an encoder feature.
    pub fn gates<'t>(&self, s: &Session<'t>, f_enc: Var<'t>, gate: GateKind) -> (Var<'t>, Var<'t>) {
        let normed = instance_norm(f_enc);
        (gate.apply(self.theta_f.forward(s, normed)), gate.apply(self.theta_i.forward(s, normed)))
    }

    /// One recurrence step. `c` is `(D)` or `(B,D)`; returns the fused
    /// decoder feature and the updated `(B,D)` cell state.
    pub fn forward<'t>(
        &self,
        s: &Session<'t>,
        f_enc: Var<'t>,
        f_latent: Var<'t>,
        c: Var<'t>,
        gate: GateKind,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (es, ls, cs) = (f_enc.shape(), f_latent.shape(), c.shape());
        if cs.last() != Some(&self.dim) || cs.len() > 2 {
            bail!(Argument, "prompt of shape {cs:?} does not match dimension {}", self.dim);
        }
        if es != ls || es.len() != 4 || es[1] != self.channels {
            bail!(Shape, "adapter with {} channels got encoder {es:?} and decoder {ls:?}", self.channels);
        }
        Ok(self.forward_unchecked(s, f_enc, f_latent, c, gate))
    }

    fn forward_unchecked<'t>(
        &self,
        s: &Session<'t>,
        f_enc: Var<'t>,
        f_latent: Var<'t>,
        c: Var<'t>,
        gate: GateKind,
    ) -> (Var<'t>, Var<'t>) {
        let b = f_enc.shape()[0];
        let c = if c.shape().len() == 1 { c.reshape(&[1, self.dim]) } else { c };
        let normed = instance_norm(f_enc);
        let f = gate.apply(self.theta_f.forward(s, normed));
        let i = gate.apply(self.theta_i.forward(s, normed));
        let cand = self.theta_c.forward(s, normed).tanh();
        let c_next = f.mul(c).add(i.mul(cand));
        let o = self.xi.forward(s, c_next).tanh();
        let scale = self.psi.forward(s, o).sigmoid().reshape(&[b, self.channels, 1, 1]);
        let f_enc_k = f_enc.mul(scale).add(f_enc);
        let fused = self.omega.forward(s, Var::cat(&[f_enc_k, f_latent], 1)).add(f_latent);
        (fused, c_next)
    }
}

/// One adapter layer per decoder layer, in decoder order.
#[derive(Clone, Debug)]
pub struct TfaStack {
    layers: Vec<TfaLayer>,
}

impl TfaStack {
    /// `encoder_channels` in encoder order; layers are built mirrored.
    pub fn new(b: &mut Builder, group: &str, encoder_channels: &[usize], dim: usize) -> Self {
        let scope = Scope::new(group);
        let layers = encoder_channels
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &c)| TfaLayer::new(b, &scope.pp(format!("layer{i}")), c, dim))
            .collect();
        TfaStack { layers }
    }

    pub fn layers(&self) -> &[TfaLayer] {
        &self.layers
    }

    /// Fuses decoder features that are already available (decoder layer `i`
    /// with encoder feature `M-1-i`), threading the cell state through.
    pub fn forward_layers<'t>(
        &self,
        s: &Session<'t>,
        pyramid: &FeaturePyramid<'t>,
        decoder_features: &[Var<'t>],
        c0: Var<'t>,
        gate: GateKind,
    ) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        let m = self.layers.len();
        if pyramid.len() != m || decoder_features.len() != m {
            bail!(Shape, "{m} adapter layers, {} encoder and {} decoder features", pyramid.len(), decoder_features.len());
        }
        let mut c = c0;
        let mut out = Vec::with_capacity(m);
        for (i, layer) in self.layers.iter().enumerate() {
            let (fused, next) = layer.forward(s, pyramid.features[m - 1 - i], decoder_features[i], c, gate)?;
            out.push(fused);
            c = next;
        }
        Ok((out, c))
    }
}

/// Prompt-free baseline: per layer `L + conv(gelu(conv([F, L])))`, last conv
/// zero-initialized.
#[derive(Clone, Debug)]
pub struct AdapterStack {
    layers: Vec<(Conv2d, Conv2d)>,
}

impl AdapterStack {
    pub fn new(b: &mut Builder, group: &str, encoder_channels: &[usize]) -> Self {
        let scope = Scope::new(group);
        let layers = encoder_channels
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &c)| {
                let sc = scope.pp(format!("layer{i}"));
                (
                    Conv2d::same(b, &sc.pp("mix"), 2 * c, c, 1, ConvInit::Default),
                    Conv2d::same(b, &sc.pp("out"), c, c, 1, ConvInit::Zeros),
                )
            })
            .collect();
        AdapterStack { layers }
    }
}

/// How stage-2 task adaptation is parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfaVariant {
    /// One prompt-free adapter per task.
    MultiAdapter,
    /// One adapter and prompt per task.
    MultiTfa,
    /// One shared adapter, one prompt for every task.
    SharedTfaSinglePrompt,
    /// One shared adapter, one prompt per task.
    SharedTfaPerTaskPrompt,
}

impl TfaVariant {
    pub const ALL: [TfaVariant; 4] = [
        TfaVariant::MultiAdapter,
        TfaVariant::MultiTfa,
        TfaVariant::SharedTfaSinglePrompt,
        TfaVariant::SharedTfaPerTaskPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TfaVariant::MultiAdapter => "multi_adapter",
            TfaVariant::MultiTfa => "multi_tfa",
            TfaVariant::SharedTfaSinglePrompt => "shared_tfa_single_prompt",
            TfaVariant::SharedTfaPerTaskPrompt => "shared_tfa_per_task_prompt",
        }
    }
}

impl fmt::Display for TfaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TfaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TfaVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown adapter variant {s:?}")))
    }
}

/// The decoder-side adaptation state for every registered task.
#[derive(Clone, Debug)]
pub struct Fusion {
    variant: TfaVariant,
    gate: GateKind,
    encoder_channels: Vec<usize>,
    shared: Option<TfaStack>,
    per_task: BTreeMap<String, TfaStack>,
    adapters: BTreeMap<String, AdapterStack>,
    prompts: PromptBank,
    tasks: Vec<String>,
}

impl Fusion {
    pub fn new(b: &mut Builder, variant: TfaVariant, encoder_channels: &[usize], dim: usize, gate: GateKind) -> Self {
        let mut prompts = PromptBank::new(dim);
        let shared = match variant {
            TfaVariant::SharedTfaPerTaskPrompt | TfaVariant::SharedTfaSinglePrompt => {
                Some(TfaStack::new(b, TFA, encoder_channels, dim))
            }
            _ => None,
        };
        if variant == TfaVariant::SharedTfaSinglePrompt {
            prompts.register(b, SHARED_PROMPT).expect("fresh bank");
        }
        Fusion {
            variant,
            gate,
            encoder_channels: encoder_channels.to_vec(),
            shared,
            per_task: BTreeMap::new(),
            adapters: BTreeMap::new(),
            prompts,
            tasks: Vec::new(),
        }
    }

    pub fn variant(&self) -> TfaVariant {
        self.variant
    }

    pub fn gate(&self) -> GateKind {
        self.gate
    }

    pub fn set_gate(&mut self, gate: GateKind) {
        self.gate = gate;
    }

    pub fn prompts(&self) -> &PromptBank {
        &self.prompts
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    /// Registers a task and returns the parameter groups created for it.
    pub fn add_task(&mut self, b: &mut Builder, task_id: &str) -> Result<Vec<String>> {
        if self.tasks.iter().any(|t| t == task_id) {
            bail!(Registry, "task {task_id:?} is already registered");
        }
        let created = match self.variant {
            TfaVariant::SharedTfaPerTaskPrompt => {
                self.prompts.register(b, task_id)?;
                vec![prompt_group(task_id)]
            }
            TfaVariant::SharedTfaSinglePrompt => Vec::new(),
            TfaVariant::MultiTfa => {
                let group = format!("{TFA}.{task_id}");
                self.per_task.insert(task_id.to_string(), TfaStack::new(b, &group, &self.encoder_channels, self.prompts.dim()));
                self.prompts.register(b, task_id)?;
                vec![group, prompt_group(task_id)]
            }
            TfaVariant::MultiAdapter => {
                let group = format!("adapter.{task_id}");
                self.adapters.insert(task_id.to_string(), AdapterStack::new(b, &group, &self.encoder_channels));
                vec![group]
            }
        };
        self.tasks.push(task_id.to_string());
        Ok(created)
    }

    /// Every group trained in stage 2.
    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = Vec::new();
        if self.shared.is_some() {
            g.push(TFA.to_string());
        }
        g.extend(self.per_task.keys().map(|t| format!("{TFA}.{t}")));
        g.extend(self.adapters.keys().map(|t| format!("adapter.{t}")));
        g.extend(self.prompts.tasks().iter().map(|t| prompt_group(t)));
        g
    }

    /// Builds the decoder hook that adapts features for `task_id`.
    pub fn hook<'a, 't>(
        &'a self,
        s: &'a Session<'t>,
        pyramid: &'a FeaturePyramid<'t>,
        task_id: &str,
    ) -> Result<FusionRun<'a, 't>> {
        if !self.tasks.iter().any(|t| t == task_id) {
            bail!(Lookup, "task {task_id:?} is not registered");
        }
        if pyramid.len() != self.encoder_channels.len() {
            bail!(Shape, "pyramid has {} levels, adapter expects {}", pyramid.len(), self.encoder_channels.len());
        }
        let mode = match self.variant {
            TfaVariant::MultiAdapter => RunMode::Adapter(&self.adapters[task_id]),
            TfaVariant::MultiTfa => {
                let c0 = s.param(self.prompts.get(task_id)?.key());
                RunMode::Tfa(&self.per_task[task_id], c0)
            }
            TfaVariant::SharedTfaPerTaskPrompt => {
                let c0 = s.param(self.prompts.get(task_id)?.key());
                RunMode::Tfa(self.shared.as_ref().expect("shared stack"), c0)
            }
            TfaVariant::SharedTfaSinglePrompt => {
                let c0 = s.param(self.prompts.get(SHARED_PROMPT)?.key());
                RunMode::Tfa(self.shared.as_ref().expect("shared stack"), c0)
            }
        };
        Ok(FusionRun { pyramid, gate: self.gate, mode, updates: 0 })
    }
}

enum RunMode<'a, 't> {
    Tfa(&'a TfaStack, Var<'t>),
    Adapter(&'a AdapterStack),
}

/// Live fusion state for one decode.
pub struct FusionRun<'a, 't> {
    pyramid: &'a FeaturePyramid<'t>,
    gate: GateKind,
    mode: RunMode<'a, 't>,
    updates: usize,
}

impl<'t> FusionRun<'_, 't> {
    /// Number of cell-state updates so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn cell_state(&self) -> Option<Var<'t>> {
        match self.mode {
            RunMode::Tfa(_, c) => Some(c),
            RunMode::Adapter(_) => None,
        }
    }
}

impl<'t> DecoderHook<'t> for FusionRun<'_, 't> {
    fn fuse(&mut self, s: &Session<'t>, layer: usize, latent: Var<'t>) -> Var<'t> {
        let enc = self.pyramid.features[self.pyramid.len() - 1 - layer];
        match &mut self.mode {
            RunMode::Tfa(stack, c) => {
                let (fused, next) = stack.layers[layer].forward_unchecked(s, enc, latent, *c, self.gate);
                *c = next;
                self.updates += 1;
                fused
            }
            RunMode::Adapter(stack) => {
                let (mix, out) = &stack.layers[layer];
                let h = mix.forward(s, Var::cat(&[enc, latent], 1)).gelu();
                out.forward(s, h).add(latent)
            }
        }
    }
}

/// Trainable parameter count of the stage-2 set for `num_tasks` tasks,
/// measured on a freshly built adapter.
pub fn audit_tuned_params(variant: TfaVariant, num_tasks: usize, encoder_channels: &[usize], dim: usize) -> usize {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::seeded(0);
    let mut b = Builder::new(&mut store, &mut rng);
    let mut fusion = Fusion::new(&mut b, variant, encoder_channels, dim, GateKind::Softmax);
    for k in 0..num_tasks {
        fusion.add_task(&mut b, &format!("task{k}")).expect("fresh task ids");
    }
    let groups = fusion.groups();
    groups.iter().map(|g| store.numel(g)).sum()
}
