//! Parameter storage, freezing, and binding parameters onto a tape.
//!
//! Weights live in a [`ParamStore`] organised in named [`ParamGroup`]s
//! (`encoder`, `cfrm`, `prompts.<task>`, ...). Modules only hold
//! [`ParamKey`]s; a [`Session`] turns keys into tape variables for one
//! forward pass, as differentiable leaves only when the owning group is
//! unfrozen.

mod layers;
mod optim;

pub use layers::{instance_norm, Conv2d, ConvInit, GroupNorm, LayerNorm2d, Linear, NafBlock};
pub use optim::Adam;

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: String,
    pub name: String,
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.group, self.name)
    }
}

/// Naming scope for parameters, in the spirit of a var-builder prefix.
#[derive(Clone, Debug)]
pub struct Scope {
    group: String,
    prefix: String,
}

impl Scope {
    pub fn new(group: impl Into<String>) -> Self {
        Scope { group: group.into(), prefix: String::new() }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Scope { group: self.group.clone(), prefix }
    }

    pub fn key(&self, name: &str) -> ParamKey {
        let name = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        ParamKey { group: self.group.clone(), name }
    }

    pub fn group(&self) -> &str {
        &self.group
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroup {
    pub frozen: bool,
    params: BTreeMap<String, Tensor>,
}

impl ParamGroup {
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn digest_into(&self, h: &mut Sha256) {
        for (name, t) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: BTreeMap<String, ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &ParamKey, value: Tensor) {
        self.groups.entry(key.group.clone()).or_default().params.insert(key.name.clone(), value);
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.groups.get(&key.group)?.params.get(&key.name)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        self.groups.get_mut(&key.group)?.params.get_mut(&key.name)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.get(name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.get_mut(name)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &ParamGroup)> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.keys().cloned().collect()
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    pub fn remove_group(&mut self, name: &str) -> Option<ParamGroup> {
        self.groups.remove(name)
    }

    pub fn insert_group(&mut self, name: &str, group: ParamGroup) {
        self.groups.insert(name.to_string(), group);
    }

    /// Adds `N(0, std²)` noise to every tensor of a group.
    pub fn jitter(&mut self, group: &str, std: f64, rng: &mut ChaCha8Rng) {
        if let Some(g) = self.groups.get_mut(group) {
            for t in g.params.values_mut() {
                t.add_assign(&Tensor::randn(t.shape(), std, rng));
            }
        }
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.groups.get(group).is_none_or(|g| g.frozen)
    }

    pub fn freeze_all(&mut self) {
        self.groups.values_mut().for_each(|g| g.frozen = true);
    }

    /// Freezes every group except those for which `trainable` is true.
    pub fn set_trainable(&mut self, trainable: impl Fn(&str) -> bool) {
        for (name, g) in self.groups.iter_mut() {
            g.frozen = !trainable(name);
        }
    }

    pub fn trainable_groups(&self) -> Vec<String> {
        self.groups.iter().filter(|(_, g)| !g.frozen).map(|(n, _)| n.clone()).collect()
    }

    pub fn numel(&self, group: &str) -> usize {
        self.groups.get(group).map_or(0, ParamGroup::numel)
    }

    pub fn trainable_numel(&self) -> usize {
        self.groups.values().filter(|g| !g.frozen).map(ParamGroup::numel).sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of a group.
    pub fn digest(&self, group: &str) -> String {
        let mut h = Sha256::new();
        h.update(group.as_bytes());
        if let Some(g) = self.groups.get(group) {
            g.digest_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.groups.keys().map(|k| (k.clone(), self.digest(k))).collect()
    }
}

/// Everything a module constructor needs: where to put weights and the
/// randomness to initialise them.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng }
    }

    pub fn add(&mut self, key: ParamKey, value: Tensor) -> ParamKey {
        self.store.insert(&key, value);
        key
    }
}

/// Binds stored parameters onto a tape for one forward/backward pass.
pub struct Session<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    track: bool,
    bound: RefCell<BTreeMap<ParamKey, Var<'t>>>,
}

impl<'t> Session<'t> {
    /// Unfrozen parameters become differentiable leaves.
    pub fn train(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Session { tape, store, track: true, bound: RefCell::default() }
    }

    /// Every parameter is a constant.
    pub fn inference(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Session { tape, store, track: false, bound: RefCell::default() }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn param(&self, key: &ParamKey) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(key) {
            return *v;
        }
        let value = self.store.get(key).unwrap_or_else(|| panic!("missing parameter {key}")).clone();
        let v = if self.track && !self.store.is_frozen(&key.group) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(key.clone(), v);
        v
    }

    /// Keys of parameters bound as differentiable leaves so far.
    pub fn tracked(&self) -> Vec<ParamKey> {
        self.bound.borrow().iter().filter(|(_, v)| v.requires_grad()).map(|(k, _)| k.clone()).collect()
    }

    /// Gradients for every tracked parameter (zeros where the loss did not
    /// depend on it).
    pub fn gradients(&self, grads: &mut Grads) -> BTreeMap<ParamKey, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| {
                let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}
