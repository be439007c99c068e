//! In-memory datasets built from manifests, and seeded batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::degradations::{apply_degradation, DatasetManifest, ManifestEntry};
use crate::error::{bail, Result};
use crate::heads::{Target, TaskKind};
use crate::image;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub class_id: Option<usize>,
    pub mask: Option<Vec<u8>>,
    /// `kind_sN` of the corruption that produced `degraded`.
    pub degradation: String,
}

impl Sample {
    pub fn from_entry(e: &ManifestEntry) -> Result<Self> {
        let (clean, degraded) = e.load_pair()?;
        let mask = match e.mask_path() {
            Some(p) => {
                let (h, w, m) = image::load_mask(p)?;
                if (h, w) != (clean.dim(1), clean.dim(2)) {
                    bail!(Shape, "mask {} is {h}x{w}, image is {:?}", p.display(), clean.shape());
                }
                Some(m)
            }
            None => None,
        };
        Ok(Sample { clean, degraded, class_id: e.class(), mask, degradation: e.degradation()?.to_string() })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub class_ids: Vec<Option<usize>>,
    pub masks: Vec<Option<Vec<u8>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Supervision for `kind`; every sample must carry the needed label.
    pub fn target(&self, kind: TaskKind) -> Result<Target> {
        match kind {
            TaskKind::Pir => Ok(Target::Clean(self.clean.clone())),
            TaskKind::Classification => match self.class_ids.iter().copied().collect::<Option<Vec<_>>>() {
                Some(c) => Ok(Target::Classes(c)),
                None => bail!(Config, "classification task needs class ids for every sample"),
            },
            TaskKind::Segmentation => match self.masks.iter().cloned().collect::<Option<Vec<_>>>() {
                Some(m) => Ok(Target::Masks(m.concat())),
                None => bail!(Config, "segmentation task needs a mask for every sample"),
            },
        }
    }
}

impl Dataset {
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        if m.entries.is_empty() {
            bail!(Config, "manifest has no entries");
        }
        Ok(Dataset { samples: m.entries.iter().map(Sample::from_entry).collect::<Result<_>>()? })
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        Dataset::from_manifest(&DatasetManifest::read(manifest)?)
    }

    /// Degrades in-memory images directly (no files), one entry per
    /// (image, kind) with per-entry seeds derived from `seed`.
    pub fn synthesize(
        scenes: &[crate::scenes::Scene],
        kinds: &[crate::degradations::DegradationKind],
        seed: u64,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(scenes.len() * kinds.len());
        for sc in scenes {
            for k in kinds {
                let idx = samples.len() as u64;
                samples.push(Sample {
                    clean: sc.image.clone(),
                    degraded: apply_degradation(&sc.image, *k, rng::derive(seed, idx))?,
                    class_id: Some(sc.class_id),
                    mask: Some(sc.mask.clone()),
                    degradation: k.to_string(),
                });
            }
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let pick = |f: fn(&Sample) -> &Tensor| image::stack(&idx.iter().map(|&i| f(&self.samples[i]).clone()).collect::<Vec<_>>());
        Batch {
            clean: pick(|s| &s.clean),
            degraded: pick(|s| &s.degraded),
            class_ids: idx.iter().map(|&i| self.samples[i].class_id).collect(),
            masks: idx.iter().map(|&i| self.samples[i].mask.clone()).collect(),
        }
    }
}

/// Epoch-wise shuffled batches; epoch `e` uses a permutation seeded by
/// `(seed, e)`, so the sequence is reproducible and resumable.
#[derive(Clone, Debug)]
pub struct Sampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n > 0 && batch > 0);
        let mut s = Sampler { n, batch, seed, epoch: 0, order: Vec::new(), pos: 0 };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng::seeded(rng::derive(self.seed, self.epoch)));
        self.pos = 0;
    }

    /// Next `batch` indices, wrapping into the next epoch when needed.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
