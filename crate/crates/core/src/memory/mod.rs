//! Step memories (prompt plus low-rank projection updates), class prototypes
//! and the append-only memory pool with its on-disk container.

mod format;
mod prototype;

pub use format::{decode_pool, encode_pool, load_pool, save_pool, MAGIC, VERSION};
pub use prototype::{build_prototypes, crop_resize, PrototypeConfig};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::{lora_param_name, projection_slots, DetectorConfig, DetectorError, PROMPT_PARAM};
use crate::tensor::{ParamStore, SeededRng, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("out-of-order memorization: expected step {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },
    #[error("benchmark integrity error: {0}")]
    Integrity(String),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("invalid memory: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

pub type Result<T, E = MemoryError> = std::result::Result<T, E>;

/// Learned prompt of `prompt_length x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMemory {
    pub prompt: Tensor,
}

/// Down matrix `a` (`r x d`) and up matrix `b` (`d x r`); the update is `b a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// Low-rank pairs of one fusion layer, keyed by projection slot.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMemoryLayer {
    pub slots: BTreeMap<String, LowRankPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMemory {
    pub layers: Vec<InteractionMemoryLayer>,
}

/// Concept and interaction memory of one step. A zero prompt length leaves
/// the concept memory absent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMemories {
    pub concept: Option<ConceptMemory>,
    pub interaction: InteractionMemory,
}

impl StepMemories {
    /// Fresh step-1 memories: prompt ~ N(0, 0.02), A ~ N(0, 1/r), B = 0.
    pub fn initial(config: &DetectorConfig, rng: &mut SeededRng) -> Self {
        let d = config.d_model;
        let r = config.lora_rank;
        let concept = (config.prompt_length > 0).then(|| ConceptMemory {
            prompt: Tensor::from_fn([config.prompt_length, d], |_| rng.normal(0.0, 0.02)),
        });
        let layers = (0..config.lora_layers)
            .map(|_| InteractionMemoryLayer {
                slots: projection_slots(config.tie_qk)
                    .iter()
                    .map(|&s| {
                        let a = Tensor::from_fn([r, d], |_| rng.normal(0.0, 1.0 / r as f64));
                        (s.to_string(), LowRankPair { a, b: Tensor::zeros([d, r]) })
                    })
                    .collect(),
            })
            .collect();
        Self {
            concept,
            interaction: InteractionMemory { layers },
        }
    }

    /// Parameter store with detector naming; flags select what is trainable.
    pub fn to_store(&self, train_concept: bool, train_interaction: bool) -> ParamStore {
        let mut s = ParamStore::new();
        if let Some(c) = &self.concept {
            s.insert(PROMPT_PARAM, c.prompt.clone().with_requires_grad(train_concept))
                .expect("unique name");
        }
        for (l, layer) in self.interaction.layers.iter().enumerate() {
            for (slot, pair) in &layer.slots {
                s.insert(lora_param_name(l, slot, "a"), pair.a.clone().with_requires_grad(train_interaction))
                    .expect("unique name");
                s.insert(lora_param_name(l, slot, "b"), pair.b.clone().with_requires_grad(train_interaction))
                    .expect("unique name");
            }
        }
        s
    }

    /// Inverse of [`StepMemories::to_store`]; gradients and flags are dropped.
    pub fn from_store(store: &ParamStore, config: &DetectorConfig) -> Result<Self> {
        let fetch = |name: &str, shape: [usize; 2]| -> Result<Tensor> {
            let t = store
                .get(name)
                .ok_or_else(|| MemoryError::Invalid(format!("`{name}` missing")))?;
            if t.shape() != shape {
                return Err(MemoryError::Invalid(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(Tensor::new(shape.to_vec(), t.data().to_vec())?)
        };
        let (d, r) = (config.d_model, config.lora_rank);
        let concept = if config.prompt_length > 0 {
            Some(ConceptMemory {
                prompt: fetch(PROMPT_PARAM, [config.prompt_length, d])?,
            })
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.lora_layers);
        for l in 0..config.lora_layers {
            let mut slots = BTreeMap::new();
            for &slot in projection_slots(config.tie_qk) {
                let a = fetch(&lora_param_name(l, slot, "a"), [r, d])?;
                let b = fetch(&lora_param_name(l, slot, "b"), [d, r])?;
                slots.insert(slot.to_string(), LowRankPair { a, b });
            }
            layers.push(InteractionMemoryLayer { slots });
        }
        Ok(Self {
            concept,
            interaction: InteractionMemory { layers },
        })
    }

    /// Named tensors in store order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(c) = &self.concept {
            out.push((PROMPT_PARAM.to_string(), &c.prompt));
        }
        for (l, layer) in self.interaction.layers.iter().enumerate() {
            for (slot, pair) in &layer.slots {
                out.push((lora_param_name(l, slot, "a"), &pair.a));
                out.push((lora_param_name(l, slot, "b"), &pair.b));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Whether every up matrix is exactly zero.
    pub fn up_matrices_zero(&self) -> bool {
        self.interaction
            .layers
            .iter()
            .flat_map(|l| l.slots.values())
            .all(|p| p.b.data().iter().all(|&v| v == 0.0))
    }
}

/// Memories and prototypes learned at one step; never modified once stored.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTriplet {
    pub step: usize,
    pub label_set: Vec<String>,
    /// One unit vector per class, in label-set order.
    pub prototypes: Vec<Vec<f64>>,
    pub memories: StepMemories,
}

impl MemoryTriplet {
    pub fn new(
        step: usize,
        label_set: Vec<String>,
        prototypes: Vec<Vec<f64>>,
        memories: StepMemories,
    ) -> Result<Self> {
        if label_set.is_empty() {
            return Err(MemoryError::Invalid("empty label set".into()));
        }
        if prototypes.len() != label_set.len() {
            return Err(MemoryError::Invalid(format!(
                "{} prototypes for {} classes",
                prototypes.len(),
                label_set.len()
            )));
        }
        for p in &prototypes {
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(MemoryError::Invalid(format!("prototype norm {n} is not 1")));
            }
        }
        Ok(Self {
            step,
            label_set,
            prototypes,
            memories,
        })
    }

    /// SHA-256 over the step, labels, prototypes and every memory tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.step as u64).to_le_bytes());
        for l in &self.label_set {
            h.update(l.as_bytes());
            h.update([0]);
        }
        for p in &self.prototypes {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        for (name, t) in self.memories.named_tensors() {
            h.update(name.as_bytes());
            h.update([0]);
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Ordered, append-only collection of step triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPool {
    config: DetectorConfig,
    triplets: Vec<MemoryTriplet>,
}

impl MemoryPool {
    pub fn new(config: DetectorConfig) -> Self {
        Self {
            config,
            triplets: Vec::new(),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn triplets(&self) -> &[MemoryTriplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn last(&self) -> Option<&MemoryTriplet> {
        self.triplets.last()
    }

    pub fn step(&self, step: usize) -> Option<&MemoryTriplet> {
        self.triplets.iter().find(|t| t.step == step)
    }

    /// Append the next step's triplet.
    pub fn memorize(&mut self, triplet: MemoryTriplet) -> Result<()> {
        let expected = self.triplets.last().map_or(1, |t| t.step + 1);
        if triplet.step != expected {
            return Err(MemoryError::Sequencing {
                expected,
                got: triplet.step,
            });
        }
        let reference = StepMemories::initial(&self.config, &mut SeededRng::new(0));
        if triplet.memories.named_tensors().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).ne(reference
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec())))
        {
            return Err(MemoryError::Invalid("memory layout does not match the pool config".into()));
        }
        if triplet.prototypes.iter().any(|p| p.len() != self.config.d_model) {
            return Err(MemoryError::Invalid("prototype width differs from d_model".into()));
        }
        self.triplets.push(triplet);
        Ok(())
    }

    /// Added parameters of each stored step and their running total.
    pub fn added_params(&self) -> (Vec<usize>, Vec<usize>) {
        let per: Vec<usize> = self.triplets.iter().map(|t| t.memories.num_params()).collect();
        let cum = per
            .iter()
            .scan(0, |acc, &n| {
                *acc += n;
                Some(*acc)
            })
            .collect();
        (per, cum)
    }
}

/// Memories to start step `|pool| + 1` from: fresh ones for an empty pool,
/// otherwise a deep copy of the last stored step.
pub fn init_step_memories(pool: &MemoryPool, rng: &mut SeededRng) -> StepMemories {
    match pool.last() {
        Some(t) => t.memories.clone(),
        None => StepMemories::initial(pool.config(), rng),
    }
}

/// Added parameters of one triplet, split into prompt and per-layer parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub prompt: usize,
    pub per_layer: usize,
    pub layers: usize,
    pub total: usize,
}

/// Low-rank parameters for adapting projections of the given `(in, out)` shapes.
pub fn low_rank_params(rank: usize, projections: &[(usize, usize)]) -> usize {
    projections.iter().map(|&(i, o)| rank * (i + o)).sum()
}

pub fn affine_count(prompt: usize, per_layer: usize, layers: usize) -> ParamCount {
    ParamCount {
        prompt,
        per_layer,
        layers,
        total: prompt + layers * per_layer,
    }
}

/// Added parameters of one step under `config`.
pub fn count_added_params(config: &DetectorConfig) -> ParamCount {
    let d = config.d_model;
    let shapes = vec![(d, d); projection_slots(config.tie_qk).len()];
    affine_count(
        config.prompt_length * d,
        low_rank_params(config.lora_rank, &shapes),
        config.lora_layers,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> DetectorConfig {
        DetectorConfig {
            d_model: 8,
            n_heads: 2,
            fusion_layers: 2,
            prompt_length: 3,
            lora_rank: 2,
            lora_layers: 2,
            ..Default::default()
        }
    }

    fn triplet(step: usize, mem: StepMemories) -> MemoryTriplet {
        let mut p = vec![0.0; 8];
        p[0] = 1.0;
        MemoryTriplet::new(step, vec!["red circle".into()], vec![p], mem).unwrap()
    }

    #[test]
    fn fresh_memories_have_zero_up_matrices() {
        let pool = MemoryPool::new(config());
        let m = init_step_memories(&pool, &mut SeededRng::new(3));
        assert!(m.up_matrices_zero());
        assert_eq!(m.interaction.layers.len(), 2);
        assert_eq!(m.concept.as_ref().unwrap().prompt.shape(), &[3, 8]);
    }

    #[test]
    fn later_steps_copy_previous_memories() {
        let mut pool = MemoryPool::new(config());
        let mut rng = SeededRng::new(3);
        let mut m = init_step_memories(&pool, &mut rng);
        m.interaction.layers[0].slots.get_mut("v_it").unwrap().b.data_mut()[0] = 0.5;
        pool.memorize(triplet(1, m.clone())).unwrap();
        let before = pool.triplets()[0].digest();
        let mut next = init_step_memories(&pool, &mut rng);
        assert_eq!(next, m);
        next.concept.as_mut().unwrap().prompt.data_mut()[0] = 9.0;
        assert_eq!(pool.triplets()[0].digest(), before);
    }

    #[test]
    fn memorize_enforces_order() {
        let mut pool = MemoryPool::new(config());
        let m = init_step_memories(&pool, &mut SeededRng::new(1));
        assert!(pool.memorize(triplet(1, m.clone())).is_ok());
        assert_eq!(pool.len(), 1);
        assert_eq!(
            pool.memorize(triplet(3, m)),
            Err(MemoryError::Sequencing { expected: 2, got: 3 })
        );
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn store_round_trip() {
        let cfg = config();
        let m = StepMemories::initial(&cfg, &mut SeededRng::new(2));
        let s = m.to_store(true, false);
        assert!(s.is_trainable(PROMPT_PARAM));
        assert!(!s.is_trainable("inc.0.v_it.b"));
        assert_eq!(StepMemories::from_store(&s, &cfg).unwrap(), m);
        assert_eq!(s.num_scalars(), count_added_params(&cfg).total);
    }

    #[test]
    fn prompt_only_count() {
        let mut cfg = config();
        cfg.lora_layers = 0;
        assert_eq!(count_added_params(&cfg).total, 3 * 8);
    }
}
