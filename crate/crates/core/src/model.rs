//! Model configuration, named parameter storage and the per-step forward session.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::hex_digest;
use crate::emotion::EmotionClass;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    /// Longest segment any single modality embedder accepts.
    pub max_len: usize,
    pub visual_dim: usize,
    pub acoustic_dim: usize,
    pub teacher_classes: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 189,
            hidden: 48,
            heads: 4,
            layers: 4,
            ffn_mult: 4,
            max_len: 128,
            visual_dim: 32,
            acoustic_dim: 32,
            teacher_classes: crate::corpus::TEACHER_CLASSES,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.hidden,
            self.heads,
            self.layers,
            self.ffn_mult,
            self.max_len,
            self.visual_dim,
            self.acoustic_dim,
            self.teacher_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.hidden < 2 {
            return Err(Error::Config("hidden size must be at least 2 for layer norm".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Fresh parameters for embedders, backbone and all pre-training heads.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut init = Init::new(seed, self.init_std);
        let mut p = ParamStore::default();
        let h = self.hidden;

        p.insert("embed.text.tokens", init.normal(&[self.vocab_size, h]));
        for (m, din) in [("visual", self.visual_dim), ("acoustic", self.acoustic_dim)] {
            p.insert(format!("embed.{m}.proj.weight"), init.normal(&[din, h]));
            p.insert(format!("embed.{m}.proj.bias"), Tensor::zeros(&[h]));
        }
        for m in ["text", "visual", "acoustic"] {
            p.insert(format!("embed.{m}.positions"), init.normal(&[self.max_len, h]));
            p.insert(format!("embed.{m}.types"), init.normal(&[3, h]));
            p.insert_layer_norm(&format!("embed.{m}.ln"), h);
        }

        let ffn = h * self.ffn_mult;
        for l in 0..self.layers {
            let pre = format!("layers.{l}");
            p.insert_layer_norm(&format!("{pre}.ln1"), h);
            for w in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.attn.{w}.weight"), init.normal(&[h, h]));
                p.insert(format!("{pre}.attn.{w}.bias"), Tensor::zeros(&[h]));
            }
            p.insert_layer_norm(&format!("{pre}.ln2"), h);
            p.insert(format!("{pre}.ffn.in.weight"), init.normal(&[h, ffn]));
            p.insert(format!("{pre}.ffn.in.bias"), Tensor::zeros(&[ffn]));
            p.insert(format!("{pre}.ffn.out.weight"), init.normal(&[ffn, h]));
            p.insert(format!("{pre}.ffn.out.bias"), Tensor::zeros(&[h]));
        }
        p.insert_layer_norm("final_ln", h);

        p.insert("head.mlm.transform.weight", init.normal(&[h, h]));
        p.insert("head.mlm.transform.bias", Tensor::zeros(&[h]));
        p.insert_layer_norm("head.mlm.ln", h);
        p.insert("head.mlm.out_bias", Tensor::zeros(&[self.vocab_size]));
        for (name, out) in [
            ("visual_reg", self.visual_dim),
            ("acoustic_reg", self.acoustic_dim),
            ("visual_cls", self.teacher_classes),
        ] {
            p.insert(format!("head.{name}.weight"), init.normal(&[h, out]));
            p.insert(format!("head.{name}.bias"), Tensor::zeros(&[out]));
        }
        Ok(p)
    }

    /// A fresh `[H × 4]` emotion classifier plus bias.
    pub fn init_classifier(&self, seed: u64) -> ParamStore {
        let mut init = Init::new(seed ^ 0xC1A5_51F1, self.init_std);
        let mut p = ParamStore::default();
        p.insert(CLASSIFIER_WEIGHT, init.normal(&[self.hidden, EmotionClass::COUNT]));
        p.insert(CLASSIFIER_BIAS, Tensor::zeros(&[EmotionClass::COUNT]));
        p
    }
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

struct Init {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
}

impl Init {
    fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: Normal::new(0.0, std).expect("finite init std"),
        }
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    fn insert_layer_norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.gain"), Tensor::filled(&[dim], 1.0));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }
}

/// Which parameters receive gradients during a session.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Trainable {
    #[default]
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|pre| name.starts_with(pre.as_str())),
        }
    }
}

/// One forward pass: a fresh graph plus lazily registered parameter leaves.
pub struct Session<'p> {
    pub graph: Graph,
    pub config: &'p ModelConfig,
    params: &'p ParamStore,
    trainable: Trainable,
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl<'p> Session<'p> {
    pub fn new(config: &'p ModelConfig, params: &'p ParamStore, trainable: Trainable) -> Self {
        Self {
            graph: Graph::new(),
            config,
            params,
            trainable,
            vars: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = if self.trainable.allows(name) {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// `x · W + b` for parameters `{prefix}.weight` / `{prefix}.bias`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.layer_norm(x, g, b, self.config.ln_eps)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every trainable parameter touched by this session,
    /// in first-use order; parameters the loss never reached get zeros.
    pub fn gradients(&self) -> Vec<(String, Tensor)> {
        self.order
            .iter()
            .filter(|n| self.trainable.allows(n))
            .map(|n| (n.clone(), self.graph.grad_or_zeros(self.vars[n])))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}
