//! Named parameter storage, seeded initialization, and the per-forward
//! binding context that maps parameter names onto graph leaves.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchNormMode, BatchStats, Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable tensors plus non-trainable buffers (batchnorm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    trainable: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

pub fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Parameters exempt from weight decay: norm affines and the curvature kernel.
pub fn skips_weight_decay(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta") || name.contains("curvature")
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if is_buffer_name(&name) {
            self.buffers.insert(name, value);
        } else {
            self.trainable.insert(name, value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.trainable.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if is_buffer_name(name) {
            self.buffers.get_mut(name)
        } else {
            self.trainable.get_mut(name)
        }
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.trainable.iter()
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.trainable.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Trainable and buffer tensors, in name order.
    pub fn all(&self) -> Vec<(&String, &Tensor)> {
        let mut v: Vec<_> = self.trainable.iter().chain(self.buffers.iter()).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.trainable.keys().cloned().collect()
    }

    pub fn all_names(&self) -> BTreeSet<String> {
        self.trainable
            .keys()
            .chain(self.buffers.keys())
            .cloned()
            .collect()
    }

    /// Total element count over trainable tensors.
    pub fn count(&self) -> usize {
        self.trainable.values().map(Tensor::numel).sum()
    }

    /// Folds batch statistics into running estimates.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats) -> Result<()> {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let buf = self
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))?;
            for (r, f) in buf.data_mut().iter_mut().zip(fresh) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * f;
            }
        }
        Ok(())
    }
}

/// Draws parameters from a seeded stream in registration order.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    params: ModelParams,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ModelParams::new(),
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
    }

    /// `[k, k, cin, cout]` weight (and `[cout]` bias) uniform in `±sqrt(1/fan_in)`.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, bias: bool) {
        let bound = (1.0 / (k * k * cin) as f64).sqrt();
        let w = self.uniform(&[k, k, cin, cout], bound);
        self.params.insert(format!("{name}.weight"), w);
        if bias {
            let b = self.uniform(&[cout], bound);
            self.params.insert(format!("{name}.bias"), b);
        }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.params
            .insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.params
            .insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) {
        self.layer_norm(name, c);
        self.params
            .insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.params
            .insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.params.insert(name, value);
    }

    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        t.data_mut().iter_mut().for_each(|v| *v = value);
        Ok(())
    }

    pub fn finish(self) -> ModelParams {
        self.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates collected for update.
    Train,
    /// Running statistics.
    Eval,
}

/// One forward pass: a fresh graph plus the parameters bound into it.
pub struct Ctx<'p> {
    pub graph: Graph,
    params: &'p ModelParams,
    bound: BTreeMap<String, Var>,
    pub mode: Mode,
    track: bool,
    pub bn_stats: Vec<(String, BatchStats)>,
}

impl<'p> Ctx<'p> {
    /// `track` decides whether parameters become gradient-tracked leaves.
    pub fn new(params: &'p ModelParams, mode: Mode, track: bool) -> Self {
        Ctx {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            mode,
            track,
            bn_stats: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    /// Leaf for parameter `name`, bound once per context.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.require(name)?.clone();
        let v = self.graph.leaf(t, self.track);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.params.get(&bias_name).is_some() {
            Some(self.p(&bias_name)?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, stride, pad)
    }

    /// Same-size convolution for odd kernels.
    pub fn conv_same(&mut self, x: Var, name: &str) -> Result<Var> {
        let k = self.params.require(&format!("{name}.weight"))?.shape()[0];
        self.conv(x, name, 1, k / 2)
    }

    pub fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        self.graph.layer_norm(x, g, b)
    }

    pub fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, g, b, BatchNormMode::Train)?;
                if let Some(s) = stats {
                    self.bn_stats.push((name.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let params = self.params;
                let mean = params.require(&format!("{name}.running_mean"))?.data();
                let var = params.require(&format!("{name}.running_var"))?.data();
                let (y, _) = self
                    .graph
                    .batch_norm(x, g, b, BatchNormMode::Eval { mean, var })?;
                Ok(y)
            }
        }
    }

    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.graph.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                layer: layer.to_string(),
            })
        }
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradient for every trainable parameter; zeros where the loss does not
    /// reach a parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .trainable()
            .map(|(name, t)| {
                let g = match self.bound.get(name) {
                    Some(&v) => grads.get_or_zeros(v),
                    None => Tensor::zeros(t.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}
