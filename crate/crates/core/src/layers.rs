//! Parameterized layers: registration in a [`ParamStore`] and forward evaluation on a tape.

use rand::Rng;

use crate::error::Result;
use crate::graph::{BnMode, Graph, Var};
use crate::ops::norm::BatchStats;
use crate::params::{Module, ParamId, ParamKind, ParamStore};
use crate::region::PatchGrid;
use crate::tensor::{ConvSpec, Tensor};

/// State threaded through one forward pass.
pub struct Forward<'s> {
    pub graph: Graph,
    pub store: &'s ParamStore,
    pub train: bool,
    /// Batch statistics of every training-mode BN layer, keyed by its running-stat parameters.
    pub bn_stats: Vec<(ParamId, ParamId, BatchStats)>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, train: bool) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            train,
            bn_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

/// Registers parameters with deterministic initialization.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    fn weight(&mut self, name: &str, module: Module, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let t = Tensor::rand_normal(shape, std, self.rng);
        self.store
            .add(format!("{name}.weight"), module, ParamKind::Weight, t)
    }

    fn bias(&mut self, name: &str, module: Module, shape: &[usize]) -> ParamId {
        self.store.add(
            format!("{name}.bias"),
            module,
            ParamKind::Bias,
            Tensor::zeros(shape),
        )
    }

    pub fn conv(
        &mut self,
        name: &str,
        module: Module,
        spec: ConvSpec,
        grid: PatchGrid,
    ) -> ConvLayer {
        let r = grid.count();
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let [o, c, kh, kw] = spec.weight_shape();
        let (w, b) = if r == 1 {
            (
                self.weight(name, module, &[o, c, kh, kw], fan_in),
                self.bias(name, module, &[o]),
            )
        } else {
            (
                self.weight(name, module, &[r, o, c, kh, kw], fan_in),
                self.bias(name, module, &[r, o]),
            )
        };
        ConvLayer {
            weight: w,
            bias: b,
            spec,
            grid,
        }
    }

    pub fn batch_norm(&mut self, name: &str, module: Module, channels: usize) -> BnLayer {
        let s = &mut *self.store;
        BnLayer {
            gamma: s.add(
                format!("{name}.gamma"),
                module,
                ParamKind::BnScale,
                Tensor::ones(&[channels]),
            ),
            beta: s.add(
                format!("{name}.beta"),
                module,
                ParamKind::BnShift,
                Tensor::zeros(&[channels]),
            ),
            running_mean: s.add(
                format!("{name}.running_mean"),
                module,
                ParamKind::RunningMean,
                Tensor::zeros(&[channels]),
            ),
            running_var: s.add(
                format!("{name}.running_var"),
                module,
                ParamKind::RunningVar,
                Tensor::ones(&[channels]),
            ),
        }
    }

    /// Convolution followed by batch normalization and ReLU.
    pub fn conv_bn_relu(
        &mut self,
        name: &str,
        module: Module,
        spec: ConvSpec,
        grid: PatchGrid,
    ) -> ConvBnRelu {
        ConvBnRelu {
            conv: self.conv(&format!("{name}.conv"), module, spec, grid),
            bn: self.batch_norm(&format!("{name}.bn"), module, spec.out_channels),
        }
    }

    pub fn linear(
        &mut self,
        name: &str,
        module: Module,
        fan_in: usize,
        fan_out: usize,
    ) -> LinearLayer {
        LinearLayer {
            weight: self.weight(name, module, &[fan_out, fan_in], fan_in),
            bias: self.bias(name, module, &[fan_out]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub grid: PatchGrid,
}

impl ConvLayer {
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        if self.grid.count() == 1 {
            f.graph.conv2d(x, w, b, self.spec)
        } else {
            let (_, _, h, wd) = f.graph.value(x).dims4("patchwise_conv")?;
            let regions = self.grid.regions(h, wd)?;
            f.graph.conv_regions(x, w, b, self.spec, regions, (h, wd))
        }
    }

    /// Trainable scalars held by this layer (weights and biases).
    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.len() + store.get(self.bias).value.len()
    }
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnLayer {
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        if f.train {
            let (y, stats) = f.graph.batch_norm(x, gamma, beta, BnMode::Train)?;
            if let Some(s) = stats {
                f.bn_stats.push((self.running_mean, self.running_var, s));
            }
            Ok(y)
        } else {
            let store = f.store;
            let mode = BnMode::Eval {
                mean: store.get(self.running_mean).value.data(),
                var: store.get(self.running_var).value.data(),
            };
            Ok(f.graph.batch_norm(x, gamma, beta, mode)?.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

impl ConvBnRelu {
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(f.graph.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.graph.linear(x, w, b)
    }
}
