//! The joint AU-detection / face-alignment network.
//!
//! ```text
//! image [N,3,l,l]
//!   └─ region module ── pool2 [N,8c,l/4,l/4]
//!        ├─ alignment stack ── FC(d) ── FC(2 n_align) ── landmarks
//!        ├─ global stack
//!        └─ padding removal ── new_pool2
//!             └─ per AU: new_pool2 × refine(init map from landmarks) ── local stack
//!                  └─ summed over AUs
//!   concat(alignment, global, local) ── FC(d) ── FC(2 n_au) ── pairwise softmax ── AU probabilities
//! ```
//!
//! The concatenation order is fixed as alignment, global, local, and feature maps are flattened
//! channel-major before the fully-connected layers. Landmarks are predicted as normalized
//! coordinates and mapped to pixels by `(v + 1) * l / 2`.
//!
//! Attention centers are computed from landmark *values*; no gradient flows from the attention
//! maps back into the landmark head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, au_centers, init_attention, padding_removal, LandmarkSet, LocalBranch, RefineBranch,
    RuleTable, PAD_REMOVAL_CELLS,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Builder, Forward, LinearLayer};
use crate::losses::AuWeights;
use crate::ops::norm::BatchStats;
use crate::params::{Gradients, Module, ParamId, ParamStore};
use crate::region::{PlainStack, RegionKind, RegionModule};
use crate::tensor::Tensor;

/// Where attention centers come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSeed {
    /// The landmarks predicted by this same forward pass.
    #[default]
    Predicted,
    /// The supplied ground-truth landmarks.
    GroundTruth,
}

fn default_depth() -> usize {
    2
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// Structure and loss parameters of a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Input side length; must be a multiple of 16 (both region blocks use an 8x8 patch grid).
    pub l: usize,
    /// Base channel count.
    pub c: usize,
    /// Hidden width of both fully-connected heads.
    pub d: usize,
    pub n_align: usize,
    pub n_au: usize,
    /// Subregion width as a fraction of the attention map width.
    pub zeta: f64,
    /// Attention decay coefficient.
    pub xi: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Back-propagation enhancement factor (>= 1).
    pub lambda3: f64,
    /// Dice smoothing term.
    pub epsilon: f64,
    /// Outer eye-corner landmarks defining the inter-ocular distance.
    pub eye_corners: [usize; 2],
    /// Convolutions per plain block.
    #[serde(default = "default_depth")]
    pub plain_depth: usize,
    /// Channels inside each refinement branch.
    #[serde(default = "default_one")]
    pub refine_channels: usize,
    #[serde(default)]
    pub region_block: RegionKind,
    #[serde(default)]
    pub attention_seed: AttentionSeed,
    #[serde(default = "default_true")]
    pub backprop_enhancement: bool,
    /// Per-AU loss weights; empty means uniform.
    #[serde(default)]
    pub au_weights: Vec<f64>,
    #[serde(default)]
    pub au_rules: RuleTable,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub seed: u64,
}

impl NetConfig {
    /// Full-size configuration for 176x176 faces with 49 landmarks and 12 AUs.
    pub fn paper() -> Self {
        NetConfig {
            l: 176,
            c: 8,
            d: 512,
            n_align: 49,
            n_au: 12,
            zeta: 0.14,
            xi: 0.56,
            lambda1: 0.5,
            lambda2: 1e-7,
            lambda3: 2.0,
            epsilon: 1.0,
            eye_corners: [19, 28],
            plain_depth: 2,
            refine_channels: 1,
            region_block: RegionKind::Hmr,
            attention_seed: AttentionSeed::Predicted,
            backprop_enhancement: true,
            au_weights: Vec::new(),
            au_rules: RuleTable::default_49(),
            seed: 0,
        }
    }

    /// Desk-scale configuration matching the synthetic face generator.
    pub fn toy() -> Self {
        NetConfig {
            l: 32,
            c: 2,
            d: 64,
            n_align: crate::dataio::synth::TOY_LANDMARKS,
            n_au: crate::dataio::synth::TOY_AUS,
            eye_corners: crate::dataio::synth::TOY_EYE_CORNERS,
            au_rules: crate::dataio::synth::toy_rules(),
            ..Self::paper()
        }
    }

    /// Side of the attention maps and of `pool2`.
    pub fn map_side(&self) -> usize {
        self.l / 4
    }

    /// Side of the alignment/global/local module outputs.
    pub fn feature_side(&self) -> usize {
        self.l / 4 / 8
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.l == 0 || !self.l.is_multiple_of(16) {
            return cfg(format!("l = {} must be a positive multiple of 16", self.l));
        }
        for (name, v) in [
            ("c", self.c),
            ("d", self.d),
            ("n_align", self.n_align),
            ("n_au", self.n_au),
        ] {
            if v == 0 {
                return cfg(format!("{name} must be positive"));
            }
        }
        if !(self.lambda3 >= 1.0) {
            return cfg(format!("lambda3 = {} must be at least 1", self.lambda3));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return cfg("lambda1 and lambda2 must be non-negative".into());
        }
        if !(self.zeta > 0.0 && self.xi >= 0.0 && self.epsilon > 0.0) {
            return cfg("zeta and epsilon must be positive and xi non-negative".into());
        }
        if self.eye_corners.iter().any(|&i| i >= self.n_align) {
            return cfg(format!("eye corners {:?} out of range", self.eye_corners));
        }
        if self.au_rules.len() != self.n_au {
            return cfg(format!(
                "rule table has {} AUs but n_au = {}",
                self.au_rules.len(),
                self.n_au
            ));
        }
        self.au_rules.validate(self.n_align)?;
        if !self.au_weights.is_empty() && self.au_weights.len() != self.n_au {
            return cfg(format!(
                "{} AU weights for {} AUs",
                self.au_weights.len(),
                self.n_au
            ));
        }
        if 2 * PAD_REMOVAL_CELLS >= self.map_side() {
            return cfg(format!("attention map side {} too small", self.map_side()));
        }
        Ok(())
    }

    pub fn weights(&self) -> AuWeights {
        if self.au_weights.is_empty() {
            AuWeights::uniform(self.n_au)
        } else {
            AuWeights::from_rates_unchecked(self.au_weights.clone())
        }
    }
}

/// Supervision for one batch.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[N, 2 n_align]` interleaved pixel coordinates.
    pub landmarks: Tensor,
    /// `[N, n_au]` binary labels.
    pub labels: Tensor,
    /// Ground-truth inter-ocular distance per sample.
    pub inter_ocular: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub au: f64,
    pub softmax: f64,
    pub dice: f64,
    pub align: f64,
    pub refine: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, 2 n_align]` predicted pixel coordinates.
    pub landmarks: Tensor,
    /// `[N, n_au]` occurrence probabilities.
    pub au_probs: Tensor,
    /// `[N, n_au, l/4, l/4]` maps initialized from landmarks.
    pub initial_maps: Tensor,
    /// `[N, n_au, l/4, l/4]` refined maps.
    pub refined_maps: Tensor,
    /// `[N, 8c, l/4, l/4]` shared features.
    pub pool2: Tensor,
    pub losses: Option<LossValues>,
}

/// A forward pass and everything needed to run its backward pass.
pub struct ForwardPass {
    pub output: ForwardOutput,
    graph: Graph,
    bn_stats: Vec<(ParamId, ParamId, BatchStats)>,
    loss: Option<Var>,
    refined: Vec<Var>,
    au_loss: Option<Var>,
}

impl ForwardPass {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Refined attention map nodes, one `[N, 1, s, s]` node per AU.
    pub fn refined_vars(&self) -> &[Var] {
        &self.refined
    }

    /// Gradient reaching each refined map in the last backward pass.
    pub fn refined_grads(&self) -> Vec<Option<Tensor>> {
        self.refined
            .iter()
            .map(|&v| self.graph.grad(v).cloned())
            .collect()
    }

    pub(crate) fn au_loss_var(&self) -> Option<Var> {
        self.au_loss
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    pub store: ParamStore,
    region: RegionModule,
    align: PlainStack,
    align_fc1: LinearLayer,
    align_fc2: LinearLayer,
    global: PlainStack,
    refine: Vec<RefineBranch>,
    local: Vec<LocalBranch>,
    au_fc1: LinearLayer,
    au_fc2: LinearLayer,
}

impl Network {
    /// Registers every parameter with seeded initialization.
    pub fn build(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let c = config.c;
        let depth = config.plain_depth;
        let widths = [3 * c, 4 * c, 5 * c];
        let region = RegionModule::build(&mut b, config.l, c, config.region_block)?;
        let trunk = 8 * c;
        let align = PlainStack::build(&mut b, "align", Module::Align, trunk, &widths, depth);
        let global = PlainStack::build(&mut b, "global", Module::Global, trunk, &widths, depth);
        let side = config.feature_side();
        if side == 0 {
            return Err(Error::Config(format!(
                "l = {} leaves no spatial extent",
                config.l
            )));
        }
        let feat = 5 * c * side * side;
        let align_fc1 = b.linear("align.fc1", Module::Align, feat, config.d);
        let align_fc2 = b.linear("align.fc2", Module::Align, config.d, 2 * config.n_align);
        let mut refine = Vec::with_capacity(config.n_au);
        let mut local = Vec::with_capacity(config.n_au);
        for i in 0..config.n_au {
            refine.push(RefineBranch::build(
                &mut b,
                &format!("attention.refine{i}"),
                config.refine_channels,
            ));
            local.push(LocalBranch::build(
                &mut b,
                &format!("attention.local{i}"),
                trunk,
                &widths,
                depth,
            ));
        }
        let au_fc1 = b.linear("heads.au_fc1", Module::Heads, 3 * feat, config.d);
        let au_fc2 = b.linear("heads.au_fc2", Module::Heads, config.d, 2 * config.n_au);
        Ok(Network {
            config,
            store,
            region,
            align,
            align_fc1,
            align_fc2,
            global,
            refine,
            local,
            au_fc1,
            au_fc2,
        })
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.store
            .trainable()
            .map(|id| self.store.get(id).value.len())
            .sum()
    }

    fn seed_landmarks(&self, coords: &[f64], n: usize) -> Result<Vec<LandmarkSet>> {
        let k = 2 * self.config.n_align;
        let eyes = (self.config.eye_corners[0], self.config.eye_corners[1]);
        (0..n)
            .map(|s| {
                let mut set = LandmarkSet::from_flat(&coords[s * k..][..k], eyes)?;
                // Predicted eye corners can coincide early in training.
                set.inter_ocular = set.inter_ocular.max(1.0);
                Ok(set)
            })
            .collect()
    }

    /// Eq.-3 attention maps for a batch of landmark sets, `[N, n_au, l/4, l/4]`.
    pub fn initial_maps(&self, landmarks: &[LandmarkSet]) -> Result<Tensor> {
        let cfg = &self.config;
        let side = cfg.map_side();
        let per_sample = landmarks
            .iter()
            .map(|lm| {
                let centers = au_centers(lm, &cfg.au_rules, cfg.l, side)?;
                init_attention(&centers, cfg.zeta, cfg.xi, side)
            })
            .collect::<Result<Vec<_>>>()?;
        attention::stack_maps(&per_sample)
    }

    /// Runs the network. Losses are computed when `targets` is given. In training mode batch
    /// normalization uses batch statistics; running statistics are only changed by
    /// [`update_running_stats`](Self::update_running_stats).
    pub fn forward(
        &self,
        images: &Tensor,
        targets: Option<&Targets>,
        train: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (n, ch, h, w) = images.dims4("forward")?;
        if ch != 3 || h != cfg.l || w != cfg.l {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected [N, 3, {}, {}] images, got {:?}",
                    cfg.l,
                    cfg.l,
                    images.shape()
                ),
            ));
        }
        if let Some(t) = targets {
            if t.landmarks.shape() != [n, 2 * cfg.n_align]
                || t.labels.shape() != [n, cfg.n_au]
                || t.inter_ocular.len() != n
            {
                return Err(Error::shape("forward", "targets do not match the batch"));
            }
        }
        let mut f = Forward::new(&self.store, train);
        let x = f.graph.input(images.clone());
        let pool2 = self.region.forward(&mut f, x)?;

        let a = self.align.forward(&mut f, pool2)?;
        let a_flat = f.graph.flatten(a)?;
        let hidden = self.align_fc1.forward(&mut f, a_flat)?;
        let hidden = f.graph.relu(hidden);
        let raw = self.align_fc2.forward(&mut f, hidden)?;
        let half = cfg.l as f64 / 2.0;
        let landmarks = f.graph.affine(raw, half, half);

        let g_feat = self.global.forward(&mut f, pool2)?;

        let seed_coords = match (cfg.attention_seed, targets) {
            (AttentionSeed::Predicted, _) => f.graph.value(landmarks).data().to_vec(),
            (AttentionSeed::GroundTruth, Some(t)) => t.landmarks.data().to_vec(),
            (AttentionSeed::GroundTruth, None) => {
                return Err(Error::Config(
                    "ground-truth attention seeding needs target landmarks".into(),
                ))
            }
        };
        let seeds = self.seed_landmarks(&seed_coords, n)?;
        let initial_maps = self.initial_maps(&seeds)?;

        let new_pool2 = padding_removal(&mut f.graph, pool2, PAD_REMOVAL_CELLS)?;
        let side = cfg.map_side();
        let mut refined = Vec::with_capacity(cfg.n_au);
        let mut initial_after_removal = Vec::with_capacity(cfg.n_au);
        let mut branches = Vec::with_capacity(cfg.n_au);
        for i in 0..cfg.n_au {
            let plane = side * side;
            let mut data = Vec::with_capacity(n * plane);
            for s in 0..n {
                data.extend_from_slice(&initial_maps.data()[(s * cfg.n_au + i) * plane..][..plane]);
            }
            let init = f.graph.input(Tensor::new(&[n, 1, side, side], data)?);
            let init = padding_removal(&mut f.graph, init, PAD_REMOVAL_CELLS)?;
            initial_after_removal.push(init);
            let r = self.refine[i].forward(&mut f, init)?;
            refined.push(r);
            let gate = if cfg.backprop_enhancement {
                attention::backprop_enhance(&mut f.graph, r, cfg.lambda3)
            } else {
                r
            };
            branches.push(self.local[i].forward(&mut f, new_pool2, gate)?);
        }
        let local = attention::assemble_local(&mut f.graph, &branches)?;

        let joint = f.graph.concat_channels(&[a, g_feat, local])?;
        let joint = f.graph.flatten(joint)?;
        let hidden = self.au_fc1.forward(&mut f, joint)?;
        let hidden = f.graph.relu(hidden);
        let logits = self.au_fc2.forward(&mut f, hidden)?;
        let probs = f.graph.pair_softmax(logits)?;

        let mut loss = None;
        let mut au_loss = None;
        let mut losses = None;
        if let Some(t) = targets {
            let weights = cfg.weights();
            let g = &mut f.graph;
            let soft = g.softmax_loss(probs, &t.labels, weights.as_slice())?;
            let dice = g.dice_loss(probs, &t.labels, weights.as_slice(), cfg.epsilon)?;
            let au = g.combine(&[(soft, 1.0), (dice, 1.0)])?;
            let align = g.align_loss(landmarks, &t.landmarks, &t.inter_ocular)?;
            let mut er_terms = Vec::with_capacity(cfg.n_au);
            for (&r, &v) in refined.iter().zip(&initial_after_removal) {
                let target = g.value(v).clone();
                er_terms.push((g.consistency_loss(r, &target)?, 1.0));
            }
            let refine = g.combine(&er_terms)?;
            let total = g.combine(&[(au, 1.0), (align, cfg.lambda1), (refine, cfg.lambda2)])?;
            let scalar = |v: Var| g.value(v).data()[0];
            let values = LossValues {
                total: scalar(total),
                au: scalar(au),
                softmax: scalar(soft),
                dice: scalar(dice),
                align: scalar(align),
                refine: scalar(refine),
            };
            if !values.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {values:?}")));
            }
            losses = Some(values);
            loss = Some(total);
            au_loss = Some(au);
        }

        let stack = |g: &Graph, vars: &[Var]| -> Result<Tensor> {
            let plane = side * side;
            let mut data = vec![0.0; n * vars.len() * plane];
            for (i, &v) in vars.iter().enumerate() {
                let src = g.value(v).data();
                for s in 0..n {
                    data[(s * vars.len() + i) * plane..][..plane]
                        .copy_from_slice(&src[s * plane..][..plane]);
                }
            }
            Tensor::new(&[n, vars.len(), side, side], data)
        };
        let output = ForwardOutput {
            landmarks: f.graph.value(landmarks).clone(),
            au_probs: f.graph.value(probs).clone(),
            refined_maps: stack(&f.graph, &refined)?,
            initial_maps,
            pool2: f.graph.value(pool2).clone(),
            losses,
        };
        Ok(ForwardPass {
            output,
            graph: f.graph,
            bn_stats: f.bn_stats,
            loss,
            refined,
            au_loss,
        })
    }

    /// Gradients of the joint loss with respect to every trainable parameter.
    pub fn backward(&self, pass: &mut ForwardPass) -> Result<Gradients> {
        let loss = pass.loss.ok_or_else(|| {
            Error::Config(
                "backward needs a forward pass that computed losses (targets were not supplied)"
                    .into(),
            )
        })?;
        pass.graph.backward(loss)?;
        Ok(Gradients::from_pairs(&self.store, pass.graph.param_grads()))
    }

    /// Gradients of the detection loss alone.
    pub fn backward_au_only(&self, pass: &mut ForwardPass) -> Result<Gradients> {
        let loss = pass
            .au_loss_var()
            .ok_or_else(|| Error::Config("forward pass has no losses".into()))?;
        pass.graph.backward(loss)?;
        Ok(Gradients::from_pairs(&self.store, pass.graph.param_grads()))
    }

    /// Folds the batch statistics of a training-mode pass into the running estimates of every
    /// module for which `update` returns true.
    pub fn update_running_stats(&mut self, pass: &ForwardPass, update: impl Fn(Module) -> bool) {
        for (mean_id, var_id, stats) in &pass.bn_stats {
            if !update(self.store.get(*mean_id).module) {
                continue;
            }
            let mut mean = self.store.get(*mean_id).value.clone();
            let mut var = self.store.get(*var_id).value.clone();
            stats.update_running(mean.data_mut(), var.data_mut());
            self.store.get_mut(*mean_id).value = mean;
            self.store.get_mut(*var_id).value = var;
        }
    }
}
