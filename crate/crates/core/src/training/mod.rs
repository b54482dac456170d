//! Optimization: SGD with momentum, learning-rate decay, staged training with module freezing,
//! and evaluation passes.
//!
//! All training randomness comes from one generator seeded with [`TrainSchedule::seed`]: each
//! epoch first shuffles the sample order, then draws augmentation parameters sample by sample
//! in batch order.

pub mod augment;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::network::{LossValues, Network, Targets};
use crate::params::{Gradients, Module, ParamStore};
use crate::tensor::Tensor;

pub use augment::{augment, fit, AugmentConfig, FlipTable, Similarity};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Option<Vec<f64>>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One classic-momentum step on every trainable parameter whose module passes `update`:
/// `v = momentum v + g + wd p`, `p -= lr v`. Weight decay applies to weights and biases only.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut SgdState,
    hp: SgdParams,
    update: impl Fn(Module) -> bool,
) -> Result<()> {
    state.velocity.resize(store.len(), None);
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let param = store.get_mut(id);
        if !update(param.module) {
            continue;
        }
        let wd = if param.kind.decays() {
            hp.weight_decay
        } else {
            0.0
        };
        let n = param.value.len();
        let grad = grads.get(id);
        if let Some(g) = grad {
            if g.len() != n {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient of {} has the wrong size", param.name),
                ));
            }
        }
        let v = state.velocity[id.index()].get_or_insert_with(|| vec![0.0; n]);
        let p = param.value.data_mut();
        for i in 0..n {
            let g = grad.map_or(0.0, |g| g.data()[i]);
            v[i] = hp.momentum * v[i] + g + wd * p[i];
            p[i] -= hp.lr * v[i];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    /// Modules updated during this stage; the rest stay frozen.
    pub modules: Vec<Module>,
    pub lambda1: f64,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub stages: Vec<Stage>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl TrainSchedule {
    /// Eight joint epochs, two alignment-only epochs, two global/attention epochs.
    pub fn paper() -> Self {
        TrainSchedule {
            stages: vec![
                Stage {
                    modules: Module::ALL.to_vec(),
                    lambda1: 0.5,
                    epochs: 8,
                    lr: 0.01,
                },
                Stage {
                    modules: vec![Module::Align],
                    lambda1: 1.0,
                    epochs: 2,
                    lr: 0.001,
                },
                Stage {
                    modules: vec![Module::Global, Module::Attention],
                    lambda1: 1.0,
                    epochs: 2,
                    lr: 0.001,
                },
            ],
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 9,
            lr_decay_factor: 0.3,
            lr_decay_every_epochs: 2,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    /// The same three stages sized for the synthetic toy set.
    pub fn toy() -> Self {
        let mut s = Self::paper();
        s.stages[0].epochs = 60;
        s.stages[1].epochs = 15;
        s.stages[2].epochs = 25;
        s.batch_size = 8;
        s.lr_decay_every_epochs = 20;
        s.augment.enabled = false;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return err("schedule has no stages".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 || s.modules.is_empty() || !(s.lr > 0.0) || !(s.lambda1 >= 0.0) {
                return err(format!(
                    "stage {} needs epochs > 0, modules, lr > 0 and lambda1 >= 0",
                    i + 1
                ));
            }
        }
        if self.batch_size == 0 || self.lr_decay_every_epochs == 0 {
            return err("batch_size and lr_decay_every_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
            || !(self.lr_decay_factor > 0.0)
        {
            return err(
                "momentum must be in [0, 1), weight_decay >= 0, lr_decay_factor > 0".into(),
            );
        }
        Ok(())
    }

    /// `lr0 * factor^floor(epoch / every)` for a 0-based epoch within a stage.
    pub fn lr(&self, lr0: f64, epoch: usize) -> f64 {
        lr0 * self
            .lr_decay_factor
            .powi((epoch / self.lr_decay_every_epochs) as i32)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

/// Per-epoch means of the training losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based stage number.
    pub stage: usize,
    /// 1-based epoch counted over the whole run.
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossValues,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        let l = &self.losses;
        format!(
            "epoch={} stage={} lr={:.6e} loss={:.10e} e_au={:.10e} softmax={:.10e} dice={:.10e} e_align={:.10e} e_r={:.10e}",
            self.epoch, self.stage, self.lr, l.total, l.au, l.softmax, l.dice, l.align, l.refine
        )
    }
}

/// Parameter hash of a frozen module before and after a stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeCheck {
    pub stage: usize,
    pub module: Module,
    pub before: u64,
    pub after: u64,
}

impl FreezeCheck {
    pub fn held(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub freeze_checks: Vec<FreezeCheck>,
}

impl TrainReport {
    /// The metrics log, one line per epoch.
    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| l.to_line() + "\n").collect()
    }
}

/// Stacks preprocessed samples into a batch with ground-truth targets.
fn assemble(
    net: &Network,
    samples: Vec<(Tensor, Vec<f64>)>,
    labels: Vec<Vec<f64>>,
) -> Result<(Tensor, Targets)> {
    let cfg = &net.config;
    let n = samples.len();
    let eyes = (cfg.eye_corners[0], cfg.eye_corners[1]);
    let mut inter = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n * 2 * cfg.n_align);
    let mut images = Vec::with_capacity(n);
    for (img, lm) in samples {
        if lm.len() != 2 * cfg.n_align {
            return Err(Error::Data(format!(
                "{} landmark coordinates, {} expected",
                lm.len(),
                2 * cfg.n_align
            )));
        }
        let pts: Vec<(f64, f64)> = lm.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        inter.push(crate::attention::inter_ocular(&pts, eyes)?);
        coords.extend_from_slice(&lm);
        images.push(img);
    }
    if labels.iter().any(|l| l.len() != cfg.n_au) {
        return Err(Error::Data(format!(
            "label vectors must have {} entries",
            cfg.n_au
        )));
    }
    let l = cfg.l;
    if let Some(img) = images.iter().find(|t| t.shape() != [3, l, l]) {
        return Err(Error::shape(
            "batch",
            format!("expected [3, {l}, {l}] images, got {:?}", img.shape()),
        ));
    }
    let images = Tensor::new(
        &[n, 3, l, l],
        images
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect(),
    )?;
    Ok((
        images,
        Targets {
            landmarks: Tensor::new(&[n, 2 * cfg.n_align], coords)?,
            labels: Tensor::new(&[n, cfg.n_au], labels.concat())?,
            inter_ocular: inter,
        },
    ))
}

/// Batch of samples preprocessed deterministically with [`fit`].
pub fn eval_batch(net: &Network, data: &Dataset, indices: &[usize]) -> Result<(Tensor, Targets)> {
    let l = net.config.l;
    let samples = indices
        .iter()
        .map(|&i| fit(&data.images[i], &data.landmarks[i], l))
        .collect::<Result<Vec<_>>>()?;
    assemble(
        net,
        samples,
        indices.iter().map(|&i| data.labels[i].clone()).collect(),
    )
}

/// Runs every stage of `schedule`. Losses are always computed jointly; only the stage's modules
/// are updated (parameters and BN running statistics). `on_epoch` runs after every epoch.
pub fn run_schedule(
    net: &mut Network,
    data: &Dataset,
    schedule: &TrainSchedule,
    flip: &FlipTable,
    mut on_epoch: impl FnMut(&Network, &EpochLog) -> Result<()>,
) -> Result<TrainReport> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let perm = flip.permutation(net.config.n_align)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_counter = 0;
    for (si, stage) in schedule.stages.iter().enumerate() {
        let active = |m: Module| stage.modules.contains(&m);
        let frozen: Vec<Module> = Module::ALL.into_iter().filter(|&m| !active(m)).collect();
        let before: Vec<u64> = frozen.iter().map(|&m| net.store.module_hash(m)).collect();
        net.config.lambda1 = stage.lambda1;
        let mut state = SgdState::new();
        for e in 0..stage.epochs {
            epoch_counter += 1;
            let lr = schedule.lr(stage.lr, e);
            order.shuffle(&mut rng);
            let mut sums = [0.0; 6];
            let mut seen = 0usize;
            for chunk in order.chunks(schedule.batch_size) {
                let samples = chunk
                    .iter()
                    .map(|&i| {
                        augment(
                            &data.images[i],
                            &data.landmarks[i],
                            net.config.l,
                            &schedule.augment,
                            &perm,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let labels = chunk.iter().map(|&i| data.labels[i].clone()).collect();
                let (images, targets) = assemble(net, samples, labels)?;
                let mut pass = net.forward(&images, Some(&targets), true)?;
                let losses = pass.output.losses.expect("targets were supplied");
                let grads = net.backward(&mut pass)?;
                let hp = SgdParams {
                    lr,
                    momentum: schedule.momentum,
                    weight_decay: schedule.weight_decay,
                };
                sgd_step(&mut net.store, &grads, &mut state, hp, active)?;
                net.update_running_stats(&pass, active);
                let k = chunk.len() as f64;
                for (s, v) in sums.iter_mut().zip([
                    losses.total,
                    losses.au,
                    losses.softmax,
                    losses.dice,
                    losses.align,
                    losses.refine,
                ]) {
                    *s += k * v;
                }
                seen += chunk.len();
            }
            let m = |i: usize| sums[i] / seen as f64;
            let entry = EpochLog {
                stage: si + 1,
                epoch: epoch_counter,
                lr,
                losses: LossValues {
                    total: m(0),
                    au: m(1),
                    softmax: m(2),
                    dice: m(3),
                    align: m(4),
                    refine: m(5),
                },
            };
            log::info!("{}", entry.to_line());
            on_epoch(net, &entry)?;
            report.log.push(entry);
        }
        for (&module, &b) in frozen.iter().zip(&before) {
            report.freeze_checks.push(FreezeCheck {
                stage: si + 1,
                module,
                before: b,
                after: net.store.module_hash(module),
            });
        }
    }
    Ok(report)
}

/// Eval-mode predictions over a dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub probs: Vec<Vec<f64>>,
    pub landmarks: Vec<Vec<f64>>,
    /// Ground-truth landmarks after preprocessing.
    pub truth_landmarks: Vec<Vec<f64>>,
    pub inter_ocular: Vec<f64>,
    /// Sample-weighted mean losses.
    pub losses: LossValues,
}

/// Runs the network in eval mode over `data` in batches of `batch_size`.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let parts = indices
        .par_chunks(batch_size)
        .map(|chunk| {
            let (images, targets) = eval_batch(net, data, chunk)?;
            let pass = net.forward(&images, Some(&targets), false)?;
            Ok((chunk.len(), pass.output, targets))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = &net.config;
    let mut out = Evaluation {
        probs: Vec::new(),
        landmarks: Vec::new(),
        truth_landmarks: Vec::new(),
        inter_ocular: Vec::new(),
        losses: LossValues {
            total: 0.0,
            au: 0.0,
            softmax: 0.0,
            dice: 0.0,
            align: 0.0,
            refine: 0.0,
        },
    };
    let total = data.len() as f64;
    for (k, o, t) in parts {
        out.probs
            .extend(o.au_probs.data().chunks(cfg.n_au).map(<[f64]>::to_vec));
        out.landmarks.extend(
            o.landmarks
                .data()
                .chunks(2 * cfg.n_align)
                .map(<[f64]>::to_vec),
        );
        out.truth_landmarks.extend(
            t.landmarks
                .data()
                .chunks(2 * cfg.n_align)
                .map(<[f64]>::to_vec),
        );
        out.inter_ocular.extend(t.inter_ocular);
        let l = o.losses.expect("targets were supplied");
        let w = k as f64 / total;
        out.losses.total += w * l.total;
        out.losses.au += w * l.au;
        out.losses.softmax += w * l.softmax;
        out.losses.dice += w * l.dice;
        out.losses.align += w * l.align;
        out.losses.refine += w * l.refine;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn one_param(value: f64, kind: ParamKind) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Module::Heads, kind, Tensor::scalar(value));
        s
    }

    #[test]
    fn plain_gradient_step() {
        let mut s = one_param(1.0, ParamKind::Weight);
        let id = s.id("p").unwrap();
        let g = Gradients::from_pairs(&s, vec![(id, Tensor::scalar(0.5))]);
        let hp = SgdParams {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut s, &g, &mut SgdState::new(), hp, |_| true).unwrap();
        assert_eq!(s.get(id).value.data()[0], 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = one_param(3.0, ParamKind::Weight);
        let id = s.id("p").unwrap();
        let mut st = SgdState::new();
        let hp = SgdParams {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        for _ in 0..200 {
            let x = s.get(id).value.data()[0];
            let g = Gradients::from_pairs(&s, vec![(id, Tensor::scalar(2.0 * x))]);
            sgd_step(&mut s, &g, &mut st, hp, |_| true).unwrap();
        }
        assert!(s.get(id).value.data()[0].powi(2) < 1e-6);
    }

    #[test]
    fn weight_decay_is_geometric() {
        let mut s = one_param(2.0, ParamKind::Weight);
        let id = s.id("p").unwrap();
        let hp = SgdParams {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
        };
        let g = Gradients::new(&s);
        let mut st = SgdState::new();
        for step in 1..=5 {
            sgd_step(&mut s, &g, &mut st, hp, |_| true).unwrap();
            let expect = 2.0 * (1.0f64 - 0.05).powi(step);
            assert!((s.get(id).value.data()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn no_decay_on_bn_and_frozen_untouched() {
        let mut s = one_param(2.0, ParamKind::BnScale);
        let id = s.id("p").unwrap();
        let hp = SgdParams {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
        };
        let none = Gradients::new(&s);
        sgd_step(&mut s, &none, &mut SgdState::new(), hp, |_| true).unwrap();
        assert_eq!(s.get(id).value.data()[0], 2.0);
        let mut w = one_param(2.0, ParamKind::Weight);
        let none = Gradients::new(&w);
        sgd_step(&mut w, &none, &mut SgdState::new(), hp, |m| {
            m != Module::Heads
        })
        .unwrap();
        assert_eq!(w.get(id).value.data()[0], 2.0);
    }

    #[test]
    fn lr_schedule() {
        let s = TrainSchedule::paper();
        let expect = [1.0, 1.0, 0.3, 0.3, 0.09, 0.09, 0.027, 0.027, 0.0081];
        for (e, f) in expect.iter().enumerate() {
            assert!((s.lr(0.01, e) - 0.01 * f).abs() < 1e-15);
        }
    }

    #[test]
    fn paper_stages() {
        let s = TrainSchedule::paper();
        s.validate().unwrap();
        assert_eq!(s.stages.len(), 3);
        assert_eq!(
            (s.stages[0].epochs, s.stages[0].lambda1, s.stages[0].lr),
            (8, 0.5, 0.01)
        );
        assert_eq!(s.stages[1].modules, vec![Module::Align]);
        assert_eq!(s.stages[2].modules, vec![Module::Global, Module::Attention]);
        assert_eq!(s.batch_size, 9);
    }
}
