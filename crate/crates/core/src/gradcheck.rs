//! Central finite-difference verification of analytic gradients.
//!
//! Each check builds a scalar from graph inputs and parameters, runs one backward pass and
//! compares a sample of gradient entries with `(f(x + h) - f(x - h)) / 2h`. The relative error
//! of an entry is `|a - n| / max(|a|, |n|, floor)`; the floor keeps round-off on vanishing
//! gradients from dominating.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{padding_removal, RefineBranch, RuleTable};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::layers::{Builder, Forward};
use crate::network::{AttentionSeed, NetConfig, Network, Targets};
use crate::params::{Module, ParamStore};
use crate::region::{HmrBlock, PatchGrid, PlainStack, RegionBlock};
use crate::tensor::{ConvSpec, Tensor};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Maximum number of gradient entries compared per check.
    pub max_entries: usize,
    pub tolerance: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            floor: 1e-5,
            max_entries: 60,
            tolerance: OP_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.checked > 0
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} seed={} entries={:<3} max_rel_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.seed,
            self.checked,
            self.max_rel_err,
            self.tolerance
        )
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Where a checked entry lives.
#[derive(Clone, Copy)]
enum Slot {
    Input(usize, usize),
    Param(usize, usize),
}

/// Checks the gradient of `build` with respect to every input and every trainable parameter of
/// `store` (sampling at most `opts.max_entries` entries). `build` must return a scalar and runs
/// in training mode.
pub fn check<F>(
    name: &str,
    seed: u64,
    store: &ParamStore,
    inputs: &[Tensor],
    build: F,
    opts: &CheckOptions,
) -> Result<CheckResult>
where
    F: Fn(&mut Forward<'_>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut f = Forward::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|t| f.graph.variable(t.clone())).collect();
        let out = build(&mut f, &vars)?;
        Ok(f.graph.value(out).data()[0])
    };

    let mut f = Forward::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| f.graph.variable(t.clone())).collect();
    let out = build(&mut f, &vars)?;
    if f.graph.value(out).len() != 1 {
        return Err(Error::shape(
            "gradcheck",
            "checked function must return a scalar",
        ));
    }
    f.graph.backward(out)?;
    let param_grads = f.graph.param_grads();

    let mut slots = Vec::new();
    let mut analytic = Vec::new();
    for (i, (v, t)) in vars.iter().zip(inputs).enumerate() {
        let g = f
            .graph
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            slots.push(Slot::Input(i, j));
            analytic.push(g.data()[j]);
        }
    }
    for (id, g) in &param_grads {
        if !store.get(*id).kind.is_trainable() {
            continue;
        }
        for j in 0..g.len() {
            slots.push(Slot::Param(id.index(), j));
            analytic.push(g.data()[j]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let picked: Vec<usize> = if slots.len() > opts.max_entries {
        let mut p = index::sample(&mut rng, slots.len(), opts.max_entries).into_vec();
        p.sort_unstable();
        p
    } else {
        (0..slots.len()).collect()
    };

    let mut worst: f64 = 0.0;
    for &k in &picked {
        let probe = |delta: f64| -> Result<f64> {
            match slots[k] {
                Slot::Input(i, j) => {
                    let mut ins = inputs.to_vec();
                    ins[i].data_mut()[j] += delta;
                    eval(store, &ins)
                }
                Slot::Param(p, j) => {
                    let mut s = store.clone();
                    let id = s.iter().nth(p).map(|(id, _)| id).expect("parameter exists");
                    s.get_mut(id).value.data_mut()[j] += delta;
                    eval(&s, inputs)
                }
            }
        };
        let numeric = (probe(opts.step)? - probe(-opts.step)?) / (2.0 * opts.step);
        worst = worst.max(rel_err(analytic[k], numeric, opts.floor));
    }
    Ok(CheckResult {
        name: name.to_string(),
        seed,
        max_rel_err: worst,
        checked: picked.len(),
        tolerance: opts.tolerance,
    })
}

/// A fixed pseudo-random projection of `x` to a scalar, identical on every call.
pub fn project(g: &mut Graph, x: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = (0..g.value(x).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    g.weighted_sum(x, w)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

type OpBuild = Box<dyn Fn(&mut Forward<'_>, &[Var]) -> Result<Var>>;

/// Every differentiable graph operation and composite block, at one seed.
pub fn op_suite(seed: u64, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let empty = ParamStore::new();
    let mut cases: Vec<(&str, Vec<Tensor>, OpBuild)> = Vec::new();
    let conv = ConvSpec::same3(2, 3);
    cases.push((
        "conv2d",
        vec![
            uniform(r, &[1, 2, 5, 5], -1.0, 1.0),
            uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(r, &[3], -1.0, 1.0),
        ],
        Box::new(move |f, v| {
            let y = f.graph.conv2d(v[0], v[1], v[2], conv)?;
            project(&mut f.graph, y)
        }),
    ));
    let strided = ConvSpec {
        kernel_h: 2,
        kernel_w: 3,
        stride: 2,
        padding: 1,
        in_channels: 2,
        out_channels: 2,
    };
    cases.push((
        "conv2d_strided",
        vec![
            uniform(r, &[2, 2, 6, 5], -1.0, 1.0),
            uniform(r, &[2, 2, 2, 3], -1.0, 1.0),
            uniform(r, &[2], -1.0, 1.0),
        ],
        Box::new(move |f, v| {
            let y = f.graph.conv2d(v[0], v[1], v[2], strided)?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "conv_patchwise",
        vec![
            uniform(r, &[1, 2, 4, 6], -1.0, 1.0),
            uniform(r, &[4, 3, 2, 3, 3], -1.0, 1.0),
            uniform(r, &[4, 3], -1.0, 1.0),
        ],
        Box::new(move |f, v| {
            let regions = PatchGrid::square(2).regions(4, 6)?;
            let y = f
                .graph
                .conv_regions(v[0], v[1], v[2], conv, regions, (4, 6))?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "maxpool2",
        vec![uniform(r, &[1, 1, 8, 8], -1.0, 1.0)],
        Box::new(|f, v| {
            let y = f.graph.maxpool2(v[0])?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "maxpool2_floor",
        vec![uniform(r, &[2, 2, 5, 7], -1.0, 1.0)],
        Box::new(|f, v| {
            let y = f.graph.maxpool2_floor(v[0])?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "batch_norm_train",
        vec![
            uniform(r, &[3, 2, 3, 3], -2.0, 2.0),
            uniform(r, &[2], 0.5, 1.5),
            uniform(r, &[2], -1.0, 1.0),
        ],
        Box::new(|f, v| {
            let (y, _) = f.graph.batch_norm(v[0], v[1], v[2], BnMode::Train)?;
            project(&mut f.graph, y)
        }),
    ));
    let (mean, var) = (vec![0.3, -0.2], vec![1.5, 0.7]);
    cases.push((
        "batch_norm_eval",
        vec![
            uniform(r, &[2, 2, 3, 3], -2.0, 2.0),
            uniform(r, &[2], 0.5, 1.5),
            uniform(r, &[2], -1.0, 1.0),
        ],
        Box::new(move |f, v| {
            let mode = BnMode::Eval {
                mean: &mean,
                var: &var,
            };
            let (y, _) = f.graph.batch_norm(v[0], v[1], v[2], mode)?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "relu",
        vec![uniform(r, &[1, 2, 3, 3], -1.0, 1.0)],
        Box::new(|f, v| {
            let y = f.graph.relu(v[0]);
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![uniform(r, &[1, 2, 3, 3], -3.0, 3.0)],
        Box::new(|f, v| {
            let y = f.graph.sigmoid(v[0]);
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "linear",
        vec![
            uniform(r, &[3, 4], -1.0, 1.0),
            uniform(r, &[5, 4], -1.0, 1.0),
            uniform(r, &[5], -1.0, 1.0),
        ],
        Box::new(|f, v| {
            let y = f.graph.linear(v[0], v[1], v[2])?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "flatten_concat",
        vec![
            uniform(r, &[2, 1, 2, 2], -1.0, 1.0),
            uniform(r, &[2, 2, 2, 2], -1.0, 1.0),
        ],
        Box::new(|f, v| {
            let c = f.graph.concat_channels(&[v[0], v[1]])?;
            let y = f.graph.flatten(c)?;
            let y = f.graph.sigmoid(y);
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "mul_add",
        vec![
            uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
            uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
        ],
        Box::new(|f, v| {
            let m = f.graph.mul(v[0], v[1])?;
            let y = f.graph.add(m, v[0])?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "mul_broadcast",
        vec![
            uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
            uniform(r, &[2, 1, 3, 3], 0.0, 1.0),
        ],
        Box::new(|f, v| {
            let y = f.graph.mul(v[0], v[1])?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "resize",
        vec![uniform(r, &[1, 2, 5, 5], -1.0, 1.0)],
        Box::new(|f, v| {
            let y = f.graph.resize(v[0], 8, 7)?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "bilinear_resize_crop",
        vec![uniform(r, &[1, 1, 6, 6], -1.0, 1.0)],
        Box::new(|f, v| {
            let z = f.graph.bilinear_resize(v[0], 1.5)?;
            let y = f.graph.center_crop(z, 0.7)?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "padding_removal",
        vec![uniform(r, &[2, 2, 8, 8], -1.0, 1.0)],
        Box::new(|f, v| {
            let y = padding_removal(&mut f.graph, v[0], 3)?;
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "grad_scale_affine",
        vec![uniform(r, &[1, 1, 2, 3], -1.0, 1.0)],
        Box::new(|f, v| {
            let s = f.graph.grad_scale(v[0], 1.0);
            let y = f.graph.affine(s, -1.7, 0.4);
            let y = f.graph.sigmoid(y);
            project(&mut f.graph, y)
        }),
    ));
    cases.push((
        "pair_softmax",
        vec![uniform(r, &[3, 4], -2.0, 2.0)],
        Box::new(|f, v| {
            let y = f.graph.pair_softmax(v[0])?;
            project(&mut f.graph, y)
        }),
    ));
    let labels = Tensor::new(
        &[3, 3],
        (0..9).map(|_| f64::from(r.random_bool(0.5))).collect(),
    )?;
    let weights = vec![1.2, 0.5, 1.3];
    {
        let (labels, weights) = (labels.clone(), weights.clone());
        cases.push((
            "softmax_loss",
            vec![uniform(r, &[3, 3], 0.05, 0.95)],
            Box::new(move |f, v| f.graph.softmax_loss(v[0], &labels, &weights)),
        ));
    }
    cases.push((
        "dice_loss",
        vec![uniform(r, &[3, 3], 0.05, 0.95)],
        Box::new(move |f, v| f.graph.dice_loss(v[0], &labels, &weights, 1.0)),
    ));
    let truth = uniform(r, &[2, 6], 0.0, 30.0);
    cases.push((
        "align_loss",
        vec![uniform(r, &[2, 6], 0.0, 30.0)],
        Box::new(move |f, v| f.graph.align_loss(v[0], &truth, &[11.0, 14.5])),
    ));
    let initial = uniform(r, &[2, 1, 4, 4], 0.0, 1.0);
    cases.push((
        "consistency_loss",
        vec![uniform(r, &[2, 1, 4, 4], 0.02, 0.98)],
        Box::new(move |f, v| f.graph.consistency_loss(v[0], &initial)),
    ));
    cases.push((
        "combine",
        vec![uniform(r, &[1, 1, 2, 2], -1.0, 1.0)],
        Box::new(|f, v| {
            let a = project(&mut f.graph, v[0])?;
            let s = f.graph.sigmoid(v[0]);
            let b = project(&mut f.graph, s)?;
            f.graph.combine(&[(a, 0.7), (b, -1.3)])
        }),
    ));

    let mut out = Vec::new();
    for (name, inputs, build) in &cases {
        out.push(check(name, seed, &empty, inputs, build, opts)?);
    }
    out.extend(block_suite(seed, opts)?);
    Ok(out)
}

/// Parameterized blocks: both region layers, a plain stack and an attention refinement branch.
fn block_suite(seed: u64, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let block = {
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        RegionBlock::build(&mut b, "r", Module::Region, 2, 1)
    };
    let x = uniform(&mut rng, &[2, 2, 16, 16], -1.0, 1.0);
    out.push(check(
        "region_block",
        seed,
        &store,
        &[x],
        |f, v| {
            let y = block.forward(f, v[0])?;
            project(&mut f.graph, y)
        },
        opts,
    )?);

    let mut store = ParamStore::new();
    let block = {
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        HmrBlock::build(&mut b, "h", Module::Region, 2, 2)
    };
    let x = uniform(&mut rng, &[2, 2, 16, 16], -1.0, 1.0);
    out.push(check(
        "hmr_block",
        seed,
        &store,
        &[x],
        |f, v| {
            let y = block.forward(f, v[0])?;
            project(&mut f.graph, y)
        },
        opts,
    )?);

    let mut store = ParamStore::new();
    let stack = {
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        PlainStack::build(&mut b, "p", Module::Global, 2, &[2, 3], 2)
    };
    let x = uniform(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    out.push(check(
        "plain_stack",
        seed,
        &store,
        &[x],
        |f, v| {
            let y = stack.forward(f, v[0])?;
            project(&mut f.graph, y)
        },
        opts,
    )?);

    let mut store = ParamStore::new();
    let branch = {
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        RefineBranch::build(&mut b, "a", 2)
    };
    let x = uniform(&mut rng, &[2, 1, 5, 5], 0.0, 1.0);
    out.push(check(
        "refine_branch",
        seed,
        &store,
        &[x],
        |f, v| {
            let y = branch.forward(f, v[0])?;
            project(&mut f.graph, y)
        },
        opts,
    )?);
    Ok(out)
}

/// Small network used by the end-to-end check: `l = 32, c = 1, n_au = 2, n_align = 3`.
pub fn e2e_config(seed: u64) -> NetConfig {
    let rules = RuleTable::parse(
        "1 0 0 -0.2 1 0 -0.2\n2 2 -0.1 0 0+1 0 0.3\n",
        std::path::Path::new("gradcheck_rules.txt"),
    )
    .expect("rules parse");
    NetConfig {
        l: 32,
        c: 1,
        d: 8,
        n_align: 3,
        n_au: 2,
        lambda1: 0.5,
        lambda2: 0.1,
        lambda3: 1.0,
        eye_corners: [0, 1],
        au_rules: rules,
        attention_seed: AttentionSeed::GroundTruth,
        backprop_enhancement: false,
        au_weights: vec![1.25, 0.75],
        seed,
        ..NetConfig::toy()
    }
}

/// Finite-difference check of the joint loss against `entries` randomly chosen parameter
/// entries of the small network.
pub fn network_check(seed: u64, entries: usize) -> Result<CheckResult> {
    let net = Network::build(e2e_config(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000));
    let n = 2;
    let images = uniform(&mut rng, &[n, 3, 32, 32], 0.0, 1.0);
    let landmarks = Tensor::new(
        &[n, 6],
        vec![
            8.0, 10.0, 23.0, 11.0, 16.0, 24.0, 9.5, 12.0, 22.0, 12.5, 15.0, 22.0,
        ],
    )?;
    let labels = Tensor::new(&[n, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let pts = |s: usize| -> Vec<(f64, f64)> {
        landmarks.data()[s * 6..][..6]
            .chunks_exact(2)
            .map(|p| (p[0], p[1]))
            .collect()
    };
    let inter = (0..n)
        .map(|s| crate::attention::inter_ocular(&pts(s), (0, 1)))
        .collect::<Result<Vec<_>>>()?;
    let targets = Targets {
        landmarks,
        labels,
        inter_ocular: inter,
    };
    let loss_of = |net: &Network| -> Result<f64> {
        Ok(net
            .forward(&images, Some(&targets), true)?
            .output
            .losses
            .expect("targets given")
            .total)
    };
    let mut pass = net.forward(&images, Some(&targets), true)?;
    let grads = net.backward(&mut pass)?;
    let trainable: Vec<_> = net.store.trainable().collect();
    let sizes: Vec<usize> = trainable
        .iter()
        .map(|&id| net.store.get(id).value.len())
        .collect();
    let total: usize = sizes.iter().sum();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..entries {
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let id = trainable[which];
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
        let probe = |delta: f64| -> Result<f64> {
            let mut n2 = net.clone();
            n2.store.get_mut(id).value.data_mut()[k] += delta;
            loss_of(&n2)
        };
        let numeric = (probe(step)? - probe(-step)?) / (2.0 * step);
        worst = worst.max(rel_err(analytic, numeric, 1e-5));
    }
    Ok(CheckResult {
        name: "network_end_to_end".into(),
        seed,
        max_rel_err: worst,
        checked: entries,
        tolerance: NETWORK_TOLERANCE,
    })
}

/// The full suite: every op and block plus the end-to-end network, at each seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let opts = CheckOptions::default();
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(op_suite(s, &opts)?);
        out.push(network_check(s, 20)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // grad_scale deliberately breaks the gradient, so the check must fail.
        let x = Tensor::new(&[1, 1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let r = check(
            "broken",
            0,
            &ParamStore::new(),
            &[x],
            |f, v| {
                let y = f.graph.grad_scale(v[0], 1.5);
                project(&mut f.graph, y)
            },
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_err - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1e-9, 0.0, 1e-5), 1e-4);
        assert_eq!(rel_err(2.0, 1.0, 1e-5), 0.5);
    }
}
