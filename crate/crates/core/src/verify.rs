//! Gradient verification suites: one finite-difference check per layer kind
//! and an end-to-end check of the task loss grouped by network module.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::{Fusion, MergeNode};
use crate::config::{BackboneConfig, HeadConfig, InputSize, TaskKind};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, param_check, CheckOptions, CheckReport, Probe};
use crate::graph::{Graph, Mode, Var};
use crate::heads::TaskHead;
use crate::loss::{self, DetLayout, DetectionTargets, FocalParams, LossWeights, IGNORE_LABEL};
use crate::model::MultiTaskNet;
use crate::nn::{BatchNorm2d, Conv2d, Linear, Module, NormConfig, ParamBuilder, ParamId, ParamStore, ResidualBlock};
use crate::synth;
use crate::tag::{task_adapt, ChannelAttention, SpatialAttention};
use crate::tensor::Tensor;

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentResult {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst: Option<Probe>,
}

impl ComponentResult {
    fn new(name: &str, report: &CheckReport, tolerance: f64) -> Self {
        let worst = report
            .probes
            .iter()
            .filter(|p| !p.kink)
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .cloned();
        ComponentResult {
            name: name.to_string(),
            max_rel_error: report.max_rel_error(),
            probes: report.probes.len(),
            kinks: report.kinks(),
            tolerance,
            passed: report.passes(tolerance) && !report.probes.is_empty(),
            worst,
        }
    }
}

pub fn render(results: &[ComponentResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<34} {:>12} {:>7} {:>6} {:>9}  result", "component", "max rel err", "probes", "kinks", "tol");
    for r in results {
        let _ = writeln!(
            s,
            "{:<34} {:>12.3e} {:>7} {:>6} {:>9.0e}  {}",
            r.name,
            r.max_rel_error,
            r.probes,
            r.kinks,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    s
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// `(op name, factor)` applied to recorded gradients.
    pub fault: Option<(String, f64)>,
}

/// Reduces an output to a scalar with deterministic, strictly positive,
/// non-repeating weights so that summed gradients cannot cancel to zero.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let r = Tensor::from_fn(g.shape(y), |i| 0.5 + (i as f64 * 0.618_033_988_749_895).fract());
    let rv = g.input(r);
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

struct Suite {
    opts: SuiteOptions,
    rng: ChaCha8Rng,
    results: Vec<ComponentResult>,
}

impl Suite {
    fn check_opts(&self, mode: Mode) -> CheckOptions {
        CheckOptions {
            max_probes: Some(24),
            seed: self.opts.seed,
            mode,
            fault: self.opts.fault.clone(),
            ..CheckOptions::default()
        }
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, &mut self.rng)
    }

    /// Input gradient check plus, when `params` is non-empty, a parameter
    /// check over up to four elements of each.
    fn run<F>(&mut self, name: &str, store: &ParamStore, input: &Tensor, params: &[ParamId], mode: Mode, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
    {
        let opts = self.check_opts(mode);
        let mut report = finite_diff_check(store, &f, input, &opts)?;
        if !params.is_empty() {
            let mut targets = Vec::new();
            for &id in params {
                let n = store.entry(id).numel();
                for _ in 0..4.min(n) {
                    targets.push((id, self.rng.gen_range(0..n)));
                }
            }
            let x = input.clone();
            let rep = param_check(
                store,
                |g| {
                    let v = g.input(x.clone());
                    f(g, v)
                },
                &targets,
                &opts,
            )?;
            report.merge(rep);
        }
        self.results.push(ComponentResult::new(name, &report, LAYER_TOLERANCE));
        Ok(())
    }
}

fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    t.map(|x| if x >= 0.0 { x + margin } else { x - margin })
}

/// One check per differentiable layer kind, on small random tensors.
pub fn layer_suite(opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    let mut s = Suite {
        opts: opts.clone(),
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        results: Vec::new(),
    };
    let norm = NormConfig::default();

    // conv2d in three geometries
    for (name, cin, cout, shape, stride, dil) in [
        ("conv2d 1x1x4x4", 1, 2, [1, 1, 4, 4], 1, 1),
        ("conv2d stride 2", 3, 4, [2, 3, 6, 7], 2, 1),
        ("conv2d dilation 2", 2, 3, [1, 2, 7, 6], 1, 2),
    ] {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut ParamBuilder::new(&mut store), "c", cin, cout, 3, stride, dil, true);
        store.materialize(opts.seed);
        let x = s.randn(&shape);
        s.run(name, &store, &x, &conv.param_ids(), Mode::Train, |g, v| {
            let y = conv.forward(g, v)?;
            project(g, y)
        })?;
    }

    for (name, mode) in [("batch_norm train", Mode::Train), ("batch_norm eval", Mode::Eval)] {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut ParamBuilder::new(&mut store), "bn", 3, norm);
        store.materialize(opts.seed);
        store.set(bn.gamma, Tensor::new(vec![3], vec![1.5, 0.7, -0.4])?)?;
        store.set(bn.running_mean, Tensor::new(vec![3], vec![0.2, -0.1, 0.3])?)?;
        store.set(bn.running_var, Tensor::new(vec![3], vec![0.5, 2.0, 1.2])?)?;
        let x = s.randn(&[3, 3, 2, 3]);
        s.run(name, &store, &x, &bn.param_ids(), mode, |g, v| {
            let y = bn.forward(g, v)?;
            project(g, y)
        })?;
    }

    let empty = ParamStore::new();
    let x = away_from_zero(s.randn(&[2, 3, 3, 3]), 0.05);
    s.run("relu", &empty, &x, &[], Mode::Train, |g, v| {
        let y = g.relu(v);
        project(g, y)
    })?;
    let x = s.randn(&[2, 3, 3, 3]);
    s.run("sigmoid", &empty, &x, &[], Mode::Train, |g, v| {
        let y = g.sigmoid(v);
        project(g, y)
    })?;
    for scale in [2, 8] {
        let x = s.randn(&[1, 2, 3, 4]);
        s.run(&format!("bilinear_resize x{scale}"), &empty, &x, &[], Mode::Train, |g, v| {
            let y = g.resize(v, scale)?;
            project(g, y)
        })?;
    }
    let other = s.randn(&[2, 2, 3, 3]);
    let x = s.randn(&[2, 3, 3, 3]);
    s.run("concat_channels", &empty, &x, &[], Mode::Train, |g, v| {
        let o = g.input(other.clone());
        let a = g.concat(o, v)?;
        let b = g.concat(v, o)?;
        let c = g.concat(a, b)?;
        project(g, c)
    })?;
    let x = s.randn(&[2, 3, 4, 5]);
    s.run("global_avg_pool", &empty, &x, &[], Mode::Train, |g, v| {
        let y = g.global_avg_pool(v)?;
        project(g, y)
    })?;
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut ParamBuilder::new(&mut store), "fc", 5, 3);
        store.materialize(opts.seed);
        let x = s.randn(&[2, 5]);
        s.run("linear", &store, &x, &lin.param_ids(), Mode::Train, |g, v| {
            let y = lin.forward(g, v)?;
            project(g, y)
        })?;
    }
    let h = s.randn(&[2, 4, 3, 5]);
    let alpha = Tensor::uniform(&[2, 4, 1, 1], 0.1, 0.9, &mut s.rng);
    let beta = Tensor::uniform(&[2, 1, 3, 5], 0.1, 0.9, &mut s.rng);
    s.run("task_adapt wrt h", &empty, &h, &[], Mode::Train, |g, v| {
        let (a, b) = (g.input(alpha.clone()), g.input(beta.clone()));
        let y = task_adapt(g, v, Some(a), Some(b))?;
        project(g, y)
    })?;
    s.run("task_adapt wrt alpha", &empty, &alpha, &[], Mode::Train, |g, v| {
        let (hv, b) = (g.input(h.clone()), g.input(beta.clone()));
        let y = task_adapt(g, hv, Some(v), Some(b))?;
        project(g, y)
    })?;
    s.run("task_adapt wrt beta", &empty, &beta, &[], Mode::Train, |g, v| {
        let (hv, a) = (g.input(h.clone()), g.input(alpha.clone()));
        let y = task_adapt(g, hv, Some(a), Some(v))?;
        project(g, y)
    })?;

    {
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut ParamBuilder::new(&mut store), "ca", 6, 4, 5);
        store.materialize(opts.seed);
        let x = s.randn(&[2, 6, 2, 3]);
        s.run("channel attention", &store, &x, &ca.param_ids(), Mode::Train, |g, v| {
            let y = ca.forward(g, v)?;
            project(g, y)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let sa = SpatialAttention::new(&mut ParamBuilder::new(&mut store), 3, 1, 2);
        store.materialize(opts.seed);
        let x = s.randn(&[1, 3, 6, 7]);
        s.run("spatial attention", &store, &x, &sa.param_ids(), Mode::Train, |g, v| {
            let y = sa.forward(g, v)?;
            project(g, y)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let blk = ResidualBlock::new(&mut ParamBuilder::new(&mut store), "r", 3, 4, 1, norm);
        store.materialize(opts.seed);
        let x = s.randn(&[2, 3, 4, 4]);
        s.run("residual block", &store, &x, &blk.param_ids(), Mode::Train, |g, v| {
            let y = blk.forward(g, v)?;
            project(g, y)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let node = MergeNode::new(&mut ParamBuilder::new(&mut store), (1, 1), 4, 2, norm);
        store.materialize(opts.seed);
        let fine = s.randn(&[2, 2, 4, 6]);
        let x = s.randn(&[2, 4, 2, 3]);
        s.run("aggregation merge", &store, &x, &node.param_ids(), Mode::Train, |g, v| {
            let y = g.input(fine.clone());
            let o = node.forward(g, v, y)?;
            project(g, o)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut ParamBuilder::new(&mut store), Some(3), 4);
        store.materialize(opts.seed);
        let agg = s.randn(&[1, 4, 2, 3]);
        let x = s.randn(&[1, 3, 4, 6]);
        s.run("fusion", &store, &x, &fusion.param_ids(), Mode::Train, |g, v| {
            let a = g.input(agg.clone());
            let o = fusion.forward(g, a, Some(v))?;
            project(g, o)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            channels: 4,
            blocks: 2,
            upsample: 2,
        };
        let head = TaskHead::new(&mut ParamBuilder::new(&mut store), TaskKind::Segmentation, 3, 2, &cfg);
        store.materialize(opts.seed);
        let x = s.randn(&[1, 3, 3, 4]);
        s.run("task head", &store, &x, &head.param_ids(), Mode::Train, |g, v| {
            let y = head.forward(g, v)?;
            project(g, y)
        })?;
    }

    // losses
    let logits = s.randn(&[2, 5, 3, 3]);
    let labels: Vec<u32> = (0..18).map(|i| if i % 7 == 3 { IGNORE_LABEL } else { (i * 3 % 5) as u32 }).collect();
    s.run("cross_entropy", &empty, &logits, &[], Mode::Train, |g, v| loss::seg_loss(g, v, &labels))?;

    let gt = s.randn(&[1, 1, 4, 5]);
    let valid = Tensor::from_fn(&[1, 1, 4, 5], |i| if i % 4 == 1 { 0.0 } else { 1.0 });
    let pred = Tensor::from_fn(&[1, 1, 4, 5], |i| {
        // residuals spread over both branches, none near ±1
        let d = [0.3, -0.6, 1.7, -2.4, 0.1][i % 5];
        gt.data()[i] + d
    });
    s.run("smooth_l1", &empty, &pred, &[], Mode::Train, |g, v| loss::depth_loss(g, v, &gt, &valid))?;

    let layout = DetLayout::default();
    let (mh, mw) = (4, 5);
    let mut targets = DetectionTargets::empty(1, layout, mh, mw);
    for (i, v) in targets.heatmap.data_mut().iter_mut().enumerate() {
        *v = ((i * 13 % 17) as f64 / 20.0).min(0.95);
    }
    let centre = 2 * mw + 3;
    targets.heatmap.data_mut()[centre] = 1.0;
    targets.mask.data_mut()[centre] = 1.0;
    targets.yaw_bin[centre] = 5;
    for (t, vals) in [
        (&mut targets.offset, vec![0.3, 0.6]),
        (&mut targets.depth, vec![12.0]),
        (&mut targets.size, vec![1.5, 1.6, 4.0]),
        (&mut targets.yaw_res, vec![0.1]),
        (&mut targets.pitch_roll, vec![0.05, -0.02]),
    ] {
        for (c, v) in vals.into_iter().enumerate() {
            t.data_mut()[c * mh * mw + centre] = v;
        }
    }
    let heat = s.randn(&[1, layout.classes, mh, mw]);
    s.run("focal", &empty, &heat, &[], Mode::Train, |g, v| {
        g.focal(v, &targets.heatmap, 2.0, 4.0)
    })?;
    let det_pred = away_from_zero(s.randn(&[1, layout.channels(), mh, mw]), 0.05);
    s.run("det_loss", &empty, &det_pred, &[], Mode::Train, |g, v| {
        Ok(loss::det_loss(g, v, &targets, layout, FocalParams::default())?.total)
    })?;
    s.run("total_loss", &empty, &logits, &[], Mode::Train, |g, v| {
        let seg = loss::seg_loss(g, v, &labels)?;
        let p = g.input(pred.clone());
        let dep = loss::depth_loss(g, p, &gt, &valid)?;
        let d = g.input(det_pred.clone());
        let det = loss::det_loss(g, d, &targets, layout, FocalParams::default())?.total;
        loss::total_loss(g, det, seg, dep, LossWeights::default())
    })?;
    Ok(s.results)
}

/// Checks `∂L_task/∂θ` on `per_module` random elements of every module's
/// parameters, on a seeded synthetic batch. Runs with running-statistics
/// normalization so the check sees the same smooth map at every probe.
pub fn end_to_end(cfg: &BackboneConfig, size: InputSize, per_module: usize, opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    let mut cfg = cfg.clone();
    cfg.input = size;
    let (net, store) = MultiTaskNet::init(&cfg, opts.seed)?;
    let batch = synth::generate(opts.seed, size, 1, &cfg)?;
    let check = CheckOptions {
        eps: 1e-5,
        mode: Mode::Eval,
        fault: opts.fault.clone(),
        ..CheckOptions::default()
    };
    let f = |g: &mut Graph| -> Result<Var> {
        let x = g.input(batch.image.clone());
        let out = net.forward(g, x)?;
        Ok(net.loss(g, &out, &batch)?.total)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let modules = net.modules();
    let mut targets = Vec::new();
    for (_, ids) in &modules {
        let sizes: Vec<usize> = ids.iter().map(|&id| store.entry(id).numel()).collect();
        let total: usize = sizes.iter().sum();
        let mut picked = Vec::new();
        for _ in 0..per_module {
            let mut k = rng.gen_range(0..total);
            for (&id, &n) in ids.iter().zip(&sizes) {
                if k < n {
                    picked.push((id, k));
                    break;
                }
                k -= n;
            }
        }
        targets.push(picked);
    }
    let flat: Vec<(ParamId, usize)> = targets.iter().flatten().copied().collect();
    let report = param_check(&store, f, &flat, &check)?;
    let mut probes = report.probes.into_iter();
    Ok(modules
        .iter()
        .zip(&targets)
        .map(|((name, _), t)| {
            let rep = CheckReport {
                probes: probes.by_ref().take(t.len()).collect(),
            };
            ComponentResult::new(&format!("end-to-end {name}"), &rep, END_TO_END_TOLERANCE)
        })
        .collect())
}
