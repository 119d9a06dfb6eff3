//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagnet::aggregation::{schedule, Aggregation};
use tagnet::config::{BackboneConfig, InputSize};
use tagnet::graph::{Graph, Mode};
use tagnet::heatmap::heatmap_pgm;
use tagnet::metrics::{MetricTable, DELTA_TOLERANCE};
use tagnet::nn::{NormConfig, ParamBuilder, ParamStore};
use tagnet::report::{fmt_extents, shape_table, REFERENCE_STAGES};
use tagnet::tag::task_adapt;
use tagnet::train::{overfit, AdamConfig};
use tagnet::verify::{self, SuiteOptions};
use tagnet::{synth, MultiTaskNet, Tensor};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Check);

const DESK: InputSize = InputSize {
    height: 64,
    width: 128,
};

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn criterion(name: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let res = f();
    let took = start.elapsed();
    let (ok, detail) = match res {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over budget {budget:?}")),
        Err(d) => (false, d),
    };
    println!(
        "{} {name}: {detail} [{:.2}s]",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn stage_shapes() -> Check {
    let cfg = BackboneConfig::default();
    let (net, _) = MultiTaskNet::build(&cfg).map_err(fail)?;
    let report = shape_table(&net, cfg.input).map_err(fail)?;
    let mut bad = Vec::new();
    for (stage, want) in REFERENCE_STAGES {
        let want: Vec<[usize; 2]> = want.iter().map(|&(h, w)| [h, w]).collect();
        match report.row(stage) {
            Some(r) if r.outputs == want => {}
            Some(r) => bad.push(format!("{stage}: {} != {}", fmt_extents(&r.outputs), fmt_extents(&want))),
            None => bad.push(format!("{stage}: missing")),
        }
    }
    if bad.is_empty() && report.rows.len() == REFERENCE_STAGES.len() {
        Ok(format!("{} stages at {} match", report.rows.len(), cfg.input))
    } else {
        Err(bad.join("; "))
    }
}

/// The published while-loop procedure, rendered symbolically. Returns the
/// applied `(idx1, idx2)` pairs and the expression left in `L[0]`.
#[allow(unused_assignments)]
fn transcribed_aggregation(n: usize) -> (Vec<(usize, usize)>, String) {
    let mut l: Vec<String> = (1..=n).map(|k| format!("x{k}")).collect();
    let mut applied = Vec::new();
    let (mut idx1, mut idx2) = (1usize, 0usize);
    while idx1 != n {
        idx2 = idx1;
        while idx2 != 0 {
            l[idx2 - 1] = format!("f{idx1}{idx2}({}, {})", l[idx2 - 1], l[idx2]);
            applied.push((idx1, idx2));
            idx2 -= 1;
        }
        idx1 += 1;
    }
    (applied, l[0].clone())
}

fn replay(pairs: &[(usize, usize)], n: usize) -> String {
    let mut l: Vec<String> = (1..=n).map(|k| format!("x{k}")).collect();
    for &(i, j) in pairs {
        l[j - 1] = format!("f{i}{j}({}, {})", l[j - 1], l[j]);
    }
    l[0].clone()
}

fn aggregation_trace() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 2..=4 {
        let (want, want_expr) = transcribed_aggregation(n);
        let sched = schedule(n).map_err(fail)?;
        if sched != want {
            return Err(format!("N={n}: schedule {sched:?} != {want:?}"));
        }
        // Run a real module and compare the pairs it applied.
        let channels: Vec<usize> = (0..n).map(|k| 2 << (n - 1 - k)).collect();
        let mut store = ParamStore::new();
        let agg = Aggregation::new(&mut ParamBuilder::new(&mut store), &channels, NormConfig::default()).map_err(fail)?;
        store.materialize(n as u64);
        let mut g = Graph::new(&store, Mode::Eval);
        let scales: Vec<_> = (0..n)
            .map(|k| {
                let s = 1 << k;
                g.input(Tensor::randn(&[1, channels[k], s, 2 * s], &mut rng))
            })
            .collect();
        let (out, applied) = agg.forward_traced(&mut g, &scales).map_err(fail)?;
        if applied != want || replay(&applied, n) != want_expr {
            return Err(format!("N={n}: applied {applied:?} != {want:?}"));
        }
        let s = 1 << (n - 1);
        if g.shape(out) != [1, channels[n - 1], s, 2 * s] {
            return Err(format!("N={n}: output {:?}", g.shape(out)));
        }
    }
    let (pairs, _) = transcribed_aggregation(3);
    let mut per_pass = BTreeMap::new();
    for (i, _) in pairs {
        *per_pass.entry(i).or_insert(0) += 1;
    }
    let counts: Vec<usize> = per_pass.into_values().collect();
    if counts != [1, 2] {
        return Err(format!("N=3 applications per pass {counts:?}, expected [1, 2]"));
    }
    let (net, _) = MultiTaskNet::build(&BackboneConfig::default()).map_err(fail)?;
    let built: Vec<_> = net.aggregation.as_ref().ok_or("no aggregation")?.nodes.iter().map(|n| n.idx).collect();
    if built != schedule(3).map_err(fail)? {
        return Err(format!("network merge nodes {built:?}"));
    }
    Ok(format!("N=2,3,4 match transcription; N=3 gives {:?} = 1 + 2 applications", built))
}

fn delta_reproduction() -> Check {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for table in [MetricTable::multitask_comparison(), MetricTable::architecture_ablations()] {
        let report = table.report().map_err(fail)?;
        for row in &report.rows {
            if let Some(printed) = row.reported {
                let d = (row.delta - printed).abs();
                worst = worst.max(d);
                checked += 1;
                if d > DELTA_TOLERANCE {
                    return Err(format!("{} / {}: {:+.3} vs printed {:+.2}", table.name, row.method, row.delta, printed));
                }
            }
        }
    }
    if checked != 16 {
        return Err(format!("expected 11 + 5 printed values, found {checked}"));
    }
    Ok(format!("{checked} values, worst |diff| {worst:.4}"))
}

fn gradient_soundness() -> Check {
    let opts = SuiteOptions::default();
    let layers = verify::layer_suite(&opts).map_err(fail)?;
    let e2e = verify::end_to_end(&BackboneConfig::default(), DESK, 5, &opts).map_err(fail)?;
    let failed: Vec<String> = layers
        .iter()
        .chain(&e2e)
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error))
        .collect();
    let worst = |rs: &[verify::ComponentResult]| rs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    if failed.is_empty() {
        Ok(format!(
            "{} layer components worst {:.2e} (tol 1e-4); {} modules end to end worst {:.2e} (tol 1e-3)",
            layers.len(),
            worst(&layers),
            e2e.len(),
            worst(&e2e)
        ))
    } else {
        Err(format!("failed: {}", failed.join(", ")))
    }
}

fn desk_forward(seed: u64) -> Result<(BackboneConfig, ParamStore, MultiTaskNet, Tensor), String> {
    let cfg = BackboneConfig {
        input: DESK,
        ..BackboneConfig::default()
    };
    let (net, store) = MultiTaskNet::init(&cfg, seed).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = Tensor::randn(&[2, 3, DESK.height, DESK.width], &mut rng);
    Ok((cfg, store, net, image))
}

fn open_unit(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v > 0.0 && v < 1.0)
}

fn tag_identities() -> Check {
    let (_, store, net, image) = desk_forward(7)?;
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(image);
    let out = net.forward(&mut g, x).map_err(fail)?;
    let hs = g.shape(out.h).to_vec();
    let (b, c) = (hs[0], hs[1]);

    let ones = g.input(Tensor::ones(&[b, c, 1, 1]));
    let zeros_beta = g.input(Tensor::zeros(&[b, 1, hs[2], hs[3]]));
    let ht = task_adapt(&mut g, out.h, Some(ones), Some(zeros_beta)).map_err(fail)?;
    if !g.value(ht).bit_eq(g.value(out.h)) {
        return Err("alpha = 1, beta = 0 does not reproduce h".into());
    }

    let beta = out.beta.ok_or("spatial attention missing")?;
    let zeros = g.input(Tensor::zeros(&[b, c, 1, 1]));
    let ht = task_adapt(&mut g, out.h, Some(zeros), Some(beta)).map_err(fail)?;
    let bv = g.value(beta);
    let htv = g.value(ht);
    let broadcast = (0..htv.numel()).all(|i| {
        let (hw, chw) = (hs[2] * hs[3], c * hs[2] * hs[3]);
        htv.data()[i].to_bits() == bv.data()[(i / chw) * hw + i % hw].to_bits()
    });
    if !broadcast {
        return Err("alpha = 0 does not reproduce broadcast beta".into());
    }

    if !open_unit(bv) {
        return Err("beta leaves (0, 1)".into());
    }
    for (t, a) in out.alphas.iter().enumerate() {
        let a = a.ok_or("channel attention missing")?;
        if !open_unit(g.value(a)) {
            return Err(format!("alpha for task {t} leaves (0, 1)"));
        }
    }

    // Ablated attention leaves h untouched end to end.
    let (_, store, mut net, image) = desk_forward(7)?;
    net.tag.channel = None;
    net.tag.spatial = None;
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(image);
    let out = net.forward(&mut g, x).map_err(fail)?;
    if !out.task_features.iter().all(|&t| g.value(t).bit_eq(g.value(out.h))) {
        return Err("disabled attention changes h".into());
    }
    Ok(format!("identities exact on h {hs:?}; alpha, beta inside (0, 1)"))
}

fn element_oracle() -> Check {
    let (cfg, store, net, image) = desk_forward(11)?;
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(image);
    let out = net.forward(&mut g, x).map_err(fail)?;
    let h = g.value(out.h);
    let (b, c, hh, ww) = h.dims4().map_err(fail)?;
    let beta = g.value(out.beta.ok_or("spatial attention missing")?);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.gen_range(0..cfg.tasks.len());
        let (bi, ci, y, xi) = (rng.gen_range(0..b), rng.gen_range(0..c), rng.gen_range(0..hh), rng.gen_range(0..ww));
        let alpha = g.value(out.alphas[t].ok_or("channel attention missing")?);
        let want = alpha.data()[bi * c + ci] * h.at4(bi, ci, y, xi) + beta.at4(bi, 0, y, xi);
        let got = g.value(out.task_features[t]).at4(bi, ci, y, xi);
        worst = worst.max((got - want).abs() / want.abs().max(1e-300));
    }
    if worst < 1e-12 {
        Ok(format!("100 coordinates, worst rel err {worst:.1e}"))
    } else {
        Err(format!("worst rel err {worst:.3e}"))
    }
}

fn overfit_run(steps: usize, seed: u64) -> Result<tagnet::train::LossCurve, String> {
    let cfg = BackboneConfig {
        input: DESK,
        ..BackboneConfig::default()
    };
    let (net, mut store) = MultiTaskNet::init(&cfg, seed).map_err(fail)?;
    let batch = synth::generate(seed, DESK, 1, &cfg).map_err(fail)?;
    overfit(&net, &mut store, &batch, steps, AdamConfig::default(), |_| {}).map_err(fail)
}

fn overfit_property() -> Check {
    let curve = overfit_run(200, 0)?;
    let (first, last) = (curve.initial(), curve.last());
    let finite = curve.points.iter().all(|p| p.total.is_finite() && p.tasks.iter().all(|t| t.1.is_finite()));
    let ratio = last / first;
    let detail = format!("loss {first:.4} -> {last:.4} (ratio {ratio:.4}) over 200 steps");
    if finite && ratio < 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cost_accounting() -> Check {
    let cfg = BackboneConfig::default();
    let (with, _) = MultiTaskNet::build(&cfg).map_err(fail)?;
    let mut off = cfg.clone();
    off.toggles.use_channel_attention = false;
    off.toggles.use_spatial_attention = false;
    let (without, _) = MultiTaskNet::build(&off).map_err(fail)?;
    let a = shape_table(&with, cfg.input).map_err(fail)?;
    let b = shape_table(&without, cfg.input).map_err(fail)?;

    // Recount from layer definitions: per task two linears, plus one
    // biased 3×3 conv to the spatial map.
    let sem = cfg.layer_channels[4];
    let c = cfg.feature_channels();
    let hid = cfg.tag.hidden;
    let gates = cfg.tasks.len() * ((sem * hid + hid) + (hid * c + c));
    let spatial_in = if cfg.toggles.use_high_branch { cfg.high_channels } else { c };
    let beta_c = if cfg.tag.beta_full_channels { c } else { 1 };
    let spatial = spatial_in * 9 * beta_c + beta_c;
    let recount = gates + spatial;

    let diff = a.total_params - b.total_params;
    if diff != recount || a.tag_params != recount {
        return Err(format!("difference {diff}, reported {}, recount {recount}", a.tag_params));
    }
    if !a.note.contains("33.9") || !a.note.contains("219") {
        return Err("report lacks the reference comparison".into());
    }
    Ok(format!(
        "attention params {recount} exact; model {:.1} M / {:.1} GFLOPs vs reference {} M / {} GFLOPs (informational)",
        a.total_params as f64 / 1e6,
        a.gflops,
        a.reference_params_m,
        a.reference_gflops
    ))
}

fn forward_pgms(seed: u64) -> Result<Vec<Vec<u8>>, String> {
    let cfg = BackboneConfig {
        input: DESK,
        ..BackboneConfig::default()
    };
    let (net, store) = MultiTaskNet::init(&cfg, seed).map_err(fail)?;
    let batch = synth::generate(seed, DESK, 1, &cfg).map_err(fail)?;
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.input(batch.image);
    let out = net.forward(&mut g, x).map_err(fail)?;
    std::iter::once(out.h)
        .chain(out.task_features.iter().copied())
        .map(|v| heatmap_pgm(g.value(v)).map_err(fail))
        .collect()
}

fn determinism() -> Check {
    let a = forward_pgms(5)?;
    let b = forward_pgms(5)?;
    if a != b {
        return Err("heatmaps differ between runs".into());
    }
    let c = overfit_run(4, 5)?.to_csv();
    let d = overfit_run(4, 5)?.to_csv();
    if c != d {
        return Err("loss curves differ between runs".into());
    }
    if forward_pgms(6)? == a {
        return Err("a different seed gives the same heatmaps".into());
    }
    Ok(format!("{} heatmaps and a {}-line loss curve byte-identical", a.len(), c.lines().count()))
}

/// Optional arguments select criteria whose name contains any of them.
fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let s = Duration::from_secs;
    let all: [Criterion; 9] = [
        ("stage shapes at 1024x2048", s(1), stage_shapes),
        ("aggregation schedule trace", s(1), aggregation_trace),
        ("relative improvement reproduction", s(1), delta_reproduction),
        ("finite-difference gradients", s(300), gradient_soundness),
        ("attention identities", s(10), tag_identities),
        ("adapted feature element oracle", s(10), element_oracle),
        ("overfit one batch", s(600), overfit_property),
        ("attention parameter accounting", s(60), cost_accounting),
        ("seeded determinism", s(60), determinism),
    ];
    let results: Vec<bool> = all
        .into_iter()
        .filter(|(name, ..)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())))
        .map(|(name, budget, f)| criterion(name, budget, f))
        .collect();
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
