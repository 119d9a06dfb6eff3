//! Central-difference gradient verification.
//!
//! The per-coordinate error is `|analytic − numeric| / max(1e-8, |numeric|)`.
//! Coordinates where the one-sided differences disagree (an activation kink
//! inside the probe window) are reported but excluded from the maximum.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{Graph, Mode, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Probe at most this many coordinates, sampled with `seed`.
    pub max_probes: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    /// Relative disagreement between forward and backward one-sided
    /// differences above which a coordinate is treated as a kink.
    pub kink_tol: f64,
    /// Scales the recorded gradient of every op with this name (negative
    /// control for the checker itself).
    pub fault: Option<(String, f64)>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-3,
            max_probes: None,
            seed: 0,
            mode: Mode::Train,
            kink_tol: 0.1,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub kink: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckReport {
    pub probes: Vec<Probe>,
}

impl CheckReport {
    /// Largest relative error over non-kink probes.
    pub fn max_rel_error(&self) -> f64 {
        self.probes
            .iter()
            .filter(|p| !p.kink)
            .fold(0.0, |m, p| m.max(p.rel_error))
    }

    pub fn kinks(&self) -> usize {
        self.probes.iter().filter(|p| p.kink).count()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.probes.extend(other.probes);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalar {
            op: "finite_diff_check",
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.data()[0])
}

fn probe_indices(n: usize, opts: &CheckOptions) -> Vec<usize> {
    match opts.max_probes {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

fn judge(index: usize, analytic: f64, f0: f64, plus: f64, minus: f64, opts: &CheckOptions) -> Probe {
    let numeric = (plus - minus) / (2.0 * opts.eps);
    let fwd = (plus - f0) / opts.eps;
    let bwd = (f0 - minus) / opts.eps;
    let kink = (fwd - bwd).abs() > opts.kink_tol * fwd.abs().max(bwd.abs()).max(1e-6);
    Probe {
        param: None,
        index,
        analytic,
        numeric,
        rel_error: relative_error(analytic, numeric),
        kink,
    }
}

fn analytic_graph<'s>(store: &'s ParamStore, opts: &CheckOptions) -> Graph<'s> {
    let mut g = Graph::new(store, opts.mode);
    if let Some((op, factor)) = &opts.fault {
        g.inject_fault(op, *factor);
    }
    g
}

/// Checks the gradient of the scalar `f(input)` with respect to `input`.
pub fn finite_diff_check<F>(store: &ParamStore, f: F, input: &Tensor, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    let eval = |x: Tensor| -> Result<f64> {
        let mut g = Graph::new(store, opts.mode);
        let v = g.input(x);
        let out = f(&mut g, v)?;
        scalar(&g, out)
    };

    let mut g = analytic_graph(store, opts);
    let x = g.input(input.clone());
    let out = f(&mut g, x)?;
    let f0 = scalar(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads.input(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let idx = probe_indices(input.numel(), opts);
    let probes = exec::map_indices(idx.len(), |k| -> Result<Probe> {
        let i = idx[k];
        let mut xp = input.clone();
        xp.data_mut()[i] += opts.eps;
        let plus = eval(xp)?;
        let mut xm = input.clone();
        xm.data_mut()[i] -= opts.eps;
        let minus = eval(xm)?;
        Ok(judge(i, analytic.data()[i], f0, plus, minus, opts))
    });
    Ok(CheckReport {
        probes: probes.into_iter().collect::<Result<_>>()?,
    })
}

/// Checks gradients of the scalar `f()` with respect to selected parameter
/// elements. Each probe overrides one parameter inside its own graph; the
/// store itself is never modified.
pub fn param_check<F>(
    store: &ParamStore,
    f: F,
    targets: &[(ParamId, usize)],
    opts: &CheckOptions,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph) -> Result<Var> + Sync,
{
    let mut g = analytic_graph(store, opts);
    let out = f(&mut g)?;
    let f0 = scalar(&g, out)?;
    let grads = g.backward(out)?;

    let eval = |id: ParamId, value: Tensor| -> Result<f64> {
        let mut g = Graph::new(store, opts.mode);
        g.override_param(id, value)?;
        let out = f(&mut g)?;
        scalar(&g, out)
    };

    let probes = exec::map_indices(targets.len(), |k| -> Result<Probe> {
        let (id, i) = targets[k];
        let base = store.get(id)?;
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
        let mut p = base.clone();
        p.data_mut()[i] += opts.eps;
        let plus = eval(id, p)?;
        let mut m = base.clone();
        m.data_mut()[i] -= opts.eps;
        let minus = eval(id, m)?;
        let mut probe = judge(i, analytic, f0, plus, minus, opts);
        probe.param = Some(store.entry(id).name.clone());
        Ok(probe)
    });
    Ok(CheckReport {
        probes: probes.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamBuilder};

    fn weights(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn sigmoid_at_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn linear_is_exact() {
        let mut store = ParamStore::new();
        let (w, b) = {
            let mut pb = ParamBuilder::new(&mut store);
            (
                pb.trainable("w", &[3, 4], Init::HeNormal { fan_in: 4 }),
                pb.trainable("b", &[3], Init::Constant(0.1)),
            )
        };
        store.materialize(1);
        let r = weights(&[2, 3], 9);
        let f = |g: &mut Graph, x: Var| {
            let (wv, bv) = (g.param(w)?, g.param(b)?);
            let y = g.linear(x, wv, bv)?;
            let rv = g.input(r.clone());
            let p = g.mul(y, rv)?;
            Ok(g.sum(p))
        };
        let rep = finite_diff_check(&store, f, &weights(&[2, 4], 2), &CheckOptions::default()).unwrap();
        assert!(rep.max_rel_error() < 1e-6, "{}", rep.max_rel_error());
        let rep = param_check(&store, |g| { let x = g.input(weights(&[2, 4], 2)); f(g, x) }, &[(w, 0), (w, 7), (b, 2)], &CheckOptions::default()).unwrap();
        assert!(rep.max_rel_error() < 1e-6);
    }

    #[test]
    fn relu_away_from_and_at_kink() {
        let store = ParamStore::new();
        let r = weights(&[6], 3);
        let f = |g: &mut Graph, x: Var| {
            let y = g.relu(x);
            let rv = g.input(r.clone());
            let p = g.mul(y, rv)?;
            Ok(g.sum(p))
        };
        let away = Tensor::new(vec![6], vec![-0.5, 0.7, 1.2, -2.0, 0.01, -0.03]).unwrap();
        let rep = finite_diff_check(&store, f, &away, &CheckOptions::default()).unwrap();
        assert_eq!(rep.kinks(), 0);
        assert!(rep.max_rel_error() < 1e-6);

        let at = Tensor::new(vec![6], vec![0.0, 0.7, 1.2, -2.0, 0.0, -0.03]).unwrap();
        let rep = finite_diff_check(&store, f, &at, &CheckOptions::default()).unwrap();
        assert_eq!(rep.kinks(), 2);
        assert!(rep.probes[0].kink && rep.probes[4].kink);
        assert!(rep.max_rel_error() < 1e-6);
    }

    #[test]
    fn non_scalar_output_errors() {
        let store = ParamStore::new();
        let err = finite_diff_check(&store, |g, x| Ok(g.relu(x)), &Tensor::ones(&[3]), &CheckOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonScalar { .. }));
    }

    #[test]
    fn probe_sampling_is_seeded() {
        let opts = CheckOptions {
            max_probes: Some(5),
            seed: 11,
            ..Default::default()
        };
        let a = probe_indices(100, &opts);
        assert_eq!(a, probe_indices(100, &opts));
        assert_eq!(a.len(), 5);
    }
}
