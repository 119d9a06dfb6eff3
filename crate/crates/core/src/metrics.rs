//! Task metrics and the averaged relative improvement over single-task
//! baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shipped metric tables with their printed improvement column.
pub const MULTITASK_COMPARISON_JSON: &str = include_str!("../data/multitask_comparison.json");
pub const ARCHITECTURE_ABLATIONS_JSON: &str = include_str!("../data/architecture_ablations.json");

/// Absolute tolerance for matching printed two-decimal values.
pub const DELTA_TOLERANCE: f64 = 0.01;

/// `(100/|T|)·Σ (−1)^l (M − M_base)/M_base`, with `l = 1` for
/// lower-is-better metrics.
pub fn delta_t(values: &[f64], baseline: &[f64], lower_is_better: &[bool]) -> Result<f64> {
    if values.len() != baseline.len() || values.len() != lower_is_better.len() || values.is_empty() {
        return Err(Error::invalid("delta_t", "values, baseline and polarity must have equal non-zero length"));
    }
    let mut sum = 0.0;
    for (t, ((&m, &b), &lower)) in values.iter().zip(baseline).zip(lower_is_better).enumerate() {
        if b == 0.0 {
            return Err(Error::ZeroBaseline { task: t.to_string() });
        }
        let rel = (m - b) / b;
        sum += if lower { -rel } else { rel };
    }
    Ok(100.0 * sum / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetric {
    pub task: String,
    pub metric: String,
    pub lower_is_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub method: String,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricTable {
    pub name: String,
    pub tasks: Vec<TaskMetric>,
    pub baseline: BTreeMap<String, f64>,
    pub rows: Vec<MetricRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaRow {
    pub method: String,
    pub delta: f64,
    pub reported: Option<f64>,
    pub matches: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaReport {
    pub name: String,
    pub rows: Vec<DeltaRow>,
}

impl MetricTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: MetricTable = serde_json::from_str(text).map_err(|e| Error::Format(format!("metric table: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn multitask_comparison() -> Self {
        Self::from_json(MULTITASK_COMPARISON_JSON).expect("shipped table parses")
    }

    pub fn architecture_ablations() -> Self {
        Self::from_json(ARCHITECTURE_ABLATIONS_JSON).expect("shipped table parses")
    }

    pub fn validate(&self) -> Result<()> {
        let names: Vec<&String> = self.tasks.iter().map(|t| &t.task).collect();
        let check = |what: &str, m: &BTreeMap<String, f64>| -> Result<()> {
            let keys: Vec<&String> = m.keys().collect();
            let mut want = names.clone();
            want.sort();
            if keys != want {
                return Err(Error::Format(format!("{what} has tasks {keys:?}, table declares {names:?}")));
            }
            Ok(())
        };
        if self.tasks.is_empty() {
            return Err(Error::Format("metric table declares no tasks".into()));
        }
        check("baseline", &self.baseline)?;
        for r in &self.rows {
            check(&format!("row `{}`", r.method), &r.values)?;
        }
        Ok(())
    }

    fn ordered(&self, m: &BTreeMap<String, f64>) -> Vec<f64> {
        self.tasks.iter().map(|t| m[&t.task]).collect()
    }

    pub fn delta(&self, row: &MetricRow) -> Result<f64> {
        let pol: Vec<bool> = self.tasks.iter().map(|t| t.lower_is_better).collect();
        delta_t(&self.ordered(&row.values), &self.ordered(&self.baseline), &pol)
    }

    pub fn report(&self) -> Result<DeltaReport> {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let delta = self.delta(r)?;
                Ok(DeltaRow {
                    method: r.method.clone(),
                    delta,
                    reported: r.reported_delta,
                    matches: r.reported_delta.map(|p| (delta - p).abs() <= DELTA_TOLERANCE + 1e-9),
                })
            })
            .collect::<Result<_>>()?;
        Ok(DeltaReport {
            name: self.name.clone(),
            rows,
        })
    }
}

impl DeltaReport {
    /// True when every row that carries a printed value reproduces it.
    pub fn all_match(&self) -> bool {
        self.rows.iter().all(|r| r.matches != Some(false))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.name);
        let _ = writeln!(s, "{:<24} {:>9} {:>9}  check", "method", "delta %", "printed");
        for r in &self.rows {
            let printed = r.reported.map_or("-".to_string(), |p| format!("{p:+.2}"));
            let check = match r.matches {
                Some(true) => "ok",
                Some(false) => "MISMATCH",
                None => "",
            };
            let _ = writeln!(s, "{:<24} {:>+9.2} {:>9}  {check}", r.method, r.delta, printed);
        }
        s
    }
}

/// Mean IoU over classes present in prediction or ground truth. Pixels whose
/// ground truth is `ignore` are skipped. Returns 1 when no class is present.
pub fn miou(pred: &[u32], gt: &[u32], num_classes: usize, ignore: u32) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("miou", format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::invalid("miou", format!("label {} outside {num_classes} classes", p.max(g))));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    Ok(if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 })
}

/// Root mean squared error over positions where `mask > 0.5`.
pub fn rmse(pred: &[f64], gt: &[f64], mask: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::invalid("rmse", "pred, gt and mask lengths differ"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if m > 0.5 {
            sum += (p - g) * (p - g);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("rmse"));
    }
    Ok((sum / n as f64).sqrt())
}
