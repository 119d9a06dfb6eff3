//! Symbolic stage table: output extents, parameter and MAC totals per stage.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{InputSize, Toggles};
use crate::error::Result;
use crate::model::MultiTaskNet;
use crate::nn::{CostTrace, LayerNode, Module};

/// Reference whole-model figures the computed totals are compared against.
pub const REFERENCE_PARAMS_M: f64 = 33.9;
pub const REFERENCE_GFLOPS: f64 = 219.0;

/// Published stage extents at 1024×2048 input, `(name, [(h, w), ...])` with
/// the low branch first.
pub const REFERENCE_STAGES: [(&str, &[(usize, usize)]); 10] = [
    ("stem", &[(256, 512)]),
    ("layer1", &[(256, 512)]),
    ("layer2", &[(128, 256)]),
    ("layer3", &[(64, 128), (128, 256)]),
    ("layer4", &[(32, 64), (128, 256)]),
    ("layer5", &[(16, 32), (128, 256)]),
    ("decode layer1", &[(32, 64), (128, 256)]),
    ("decode layer2", &[(64, 128), (128, 256)]),
    ("fusion", &[(128, 256)]),
    ("head (MTL)", &[(1024, 2048)]),
];
const REFERENCE_INPUT: (usize, usize) = (1024, 2048);

#[derive(Clone, Debug, Serialize)]
pub struct StageRow {
    pub stage: String,
    /// `[h, w]` per branch, low-resolution branch first.
    pub outputs: Vec<[usize; 2]>,
    pub channels: Vec<usize>,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub input: InputSize,
    pub toggles: Toggles,
    pub rows: Vec<StageRow>,
    pub total_params: usize,
    pub total_macs: u64,
    pub gflops: f64,
    pub tag_params: usize,
    pub reference_params_m: f64,
    pub reference_gflops: f64,
    pub note: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerNode>>,
}

fn hw(s: &[usize]) -> [usize; 2] {
    [s[2], s[3]]
}

struct Builder {
    rows: Vec<StageRow>,
    layers: Vec<LayerNode>,
}

impl Builder {
    fn push(&mut self, stage: &str, outs: &[&[usize]], t: CostTrace) {
        self.rows.push(StageRow {
            stage: stage.to_string(),
            outputs: outs.iter().map(|s| hw(s)).collect(),
            channels: outs.iter().map(|s| s[1]).collect(),
            params: t.params(),
            macs: t.macs(),
        });
        self.layers.extend(t.nodes);
    }
}

/// Propagates shapes for a batch of one without allocating activations.
pub fn shape_table(net: &MultiTaskNet, input: InputSize) -> Result<StageReport> {
    let cfg = &net.config;
    cfg.validate_input(input)?;
    let bb = &net.backbone;
    let mut b = Builder {
        rows: Vec::new(),
        layers: Vec::new(),
    };
    let image = vec![1, cfg.in_channels, input.height, input.width];

    let mut t = CostTrace::default();
    let s = bb.stem.trace(&image, &mut t)?;
    b.push("stem", &[&s], t);
    let mut t = CostTrace::default();
    let s = bb.layer1.trace(&s, &mut t)?;
    b.push("layer1", &[&s], t);
    let mut t = CostTrace::default();
    let x2 = bb.layer2.trace(&s, &mut t)?;
    b.push("layer2", &[&x2], t);

    let mut low = x2.clone();
    let mut detail = bb.high.as_ref().map(|_| x2.clone());
    let mut lows = Vec::new();
    for i in 0..3 {
        let mut t = CostTrace::default();
        low = bb.low[i].trace(&low, &mut t)?;
        lows.push(low.clone());
        if let (Some(high), Some(d)) = (&bb.high, detail.as_mut()) {
            if i < 2 {
                *d = high[i].trace(d, &mut t)?;
            }
        }
        let name = format!("layer{}", i + 3);
        match &detail {
            Some(d) => b.push(&name, &[&low, d], t),
            None => b.push(&name, &[&low], t),
        }
    }

    let x_agg = match (&net.aggregation, &net.context) {
        (Some(agg), _) => {
            let scales = vec![lows[2].clone(), lows[1].clone(), lows[0].clone()];
            let mut last = Vec::new();
            for (i, (t, l0)) in agg.trace_stages(&scales)?.into_iter().enumerate() {
                let name = format!("decode layer{}", i + 1);
                match &detail {
                    Some(d) => b.push(&name, &[&l0, d], t),
                    None => b.push(&name, &[&l0], t),
                }
                last = l0;
            }
            last
        }
        (None, Some(ctx)) => {
            let mut t = CostTrace::default();
            let y = ctx.trace(&lows[2], &mut t)?;
            match &detail {
                Some(d) => b.push("context", &[&y, d], t),
                None => b.push("context", &[&y], t),
            }
            y
        }
        (None, None) => unreachable!("either aggregation or its substitute is built"),
    };

    let mut t = CostTrace::default();
    let h = net.fusion.trace(&x_agg, detail.as_deref(), &mut t)?;
    let tag_before = t.params();
    if let Some(s) = &net.tag.spatial {
        s.trace(detail.as_deref().unwrap_or(&h), &mut t)?;
    }
    for c in net.tag.channel.iter().flatten() {
        c.trace(&lows[2], &mut t)?;
    }
    let tag_params = t.params() - tag_before;
    b.push("fusion", &[&h], t);

    let mut t = CostTrace::default();
    let mut head_out: Vec<usize> = Vec::new();
    let mut head_channels = Vec::new();
    for head in &net.heads {
        let y = head.trace(&h, &mut t)?;
        head_channels.push(y[1]);
        if head_out.is_empty() || y[2] > head_out[2] {
            head_out = y;
        }
    }
    b.push("head (MTL)", &[&head_out], t);
    b.rows.last_mut().expect("head row").channels = head_channels;

    let total_params = b.rows.iter().map(|r| r.params).sum();
    let total_macs: u64 = b.rows.iter().map(|r| r.macs).sum();
    let gflops = 2.0 * total_macs as f64 / 1e9;
    Ok(StageReport {
        input,
        toggles: cfg.toggles,
        rows: b.rows,
        total_params,
        total_macs,
        gflops,
        tag_params,
        reference_params_m: REFERENCE_PARAMS_M,
        reference_gflops: REFERENCE_GFLOPS,
        note: cost_note(total_params, gflops),
        layers: Some(b.layers),
    })
}

fn cost_note(params: usize, gflops: f64) -> String {
    format!(
        "computed {:.1} M params / {:.1} GFLOPs vs reference {REFERENCE_PARAMS_M} M / {REFERENCE_GFLOPS} GFLOPs. \
         Counted here: every conv, linear and norm-affine parameter; MACs of convs and linears only, with \
         GFLOPs = 2·MACs/1e9. The reference does not state its head width, its norm layers, where the heads \
         upsample, or whether it counts a MAC as one FLOP; the plain layer3-5 stacks at 256/512/1024 channels \
         and the 256-wide dense heads dominate the difference.",
        params as f64 / 1e6,
        gflops
    )
}

impl StageReport {
    pub fn without_layers(mut self) -> Self {
        self.layers = None;
        self
    }

    pub fn row(&self, stage: &str) -> Option<&StageRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// Differences between the computed extents and the reference table
    /// scaled to this input. Ablated branches compare only what exists.
    pub fn reference_mismatches(&self) -> Vec<String> {
        let (rh, rw) = REFERENCE_INPUT;
        let scale = |(h, w): (usize, usize)| [h * self.input.height / rh, w * self.input.width / rw];
        let mut out = Vec::new();
        for (stage, extents) in REFERENCE_STAGES {
            let lookup = match stage {
                "decode layer1" if !self.toggles.use_aggregation => continue,
                "decode layer2" if !self.toggles.use_aggregation => "context",
                s => s,
            };
            let Some(row) = self.row(lookup) else {
                out.push(format!("{stage}: missing"));
                continue;
            };
            let want: Vec<[usize; 2]> = extents.iter().map(|&e| scale(e)).take(row.outputs.len()).collect();
            let expected_len = if self.toggles.use_high_branch { extents.len() } else { 1 };
            if row.outputs != want || row.outputs.len() != expected_len {
                out.push(format!("{stage}: got {} want {}", fmt_extents(&row.outputs), fmt_extents(&want)));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let on = |b: bool| if b { "on" } else { "off" };
        let tg = self.toggles;
        let _ = writeln!(
            s,
            "input {}x{}  branch {}  aggregation {}  channel attention {}  spatial attention {}",
            self.input.height,
            self.input.width,
            on(tg.use_high_branch),
            on(tg.use_aggregation),
            on(tg.use_channel_attention),
            on(tg.use_spatial_attention)
        );
        let _ = writeln!(s, "{:<15} {:<24} {:<12} {:>14} {:>18}", "stage", "output", "channels", "params", "MACs");
        for r in &self.rows {
            let ch: Vec<String> = r.channels.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                s,
                "{:<15} {:<24} {:<12} {:>14} {:>18}",
                r.stage,
                fmt_extents(&r.outputs),
                ch.join(", "),
                group(r.params as u64),
                group(r.macs)
            );
        }
        let _ = writeln!(
            s,
            "{:<15} {:<24} {:<12} {:>14} {:>18}",
            "total",
            "",
            "",
            group(self.total_params as u64),
            group(self.total_macs)
        );
        let _ = writeln!(s, "attention params {}", group(self.tag_params as u64));
        let _ = writeln!(s, "GFLOPs (2·MACs/1e9) {:.2}", self.gflops);
        let _ = writeln!(s, "note: {}", self.note);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn fmt_extents(e: &[[usize; 2]]) -> String {
    e.iter().map(|[h, w]| format!("{h} × {w}")).collect::<Vec<_>>().join(", ")
}

fn group(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneConfig;

    fn report(cfg: &BackboneConfig) -> StageReport {
        let (net, _) = MultiTaskNet::build(cfg).unwrap();
        shape_table(&net, cfg.input).unwrap()
    }

    #[test]
    fn default_matches_reference_extents() {
        let r = report(&BackboneConfig::default());
        assert!(r.reference_mismatches().is_empty(), "{:?}", r.reference_mismatches());
        assert_eq!(fmt_extents(&r.row("layer4").unwrap().outputs), "32 × 64, 128 × 256");
        assert_eq!(fmt_extents(&r.row("fusion").unwrap().outputs), "128 × 256");
        assert_eq!(fmt_extents(&r.row("head (MTL)").unwrap().outputs), "1024 × 2048");
        assert_eq!(r.rows.len(), 10);
    }

    #[test]
    fn totals_match_store_and_layers() {
        let cfg = BackboneConfig::default();
        let (net, store) = MultiTaskNet::build(&cfg).unwrap();
        let r = shape_table(&net, cfg.input).unwrap();
        assert_eq!(r.total_params, store.trainable_count());
        let layers = r.layers.as_ref().unwrap();
        assert_eq!(layers.iter().map(|l| l.params).sum::<usize>(), r.total_params);
        assert_eq!(layers.iter().map(|l| l.macs).sum::<u64>(), r.total_macs);
    }

    #[test]
    fn scaled_input() {
        let cfg = BackboneConfig {
            input: InputSize::new(128, 256),
            ..BackboneConfig::default()
        };
        let r = report(&cfg);
        assert!(r.reference_mismatches().is_empty(), "{:?}", r.reference_mismatches());
        assert_eq!(fmt_extents(&r.row("head (MTL)").unwrap().outputs), "128 × 256");
        assert_eq!(fmt_extents(&r.row("layer5").unwrap().outputs), "2 × 4, 16 × 32");
    }

    #[test]
    fn ablations_still_match() {
        for f in [
            |t: &mut Toggles| t.use_high_branch = false,
            |t: &mut Toggles| t.use_aggregation = false,
            |t: &mut Toggles| t.use_channel_attention = false,
            |t: &mut Toggles| t.use_spatial_attention = false,
        ] {
            let mut cfg = BackboneConfig::default();
            f(&mut cfg.toggles);
            let r = report(&cfg);
            assert!(r.reference_mismatches().is_empty(), "{:?} {:?}", cfg.toggles, r.reference_mismatches());
        }
    }

    #[test]
    fn grouping() {
        assert_eq!(group(0), "0");
        assert_eq!(group(999), "999");
        assert_eq!(group(1000), "1,000");
        assert_eq!(group(2_415_919_104), "2,415,919,104");
    }
}
