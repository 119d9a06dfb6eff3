//! Task losses and their weighted combination.
//!
//! Segmentation uses softmax cross-entropy, depth uses smooth-L1, and the
//! detection loss is a simplified CenterNet-style composite: penalty-reduced
//! focal loss on the class heatmap plus masked L1 / cross-entropy terms on
//! the regression and heading sub-heads, all with weight 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Label value excluded from segmentation and yaw-bin losses.
pub const IGNORE_LABEL: u32 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub det: f64,
    pub seg: f64,
    pub dep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            det: 1.0,
            seg: 100.0,
            dep: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.det, self.seg, self.dep].iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be strictly positive, got {self:?}")))
        }
    }

    /// `λ_det·det + λ_seg·seg + λ_dep·dep`, rejecting non-finite components.
    pub fn combine(&self, det: f64, seg: f64, dep: f64) -> Result<f64> {
        for (name, v) in [("det", det), ("seg", seg), ("dep", dep)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("{name} loss"),
                });
            }
        }
        Ok(self.det * det + self.seg * seg + self.dep * dep)
    }
}

/// Channel layout of the detection head output at map resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetLayout {
    pub classes: usize,
    pub yaw_bins: usize,
}

impl Default for DetLayout {
    fn default() -> Self {
        DetLayout {
            classes: 8,
            yaw_bins: 12,
        }
    }
}

impl DetLayout {
    pub const OFFSET: usize = 2;
    pub const DEPTH: usize = 1;
    pub const SIZE: usize = 3;
    pub const PITCH_ROLL: usize = 2;

    /// `(start, len)` of every sub-head in channel order: heatmap, offset,
    /// depth, size, yaw bins, yaw residuals, pitch/roll.
    pub fn ranges(&self) -> [(usize, usize); 7] {
        let k = self.classes;
        let y = self.yaw_bins;
        [
            (0, k),
            (k, Self::OFFSET),
            (k + 2, Self::DEPTH),
            (k + 3, Self::SIZE),
            (k + 6, y),
            (k + 6 + y, y),
            (k + 6 + 2 * y, Self::PITCH_ROLL),
        ]
    }

    pub fn channels(&self) -> usize {
        self.classes + 8 + 2 * self.yaw_bins
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.yaw_bins as f64
    }

    /// Bin index and residual from the bin centre for a yaw in `[-π, π)`.
    pub fn encode_yaw(&self, yaw: f64) -> (u32, f64) {
        let w = self.bin_width();
        let shifted = (yaw + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI);
        let bin = ((shifted / w) as usize).min(self.yaw_bins - 1);
        let centre = (bin as f64 + 0.5) * w - std::f64::consts::PI;
        (bin as u32, yaw - centre)
    }
}

/// Dense detection targets at map resolution (`h = H/8`, `w = W/8`).
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// `B×K×h×w`, values in `[0, 1]`, exactly 1 at object centres.
    pub heatmap: Tensor,
    /// `B×2×h×w` sub-cell centre offsets.
    pub offset: Tensor,
    pub depth: Tensor,
    /// `B×3×h×w`.
    pub size: Tensor,
    /// `B·h·w` yaw bin per position, [`IGNORE_LABEL`] off-mask.
    pub yaw_bin: Vec<u32>,
    /// `B×1×h×w` residual within the yaw bin.
    pub yaw_res: Tensor,
    /// `B×2×h×w`.
    pub pitch_roll: Tensor,
    /// `B×1×h×w`, 1 at positions carrying regression targets.
    pub mask: Tensor,
}

impl DetectionTargets {
    /// All-background targets with no objects.
    pub fn empty(batch: usize, layout: DetLayout, h: usize, w: usize) -> Self {
        DetectionTargets {
            heatmap: Tensor::zeros(&[batch, layout.classes, h, w]),
            offset: Tensor::zeros(&[batch, 2, h, w]),
            depth: Tensor::zeros(&[batch, 1, h, w]),
            size: Tensor::zeros(&[batch, 3, h, w]),
            yaw_bin: vec![IGNORE_LABEL; batch * h * w],
            yaw_res: Tensor::zeros(&[batch, 1, h, w]),
            pitch_roll: Tensor::zeros(&[batch, 2, h, w]),
            mask: Tensor::zeros(&[batch, 1, h, w]),
        }
    }

    pub fn validate(&self, layout: DetLayout) -> Result<()> {
        let (b, k, h, w) = self.heatmap.dims4()?;
        if k != layout.classes {
            return Err(Error::invalid("det_loss", format!("heatmap has {k} classes, layout {}", layout.classes)));
        }
        for (t, c) in [
            (&self.offset, 2),
            (&self.depth, 1),
            (&self.size, 3),
            (&self.yaw_res, 1),
            (&self.pitch_roll, 2),
            (&self.mask, 1),
        ] {
            if t.shape() != [b, c, h, w] {
                return Err(Error::shape("det_loss", self.heatmap.shape(), t.shape()));
            }
        }
        if self.yaw_bin.len() != b * h * w {
            return Err(Error::invalid("det_loss", "yaw_bin length does not match the map"));
        }
        if self.heatmap.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("det_loss", "heatmap values outside [0, 1]"));
        }
        for (i, (&m, &bin)) in self.mask.data().iter().zip(&self.yaw_bin).enumerate() {
            let on = m > 0.5;
            if on && bin as usize >= layout.yaw_bins || !on && bin != IGNORE_LABEL {
                return Err(Error::invalid(
                    "det_loss",
                    format!("mask/yaw-bin inconsistency at position {i}: mask {m}, bin {bin}"),
                ));
            }
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Penalty-reduced focal loss exponents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 2.0, beta: 4.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetLossTerms {
    pub focal: Var,
    pub offset: Var,
    pub depth: Var,
    pub size: Var,
    pub yaw_cls: Var,
    pub yaw_res: Var,
    pub pitch_roll: Var,
    pub total: Var,
}

/// Mean cross-entropy over non-ignored pixels.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[u32]) -> Result<Var> {
    g.cross_entropy(logits, labels, IGNORE_LABEL)
}

/// Mean smooth-L1 over valid pixels.
pub fn depth_loss(g: &mut Graph, pred: Var, gt: &Tensor, valid: &Tensor) -> Result<Var> {
    g.smooth_l1(pred, gt, valid)
}

pub fn det_loss(
    g: &mut Graph,
    pred: Var,
    targets: &DetectionTargets,
    layout: DetLayout,
    focal: FocalParams,
) -> Result<DetLossTerms> {
    targets.validate(layout)?;
    let (b, c, h, w) = g.value(pred).dims4()?;
    let (tb, _, th, tw) = targets.heatmap.dims4()?;
    if c != layout.channels() || (b, h, w) != (tb, th, tw) {
        return Err(Error::shape("det_loss", g.shape(pred), targets.heatmap.shape()));
    }
    let [heat, off, dep, size, ycls, yres, pr] = layout.ranges();
    let npos = targets.num_objects();
    let norm = npos.max(1) as f64;
    let plane = h * w;

    let mask_over = |channels: usize| -> Tensor {
        let mut t = Tensor::zeros(&[b, channels, h, w]);
        for n in 0..b {
            let m = &targets.mask.data()[n * plane..(n + 1) * plane];
            for ch in 0..channels {
                t.data_mut()[(n * channels + ch) * plane..(n * channels + ch + 1) * plane].copy_from_slice(m);
            }
        }
        t
    };

    let v = g.narrow(pred, heat.0, heat.1)?;
    let focal_v = g.focal(v, &targets.heatmap, focal.alpha, focal.beta)?;

    let regress = |g: &mut Graph, range: (usize, usize), target: &Tensor| -> Result<Var> {
        let p = g.narrow(pred, range.0, range.1)?;
        g.masked_l1(p, target, &mask_over(range.1), norm)
    };
    let offset_v = regress(g, off, &targets.offset)?;
    let depth_v = regress(g, dep, &targets.depth)?;
    let size_v = regress(g, size, &targets.size)?;
    let pr_v = regress(g, pr, &targets.pitch_roll)?;

    let yc = g.narrow(pred, ycls.0, ycls.1)?;
    let yaw_cls_v = g.cross_entropy(yc, &targets.yaw_bin, IGNORE_LABEL)?;

    // residual supervised only on the ground-truth bin's channel
    let bins = layout.yaw_bins;
    let mut res_target = Tensor::zeros(&[b, bins, h, w]);
    let mut res_weight = Tensor::zeros(&[b, bins, h, w]);
    for n in 0..b {
        for p in 0..plane {
            let bin = targets.yaw_bin[n * plane + p];
            if bin != IGNORE_LABEL {
                let idx = (n * bins + bin as usize) * plane + p;
                res_target.data_mut()[idx] = targets.yaw_res.data()[n * plane + p];
                res_weight.data_mut()[idx] = 1.0;
            }
        }
    }
    let yr = g.narrow(pred, yres.0, yres.1)?;
    let yaw_res_v = g.masked_l1(yr, &res_target, &res_weight, norm)?;

    let terms = [focal_v, offset_v, depth_v, size_v, yaw_cls_v, yaw_res_v, pr_v];
    let total = g.weighted_sum(&terms.map(|t| (t, 1.0)))?;
    Ok(DetLossTerms {
        focal: focal_v,
        offset: offset_v,
        depth: depth_v,
        size: size_v,
        yaw_cls: yaw_cls_v,
        yaw_res: yaw_res_v,
        pitch_roll: pr_v,
        total,
    })
}

/// `λ_det·L_det + λ_seg·L_seg + λ_dep·L_dep` on the graph.
pub fn total_loss(g: &mut Graph, det: Var, seg: Var, dep: Var, w: LossWeights) -> Result<Var> {
    weighted_total(g, &[("det", det, w.det), ("seg", seg, w.seg), ("dep", dep, w.dep)])
}

/// Weighted sum of named task losses; a non-finite term errors with its name.
pub fn weighted_total(g: &mut Graph, terms: &[(&str, Var, f64)]) -> Result<Var> {
    for &(name, v, _) in terms {
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite {
                what: format!("{name} loss"),
            });
        }
    }
    let pairs: Vec<(Var, f64)> = terms.iter().map(|&(_, v, w)| (v, w)).collect();
    g.weighted_sum(&pairs)
}

/// Forward values and local gradients of the fused loss ops.
pub(crate) mod kernels {
    use super::*;

    /// Gradient of a scalar loss with respect to its prediction input,
    /// computed during the forward pass.
    #[derive(Debug)]
    pub struct LossCache {
        pub grad: Tensor,
        pub count: usize,
    }

    impl LossCache {
        pub fn backward(&self, upstream: f64) -> Tensor {
            self.grad.map(|v| v * upstream)
        }
    }

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    pub fn cross_entropy(logits: &Tensor, labels: &[u32], ignore: u32) -> Result<(f64, LossCache)> {
        let (b, k, h, w) = logits.dims4()?;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for {}×{}×{} logits", labels.len(), b, h, w),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} ≥ {k} classes")));
        }
        let count = labels.iter().filter(|&&l| l != ignore).count();
        let z = logits.data();
        let mut grad = Tensor::zeros(logits.shape());
        let mut total = 0.0;
        let mut buf = vec![0.0; k];
        for n in 0..b {
            for p in 0..plane {
                let label = labels[n * plane + p];
                if label == ignore {
                    continue;
                }
                for (c, slot) in buf.iter_mut().enumerate() {
                    *slot = z[(n * k + c) * plane + p];
                }
                let m = buf.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let se: f64 = buf.iter().map(|v| (v - m).exp()).sum();
                let lse = m + se.ln();
                total += lse - buf[label as usize];
                let gd = grad.data_mut();
                for (c, &v) in buf.iter().enumerate() {
                    let prob = (v - lse).exp();
                    let onehot = if c == label as usize { 1.0 } else { 0.0 };
                    gd[(n * k + c) * plane + p] = (prob - onehot) / count as f64;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok((loss, LossCache { grad, count }))
    }

    pub fn smooth_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<(f64, LossCache)> {
        if pred.shape() != target.shape() || pred.shape() != mask.shape() {
            return Err(Error::shape("smooth_l1", pred.shape(), target.shape()));
        }
        let count = mask.data().iter().filter(|&&m| m > 0.5).count();
        let mut grad = Tensor::zeros(pred.shape());
        let mut total = 0.0;
        for i in 0..pred.numel() {
            if mask.data()[i] <= 0.5 {
                continue;
            }
            let d = pred.data()[i] - target.data()[i];
            let (l, dl) = if d.abs() < 1.0 { (0.5 * d * d, d) } else { (d.abs() - 0.5, d.signum()) };
            total += l;
            grad.data_mut()[i] = dl / count as f64;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok((loss, LossCache { grad, count }))
    }

    /// `(Σ_pos −(1−p)^α log p + Σ_neg −(1−t)^β p^α log(1−p)) / max(1, #pos)`
    /// with `p = σ(z)` and positives where the target equals 1.
    pub fn focal(logits: &Tensor, target: &Tensor, alpha: f64, beta: f64) -> Result<(f64, LossCache)> {
        if logits.shape() != target.shape() {
            return Err(Error::shape("focal", logits.shape(), target.shape()));
        }
        if target.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::invalid("focal", "target outside [0, 1]"));
        }
        let npos = target.data().iter().filter(|&&t| t == 1.0).count();
        let norm = npos.max(1) as f64;
        let mut grad = Tensor::zeros(logits.shape());
        let mut total = 0.0;
        for (i, (&z, &t)) in logits.data().iter().zip(target.data()).enumerate() {
            let p = crate::tensor::ops::sigmoid_scalar(z);
            let q = crate::tensor::ops::sigmoid_scalar(-z);
            let (l, d) = if t == 1.0 {
                let log_p = -softplus(-z);
                let qa = q.powf(alpha);
                (-qa * log_p, qa * (alpha * p * log_p - q))
            } else {
                let log_q = -softplus(z);
                let wt = (1.0 - t).powf(beta);
                let pa = p.powf(alpha);
                (-wt * pa * log_q, wt * pa * (p - alpha * q * log_q))
            };
            total += l;
            grad.data_mut()[i] = d / norm;
        }
        Ok((total / norm, LossCache { grad, count: npos }))
    }

    pub fn masked_l1(pred: &Tensor, target: &Tensor, weight: &Tensor, norm: f64) -> Result<(f64, LossCache)> {
        if pred.shape() != target.shape() || pred.shape() != weight.shape() {
            return Err(Error::shape("masked_l1", pred.shape(), target.shape()));
        }
        if norm.is_nan() || norm <= 0.0 {
            return Err(Error::invalid("masked_l1", "normalizer must be positive"));
        }
        let mut grad = Tensor::zeros(pred.shape());
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..pred.numel() {
            let wt = weight.data()[i];
            if wt == 0.0 {
                continue;
            }
            count += 1;
            let d = pred.data()[i] - target.data()[i];
            total += wt * d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.data_mut()[i] = wt * s / norm;
        }
        Ok((total / norm, LossCache { grad, count }))
    }
}
