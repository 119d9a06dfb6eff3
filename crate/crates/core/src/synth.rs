//! Seeded synthetic scenes: coloured rectangles over a ground plane, with
//! matching segmentation, depth and detection targets.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BackboneConfig, InputSize, FEATURE_STRIDE};
use crate::error::{Error, Result};
use crate::loss::{DetLayout, DetectionTargets, IGNORE_LABEL};
use crate::tensor::{read_tensor, write_tensor, Tensor};

const SKY_ROWS_FRACTION: usize = 16;
const GROUND_DEPTH: f64 = 60.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub image: usize,
    pub seg_class: u32,
    pub det_class: usize,
    /// Pixel box `[y0, x0, y1, x1)`.
    pub bbox: [usize; 4],
    /// Object centre in pixels.
    pub center: [f64; 2],
    pub depth: f64,
    pub size: [f64; 3],
    pub yaw: f64,
    pub pitch_roll: [f64; 2],
}

impl SceneObject {
    pub fn contains_center(&self) -> bool {
        let [y0, x0, y1, x1] = self.bbox;
        let [cy, cx] = self.center;
        cy >= y0 as f64 && cy < y1 as f64 && cx >= x0 as f64 && cx < x1 as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image: Tensor,
    /// `B·H·W` labels in `[0, classes)` or [`IGNORE_LABEL`].
    pub seg_labels: Vec<u32>,
    pub depth: Tensor,
    pub depth_valid: Tensor,
    pub det: DetectionTargets,
    pub objects: Vec<SceneObject>,
}

#[derive(Serialize, Deserialize)]
struct FixtureMeta {
    seed: u64,
    size: InputSize,
    batch: usize,
    seg_classes: usize,
    detection: DetLayout,
    seg_labels: Vec<u32>,
    yaw_bin: Vec<u32>,
    objects: Vec<SceneObject>,
}

const FIXTURE_TENSORS: [&str; 10] = [
    "image",
    "depth",
    "depth_valid",
    "heatmap",
    "offset",
    "det_depth",
    "size",
    "yaw_res",
    "pitch_roll",
    "mask",
];

fn class_colour(class: u32) -> [f64; 3] {
    let c = class as f64;
    [(c * 0.37).sin(), (c * 0.73 + 1.0).sin(), (c * 1.31 + 2.0).cos()]
}

/// Deterministic scene batch for `(seed, size)`.
pub fn generate(seed: u64, size: InputSize, batch: usize, cfg: &BackboneConfig) -> Result<Batch> {
    cfg.validate_input(size)?;
    if batch == 0 {
        return Err(Error::invalid("synth", "batch must be positive"));
    }
    let InputSize { height: h, width: w } = size;
    let (mh, mw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    let layout = cfg.detection;
    let classes = cfg.seg_classes as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut image = Tensor::zeros(&[batch, 3, h, w]);
    let mut seg_labels = vec![0u32; batch * h * w];
    let mut depth = Tensor::zeros(&[batch, 1, h, w]);
    let mut depth_valid = Tensor::zeros(&[batch, 1, h, w]);
    let mut det = DetectionTargets::empty(batch, layout, mh, mw);
    let mut objects = Vec::new();
    let sky = h / SKY_ROWS_FRACTION;

    for n in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let p = (n * h + y) * w + x;
                if y < sky {
                    seg_labels[p] = IGNORE_LABEL;
                } else {
                    depth.data_mut()[p] = GROUND_DEPTH * (sky as f64 + 1.0) / (y as f64 + 1.0);
                    depth_valid.data_mut()[p] = 1.0;
                }
                let shade = y as f64 / h as f64 - 0.5;
                for c in 0..3 {
                    image.data_mut()[((n * 3 + c) * h + y) * w + x] = shade;
                }
            }
        }
        let count = rng.gen_range(3..=5);
        for _ in 0..count {
            let bh = rng.gen_range(h / 8..=h / 3);
            let bw = rng.gen_range(w / 12..=w / 4);
            let y0 = rng.gen_range(sky..h - bh);
            let x0 = rng.gen_range(0..w - bw);
            let seg_class = rng.gen_range(1..classes);
            let obj_depth = rng.gen_range(5.0..40.0);
            let colour = class_colour(seg_class);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let p = (n * h + y) * w + x;
                    seg_labels[p] = seg_class;
                    depth.data_mut()[p] = obj_depth;
                    depth_valid.data_mut()[p] = 1.0;
                    for (c, &v) in colour.iter().enumerate() {
                        image.data_mut()[((n * 3 + c) * h + y) * w + x] = v - obj_depth / 80.0;
                    }
                }
            }
            objects.push(SceneObject {
                image: n,
                seg_class,
                det_class: seg_class as usize % layout.classes,
                bbox: [y0, x0, y0 + bh, x0 + bw],
                center: [y0 as f64 + bh as f64 / 2.0, x0 as f64 + bw as f64 / 2.0],
                depth: obj_depth,
                size: [bh as f64 / 16.0, bw as f64 / 16.0, rng.gen_range(1.0..4.0)],
                yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                pitch_roll: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
            });
        }
    }
    for c in image.data_mut() {
        *c += 0.05 * (rng.gen::<f64>() - 0.5);
    }
    rasterize_targets(&objects, layout, &mut det)?;
    Ok(Batch {
        image,
        seg_labels,
        depth,
        depth_valid,
        det,
        objects,
    })
}

/// Writes Gaussian heatmaps and centre-cell regression targets. A later
/// object sharing a centre cell overwrites the earlier one's regressions.
fn rasterize_targets(objects: &[SceneObject], layout: DetLayout, det: &mut DetectionTargets) -> Result<()> {
    let (_, k, mh, mw) = det.heatmap.dims4()?;
    let plane = mh * mw;
    let s = FEATURE_STRIDE as f64;
    for o in objects {
        let (cy, cx) = (o.center[0] / s, o.center[1] / s);
        let (iy, ix) = ((cy as usize).min(mh - 1), (cx as usize).min(mw - 1));
        let ext = ((o.bbox[2] - o.bbox[0]).max(o.bbox[3] - o.bbox[1])) as f64 / s;
        let sigma = (ext / 6.0).max(0.5);
        let base = (o.image * k + o.det_class) * plane;
        for y in 0..mh {
            for x in 0..mw {
                let d2 = (y as f64 - iy as f64).powi(2) + (x as f64 - ix as f64).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = &mut det.heatmap.data_mut()[base + y * mw + x];
                *cell = cell.max(v);
            }
        }
        let p = iy * mw + ix;
        let at = |ch: usize, channels: usize| (o.image * channels + ch) * plane + p;
        det.offset.data_mut()[at(0, 2)] = cy - iy as f64;
        det.offset.data_mut()[at(1, 2)] = cx - ix as f64;
        det.depth.data_mut()[at(0, 1)] = o.depth;
        for (c, &v) in o.size.iter().enumerate() {
            det.size.data_mut()[at(c, 3)] = v;
        }
        let (bin, res) = layout.encode_yaw(o.yaw);
        det.yaw_bin[o.image * plane + p] = bin;
        det.yaw_res.data_mut()[at(0, 1)] = res;
        for (c, &v) in o.pitch_roll.iter().enumerate() {
            det.pitch_roll.data_mut()[at(c, 2)] = v;
        }
        det.mask.data_mut()[at(0, 1)] = 1.0;
    }
    Ok(())
}

impl Batch {
    pub fn size(&self) -> InputSize {
        let s = self.image.shape();
        InputSize::new(s[2], s[3])
    }

    fn tensors(&self) -> [&Tensor; 10] {
        let d = &self.det;
        [
            &self.image,
            &self.depth,
            &self.depth_valid,
            &d.heatmap,
            &d.offset,
            &d.depth,
            &d.size,
            &d.yaw_res,
            &d.pitch_roll,
            &d.mask,
        ]
    }

    /// Writes `scene.json` plus one tensor file per dense field into `dir`.
    pub fn save(&self, dir: &Path, seed: u64, cfg: &BackboneConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = FixtureMeta {
            seed,
            size: self.size(),
            batch: self.image.shape()[0],
            seg_classes: cfg.seg_classes,
            detection: cfg.detection,
            seg_labels: self.seg_labels.clone(),
            yaw_bin: self.det.yaw_bin.clone(),
            objects: self.objects.clone(),
        };
        serde_json::to_writer(BufWriter::new(File::create(dir.join("scene.json"))?), &meta)?;
        for (name, t) in FIXTURE_TENSORS.iter().zip(self.tensors()) {
            write_tensor(BufWriter::new(File::create(dir.join(format!("{name}.tnsr")))?), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: FixtureMeta = serde_json::from_reader(BufReader::new(File::open(dir.join("scene.json"))?))?;
        let mut ts = Vec::with_capacity(FIXTURE_TENSORS.len());
        for name in FIXTURE_TENSORS {
            ts.push(read_tensor(BufReader::new(File::open(dir.join(format!("{name}.tnsr")))?))?);
        }
        let [image, depth, depth_valid, heatmap, offset, det_depth, size, yaw_res, pitch_roll, mask]: [Tensor; 10] =
            ts.try_into().map_err(|_| Error::Format("fixture tensor count".into()))?;
        let det = DetectionTargets {
            heatmap,
            offset,
            depth: det_depth,
            size,
            yaw_bin: meta.yaw_bin,
            yaw_res,
            pitch_roll,
            mask,
        };
        det.validate(meta.detection)?;
        if meta.seg_labels.len() != image.numel() / 3 {
            return Err(Error::Format("segmentation label count does not match image".into()));
        }
        Ok(Batch {
            image,
            seg_labels: meta.seg_labels,
            depth,
            depth_valid,
            det,
            objects: meta.objects,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BackboneConfig {
        BackboneConfig::default()
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = InputSize::new(64, 128);
        let a = generate(0, s, 2, &cfg()).unwrap();
        let b = generate(0, s, 2, &cfg()).unwrap();
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a, b);
        let c = generate(1, s, 2, &cfg()).unwrap();
        assert!(!a.image.bit_eq(&c.image));
    }

    #[test]
    fn contract() {
        let b = generate(3, InputSize::new(64, 128), 1, &cfg()).unwrap();
        assert!(b.seg_labels.iter().all(|&l| l < 19 || l == IGNORE_LABEL));
        assert!(b.seg_labels.contains(&IGNORE_LABEL));
        assert!(b.objects.iter().all(SceneObject::contains_center));
        assert!(b.det.num_objects() >= 1);
        b.det.validate(DetLayout::default()).unwrap();
        assert_eq!(b.det.heatmap.shape(), &[1, 8, 8, 16]);
        assert!(b.image.all_finite() && b.depth.all_finite());
    }

    #[test]
    fn rejects_small_sizes() {
        assert!(generate(0, InputSize::new(32, 64), 1, &cfg()).is_err());
        assert!(generate(0, InputSize::new(64, 120), 1, &cfg()).is_err());
    }

    #[test]
    fn fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate(5, InputSize::new(64, 128), 1, &cfg()).unwrap();
        b.save(dir.path(), 5, &cfg()).unwrap();
        assert_eq!(Batch::load(dir.path()).unwrap(), b);
    }
}
