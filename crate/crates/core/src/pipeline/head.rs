//! Anchor-free dense detection head.
//!
//! Raw channel layout per cell: `[obj, cls_0 .. cls_{n-1}, tx, ty, tw, th]`.
//! A box decodes as `cx = (col + 0.5 + tx) * stride`, `w = stride * exp(tw)`.

use rand::Rng;

use crate::boxes::{BBox, Detection, GroundTruthBox};
use crate::error::{Error, Result};
use crate::metrics::iou_unchecked;
use crate::params::{join, Parameterized};
use crate::tensor::{conv2d_backward, conv2d_forward, relu_backward_inplace, relu_inplace, ConvCache, FeatureMap, KernelSet};

pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["smoke", "fire"];
pub const HEAD_CHANNELS: usize = 5 + NUM_CLASSES;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
/// Objectness prior `sigmoid(-4.6) ~ 0.01` keeps early training stable.
const OBJ_PRIOR: f64 = -4.6;
/// Bound on decoded log-sizes so `exp` stays finite.
const MAX_LOG_SIZE: f64 = 6.0;

const OBJ: usize = 0;
const CLS: usize = 1;
const BOX: usize = 1 + NUM_CLASSES;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub hidden: KernelSet,
    pub output: KernelSet,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let mut output = KernelSet::he_uniform(HEAD_CHANNELS, hidden, 1, rng);
        output.weights.iter_mut().for_each(|w| *w *= 0.1);
        output.bias[OBJ] = OBJ_PRIOR;
        Self {
            hidden: KernelSet::he_uniform(hidden, channels, 3, rng),
            output,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }
}

impl Parameterized for HeadParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

pub(crate) struct HeadCache {
    hidden: ConvCache,
    hidden_act: FeatureMap,
    output: ConvCache,
}

pub(crate) fn head_forward_cached(fused: &FeatureMap, p: &HeadParams) -> Result<(FeatureMap, HeadCache)> {
    let (mut h, hidden) = conv2d_forward(fused, &p.hidden, 1)?;
    relu_inplace(&mut h);
    let (raw, output) = conv2d_forward(&h, &p.output, 1)?;
    Ok((
        raw,
        HeadCache {
            hidden,
            hidden_act: h,
            output,
        },
    ))
}

/// The raw prediction grid for a fused feature map.
pub fn head_forward(fused: &FeatureMap, p: &HeadParams) -> Result<FeatureMap> {
    Ok(head_forward_cached(fused, p)?.0)
}

/// Returns `(d_fused, d_params)`.
pub(crate) fn head_backward(p: &HeadParams, cache: &HeadCache, grad_raw: &FeatureMap) -> (Vec<f64>, HeadParams) {
    let (dh, g_out) = conv2d_backward(&p.output, &cache.output, grad_raw, true);
    let (c, h, w) = cache.hidden_act.dims();
    let mut dh = FeatureMap::from_parts(c, h, w, dh.expect("input grad"), grad_raw.branch, grad_raw.scale);
    relu_backward_inplace(&mut dh, &cache.hidden_act);
    let (dx, g_hidden) = conv2d_backward(&p.hidden, &cache.hidden, &dh, true);
    (
        dx.expect("input grad"),
        HeadParams {
            hidden: g_hidden,
            output: g_out,
        },
    )
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_raw(raw: &FeatureMap) -> Result<()> {
    if raw.channels() != HEAD_CHANNELS {
        return Err(Error::shape(format!(
            "prediction grid has {} channels, expected {HEAD_CHANNELS}",
            raw.channels()
        )));
    }
    Ok(())
}

/// Per-cell boxes above `score_threshold`, before NMS.
pub fn decode_predictions(
    raw: &FeatureMap,
    stride: usize,
    image_width: usize,
    image_height: usize,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    check_raw(raw)?;
    let s = stride as f64;
    let mut out = Vec::new();
    for row in 0..raw.height() {
        for col in 0..raw.width() {
            let at = |c: usize| raw.get(c, row, col);
            let logits: Vec<f64> = (0..NUM_CLASSES).map(|k| at(CLS + k)).collect();
            let probs = softmax(&logits);
            let (class_id, p_cls) = probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, p)| if p > best.1 { (k, p) } else { best });
            let confidence = sigmoid(at(OBJ)) * p_cls;
            if !(confidence >= score_threshold) {
                continue;
            }
            let cx = (col as f64 + 0.5 + at(BOX)) * s;
            let cy = (row as f64 + 0.5 + at(BOX + 1)) * s;
            let w = s * at(BOX + 2).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
            let h = s * at(BOX + 3).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
            if let Some(bbox) = BBox::from_center(cx, cy, w, h).clipped(image_width as f64, image_height as f64) {
                out.push(Detection {
                    class_id,
                    bbox,
                    confidence,
                });
            }
        }
    }
    Ok(out)
}

/// Per-class greedy suppression; the result is sorted by descending confidence.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou_unchecked(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOptions {
    pub stride: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl HeadOptions {
    pub fn new(stride: usize, image_width: usize, image_height: usize) -> Self {
        Self {
            stride,
            image_width,
            image_height,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_iou: NMS_IOU,
        }
    }
}

/// Detections from the deepest fused feature.
pub fn detect_head(fused: &FeatureMap, p: &HeadParams, opts: &HeadOptions) -> Result<Vec<Detection>> {
    let raw = head_forward(fused, p)?;
    decode_from_raw(&raw, opts)
}

pub fn decode_from_raw(raw: &FeatureMap, opts: &HeadOptions) -> Result<Vec<Detection>> {
    let dets = decode_predictions(raw, opts.stride, opts.image_width, opts.image_height, opts.score_threshold)?;
    Ok(nms(dets, opts.nms_iou))
}

/// Regression target of a GT box at grid cell `(row, col)`.
pub fn box_target(b: &BBox, row: usize, col: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let (cx, cy) = b.center();
    [
        cx / s - col as f64 - 0.5,
        cy / s - row as f64 - 0.5,
        (b.width() / s).ln(),
        (b.height() / s).ln(),
    ]
}

/// Cell index `(row, col)` containing the box center, clamped to the grid.
pub fn center_cell(b: &BBox, stride: usize, grid_h: usize, grid_w: usize) -> (usize, usize) {
    let (cx, cy) = b.center();
    let s = stride as f64;
    let col = ((cx / s).floor().max(0.0) as usize).min(grid_w - 1);
    let row = ((cy / s).floor().max(0.0) as usize).min(grid_h - 1);
    (row, col)
}

/// Positive cells in row-major order; the first GT claiming a cell wins.
pub fn assign_positives(gts: &[GroundTruthBox], stride: usize, grid_h: usize, grid_w: usize) -> Vec<Option<usize>> {
    let mut owner = vec![None; grid_h * grid_w];
    for (g, gt) in gts.iter().enumerate() {
        let (r, c) = center_cell(&gt.bbox, stride, grid_h, grid_w);
        owner[r * grid_w + c].get_or_insert(g);
    }
    owner
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionLoss {
    pub objectness: f64,
    pub class: f64,
    pub bbox: f64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.objectness + self.class + self.bbox
    }
}

/// Loss components and the gradient with respect to `raw`.
pub(crate) fn detection_loss_grad(
    raw: &FeatureMap,
    gts: &[GroundTruthBox],
    stride: usize,
) -> Result<(DetectionLoss, FeatureMap)> {
    check_raw(raw)?;
    if let Some(g) = gts.iter().find(|g| g.class_id >= NUM_CLASSES) {
        return Err(Error::Validation(format!("class id {} out of range", g.class_id)));
    }
    let (gh, gw) = (raw.height(), raw.width());
    let cells = gh * gw;
    let owner = assign_positives(gts, stride, gh, gw);
    let n_pos = owner.iter().flatten().count();
    let mut grad = FeatureMap::zeros(HEAD_CHANNELS, gh, gw, raw.branch, raw.scale);
    let mut loss = DetectionLoss {
        objectness: 0.0,
        class: 0.0,
        bbox: 0.0,
    };
    for row in 0..gh {
        for col in 0..gw {
            let z = raw.get(OBJ, row, col);
            let t = if owner[row * gw + col].is_some() { 1.0 } else { 0.0 };
            loss.objectness += softplus(z) - t * z;
            grad.set(OBJ, row, col, (sigmoid(z) - t) / cells as f64);
        }
    }
    loss.objectness /= cells as f64;
    if n_pos > 0 {
        let inv = 1.0 / n_pos as f64;
        for (cell, g) in owner.iter().enumerate() {
            let Some(g) = *g else { continue };
            let (row, col) = (cell / gw, cell % gw);
            let gt = &gts[g];
            let logits: Vec<f64> = (0..NUM_CLASSES).map(|k| raw.get(CLS + k, row, col)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss.class += lse - logits[gt.class_id];
            for (k, p) in softmax(&logits).into_iter().enumerate() {
                let t = if k == gt.class_id { 1.0 } else { 0.0 };
                grad.set(CLS + k, row, col, (p - t) * inv);
            }
            let target = box_target(&gt.bbox, row, col, stride);
            for (k, t) in target.iter().enumerate() {
                let d = raw.get(BOX + k, row, col) - t;
                loss.bbox += d.abs();
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad.set(BOX + k, row, col, s * inv);
            }
        }
        loss.class *= inv;
        loss.bbox *= inv;
    }
    Ok((loss, grad))
}

/// Objectness BCE over all cells plus class CE and box L1 over positive cells.
pub fn detection_loss(raw: &FeatureMap, gts: &[GroundTruthBox], stride: usize) -> Result<f64> {
    Ok(detection_loss_grad(raw, gts, stride)?.0.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{fd_grad_check, Branch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, fill: impl Fn(usize, usize, usize) -> f64) -> FeatureMap {
        FeatureMap::from_fn(HEAD_CHANNELS, h, w, Branch::Fused, 0, fill)
    }

    fn gt(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruthBox {
        GroundTruthBox {
            class_id,
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
        }
    }

    #[test]
    fn suppressed_objectness_gives_no_detections() {
        let raw = grid(4, 4, |c, _, _| if c == OBJ { -60.0 } else { 0.3 });
        assert!(decode_from_raw(&raw, &HeadOptions::new(8, 32, 32)).unwrap().is_empty());
    }

    #[test]
    fn single_cell_decodes_to_cell_box() {
        let raw = grid(4, 4, |c, y, x| match c {
            OBJ if (y, x) == (1, 2) => 40.0,
            OBJ => -60.0,
            c if c == CLS + 1 => 30.0,
            _ => 0.0,
        });
        let dets = decode_from_raw(&raw, &HeadOptions::new(8, 32, 32)).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert_eq!(dets[0].bbox, BBox::new(16.0, 8.0, 24.0, 16.0).unwrap());
        assert!((dets[0].confidence - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boxes_are_clipped() {
        let raw = grid(2, 2, |c, y, x| match c {
            OBJ if (y, x) == (0, 0) => 10.0,
            OBJ => -60.0,
            c if c == BOX + 2 || c == BOX + 3 => 1.5,
            _ => 0.0,
        });
        let d = &decode_from_raw(&raw, &HeadOptions::new(8, 16, 16)).unwrap()[0];
        assert_eq!((d.bbox.x1, d.bbox.y1), (0.0, 0.0));
        assert!(d.bbox.x2 <= 16.0 && d.bbox.y2 <= 16.0);
    }

    fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        // a detection survives iff no surviving same-class detection of higher rank overlaps it
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
        let mut alive = vec![false; dets.len()];
        for (r, &i) in order.iter().enumerate() {
            alive[i] = !order[..r].iter().any(|&j| {
                alive[j] && dets[j].class_id == dets[i].class_id && iou_unchecked(&dets[i].bbox, &dets[j].bbox) > thr
            });
        }
        order.into_iter().filter(|&i| alive[i]).map(|i| dets[i].clone()).collect()
    }

    #[test]
    fn nms_keeps_higher_duplicate() {
        let a = Detection {
            class_id: 0,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            confidence: 0.6,
        };
        let b = Detection {
            bbox: BBox::new(1.0, 0.0, 11.0, 10.0).unwrap(),
            confidence: 0.9,
            ..a.clone()
        };
        let kept = nms(vec![a.clone(), b.clone()], NMS_IOU);
        assert_eq!(kept, vec![b.clone()]);
        assert_eq!(kept, brute_force_nms(&[a, b], NMS_IOU));
    }

    #[test]
    fn nms_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..200 {
            let n = rng.random_range(0..10);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
                    Detection {
                        class_id: rng.random_range(0..2),
                        bbox: BBox::new(x, y, x + rng.random_range(2.0..10.0), y + rng.random_range(2.0..10.0)).unwrap(),
                        confidence: rng.random_range(0.0..1.0),
                    }
                })
                .collect();
            assert_eq!(nms(dets.clone(), NMS_IOU), brute_force_nms(&dets, NMS_IOU));
        }
    }

    #[test]
    fn empty_image_zero_logits_is_ln2() {
        let raw = grid(3, 5, |_, _, _| 0.0);
        assert!((detection_loss(&raw, &[], 8).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_approach_zero() {
        let gts = [gt(1, 3.0, 5.0, 13.0, 12.0), gt(0, 20.0, 17.0, 30.0, 31.0)];
        let owner = assign_positives(&gts, 8, 4, 4);
        let raw = FeatureMap::from_fn(HEAD_CHANNELS, 4, 4, Branch::Fused, 0, |c, y, x| {
            let Some(g) = owner[y * 4 + x] else {
                return if c == OBJ { -50.0 } else { 0.0 };
            };
            match c {
                OBJ => 50.0,
                c if c < BOX => {
                    if c - CLS == gts[g].class_id {
                        50.0
                    } else {
                        -50.0
                    }
                }
                c => box_target(&gts[g].bbox, y, x, 8)[c - BOX],
            }
        });
        let l = detection_loss(&raw, &gts, 8).unwrap();
        assert!(l >= 0.0 && l < 1e-15, "{l}");
    }

    fn oracle_loss(raw: &FeatureMap, gts: &[GroundTruthBox], stride: usize) -> f64 {
        let (gh, gw) = (raw.height(), raw.width());
        let mut claimed: Vec<(usize, usize, usize)> = Vec::new();
        for (g, b) in gts.iter().enumerate() {
            let (cx, cy) = ((b.bbox.x1 + b.bbox.x2) / 2.0, (b.bbox.y1 + b.bbox.y2) / 2.0);
            let col = ((cx / stride as f64) as usize).min(gw - 1);
            let row = ((cy / stride as f64) as usize).min(gh - 1);
            if !claimed.iter().any(|&(r, c, _)| (r, c) == (row, col)) {
                claimed.push((row, col, g));
            }
        }
        let mut bce = 0.0;
        for y in 0..gh {
            for x in 0..gw {
                let p = 1.0 / (1.0 + (-raw.get(OBJ, y, x)).exp());
                let pos = claimed.iter().any(|&(r, c, _)| (r, c) == (y, x));
                bce -= if pos { p.ln() } else { (1.0 - p).ln() };
            }
        }
        let mut ce = 0.0;
        let mut l1 = 0.0;
        for &(r, c, g) in &claimed {
            let b = &gts[g].bbox;
            let z: Vec<f64> = (0..NUM_CLASSES).map(|k| raw.get(CLS + k, r, c)).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            ce -= (z[gts[g].class_id].exp() / denom).ln();
            let s = stride as f64;
            let t = [
                (b.x1 + b.x2) / 2.0 / s - c as f64 - 0.5,
                (b.y1 + b.y2) / 2.0 / s - r as f64 - 0.5,
                ((b.x2 - b.x1) / s).ln(),
                ((b.y2 - b.y1) / s).ln(),
            ];
            l1 += (0..4).map(|k| (raw.get(BOX + k, r, c) - t[k]).abs()).sum::<f64>();
        }
        let n = claimed.len().max(1) as f64;
        bce / (gh * gw) as f64 + ce / n + l1 / n
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (FeatureMap, Vec<GroundTruthBox>) {
        let (gh, gw) = (rng.random_range(1..5), rng.random_range(1..5));
        let raw = FeatureMap::random(HEAD_CHANNELS, gh, gw, rng).scaled(2.0);
        let n = rng.random_range(0..4);
        let gts = (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..(gw * 8) as f64 - 2.0);
                let y = rng.random_range(0.0..(gh * 8) as f64 - 2.0);
                gt(rng.random_range(0..2), x, y, x + rng.random_range(1.0..12.0), y + rng.random_range(1.0..12.0))
            })
            .collect();
        (raw, gts)
    }

    #[test]
    fn loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..200 {
            let (raw, gts) = random_case(&mut rng);
            let (a, b) = (detection_loss(&raw, &gts, 8).unwrap(), oracle_loss(&raw, &gts, 8));
            assert!(a >= 0.0 && (a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..20 {
            let (raw, gts) = random_case(&mut rng);
            let (_, g) = detection_loss_grad(&raw, &gts, 8).unwrap();
            let (c, h, w) = raw.dims();
            let err = fd_grad_check(
                |v| detection_loss(&FeatureMap::new(c, h, w, v.to_vec(), Branch::Fused, 0).unwrap(), &gts, 8).unwrap(),
                raw.data(),
                g.data(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn head_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let p = HeadParams::init(3, 4, &mut rng);
        let fused = FeatureMap::random(3, 3, 3, &mut rng);
        let up = FeatureMap::random(HEAD_CHANNELS, 3, 3, &mut rng);
        let readout = |p: &HeadParams, f: &FeatureMap| {
            head_forward(f, p).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = head_forward_cached(&fused, &p).unwrap();
        let (dx, dp) = head_backward(&p, &cache, &up);
        let err = fd_grad_check(
            |v| {
                let mut q = p.clone();
                q.set_flat(v).unwrap();
                readout(&q, &fused)
            },
            &p.flat(),
            &dp.flat(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = fd_grad_check(
            |v| readout(&p, &FeatureMap::new(3, 3, 3, v.to_vec(), Branch::Fused, 0).unwrap()),
            fused.data(),
            &dx,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
