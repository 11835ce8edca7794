//! IoU and VOC-style average precision at a fixed IoU threshold.
//!
//! AP uses all-point interpolation: the area under the monotone envelope of
//! the precision/recall curve. Detections are processed in descending
//! confidence (ties in input order); each one is compared with the
//! highest-IoU ground truth of its image (ties to the lowest index) and is a
//! true positive only if that IoU reaches the threshold and the ground truth
//! is still unmatched.

use serde::Serialize;

use crate::boxes::{BBox, Detection, GroundTruthBox};
use crate::error::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const INTERPOLATION: &str = "all-point";

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Per-image detections and ground truth of one class.
#[derive(Clone, Copy, Debug)]
pub struct ImageRecord<'a> {
    pub detections: &'a [Detection],
    pub ground_truth: &'a [GroundTruthBox],
}

/// True-positive flags in processing order plus the number of ground truths.
fn match_records(records: &[ImageRecord<'_>], iou_thr: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(im, r)| (0..r.detections.len()).map(move |d| (im, d)))
        .collect();
    // stable: equal confidences keep input order
    order.sort_by(|a, b| {
        let ca = records[a.0].detections[a.1].confidence;
        let cb = records[b.0].detections[b.1].confidence;
        cb.total_cmp(&ca)
    });
    let mut taken: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.ground_truth.len()]).collect();
    let flags = order
        .iter()
        .map(|&(im, d)| {
            let det = &records[im].detections[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in records[im].ground_truth.iter().enumerate() {
                let v = iou_unchecked(&det.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= iou_thr && !taken[im][g] => {
                    taken[im][g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    let n_gt = records.iter().map(|r| r.ground_truth.len()).sum();
    (flags, n_gt)
}

/// All-point interpolated AP from ordered TP flags.
fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    let n = flags.len();
    let mut mrec = Vec::with_capacity(n + 2);
    let mut mpre = Vec::with_capacity(n + 2);
    mrec.push(0.0);
    mpre.push(0.0);
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        mrec.push(tp as f64 / n_gt as f64);
        mpre.push(tp as f64 / (i + 1) as f64);
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (1..mpre.len()).rev() {
        mpre[i - 1] = mpre[i - 1].max(mpre[i]);
    }
    let mut ap = 0.0;
    for i in 0..mrec.len() - 1 {
        if mrec[i + 1] != mrec[i] {
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1];
        }
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassResult {
    pub class_id: usize,
    pub name: String,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// AP over many images for detections and ground truth already filtered to
/// one class. `None` when there is no ground truth.
pub fn average_precision_records(records: &[ImageRecord<'_>], iou_thr: f64) -> Option<f64> {
    let (flags, n_gt) = match_records(records, iou_thr);
    (n_gt > 0).then(|| ap_from_flags(&flags, n_gt))
}

/// Single-image AP. Class ids are ignored; callers filter beforehand.
/// `None` when `gts` is empty.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthBox], iou_thr: f64) -> Option<f64> {
    average_precision_records(
        &[ImageRecord {
            detections: dets,
            ground_truth: gts,
        }],
        iou_thr,
    )
}

/// Arithmetic mean of the defined per-class APs.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassResult>,
    #[serde(rename = "mAP@.50")]
    pub map50: f64,
    pub iou_threshold: f64,
    pub interpolation: &'static str,
    pub num_images: usize,
}

/// Evaluates `(detections, ground truth)` pairs, one per image.
pub fn evaluate(images: &[(Vec<Detection>, Vec<GroundTruthBox>)], class_names: &[&str]) -> Result<EvalResult> {
    let mut per_class = Vec::with_capacity(class_names.len());
    for (class_id, name) in class_names.iter().enumerate() {
        let filtered: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = images
            .iter()
            .map(|(d, g)| {
                (
                    d.iter().filter(|x| x.class_id == class_id).copied().collect(),
                    g.iter().filter(|x| x.class_id == class_id).copied().collect(),
                )
            })
            .collect();
        let records: Vec<ImageRecord<'_>> = filtered
            .iter()
            .map(|(d, g)| ImageRecord {
                detections: d,
                ground_truth: g,
            })
            .collect();
        let (flags, num_gt) = match_records(&records, IOU_THRESHOLD);
        let tp = flags.iter().filter(|f| **f).count();
        per_class.push(ClassResult {
            class_id,
            name: name.to_string(),
            ap: (num_gt > 0).then(|| ap_from_flags(&flags, num_gt)),
            num_gt,
            tp,
            fp: flags.len() - tp,
            fn_: num_gt - tp,
        });
    }
    let aps: Vec<Option<f64>> = per_class.iter().map(|c| c.ap).collect();
    Ok(EvalResult {
        map50: mean_ap(&aps)?,
        per_class,
        iou_threshold: IOU_THRESHOLD,
        interpolation: INTERPOLATION,
        num_images: images.len(),
    })
}
