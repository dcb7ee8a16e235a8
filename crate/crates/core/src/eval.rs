//! Detection scoring: COCO-style AP, VOC-style mAP and WIDER-style
//! easy/medium/hard PR curves.
//!
//! Detections with equal scores are ranked by `(image_id, insertion index)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::ingest::{Difficulty, HybridManifest};

pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;
pub const WIDER_THRESHOLDS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    image_id: u64,
    class: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
}

/// Reads one `{"image_id","class","x","y","w","h","score"}` object per line.
pub fn read_detections_jsonl(text: &str) -> Result<Vec<Detection>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let d: DetectionLine = serde_json::from_str(l)
                .map_err(|e| Error::MalformedLine { line: i + 1, reason: e.to_string() })?;
            if !d.score.is_finite() {
                return Err(Error::MalformedLine { line: i + 1, reason: "score is not finite".into() });
            }
            let bbox = BBox::new(d.x, d.y, d.w, d.h).map_err(|e| Error::MalformedLine { line: i + 1, reason: e.to_string() })?;
            Ok(Detection { image_id: d.image_id, class: d.class, bbox, score: d.score })
        })
        .collect()
}

pub fn write_detections_jsonl(detections: &[Detection]) -> Result<String> {
    let mut out = String::new();
    for d in detections {
        let line = DetectionLine {
            image_id: d.image_id,
            class: d.class,
            x: d.bbox.x,
            y: d.bbox.y,
            w: d.bbox.w,
            h: d.bbox.h,
            score: d.score,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLabel {
    Tp,
    Fp,
    /// Absorbed by an ignore-flagged ground truth; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGt {
    pub bbox: BBox,
    pub ignore: bool,
}

/// Greedy matching of score-sorted detections against one image's gt of one class.
///
/// A detection takes the still-unmatched, non-ignored gt of highest IoU
/// (at least `iou_threshold`). Failing that, an ignored gt with enough
/// overlap absorbs it; ignored gt may absorb any number of detections.
pub fn match_detections(detections: &[BBox], gts: &[EvalGt], iou_threshold: f64) -> Vec<MatchLabel> {
    let mut taken = vec![false; gts.len()];
    detections
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if gt.ignore || taken[g] {
                    continue;
                }
                let v = iou(d, &gt.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                return MatchLabel::Tp;
            }
            if gts.iter().any(|gt| gt.ignore && iou(d, &gt.bbox) >= iou_threshold) {
                MatchLabel::Ignored
            } else {
                MatchLabel::Fp
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Mean interpolated precision at recall 0, 0.01, ..., 1.
    Coco101,
    /// Area under the monotone precision envelope.
    VocAllPoint,
}

/// Cumulative `(recall, precision)` after each non-ignored detection.
pub fn pr_points(labels: &[MatchLabel], num_gt: usize) -> Vec<(f64, f64)> {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::with_capacity(labels.len());
    for l in labels {
        match l {
            MatchLabel::Tp => tp += 1,
            MatchLabel::Fp => fp += 1,
            MatchLabel::Ignored => continue,
        }
        out.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    out
}

/// All-point interpolated area under a PR curve whose recalls are nondecreasing.
pub fn voc_area(points: &[(f64, f64)]) -> f64 {
    let mut rec = Vec::with_capacity(points.len() + 2);
    let mut prec = Vec::with_capacity(points.len() + 2);
    rec.push(0.0);
    prec.push(0.0);
    for &(r, p) in points {
        rec.push(r);
        prec.push(p);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..rec.len() {
        if rec[i] != rec[i - 1] {
            ap += (rec[i] - rec[i - 1]) * prec[i];
        }
    }
    ap
}

fn coco_area(points: &[(f64, f64)]) -> f64 {
    // precision envelope from the right
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while k < points.len() && points[k].0 < r {
            k += 1;
        }
        if k < points.len() {
            sum += envelope[k];
        }
    }
    sum / 101.0
}

/// AP of ranked match labels. Zero when `num_gt == 0`.
pub fn average_precision(labels: &[MatchLabel], num_gt: usize, mode: ApMode) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let points = pr_points(labels, num_gt);
    match mode {
        ApMode::Coco101 => coco_area(&points),
        ApMode::VocAllPoint => voc_area(&points),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..LARGE_AREA).contains(&area),
            AreaRange::Large => area >= LARGE_AREA,
        }
    }
}

pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Detections indexed by `(image_id, class)`, each list sorted by
/// descending score with insertion order among ties.
struct Indexed<'a> {
    manifest: &'a HybridManifest,
    by_image_class: BTreeMap<(u64, usize), Vec<(usize, &'a Detection)>>,
}

impl<'a> Indexed<'a> {
    fn new(detections: &'a [Detection], manifest: &'a HybridManifest, cap: Option<usize>) -> Result<Self> {
        let k = manifest.label_space.num_classes();
        let mut per_image: BTreeMap<u64, Vec<(usize, &Detection)>> =
            manifest.images.iter().map(|i| (i.image_id, Vec::new())).collect();
        for (n, d) in detections.iter().enumerate() {
            if d.class >= k {
                return Err(Error::UnknownClass(d.class));
            }
            if !d.score.is_finite() {
                return Err(Error::InvalidParameter(format!("detection {n} has non-finite score")));
            }
            per_image.get_mut(&d.image_id).ok_or(Error::UnknownImage(d.image_id))?.push((n, d));
        }
        let mut by_image_class: BTreeMap<(u64, usize), Vec<(usize, &Detection)>> = BTreeMap::new();
        for (image_id, mut dets) in per_image {
            dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
            if let Some(cap) = cap {
                dets.truncate(cap);
            }
            for (n, d) in dets {
                by_image_class.entry((image_id, d.class)).or_default().push((n, d));
            }
        }
        Ok(Self { manifest, by_image_class })
    }

    fn detections(&self, image_id: u64, class: usize) -> &[(usize, &'a Detection)] {
        self.by_image_class.get(&(image_id, class)).map_or(&[], Vec::as_slice)
    }

    /// Ranked labels pooled over images plus the number of counted gt.
    fn ranked_labels(
        &self,
        class: usize,
        threshold: f64,
        gt_ignored: impl Fn(&crate::ingest::Annotation) -> bool,
        det_ignored: impl Fn(&Detection) -> bool,
    ) -> (Vec<MatchLabel>, usize) {
        let mut scored: Vec<(f64, MatchLabel)> = Vec::new();
        let mut num_gt = 0;
        let mut images: Vec<_> = self.manifest.images.iter().collect();
        images.sort_by_key(|i| i.image_id);
        for img in images {
            let gts: Vec<EvalGt> = img
                .annotations
                .iter()
                .filter(|a| a.hybrid_class == class)
                .map(|a| EvalGt { bbox: a.bbox, ignore: gt_ignored(a) })
                .collect();
            num_gt += gts.iter().filter(|g| !g.ignore).count();
            let dets = self.detections(img.image_id, class);
            let boxes: Vec<BBox> = dets.iter().map(|(_, d)| d.bbox).collect();
            let labels = match_detections(&boxes, &gts, threshold);
            for ((_, d), label) in dets.iter().zip(labels) {
                let label = if label == MatchLabel::Fp && det_ignored(d) { MatchLabel::Ignored } else { label };
                scored.push((d.score, label));
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        (scored.into_iter().map(|s| s.1).collect(), num_gt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoClassMetrics {
    pub class: usize,
    pub name: String,
    pub num_gt: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub per_class: Vec<CocoClassMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// COCO-style AP averaged over IoU 0.50:0.05:0.95 with S/M/L area buckets and
/// at most 100 detections per image.
pub fn coco_report(detections: &[Detection], manifest: &HybridManifest) -> Result<CocoMetrics> {
    let idx = Indexed::new(detections, manifest, Some(MAX_DETECTIONS_PER_IMAGE))?;
    let thresholds = coco_iou_thresholds();
    let mut per_class = Vec::new();
    for class in manifest.label_space.classes() {
        let c = class.index;
        let by_range = |range: AreaRange| -> (Vec<f64>, usize) {
            let mut num_gt = 0;
            let aps = thresholds
                .iter()
                .map(|&t| {
                    let (labels, n) = idx.ranked_labels(
                        c,
                        t,
                        |a| a.ignore || !range.contains(a.bbox.area()),
                        |d| !range.contains(d.bbox.area()),
                    );
                    num_gt = n;
                    average_precision(&labels, n, ApMode::Coco101)
                })
                .collect();
            (aps, num_gt)
        };
        let mean = |aps: &[f64], n: usize| (n > 0).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        let (all, num_gt) = by_range(AreaRange::All);
        let (small, ns) = by_range(AreaRange::Small);
        let (medium, nm) = by_range(AreaRange::Medium);
        let (large, nl) = by_range(AreaRange::Large);
        per_class.push(CocoClassMetrics {
            class: c,
            name: class.canonical_name.clone(),
            num_gt,
            ap: mean(&all, num_gt),
            ap50: (num_gt > 0).then_some(all[0]),
            ap75: (num_gt > 0).then_some(all[5]),
            ap_s: mean(&small, ns),
            ap_m: mean(&medium, nm),
            ap_l: mean(&large, nl),
        });
    }
    Ok(CocoMetrics {
        ap: mean_defined(per_class.iter().map(|c| c.ap)),
        ap50: mean_defined(per_class.iter().map(|c| c.ap50)),
        ap75: mean_defined(per_class.iter().map(|c| c.ap75)),
        ap_s: mean_defined(per_class.iter().map(|c| c.ap_s)),
        ap_m: mean_defined(per_class.iter().map(|c| c.ap_m)),
        ap_l: mean_defined(per_class.iter().map(|c| c.ap_l)),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocClassMetrics {
    pub class: usize,
    pub name: String,
    pub num_gt: usize,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocMetrics {
    pub map: f64,
    pub per_class: Vec<VocClassMetrics>,
}

/// VOC-style mAP at IoU 0.5 with all-point interpolation; difficult gt are ignored.
pub fn voc_report(detections: &[Detection], manifest: &HybridManifest) -> Result<VocMetrics> {
    let idx = Indexed::new(detections, manifest, None)?;
    let per_class: Vec<VocClassMetrics> = manifest
        .label_space
        .classes()
        .iter()
        .map(|class| {
            let (labels, n) = idx.ranked_labels(class.index, 0.5, |a| a.ignore, |_| false);
            VocClassMetrics {
                class: class.index,
                name: class.canonical_name.clone(),
                num_gt: n,
                ap: (n > 0).then(|| average_precision(&labels, n, ApMode::VocAllPoint)),
            }
        })
        .collect();
    Ok(VocMetrics { map: mean_defined(per_class.iter().map(|c| c.ap)), per_class })
}

/// Difficulty from gt height relative to the canvas, for data without real tags.
pub fn synthetic_difficulty(gt_height: f64, canvas_height: f64) -> Difficulty {
    if gt_height >= canvas_height / 4.0 {
        Difficulty::Easy
    } else if gt_height >= canvas_height / 8.0 {
        Difficulty::Medium
    } else {
        Difficulty::Hard
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiderSubset {
    pub ap: f64,
    pub num_gt: usize,
    /// `(recall, precision)` at normalized score thresholds 0.999, 0.998, ..., 0.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiderMetrics {
    pub class: usize,
    pub easy: WiderSubset,
    pub medium: WiderSubset,
    pub hard: WiderSubset,
}

/// WIDER-style evaluation of one class. Subsets are nested (easy within
/// medium within hard); gt outside a subset are ignored for that subset.
/// Scores are min-max normalized over the class's detections before the
/// 1000-threshold sweep.
pub fn wider_report(detections: &[Detection], manifest: &HybridManifest, class: usize) -> Result<WiderMetrics> {
    manifest.label_space.class(class)?;
    for img in &manifest.images {
        if img.annotations.iter().any(|a| a.hybrid_class == class && a.difficulty.is_none()) {
            return Err(Error::MissingDifficultyTags(class));
        }
    }
    let idx = Indexed::new(detections, manifest, None)?;
    let (lo, hi) = detections
        .iter()
        .filter(|d| d.class == class)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d.score), hi.max(d.score)));
    let normalize = |s: f64| if hi > lo { (s - lo) / (hi - lo) } else { 1.0 };

    let subset = |max: Difficulty| -> WiderSubset {
        let mut scored: Vec<(f64, MatchLabel)> = Vec::new();
        let mut num_gt = 0;
        let mut images: Vec<_> = manifest.images.iter().collect();
        images.sort_by_key(|i| i.image_id);
        for img in images {
            let gts: Vec<EvalGt> = img
                .annotations
                .iter()
                .filter(|a| a.hybrid_class == class)
                .map(|a| EvalGt { bbox: a.bbox, ignore: a.ignore || a.difficulty.is_none_or(|d| d > max) })
                .collect();
            num_gt += gts.iter().filter(|g| !g.ignore).count();
            let dets = idx.detections(img.image_id, class);
            let boxes: Vec<BBox> = dets.iter().map(|(_, d)| d.bbox).collect();
            for ((_, d), label) in dets.iter().zip(match_detections(&boxes, &gts, 0.5)) {
                scored.push((normalize(d.score), label));
            }
        }
        let pr_curve: Vec<(f64, f64)> = (0..WIDER_THRESHOLDS)
            .map(|k| {
                let t = 1.0 - (k + 1) as f64 / WIDER_THRESHOLDS as f64;
                let (mut tp, mut proposals) = (0usize, 0usize);
                for &(s, l) in &scored {
                    if s >= t && l != MatchLabel::Ignored {
                        proposals += 1;
                        if l == MatchLabel::Tp {
                            tp += 1;
                        }
                    }
                }
                let recall = if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 };
                let precision = if proposals > 0 { tp as f64 / proposals as f64 } else { 0.0 };
                (recall, precision)
            })
            .collect();
        let ap = if num_gt > 0 { voc_area(&pr_curve) } else { 0.0 };
        WiderSubset { ap, num_gt, pr_curve }
    };
    Ok(WiderMetrics {
        class,
        easy: subset(Difficulty::Easy),
        medium: subset(Difficulty::Medium),
        hard: subset(Difficulty::Hard),
    })
}

/// Everything `evaluate` can report; sections not requested are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coco: Option<CocoMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voc: Option<VocMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wider: Vec<WiderMetrics>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Annotation, ImageRecord};
    use crate::label_space::{ConflictMatrix, ConflictPolicy, DatasetId, HybridLabelSpace, SourceList};
    use MatchLabel::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox { x, y, w, h }
    }

    #[test]
    fn greedy_matching_examples() {
        let gt = [EvalGt { bbox: b(0.0, 0.0, 10.0, 10.0), ignore: false }];
        // IoU 0.6 and ~0.2
        let d1 = b(0.0, 0.0, 10.0, 6.0);
        let d2 = b(0.0, 0.0, 2.0, 10.0);
        assert!((iou(&d1, &gt[0].bbox) - 0.6).abs() < 1e-12);
        assert_eq!(match_detections(&[d1, d2], &gt, 0.5), vec![Tp, Fp]);
        assert!(match_detections(&[], &gt, 0.5).is_empty());
        assert_eq!(match_detections(&[gt[0].bbox, gt[0].bbox], &gt, 0.5), vec![Tp, Fp]);
        let crowd = [EvalGt { bbox: b(0.0, 0.0, 10.0, 10.0), ignore: true }];
        assert_eq!(match_detections(&[d1, d1], &crowd, 0.5), vec![Ignored, Ignored]);
    }

    /// Every one-to-one assignment consistent with processing detections in
    /// rank order, each taking its best remaining gt.
    fn exhaustive_greedy(dets: &[BBox], gts: &[BBox], t: f64) -> Vec<MatchLabel> {
        fn go(i: usize, dets: &[BBox], gts: &[BBox], used: &mut Vec<bool>, t: f64, out: &mut Vec<MatchLabel>) {
            if i == dets.len() {
                return;
            }
            let options: Vec<(usize, f64)> =
                (0..gts.len()).filter(|&g| !used[g]).map(|g| (g, iou(&dets[i], &gts[g]))).filter(|x| x.1 >= t).collect();
            let best = options.iter().fold(None, |acc: Option<(usize, f64)>, &(g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    out.push(Tp);
                }
                None => out.push(Fp),
            }
            go(i + 1, dets, gts, used, t, out);
        }
        let mut out = Vec::new();
        go(0, dets, gts, &mut vec![false; gts.len()], t, &mut out);
        out
    }

    #[test]
    fn matching_agrees_with_exhaustive_oracle() {
        let gts = [b(0.0, 0.0, 10.0, 10.0), b(3.0, 0.0, 10.0, 10.0), b(30.0, 30.0, 5.0, 5.0)];
        let dets = [b(1.0, 0.0, 10.0, 10.0), b(2.0, 1.0, 10.0, 10.0), b(0.0, 0.0, 9.0, 9.0), b(30.0, 31.0, 5.0, 5.0)];
        let eval_gts: Vec<EvalGt> = gts.iter().map(|&bbox| EvalGt { bbox, ignore: false }).collect();
        for t in [0.3, 0.5, 0.7, 0.9] {
            assert_eq!(match_detections(&dets, &eval_gts, t), exhaustive_greedy(&dets, &gts, t));
        }
    }

    /// Integrates max precision to the right over a fine recall grid.
    fn brute_integral(labels: &[MatchLabel], num_gt: usize) -> f64 {
        let pts = pr_points(labels, num_gt);
        let n = 100_000;
        (0..n)
            .map(|i| {
                let r = (i as f64 + 0.5) / n as f64;
                pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[Tp, Fp], 1, ApMode::Coco101), 1.0);
        assert_eq!(average_precision(&[Tp, Fp], 1, ApMode::VocAllPoint), 1.0);
        assert_eq!(average_precision(&[Fp, Tp], 1, ApMode::VocAllPoint), 0.5);
        assert!((brute_integral(&[Fp, Tp], 1) - 0.5).abs() < 1e-9);
        assert_eq!(average_precision(&[], 3, ApMode::Coco101), 0.0);
        assert_eq!(average_precision(&[], 3, ApMode::VocAllPoint), 0.0);
        assert_eq!(average_precision(&[Tp], 0, ApMode::VocAllPoint), 0.0);
        // ignored entries do not count
        assert_eq!(average_precision(&[Ignored, Tp], 1, ApMode::VocAllPoint), 1.0);

        let labels = [Tp, Fp, Tp, Tp, Fp, Fp, Tp, Fp];
        assert!((average_precision(&labels, 5, ApMode::VocAllPoint) - brute_integral(&labels, 5)).abs() < 1e-4);
    }

    #[test]
    fn ap_top_rank_tp_never_hurts() {
        let base = [Fp, Tp, Fp, Tp, Fp];
        for mode in [ApMode::Coco101, ApMode::VocAllPoint] {
            for n in 2..6 {
                let mut better = vec![Tp];
                better.extend_from_slice(&base);
                assert!(average_precision(&better, n, mode) >= average_precision(&base, n, mode));
            }
        }
    }

    fn tiny_manifest(boxes: Vec<(u64, Vec<(usize, BBox, Option<Difficulty>)>)>) -> HybridManifest {
        let sources = vec![SourceList::new("synth", &["a", "b"]).unwrap()];
        let space = HybridLabelSpace::build(&sources, &[]).unwrap();
        let conflicts = ConflictMatrix::new(space.datasets().to_vec(), ConflictPolicy::AllConflicting);
        let images = boxes
            .into_iter()
            .map(|(id, anns)| ImageRecord {
                image_id: id,
                dataset: DatasetId::new("synth").unwrap(),
                width: 200.0,
                height: 200.0,
                uri: format!("img{id}"),
                annotations: anns
                    .into_iter()
                    .map(|(c, bbox, difficulty)| Annotation { bbox, hybrid_class: c, ignore: false, difficulty })
                    .collect(),
            })
            .collect();
        HybridManifest { label_space: space, conflicts, images }
    }

    #[test]
    fn coco_perfect_and_wrong_class() {
        let m = tiny_manifest(vec![
            (1, vec![(0, b(10.0, 10.0, 20.0, 20.0), None), (0, b(50.0, 50.0, 100.0, 100.0), None)]),
            (2, vec![(0, b(0.0, 0.0, 50.0, 40.0), None)]),
        ]);
        let perfect: Vec<Detection> = m
            .images
            .iter()
            .flat_map(|i| i.annotations.iter().map(move |a| Detection { image_id: i.image_id, class: 0, bbox: a.bbox, score: 1.0 }))
            .collect();
        let r = coco_report(&perfect, &m).unwrap();
        assert_eq!(r.ap, 1.0);
        assert_eq!((r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.per_class[1].ap, None);

        let wrong: Vec<Detection> = perfect.iter().map(|d| Detection { class: 1, ..*d }).collect();
        let r = coco_report(&wrong, &m).unwrap();
        assert_eq!(r.per_class[0].ap, Some(0.0));
        assert_eq!(r.ap, 0.0);

        assert!(matches!(coco_report(&[Detection { image_id: 9, ..perfect[0] }], &m), Err(Error::UnknownImage(9))));
        assert!(matches!(coco_report(&[Detection { class: 5, ..perfect[0] }], &m), Err(Error::UnknownClass(5))));

        let empty = coco_report(&[], &m).unwrap();
        assert_eq!(empty.ap, 0.0);
        let voc = voc_report(&perfect, &m).unwrap();
        assert_eq!(voc.map, 1.0);
    }

    #[test]
    fn coco_detection_cap() {
        let m = tiny_manifest(vec![(1, vec![(0, b(10.0, 10.0, 20.0, 20.0), None)])]);
        // 100 higher-scored false positives push the true box past the cap.
        let mut dets: Vec<Detection> = (0..100)
            .map(|k| Detection { image_id: 1, class: 1, bbox: b(k as f64, 150.0, 5.0, 5.0), score: 0.9 })
            .collect();
        dets.push(Detection { image_id: 1, class: 0, bbox: b(10.0, 10.0, 20.0, 20.0), score: 0.5 });
        assert_eq!(coco_report(&dets, &m).unwrap().per_class[0].ap, Some(0.0));
        dets.pop();
        dets.insert(0, Detection { image_id: 1, class: 0, bbox: b(10.0, 10.0, 20.0, 20.0), score: 0.95 });
        assert_eq!(coco_report(&dets, &m).unwrap().per_class[0].ap, Some(1.0));
    }

    #[test]
    fn wider_nested_subsets() {
        let m = tiny_manifest(vec![(1, vec![(0, b(10.0, 10.0, 60.0, 60.0), Some(Difficulty::Easy)), (0, b(100.0, 100.0, 60.0, 60.0), Some(Difficulty::Easy))])]);
        let perfect: Vec<Detection> = m.images[0]
            .annotations
            .iter()
            .map(|a| Detection { image_id: 1, class: 0, bbox: a.bbox, score: 0.8 })
            .collect();
        let r = wider_report(&perfect, &m, 0).unwrap();
        for s in [&r.easy, &r.medium, &r.hard] {
            assert_eq!(s.ap, 1.0);
            assert_eq!(s.num_gt, 2);
            assert_eq!(s.pr_curve.len(), WIDER_THRESHOLDS);
        }
        let none = wider_report(&[], &m, 0).unwrap();
        assert_eq!((none.easy.ap, none.medium.ap, none.hard.ap), (0.0, 0.0, 0.0));

        let untagged = tiny_manifest(vec![(1, vec![(0, b(10.0, 10.0, 60.0, 60.0), None)])]);
        assert!(matches!(wider_report(&[], &untagged, 0), Err(Error::MissingDifficultyTags(0))));
    }

    #[test]
    fn wider_matches_brute_force_integration() {
        let m = tiny_manifest(vec![
            (1, vec![(0, b(10.0, 10.0, 60.0, 60.0), Some(Difficulty::Easy)), (0, b(100.0, 10.0, 30.0, 30.0), Some(Difficulty::Medium))]),
            (2, vec![(0, b(5.0, 5.0, 12.0, 12.0), Some(Difficulty::Hard)), (0, b(120.0, 120.0, 40.0, 40.0), Some(Difficulty::Easy))]),
        ]);
        let dets = vec![
            Detection { image_id: 1, class: 0, bbox: b(10.0, 10.0, 60.0, 60.0), score: 0.9 },
            Detection { image_id: 1, class: 0, bbox: b(100.0, 10.0, 30.0, 30.0), score: 0.3 },
            Detection { image_id: 1, class: 0, bbox: b(150.0, 150.0, 30.0, 30.0), score: 0.7 },
            Detection { image_id: 2, class: 0, bbox: b(5.0, 5.0, 12.0, 12.0), score: 0.5 },
            Detection { image_id: 2, class: 0, bbox: b(60.0, 60.0, 10.0, 10.0), score: 0.1 },
        ];
        let r = wider_report(&dets, &m, 0).unwrap();
        // Hard subset, hand ranked: 0.9 TP, 0.7 FP, 0.5 TP, 0.3 TP, 0.1 FP of 4 gt.
        // Envelope: recall .25 -> 1, .5 -> .75, .75 -> .75, stays 0 beyond.
        let hard = 0.25 * 1.0 + 0.25 * 0.75 + 0.25 * 0.75;
        assert!((r.hard.ap - hard).abs() < 1e-12, "{}", r.hard.ap);
        // Medium ignores the hard gt: the 0.5 detection is absorbed.
        // Ranking 0.9 TP, 0.7 FP, 0.3 TP, 0.1 FP over 3 gt.
        let medium = (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * (2.0 / 3.0);
        assert!((r.medium.ap - medium).abs() < 1e-12, "{}", r.medium.ap);
        // Easy: 0.9 TP, 0.7 FP; the 0.3 and 0.5 are absorbed; 2 gt.
        assert!((r.easy.ap - 0.5).abs() < 1e-12, "{}", r.easy.ap);
    }

    #[test]
    fn detections_jsonl_round_trip() {
        let dets = vec![Detection { image_id: 3, class: 1, bbox: b(1.5, 2.25, 3.0, 4.125), score: 0.1 + 0.2 }];
        let text = write_detections_jsonl(&dets).unwrap();
        assert_eq!(read_detections_jsonl(&text).unwrap(), dets);
        assert!(read_detections_jsonl("{\"image_id\":1}\n").is_err());
        assert!(read_detections_jsonl("").unwrap().is_empty());
    }

    #[test]
    fn synthetic_difficulty_thresholds() {
        assert_eq!(synthetic_difficulty(32.0, 128.0), Difficulty::Easy);
        assert_eq!(synthetic_difficulty(16.0, 128.0), Difficulty::Medium);
        assert_eq!(synthetic_difficulty(15.9, 128.0), Difficulty::Hard);
    }
}
