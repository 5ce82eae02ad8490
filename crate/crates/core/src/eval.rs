//! Benchmark scoring: FDDB-style discrete and continuous ROC, WIDER-style
//! precision/recall with average precision, and the text formats they read.
//!
//! Matching is greedy in score order: every detection takes the unmatched
//! ground truth with the highest IoU, if that IoU reaches the threshold.
//! Because the greedy assignment of the top-k detections does not depend on
//! lower-scored ones, one matching pass serves every point of a threshold
//! sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};

/// FDDB ellipse annotation. `angle` is in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ellipse {
    pub major_axis_radius: f64,
    pub minor_axis_radius: f64,
    pub angle: f64,
    pub center_x: f64,
    pub center_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub false_positives: usize,
    pub true_positive_rate: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub det: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Tight axis-aligned bounds of a rotated ellipse.
pub fn ellipse_to_box(e: &Ellipse) -> BBox {
    let (a, b) = (e.major_axis_radius, e.minor_axis_radius);
    let (s, c) = e.angle.sin_cos();
    let hw = (a * a * c * c + b * b * s * s).sqrt();
    let hh = (a * a * s * s + b * b * c * c).sqrt();
    BBox {
        x1: e.center_x - hw,
        y1: e.center_y - hh,
        x2: e.center_x + hw,
        y2: e.center_y + hh,
    }
}

/// Detection order used everywhere: descending score, ties by index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching in score order. A pair matches when its IoU
/// strictly exceeds the threshold.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Vec<Match> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, gt);
            if v > iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            taken[g] = true;
            out.push(Match { det: d, gt: g, iou: v });
        }
    }
    out
}

/// Scored outcome of one image: each detection's score and the IoU of its
/// match (if any), plus the number of ground-truth faces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageResult {
    pub scores: Vec<f64>,
    pub matched_iou: Vec<Option<f64>>,
    pub num_gt: usize,
}

impl ImageResult {
    pub fn evaluate(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Self {
        let mut matched_iou = vec![None; dets.len()];
        for m in match_detections(dets, gts, iou_threshold) {
            matched_iou[m.det] = Some(m.iou);
        }
        ImageResult {
            scores: dets.iter().map(|d| d.score).collect(),
            matched_iou,
            num_gt: gts.len(),
        }
    }
}

/// All detections of all images in global rank order.
fn ranked(images: &[ImageResult]) -> Vec<(f64, Option<f64>)> {
    let mut all: Vec<(f64, Option<f64>, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.scores
                .iter()
                .zip(&r.matched_iou)
                .enumerate()
                .map(move |(d, (&s, &m))| (s, m, i, d))
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    all.into_iter().map(|(s, m, _, _)| (s, m)).collect()
}

fn total_gt(images: &[ImageResult]) -> Result<usize> {
    let n: usize = images.iter().map(|r| r.num_gt).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("no ground-truth faces to evaluate against".into()));
    }
    Ok(n)
}

fn roc(images: &[ImageResult], weight: impl Fn(f64) -> f64) -> Result<Vec<RocPoint>> {
    let n_gt = total_gt(images)? as f64;
    let all = ranked(images);
    if all.is_empty() {
        return Ok(vec![RocPoint {
            false_positives: 0,
            true_positive_rate: 0.0,
            score: f64::INFINITY,
        }]);
    }
    let mut points = Vec::new();
    let mut fp = 0;
    let mut tp = 0.0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            match all[i].1 {
                Some(v) => tp += weight(v),
                None => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            false_positives: fp,
            true_positive_rate: tp / n_gt,
            score: s,
        });
    }
    Ok(points)
}

/// FDDB discrete score: a matched detection counts 1.
pub fn discrete_roc(images: &[ImageResult]) -> Result<Vec<RocPoint>> {
    roc(images, |_| 1.0)
}

/// FDDB continuous score: a matched detection counts its IoU.
pub fn continuous_roc(images: &[ImageResult]) -> Result<Vec<RocPoint>> {
    roc(images, |v| v)
}

/// Highest TPR reached with at most `max_fp` false positives.
pub fn tpr_at_fp(curve: &[RocPoint], max_fp: usize) -> f64 {
    curve
        .iter()
        .filter(|p| p.false_positives <= max_fp)
        .map(|p| p.true_positive_rate)
        .fold(0.0, f64::max)
}

/// Precision/recall at every rank and the area under the precision
/// envelope, `sum_i (r_i - r_{i-1}) * max_{j >= i} p_j`.
pub fn pr_curve_ap(images: &[ImageResult]) -> Result<(Vec<PrPoint>, f64)> {
    let n_gt = total_gt(images)? as f64;
    let all = ranked(images);
    let mut curve = Vec::with_capacity(all.len());
    let mut tp = 0usize;
    for (k, &(score, m)) in all.iter().enumerate() {
        if m.is_some() {
            tp += 1;
        }
        curve.push(PrPoint {
            recall: tp as f64 / n_gt,
            precision: tp as f64 / (k + 1) as f64,
            score,
        });
    }
    let mut envelope = vec![0.0; curve.len()];
    let mut running = 0.0f64;
    for k in (0..curve.len()).rev() {
        running = running.max(curve[k].precision);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &env) in curve.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    Ok((curve, ap))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
    pub iou_threshold: f64,
    pub average_precision: f64,
    pub fp_at: usize,
    pub discrete_tpr_at_fp: f64,
    pub continuous_tpr_at_fp: f64,
    pub max_recall: f64,
}

/// Every curve plus the summary for one evaluated set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub discrete: Vec<RocPoint>,
    pub continuous: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
    pub summary: EvalSummary,
}

pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_threshold: f64,
    fp_at: usize,
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let images: Vec<ImageResult> = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| ImageResult::evaluate(d, g, iou_threshold))
        .collect();
    let discrete = discrete_roc(&images)?;
    let continuous = continuous_roc(&images)?;
    let (pr, ap) = pr_curve_ap(&images)?;
    let summary = EvalSummary {
        images: images.len(),
        ground_truths: images.iter().map(|r| r.num_gt).sum(),
        detections: images.iter().map(|r| r.scores.len()).sum(),
        iou_threshold,
        average_precision: ap,
        fp_at,
        discrete_tpr_at_fp: tpr_at_fp(&discrete, fp_at),
        continuous_tpr_at_fp: tpr_at_fp(&continuous, fp_at),
        max_recall: pr.last().map_or(0.0, |p| p.recall),
    };
    Ok(EvalReport {
        discrete,
        continuous,
        pr,
        summary,
    })
}

/// Recall of the detections scoring above `score_threshold`.
pub fn recall_at(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_threshold: f64, score_threshold: f64) -> f64 {
    let mut hit = 0;
    let mut total = 0;
    for (d, g) in dets.iter().zip(gts) {
        let kept: Vec<Detection> = d.iter().copied().filter(|x| x.score > score_threshold).collect();
        hit += match_detections(&kept, g, iou_threshold).len();
        total += g.len();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

pub fn roc_csv(curve: &[RocPoint]) -> String {
    let mut s = String::from("false_positives,true_positive_rate,score\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.false_positives, p.true_positive_rate, p.score);
    }
    s
}

pub fn pr_csv(curve: &[PrPoint]) -> String {
    let mut s = String::from("recall,precision,score\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.recall, p.precision, p.score);
    }
    s
}

/// Line-oriented reader that skips blank lines and tracks line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Next non-blank line, 1-based line number.
    fn next_nonblank(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            let t = l.trim();
            if !t.is_empty() {
                return Some((i + 1, t));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let after = self.last;
        self.next_nonblank()
            .ok_or_else(|| Error::parse(after + 1, format!("unexpected end of file, expected {what}")))
    }
}

fn parse_count(line: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("expected a face count, got `{s}`")))
}

fn parse_reals(line: usize, s: &str, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::parse(line, format!("non-numeric field `{t}`"))))
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(Error::parse(
            line,
            format!("expected {expected} fields, got {}", vals.len()),
        ));
    }
    Ok(vals)
}

/// Reads an FDDB ellipse list: name line, count line, then `count` lines of
/// `major minor angle cx cy score`. The trailing score is ignored.
pub fn parse_fddb_annotations(text: &str) -> Result<BTreeMap<String, Vec<Ellipse>>> {
    let mut out = BTreeMap::new();
    let mut lines = Lines::new(text);
    while let Some((name_line, name)) = lines.next_nonblank() {
        let (cl, count) = lines.expect("a face count")?;
        let count = parse_count(cl, count)?;
        let mut faces = Vec::with_capacity(count);
        for _ in 0..count {
            let (l, s) = lines.expect("an ellipse line")?;
            let v = parse_reals(l, s, 6)?;
            if !(v[0] > 0.0 && v[1] > 0.0) {
                return Err(Error::parse(l, "ellipse radii must be positive"));
            }
            faces.push(Ellipse {
                major_axis_radius: v[0],
                minor_axis_radius: v[1],
                angle: v[2],
                center_x: v[3],
                center_y: v[4],
            });
        }
        if out.insert(name.to_string(), faces).is_some() {
            return Err(Error::parse(name_line, format!("duplicate image `{name}`")));
        }
    }
    Ok(out)
}

pub fn write_fddb_ellipses(images: &[(String, Vec<Ellipse>)]) -> String {
    let mut s = String::new();
    for (name, faces) in images {
        let _ = writeln!(s, "{name}\n{}", faces.len());
        for e in faces {
            let _ = writeln!(
                s,
                "{} {} {} {} {} 1",
                e.major_axis_radius, e.minor_axis_radius, e.angle, e.center_x, e.center_y
            );
        }
    }
    s
}

/// FDDB detection output: name, count, then `x y w h score` per detection
/// with `(x, y)` the top-left corner.
pub fn write_fddb_detections(images: &[(String, Vec<Detection>)]) -> String {
    let mut s = String::new();
    for (name, dets) in images {
        let _ = writeln!(s, "{name}\n{}", dets.len());
        for d in dets {
            let b = &d.bbox;
            let _ = writeln!(s, "{} {} {} {} {}", b.x1, b.y1, b.width(), b.height(), d.score);
        }
    }
    s
}

pub fn parse_fddb_detections(text: &str) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out = BTreeMap::new();
    let mut lines = Lines::new(text);
    while let Some((name_line, name)) = lines.next_nonblank() {
        let (cl, count) = lines.expect("a detection count")?;
        let count = parse_count(cl, count)?;
        let mut dets = Vec::with_capacity(count);
        for _ in 0..count {
            let (l, s) = lines.expect("a detection line")?;
            let v = parse_reals(l, s, 5)?;
            let bbox = BBox::from_xywh(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(l, e.to_string()))?;
            dets.push(Detection::new(bbox, v[4]));
        }
        if out.insert(name.to_string(), dets).is_some() {
            return Err(Error::parse(name_line, format!("duplicate image `{name}`")));
        }
    }
    Ok(out)
}

/// WIDER-style annotations: path line, count line, then `x y w h` per face.
/// Extra trailing fields on a face line are ignored.
pub fn parse_wider_annotations(text: &str) -> Result<Vec<(String, Vec<BBox>)>> {
    let mut out = Vec::new();
    let mut lines = Lines::new(text);
    while let Some((_, path)) = lines.next_nonblank() {
        let (cl, count) = lines.expect("a face count")?;
        let count = parse_count(cl, count)?;
        let mut faces = Vec::with_capacity(count);
        for _ in 0..count {
            let (l, s) = lines.expect("a face line")?;
            let fields: Vec<&str> = s.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(Error::parse(l, format!("expected x y w h, got `{s}`")));
            }
            let v = parse_reals(l, &fields[..4].join(" "), 4)?;
            faces.push(BBox::from_xywh(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(l, e.to_string()))?);
        }
        out.push((path.to_string(), faces));
    }
    Ok(out)
}

pub fn write_wider_annotations(images: &[(String, Vec<BBox>)]) -> String {
    let mut s = String::new();
    for (path, faces) in images {
        let _ = writeln!(s, "{path}\n{}", faces.len());
        for b in faces {
            let _ = writeln!(s, "{} {} {} {}", b.x1, b.y1, b.width(), b.height());
        }
    }
    s
}

/// Image key used to join annotation and detection files: the path without
/// a trailing image extension.
pub fn image_key(path: &str) -> &str {
    for ext in [".pgm", ".jpg", ".jpeg", ".png"] {
        if let Some(stem) = path.strip_suffix(ext) {
            return stem;
        }
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, s: f64) -> Detection {
        Detection::new(b, s)
    }

    #[test]
    fn ellipse_boxes() {
        let e = |angle| Ellipse {
            major_axis_radius: 2.0,
            minor_axis_radius: 1.0,
            angle,
            center_x: 10.0,
            center_y: 20.0,
        };
        assert_eq!(ellipse_to_box(&e(0.0)), bx(8.0, 19.0, 12.0, 21.0));
        let q = ellipse_to_box(&e(FRAC_PI_2));
        assert!((q.width() - 2.0).abs() < 1e-12 && (q.height() - 4.0).abs() < 1e-12);
        let d = ellipse_to_box(&e(FRAC_PI_4));
        assert!((0.5 * d.width() - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((0.5 * d.height() - 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ellipse_box_matches_boundary_sampling() {
        let e = Ellipse {
            major_axis_radius: 2.0,
            minor_axis_radius: 1.0,
            angle: FRAC_PI_4,
            center_x: 0.0,
            center_y: 0.0,
        };
        let (s, c) = e.angle.sin_cos();
        let mut max_x = 0.0f64;
        let mut max_y = 0.0f64;
        for k in 0..10_000 {
            let t = k as f64 / 10_000.0 * std::f64::consts::TAU;
            let (px, py) = (2.0 * t.cos(), t.sin());
            max_x = max_x.max(px * c - py * s);
            max_y = max_y.max(px * s + py * c);
        }
        let b = ellipse_to_box(&e);
        assert!((b.x2 - max_x).abs() < 1e-6);
        assert!((b.y2 - max_y).abs() < 1e-6);
    }

    #[test]
    fn matching_is_one_to_one() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[det(g, 0.9)], &[g], 0.5);
        assert_eq!(m, vec![Match { det: 0, gt: 0, iou: 1.0 }]);
        let m = match_detections(&[det(bx(0.0, 0.0, 10.0, 9.0), 0.6), det(g, 0.8)], &[g], 0.5);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].det, 1);
        // exactly at the threshold is not a match
        let half = bx(0.0, 0.0, 10.0, 5.0);
        assert!(match_detections(&[det(half, 0.9)], &[g], 0.5).is_empty());
    }

    #[test]
    fn roc_edge_cases() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let perfect = [ImageResult::evaluate(&[det(g, 1.0)], &[g], 0.5)];
        let p = discrete_roc(&perfect).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].false_positives, p[0].true_positive_rate), (0, 1.0));
        assert_eq!(continuous_roc(&perfect).unwrap()[0].true_positive_rate, 1.0);

        let none = [ImageResult::evaluate(&[], &[g], 0.5)];
        let p = discrete_roc(&none).unwrap();
        assert_eq!((p[0].false_positives, p[0].true_positive_rate), (0, 0.0));

        let empty = [ImageResult::evaluate(&[det(g, 1.0)], &[], 0.5)];
        assert!(discrete_roc(&empty).is_err());
        assert!(pr_curve_ap(&empty).is_err());

        // IoU 0.6 single match
        let partial = [ImageResult::evaluate(&[det(bx(0.0, 0.0, 10.0, 6.0), 0.7)], &[g], 0.5)];
        let c = continuous_roc(&partial).unwrap();
        assert!((c[0].true_positive_rate - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ap_edge_cases() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let perfect = [ImageResult::evaluate(&[det(g, 0.9)], &[g], 0.5)];
        assert_eq!(pr_curve_ap(&perfect).unwrap().1, 1.0);
        let miss = [ImageResult::evaluate(&[det(bx(50.0, 50.0, 60.0, 60.0), 0.9)], &[g], 0.5)];
        assert_eq!(pr_curve_ap(&miss).unwrap().1, 0.0);
    }

    #[test]
    fn ap_interleaved_hand_computed() {
        // ranks: TP FP TP FP FP TP over 4 gts
        // precisions 1, 1/2, 2/3, 2/4, 2/5, 3/6; recalls 1/4, 1/4, 2/4, 2/4, 2/4, 3/4
        // envelope at recall steps: 1, 2/3, 1/2 -> AP = (1 + 2/3 + 1/2) / 4 = 13/24
        let gts: Vec<BBox> = (0..4).map(|i| bx(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0)).collect();
        let far = |k: f64| bx(100.0 + 20.0 * k, 100.0, 110.0 + 20.0 * k, 110.0);
        let dets = vec![
            det(gts[0], 0.95),
            det(far(0.0), 0.9),
            det(gts[1], 0.8),
            det(far(1.0), 0.7),
            det(far(2.0), 0.6),
            det(gts[2], 0.5),
        ];
        let r = [ImageResult::evaluate(&dets, &gts, 0.5)];
        let (curve, ap) = pr_curve_ap(&r).unwrap();
        assert_eq!(curve.len(), 6);
        assert!((ap - 13.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn fddb_parse_cases() {
        assert!(parse_fddb_annotations("").unwrap().is_empty());
        let text = "img/a\n2\n3 2 0.5 10 10 1\n4 3 0 20 20 1\n";
        let m = parse_fddb_annotations(text).unwrap();
        assert_eq!(m["img/a"].len(), 2);
        assert_eq!(m["img/a"][1].center_x, 20.0);

        let short = "img/a\n3\n3 2 0.5 10 10 1\n4 3 0 20 20 1\n";
        match parse_fddb_annotations(short) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let short_then_next = "img/a\n3\n3 2 0.5 10 10 1\n4 3 0 20 20 1\nimg/b\n0\n";
        match parse_fddb_annotations(short_then_next) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        match parse_fddb_annotations("img\nx\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_fddb_annotations("img\n1\n1 1 0 a 0 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detection_and_wider_formats() {
        let d = vec![(
            "images/00001".to_string(),
            vec![det(bx(1.0, 2.0, 4.5, 8.0), 0.25)],
        )];
        let text = write_fddb_detections(&d);
        assert_eq!(text, "images/00001\n1\n1 2 3.5 6 0.25\n");
        let back = parse_fddb_detections(&text).unwrap();
        assert_eq!(back["images/00001"], d[0].1);

        let w = vec![("images/00001.pgm".to_string(), vec![bx(3.0, 4.0, 13.0, 17.0)])];
        let text = write_wider_annotations(&w);
        assert_eq!(parse_wider_annotations(&text).unwrap(), w);
        assert_eq!(image_key("images/00001.pgm"), "images/00001");
        let extra = "a.jpg\n1\n1 2 3 4 0 0 0 0 0 0\n";
        assert_eq!(parse_wider_annotations(extra).unwrap()[0].1, vec![bx(1.0, 2.0, 4.0, 6.0)]);
    }
}
