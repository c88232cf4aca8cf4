//! Class-agnostic instance segmentation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_model::InstanceLabeling3D;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

pub fn instance_iou(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.is_empty() && gt.is_empty() {
        return Err(Error::InvalidInput("IoU of two empty sets".into()));
    }
    let (p, g) = (sorted(pred), sorted(gt));
    let inter = intersection_size(&p, &g);
    Ok(inter as f64 / (p.len() + g.len() - inter) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub points: Vec<usize>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub ap: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Ranking: score descending, then size descending, then input order.
fn ranking(preds: &[ScoredInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[b].points.len().cmp(&preds[a].points.len()))
            .then(a.cmp(&b))
    });
    order
}

/// Precision/recall staircase from a ranked TP/FP sequence.
fn staircase(hits: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // All-point interpolation: precision envelope from the right.
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..hits.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * envelope[k];
            prev_recall = recall[k];
        }
    }
    (precision, recall, ap)
}

fn match_ranked(preds: &[ScoredInstance], gts: &[Vec<usize>], ious: &[Vec<f64>], thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    ranking(preds)
        .into_iter()
        .map(|p| {
            let mut best: Option<(f64, usize)> = None;
            for (g, &iou) in ious[p].iter().enumerate() {
                if !taken[g] && iou >= thresh && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            match best {
                Some((_, g)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn iou_table(preds: &[ScoredInstance], gts: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let gts: Vec<Vec<usize>> = gts.iter().map(|g| sorted(g)).collect();
    preds
        .iter()
        .map(|p| {
            let ps = sorted(&p.points);
            gts.iter()
                .map(|g| {
                    let inter = intersection_size(&ps, g);
                    let union = ps.len() + g.len() - inter;
                    if union == 0 {
                        0.0
                    } else {
                        inter as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect()
}

fn curve(preds: &[ScoredInstance], gts: &[Vec<usize>], ious: &[Vec<f64>], thresh: f64) -> PrCurve {
    let hits = match_ranked(preds, gts, ious, thresh);
    let (precision, recall, ap) = staircase(&hits, gts.len());
    PrCurve {
        iou_threshold: thresh,
        ap,
        precision,
        recall,
    }
}

/// Greedy score-ordered matching at one IoU threshold; area under the
/// all-point-interpolated precision/recall curve.
pub fn average_precision(preds: &[ScoredInstance], gts: &[Vec<usize>], iou_thresh: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::InvalidInput("no ground-truth instances".into()));
    }
    let ious = iou_table(preds, gts);
    Ok(curve(preds, gts, &ious, iou_thresh).ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP25")]
    pub ap25: f64,
    pub curves: Vec<PrCurve>,
}

/// Predicted instances with confidences, as scored predictions.
pub fn scored_instances(pred: &InstanceLabeling3D, scores: &[f64]) -> Result<Vec<ScoredInstance>> {
    if scores.len() != pred.num_instances as usize {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} instances",
            scores.len(),
            pred.num_instances
        )));
    }
    Ok(pred
        .instances()
        .into_iter()
        .zip(scores)
        .filter(|(p, _)| !p.is_empty())
        .map(|(points, &score)| ScoredInstance { points, score })
        .collect())
}

/// AP25, AP50 and mAP over 0.50..0.95. Predicted points that the ground truth
/// leaves unlabeled are ignored.
pub fn evaluate(pred: &InstanceLabeling3D, scores: &[f64], gt: &InstanceLabeling3D) -> Result<EvalResult> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "prediction covers {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let gts: Vec<Vec<usize>> = gt.instances().into_iter().filter(|g| !g.is_empty()).collect();
    if gts.is_empty() {
        return Err(Error::InvalidInput("no ground-truth instances".into()));
    }
    let preds: Vec<ScoredInstance> = scored_instances(pred, scores)?
        .into_iter()
        .map(|mut p| {
            p.points.retain(|&i| gt.labels[i] != 0);
            p
        })
        .filter(|p| !p.points.is_empty())
        .collect();
    let ious = iou_table(&preds, &gts);
    let mut thresholds = vec![0.25];
    thresholds.extend(map_thresholds());
    let curves: Vec<PrCurve> = thresholds.iter().map(|&t| curve(&preds, &gts, &ious, t)).collect();
    let map = curves[1..].iter().map(|c| c.ap).sum::<f64>() / 10.0;
    Ok(EvalResult {
        map,
        ap50: curves[1].ap,
        ap25: curves[0].ap,
        curves,
    })
}

/// Mean of the headline numbers over several results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP25")]
    pub ap25: f64,
}

impl Summary {
    pub fn of(r: &EvalResult) -> Self {
        Summary {
            map: r.map,
            ap50: r.ap50,
            ap25: r.ap25,
        }
    }

    pub fn mean(items: &[Summary]) -> Self {
        if items.is_empty() {
            return Summary::default();
        }
        let n = items.len() as f64;
        Summary {
            map: items.iter().map(|s| s.map).sum::<f64>() / n,
            ap50: items.iter().map(|s| s.ap50).sum::<f64>() / n,
            ap25: items.iter().map(|s| s.ap25).sum::<f64>() / n,
        }
    }
}

/// Plain-text table with a name column followed by mAP / AP50 / AP25.
pub fn format_table(rows: &[(String, Summary)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", "variant", "mAP", "AP50", "AP25");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}",
            name,
            100.0 * s.map,
            100.0 * s.ap50,
            100.0 * s.ap25
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(points: Vec<usize>, score: f64) -> ScoredInstance {
        ScoredInstance { points, score }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(instance_iou(&[1, 2, 3], &[3, 2, 1]).unwrap(), 1.0);
        assert_eq!(instance_iou(&[1], &[2]).unwrap(), 0.0);
        assert!((instance_iou(&[0, 1, 2, 3], &[2, 3, 4, 5]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(instance_iou(&[], &[]).is_err());
    }

    #[test]
    fn ap_examples() {
        let gts = vec![vec![0, 1], vec![2, 3]];
        let perfect = vec![inst(vec![0, 1], 0.9), inst(vec![2, 3], 0.8)];
        assert_eq!(average_precision(&perfect, &gts, 0.5).unwrap(), 1.0);
        let half = vec![inst(vec![0, 1], 0.9)];
        for t in [0.25, 0.5, 0.95] {
            assert_eq!(average_precision(&half, &gts, t).unwrap(), 0.5);
        }
        assert_eq!(average_precision(&[], &gts, 0.5).unwrap(), 0.0);
        assert!(average_precision(&perfect, &[], 0.5).is_err());
    }

    #[test]
    fn false_positive_ranked_first_costs_precision() {
        let gts = vec![vec![0, 1]];
        let preds = vec![inst(vec![5, 6], 0.9), inst(vec![0, 1], 0.5)];
        assert_eq!(average_precision(&preds, &gts, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn eroded_prediction() {
        // Each of 3 instances keeps 6 of its 10 points: IoU exactly 0.6.
        let gt = InstanceLabeling3D::from_raw(&(0..30).map(|i| i / 10 + 1).collect::<Vec<u32>>());
        let pred = InstanceLabeling3D::from_raw(
            &(0..30)
                .map(|i| if i % 10 < 6 { i / 10 + 1 } else { 0 })
                .collect::<Vec<u32>>(),
        );
        let r = evaluate(&pred, &[1.0, 0.9, 0.8], &gt).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap25, 1.0);
        assert!((r.map - 0.3).abs() < 1e-15);
    }

    #[test]
    fn permutation_invariant_and_size_checked() {
        let gt = InstanceLabeling3D::from_raw(&[1, 1, 2, 2, 0, 3]);
        let pred = InstanceLabeling3D::from_raw(&[3, 3, 1, 1, 0, 2]);
        let r = evaluate(&pred, &[0.5, 0.5, 0.5], &gt).unwrap();
        assert_eq!((r.map, r.ap50, r.ap25), (1.0, 1.0, 1.0));
        let short = InstanceLabeling3D::from_raw(&[1, 1]);
        assert!(evaluate(&short, &[1.0], &gt).is_err());
    }

    #[test]
    fn unlabeled_ground_truth_points_are_ignored() {
        let gt = InstanceLabeling3D::from_raw(&[1, 1, 0, 0]);
        let pred = InstanceLabeling3D::from_raw(&[1, 1, 1, 1]);
        assert_eq!(evaluate(&pred, &[1.0], &gt).unwrap().map, 1.0);
    }

    #[test]
    fn table_layout() {
        let t = format_table(&[(
            "all".into(),
            Summary {
                map: 0.5,
                ap50: 0.75,
                ap25: 1.0,
            },
        )]);
        assert!(t.lines().next().unwrap().contains("mAP"));
        assert!(t.contains("50.0") && t.contains("75.0") && t.contains("100.0"));
    }
}
