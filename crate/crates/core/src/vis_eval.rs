//! Track-level video instance segmentation metrics: spatio-temporal mask IoU,
//! AP over IoU thresholds 0.50:0.05:0.95 with 101-point interpolation, and
//! AR with at most 1 or 10 predictions per video.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::mask::Mask;

/// Largest number of predictions per video and class considered.
pub const MAX_DETS: usize = 100;
/// Recall grid size of the interpolated precision.
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds `k / 100` for `k = 50, 55, …, 95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// An instance track: one optional mask per frame of its video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub video_id: usize,
    pub instance_id: usize,
    pub class_id: usize,
    pub score: f64,
    pub masks: Vec<Option<Mask>>,
}

/// `Σ_t |P_t ∩ G_t| / Σ_t |P_t ∪ G_t|`; absent masks count as empty.
pub fn track_iou(pred: &Track, gt: &Track) -> f64 {
    let n = pred.masks.len().max(gt.masks.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for t in 0..n {
        let p = pred.masks.get(t).and_then(|m| m.as_ref());
        let g = gt.masks.get(t).and_then(|m| m.as_ref());
        match (p, g) {
            (Some(p), Some(g)) => {
                inter += p.intersection(g);
                union += p.union(g);
            }
            (Some(m), None) | (None, Some(m)) => union += m.area(),
            (None, None) => {}
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
}

impl Metrics {
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "AP", "AP@0.5", "AP@0.75", "AR@1", "AR@10", self.ap, self.ap50, self.ap75, self.ar1, self.ar10
        )
    }
}

fn score_order(a: &Track, b: &Track) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.video_id.cmp(&b.video_id))
        .then(a.instance_id.cmp(&b.instance_id))
}

/// 101-point interpolated AP of a ranked list of true/false positives.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len() - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Per-video greedy matching at one threshold; returns, for every ranked
/// prediction, whether it is a true positive.
fn greedy_match(ious: &[Vec<f64>], tau: f64) -> Vec<bool> {
    let num_gt = ious.first().map_or(0, |r| r.len());
    let mut taken = vec![false; num_gt];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in row.iter().enumerate() {
                if taken[g] || iou < tau {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP, AP@0.5, AP@0.75, AR@1 and AR@10, averaged over the classes that have
/// at least one ground-truth track.
pub fn evaluate(preds: &[Track], gts: &[Track]) -> Metrics {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return Metrics::default();
    }
    let thresholds = iou_thresholds();
    let mut ap = vec![0.0; thresholds.len()];
    let mut ar1 = 0.0;
    let mut ar10 = 0.0;

    for &c in &classes {
        // (video) -> ranked predictions and gts of class c
        let mut videos: BTreeMap<usize, (Vec<&Track>, Vec<&Track>)> = BTreeMap::new();
        for g in gts.iter().filter(|g| g.class_id == c) {
            videos.entry(g.video_id).or_default().1.push(g);
        }
        for p in preds.iter().filter(|p| p.class_id == c) {
            videos.entry(p.video_id).or_default().0.push(p);
        }
        let num_gt: usize = videos.values().map(|v| v.1.len()).sum();
        let mut per_video = Vec::new();
        for (p, g) in videos.values_mut() {
            p.sort_by(|a, b| score_order(a, b));
            p.truncate(MAX_DETS);
            g.sort_by_key(|t| t.instance_id);
            let ious: Vec<Vec<f64>> = p.iter().map(|pt| g.iter().map(|gt| track_iou(pt, gt)).collect()).collect();
            per_video.push((p.clone(), ious));
        }
        for (ti, &tau) in thresholds.iter().enumerate() {
            let mut ranked: Vec<(&Track, bool)> = Vec::new();
            let (mut hit1, mut hit10) = (0usize, 0usize);
            for (p, ious) in &per_video {
                let tp = greedy_match(ious, tau);
                hit1 += tp.iter().take(1).filter(|&&t| t).count();
                hit10 += tp.iter().take(10).filter(|&&t| t).count();
                ranked.extend(p.iter().copied().zip(tp));
            }
            ranked.sort_by(|a, b| score_order(a.0, b.0));
            let tp: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            ap[ti] += interpolated_ap(&tp, num_gt);
            ar1 += hit1 as f64 / num_gt as f64;
            ar10 += hit10 as f64 / num_gt as f64;
        }
    }
    let nc = classes.len() as f64;
    let nt = thresholds.len() as f64;
    Metrics {
        ap: ap.iter().sum::<f64>() / (nc * nt),
        ap50: ap[0] / nc,
        ap75: ap[5] / nc,
        ar1: ar1 / (nc * nt),
        ar10: ar10 / (nc * nt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strip(w: usize, on: std::ops::Range<usize>) -> Mask {
        Mask::from_fn(1, w, |_, c| on.contains(&c))
    }

    fn track(video: usize, id: usize, class: usize, score: f64, masks: Vec<Option<Mask>>) -> Track {
        Track {
            video_id: video,
            instance_id: id,
            class_id: class,
            score,
            masks,
        }
    }

    #[test]
    fn track_iou_examples() {
        let a = track(0, 0, 0, 1.0, vec![Some(strip(30, 0..15)), Some(strip(30, 0..10))]);
        let b = track(0, 1, 0, 1.0, vec![Some(strip(30, 5..20)), None]);
        // frame 0: |∩| = 10, |∪| = 20; frame 1: 0, 10
        assert!((track_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(track_iou(&a, &a), 1.0);
        let c = track(0, 2, 0, 1.0, vec![None, None, Some(strip(30, 0..15))]);
        assert_eq!(track_iou(&a, &c), 0.0);
    }

    #[test]
    fn thresholds_are_exact() {
        let t = iou_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[2], 0.6);
        assert_eq!(t[9], 0.95);
        assert_eq!(6.0 / 10.0, t[2]);
    }

    #[test]
    fn interpolation_example() {
        let ap = interpolated_ap(&[true, false, true], 2);
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-15);
        assert_eq!(interpolated_ap(&[], 3), 0.0);
        assert_eq!(interpolated_ap(&[true, true], 2), 1.0);
    }

    #[test]
    fn empty_and_perfect() {
        let g = vec![
            track(0, 0, 0, 1.0, vec![Some(strip(10, 0..4))]),
            track(1, 0, 1, 1.0, vec![Some(strip(10, 2..9))]),
        ];
        assert_eq!(evaluate(&[], &g), Metrics::default());
        let m = evaluate(&g, &g);
        assert_eq!(
            m,
            Metrics {
                ap: 1.0,
                ap50: 1.0,
                ap75: 1.0,
                ar1: 1.0,
                ar10: 1.0
            }
        );
    }

    #[test]
    fn wrong_class_never_matches() {
        let g = vec![track(0, 0, 0, 1.0, vec![Some(strip(10, 0..4))])];
        let p = vec![track(0, 0, 1, 1.0, vec![Some(strip(10, 0..4))])];
        assert_eq!(evaluate(&p, &g).ap, 0.0);
    }

    proptest! {
        #[test]
        fn order_invariance_and_ordering(
            spans in prop::collection::vec((0usize..20, 1usize..10, 0usize..2, 0.0f64..1.0), 1..8),
            gts in prop::collection::vec((0usize..20, 1usize..10, 0usize..2), 1..5),
        ) {
            let gt: Vec<Track> = gts.iter().enumerate()
                .map(|(i, &(s, l, c))| track(0, i, c, 1.0, vec![Some(strip(32, s..s + l))]))
                .collect();
            let preds: Vec<Track> = spans.iter().enumerate()
                .map(|(i, &(s, l, c, sc))| track(0, i, c, sc, vec![Some(strip(32, s..s + l))]))
                .collect();
            let m = evaluate(&preds, &gt);
            let mut rev = preds.clone();
            rev.reverse();
            prop_assert_eq!(m, evaluate(&rev, &gt));
            prop_assert!(m.ap50 >= m.ap75 && m.ap75 >= 0.0);
            prop_assert!((0.0..=1.0).contains(&m.ap));
            // a lowest-scored zero-IoU false positive leaves AP unchanged
            let mut more = preds.clone();
            more.push(track(0, 99, gt[0].class_id, -1.0, vec![Some(Mask::zeros(1, 32)), Some(strip(32, 0..1))]));
            let mut far = more.pop().unwrap();
            far.masks = vec![None, Some(strip(32, 0..1))];
            more.push(far);
            prop_assert_eq!(evaluate(&more, &gt).ap, m.ap);
        }
    }
}
