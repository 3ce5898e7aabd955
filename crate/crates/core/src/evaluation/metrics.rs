use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 8-connected component labels; 0 is background, regions are 1..=n.
pub fn label_components(mask: &Array2<bool>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::zeros((h, w));
    let mut next = 0;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for ny in cy.saturating_sub(1)..(cy + 2).min(h) {
                    for nx in cx.saturating_sub(1)..(cx + 2).min(w) {
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

fn check_pairs(maps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Metric(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    for (i, (m, g)) in maps.iter().zip(masks).enumerate() {
        if m.dim() != g.dim() {
            return Err(Error::Metric(format!("map {i} is {:?} but its mask is {:?}", m.dim(), g.dim())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Metric(format!("map {i} has non-finite scores")));
        }
    }
    Ok(())
}

/// Integrate `(fpr, value)` points (sorted by fpr) from 0 to `limit` with
/// the trapezoid rule, interpolating at the limit, divided by `limit`.
pub fn partial_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

/// Per-region overlap curve against pooled false-positive rate, integrated
/// up to `fpr_limit` and normalized. Pixels are predicted anomalous at
/// scores `>=` each distinct threshold.
pub fn pro(maps: &[Array2<f64>], masks: &[Array2<bool>], fpr_limit: f64) -> Result<f64> {
    check_pairs(maps, masks)?;
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Metric(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    // (score, region id or usize::MAX for normal pixels)
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let (labels, n) = label_components(mask);
        let base = sizes.len();
        sizes.extend(std::iter::repeat_n(0, n));
        for (&s, &l) in map.iter().zip(labels.iter()) {
            if l == 0 {
                pixels.push((s, usize::MAX));
            } else {
                sizes[base + l - 1] += 1;
                pixels.push((s, base + l - 1));
            }
        }
    }
    if sizes.is_empty() {
        return Err(Error::Metric("PRO needs at least one anomalous region".into()));
    }
    let n_normal = pixels.iter().filter(|p| p.1 == usize::MAX).count();
    if n_normal == 0 {
        return Err(Error::Metric("PRO needs normal pixels".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_regions = sizes.len() as f64;
    let mut overlap_sum = 0.0;
    let mut fp = 0usize;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == t {
            match pixels[i].1 {
                usize::MAX => fp += 1,
                r => overlap_sum += 1.0 / sizes[r] as f64,
            }
            i += 1;
        }
        points.push((fp as f64 / n_normal as f64, overlap_sum / n_regions));
    }
    Ok(partial_area(&points, fpr_limit))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DiceMode {
    Fixed { threshold: f64 },
    /// Threshold maximizing DICE over a 200-point sweep of the score range.
    Best,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceIou {
    pub dice: f64,
    pub iou: f64,
    pub threshold: f64,
}

pub const DICE_SWEEP: usize = 200;

/// DICE and IoU from pooled counts. Empty prediction and empty truth score 1.
pub fn dice_iou_counts(inter: usize, pred: usize, truth: usize) -> (f64, f64) {
    let union = pred + truth - inter;
    if union == 0 {
        return (1.0, 1.0);
    }
    (2.0 * inter as f64 / (pred + truth) as f64, inter as f64 / union as f64)
}

fn counts_at(maps: &[Array2<f64>], masks: &[Array2<bool>], t: f64) -> (usize, usize, usize) {
    let (mut inter, mut pred, mut truth) = (0, 0, 0);
    for (m, g) in maps.iter().zip(masks) {
        for (&s, &gt) in m.iter().zip(g.iter()) {
            let p = s >= t;
            inter += usize::from(p && gt);
            pred += usize::from(p);
            truth += usize::from(gt);
        }
    }
    (inter, pred, truth)
}

/// Pooled over all pixels of all images; pixels with score `>=` the
/// threshold are predicted anomalous.
pub fn dice_iou(maps: &[Array2<f64>], masks: &[Array2<bool>], mode: DiceMode) -> Result<DiceIou> {
    check_pairs(maps, masks)?;
    let eval = |t: f64| {
        let (i, p, g) = counts_at(maps, masks, t);
        let (dice, iou) = dice_iou_counts(i, p, g);
        DiceIou { dice, iou, threshold: t }
    };
    match mode {
        DiceMode::Fixed { threshold } => Ok(eval(threshold)),
        DiceMode::Best => {
            let (lo, hi) = maps
                .iter()
                .flat_map(|m| m.iter())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                return Ok(DiceIou {
                    dice: 1.0,
                    iou: 1.0,
                    threshold: 0.0,
                });
            }
            let mut best = eval(lo);
            for k in 1..DICE_SWEEP {
                let t = lo + (hi - lo) * k as f64 / (DICE_SWEEP - 1) as f64;
                let r = eval(t);
                if r.dice > best.dice {
                    best = r;
                }
            }
            Ok(best)
        }
    }
}

/// F1 of binary decisions `score >= t`.
pub fn f1_at(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Threshold maximizing image-level F1. Candidates are the distinct scores;
/// the best candidate is moved to the midpoint with the next lower score
/// (if any), which keeps the same decisions under `>=`.
pub fn fmax_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric("threshold selection needs matching, nonempty inputs".into()));
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::Metric("threshold selection needs a positive example".into()));
    }
    let mut cand: Vec<f64> = scores.to_vec();
    cand.sort_by(|a, b| a.total_cmp(b));
    cand.dedup();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &t) in cand.iter().enumerate() {
        let f = f1_at(scores, labels, t);
        if f > best.0 {
            best = (f, i);
        }
    }
    let (f, i) = best;
    let tau = if i == 0 { cand[0] } else { (cand[i] + cand[i - 1]) / 2.0 };
    Ok((tau, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let l = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.2, 0.8, 0.4], &l).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut rng = stream(1, &[]);
        for _ in 0..200 {
            let n = rng.random_range(2..=100);
            // coarse scores force ties
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            let mut l: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            l[0] = true;
            l[1] = false;
            assert!((auroc(&s, &l).unwrap() - pair_count(&s, &l)).abs() < 1e-9);
        }
    }

    #[test]
    fn components_use_eight_connectivity() {
        let m = array![[true, false, false], [false, true, false], [false, false, false], [true, true, false]];
        let (lab, n) = label_components(&m);
        assert_eq!(n, 2);
        assert_eq!(lab[[0, 0]], lab[[1, 1]]);
        assert_ne!(lab[[3, 0]], lab[[0, 0]]);
    }

    #[test]
    fn pro_examples() {
        let mask = Array2::from_shape_fn((8, 8), |(y, x)| (2..5).contains(&y) && (3..6).contains(&x));
        let perfect = mask.mapv(|m| if m { 1.0 } else { 0.0 });
        assert!((pro(&[perfect], &[mask.clone()], 0.3).unwrap() - 1.0).abs() < 1e-12);

        // one region found, one region missed, normals in between
        let two = Array2::from_shape_fn((8, 8), |(y, x)| (y < 2 && x < 2) || (y > 5 && x > 5));
        let map = Array2::from_shape_fn((8, 8), |(y, x)| {
            if y < 2 && x < 2 {
                1.0
            } else if y > 5 && x > 5 {
                0.0
            } else {
                0.5
            }
        });
        assert!((pro(&[map], &[two], 0.3).unwrap() - 0.5).abs() < 1e-12);
        assert!(pro(&[Array2::zeros((2, 2))], &[Array2::from_elem((2, 2), false)], 0.3).is_err());
    }

    #[test]
    fn dice_examples() {
        let g = array![[true, true, false, false]];
        assert_eq!(dice_iou_counts(2, 2, 2), (1.0, 1.0));
        let disjoint = dice_iou(&[array![[0.0, 0.0, 1.0, 1.0]]], &[g.clone()], DiceMode::Fixed { threshold: 0.5 }).unwrap();
        assert_eq!((disjoint.dice, disjoint.iou), (0.0, 0.0));
        let half = dice_iou(&[array![[1.0, 0.0, 1.0, 0.0]]], &[g], DiceMode::Fixed { threshold: 0.5 }).unwrap();
        assert_eq!(half.dice, 0.5);
        assert!((half.iou - 1.0 / 3.0).abs() < 1e-15);
        let empty = dice_iou(&[array![[0.0]]], &[array![[false]]], DiceMode::Fixed { threshold: 0.5 }).unwrap();
        assert_eq!((empty.dice, empty.iou), (1.0, 1.0));
    }

    #[test]
    fn best_dice_finds_separating_threshold() {
        let g = array![[true, false], [false, true]];
        let m = array![[0.9, 0.1], [0.2, 0.8]];
        let r = dice_iou(&[m], &[g], DiceMode::Best).unwrap();
        assert_eq!(r.dice, 1.0);
    }

    #[test]
    fn fmax_examples() {
        let (t, f) = fmax_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(f, 1.0);
        let (t, _) = fmax_threshold(&[0.4, 0.4], &[true, false]).unwrap();
        assert_eq!(t, 0.4);
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_maps(s in prop::collection::vec(0.0f64..1.0, 4..40)) {
            let l: Vec<bool> = (0..s.len()).map(|i| i % 2 == 0).collect();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 2.0).collect();
            prop_assert!((auroc(&s, &l).unwrap() - auroc(&t, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn dice_iou_identity(bits in prop::collection::vec(0u8..4, 1..64)) {
            let m = Array2::from_shape_fn((1, bits.len()), |(_, i)| f64::from(bits[i] & 1));
            let g = Array2::from_shape_fn((1, bits.len()), |(_, i)| bits[i] & 2 != 0);
            let r = dice_iou(&[m], &[g], DiceMode::Fixed { threshold: 0.5 }).unwrap();
            prop_assert!((r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-9);
            prop_assert!(r.iou <= r.dice + 1e-12);
        }

        #[test]
        fn fmax_beats_every_candidate(s in prop::collection::vec(0.0f64..1.0, 2..30)) {
            let l: Vec<bool> = (0..s.len()).map(|i| i % 3 == 0).collect();
            let (t, f) = fmax_threshold(&s, &l).unwrap();
            prop_assert!((f1_at(&s, &l, t) - f).abs() < 1e-12);
            for k in 0..=50 {
                prop_assert!(f1_at(&s, &l, k as f64 / 50.0) <= f + 1e-12);
            }
        }
    }
}
