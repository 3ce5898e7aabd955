//! Loss components: masked and global nearest-anchor distances, the bounded
//! pull/push contrastive ("tritanh") loss, focal loss, binary cross-entropy,
//! and their compositions into the local and global objectives.
//!
//! Every differentiable piece has a `*_with_grad` form returning the
//! gradient with respect to its direct inputs; `model` chains them.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::anchor_bank::AnchorBank;
use crate::backbone::EmbeddingGrid;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Pull scale, applied to the distance that should shrink.
    pub lambda_pull: f64,
    /// Push scale, applied to the distance that should grow.
    pub lambda_push: f64,
    pub epsilon: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pull: 1.0,
            lambda_push: 1.0,
            epsilon: 1e-6,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_pull > 0.0
            && self.lambda_push > 0.0
            && self.epsilon >= 0.0
            && self.focal_gamma >= 0.0
            && self.focal_alpha > 0.0
            && self.focal_alpha < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Per-step loss breakdown. `total = l_local + l_global`,
/// `l_local = focal + l_lc`, `l_global = bce_n + bce_s + l_gc`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_local: f64,
    pub l_global: f64,
    pub l_lc: f64,
    pub l_gc: f64,
    pub focal: f64,
    pub bce_n: f64,
    pub bce_s: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }

    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("total", self.total),
            ("l_local", self.l_local),
            ("l_global", self.l_global),
            ("l_lc", self.l_lc),
            ("l_gc", self.l_gc),
            ("focal", self.focal),
            ("bce_n", self.bce_n),
            ("bce_s", self.bce_s),
        ]
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.fields().iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Assemble a report from its leaf terms.
pub fn total_loss(focal: f64, l_lc: f64, bce_n: f64, bce_s: f64, l_gc: f64) -> LossReport {
    let l_local = focal + l_lc;
    let l_global = bce_n + bce_s + l_gc;
    LossReport {
        total: l_local + l_global,
        l_local,
        l_global,
        l_lc,
        l_gc,
        focal,
        bce_n,
        bce_s,
    }
}

/// Value and partial derivatives of the tritanh loss
/// `(e^{l0 a} - e^{l1 b} + eps) / (e^{l0 a} + e^{l1 b} + eps)`.
///
/// Evaluated after dividing through by `e^{max(l0 a, l1 b)}` so large
/// distances never overflow.
pub fn tritanh_with_grad(d_pull: f64, d_push: f64, w: &LossWeights) -> (f64, f64, f64) {
    let a = w.lambda_pull * d_pull;
    let b = w.lambda_push * d_push;
    let m = a.max(b);
    let p = (a - m).exp();
    let q = (b - m).exp();
    let e = w.epsilon * (-m).exp();
    let den = p + q + e;
    let value = (p - q + e) / den;
    let den2 = den * den;
    let g_pull = w.lambda_pull * 2.0 * p * q / den2;
    let g_push = -w.lambda_push * 2.0 * q * (p + e) / den2;
    (value, g_pull, g_push)
}

pub fn tritanh(d_pull: f64, d_push: f64, w: &LossWeights) -> f64 {
    tritanh_with_grad(d_pull, d_push, w).0
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

/// Mean focal loss over cells and its gradient with respect to each
/// probability. `alpha` weights the positive class, `1 - alpha` the negative.
pub fn focal_with_grad(scores: ArrayView1<f64>, target: ArrayView1<bool>, gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    let n = scores.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&p, &t) in scores.iter().zip(target.iter()) {
        let (p, clamped) = clamp_prob(p);
        // p_t is the probability of the true class; dpt is d p_t / d p
        let (pt, at, dpt) = if t { (p, alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
        let one_m = 1.0 - pt;
        let modulating = one_m.powf(gamma);
        total += -at * modulating * pt.ln();
        let g = if clamped {
            0.0
        } else {
            let dmod = if gamma == 0.0 { 0.0 } else { -gamma * one_m.powf(gamma - 1.0) };
            -at * (dmod * pt.ln() + modulating / pt) * dpt / n
        };
        grad.push(g);
    }
    (total / n, grad)
}

pub fn focal_loss(scores: ArrayView1<f64>, target: ArrayView1<bool>, gamma: f64, alpha: f64) -> f64 {
    focal_with_grad(scores, target, gamma, alpha).0
}

/// Mean binary cross-entropy against a constant target, with gradient.
pub fn bce_with_grad(scores: ArrayView1<f64>, target: bool) -> (f64, Vec<f64>) {
    let n = scores.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for &p in scores.iter() {
        let (p, clamped) = clamp_prob(p);
        if target {
            total -= p.ln();
            grad.push(if clamped { 0.0 } else { -1.0 / (p * n) });
        } else {
            total -= (1.0 - p).ln();
            grad.push(if clamped { 0.0 } else { 1.0 / ((1.0 - p) * n) });
        }
    }
    (total / n, grad)
}

pub fn bce(scores: ArrayView1<f64>, target: bool) -> f64 {
    bce_with_grad(scores, target).0
}

/// Masked mean nearest-anchor distance over `cells` and its gradient with
/// respect to each cell. `None` when the mask selects no cell.
pub fn d_local_with_grad(
    cells: ArrayView2<f64>,
    mask: ArrayView1<bool>,
    bank: &AnchorBank,
    exec: Exec,
) -> Result<Option<(f64, Array2<f64>)>> {
    if mask.len() != cells.nrows() {
        return Err(Error::DimMismatch {
            context: "local mask cells",
            expected: cells.nrows(),
            actual: mask.len(),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let near = bank.nearest_cells(cells, exec)?;
    let anchors = bank.anchors_f64();
    let mut grad = Array2::zeros(cells.raw_dim());
    let mut sum = 0.0;
    for (i, (nr, &m)) in near.iter().zip(mask.iter()).enumerate() {
        if !m {
            continue;
        }
        sum += nr.distance;
        if nr.distance > 0.0 {
            let scale = 1.0 / (nr.distance * count as f64);
            let mut g = grad.row_mut(i);
            g.assign(&cells.row(i));
            g -= &anchors.row(nr.index);
            g *= scale;
        }
    }
    Ok(Some((sum / count as f64, grad)))
}

/// Unmasked mean nearest-anchor distance and its gradient.
pub fn d_global_with_grad(cells: ArrayView2<f64>, bank: &AnchorBank, exec: Exec) -> Result<(f64, Array2<f64>)> {
    let all = ndarray::Array1::from_elem(cells.nrows(), true);
    Ok(d_local_with_grad(cells, all.view(), bank, exec)?.expect("nonempty grid"))
}

/// Masked mean of nearest-anchor distances. `mask` is `L_H x L_W`;
/// `None` signals an empty mask (the item is excluded from the local
/// contrastive term).
pub fn d_local(grid: &EmbeddingGrid, mask: &Array2<bool>, bank: &AnchorBank) -> Result<Option<f64>> {
    let flat = mask_cells(mask, grid)?;
    Ok(d_local_with_grad(grid.cells(), flat, bank, Exec::default())?.map(|(v, _)| v))
}

/// Mean over all cells of nearest-anchor distances.
pub fn d_global(grid: &EmbeddingGrid, bank: &AnchorBank) -> Result<f64> {
    let d = bank.nearest_distance(grid)?;
    Ok(d.mean().expect("nonempty grid"))
}

fn mask_cells<'a>(mask: &'a Array2<bool>, grid: &EmbeddingGrid) -> Result<ArrayView1<'a, bool>> {
    if mask.dim() != (grid.height(), grid.width()) {
        return Err(Error::DimMismatch {
            context: "mask grid size",
            expected: grid.n_cells(),
            actual: mask.len(),
        });
    }
    Ok(mask
        .view()
        .into_shape_with_order(grid.n_cells())
        .expect("mask is contiguous"))
}

/// Focal loss on the corrupted image's scores plus the local contrastive
/// term; an empty mask contributes the focal term only.
pub fn l_local(
    disc_scores_p: &Array2<f64>,
    mask: &Array2<bool>,
    nu_n: &EmbeddingGrid,
    nu_p: &EmbeddingGrid,
    bank: &AnchorBank,
    w: &LossWeights,
) -> Result<f64> {
    let flat_scores = disc_scores_p.iter().copied().collect::<ndarray::Array1<f64>>();
    let flat_mask = mask_cells(mask, nu_p)?;
    let focal = focal_loss(flat_scores.view(), flat_mask, w.focal_gamma, w.focal_alpha);
    let lc = match (d_local(nu_n, mask, bank)?, d_local(nu_p, mask, bank)?) {
        (Some(a), Some(b)) => tritanh(a, b, w),
        _ => 0.0,
    };
    Ok(focal + lc)
}

/// BCE separating normal scores (target 0) from synthetic scores (target 1)
/// plus the global contrastive term.
pub fn l_global(
    disc_n: &Array2<f64>,
    disc_s: &Array2<f64>,
    nu_n: &EmbeddingGrid,
    nu_s: &EmbeddingGrid,
    bank: &AnchorBank,
    w: &LossWeights,
) -> Result<f64> {
    let n: ndarray::Array1<f64> = disc_n.iter().copied().collect();
    let s: ndarray::Array1<f64> = disc_s.iter().copied().collect();
    Ok(bce(n.view(), false) + bce(s.view(), true) + tritanh(d_global(nu_n, bank)?, d_global(nu_s, bank)?, w))
}

/// Area-average a full-resolution mask onto an `lh x lw` grid; a cell is
/// positive when its covered fraction exceeds `overlap`.
pub fn downsample_mask(mask: &Array2<bool>, lh: usize, lw: usize, overlap: f64) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((lh, lw), |(i, j)| {
        let y0 = i * h / lh;
        let y1 = ((i + 1) * h).div_ceil(lh).min(h).max(y0 + 1);
        let x0 = j * w / lw;
        let x1 = ((j + 1) * w).div_ceil(lw).min(w).max(x0 + 1);
        let block = mask.slice(ndarray::s![y0..y1, x0..x1]);
        let frac = block.iter().filter(|&&m| m).count() as f64 / block.len() as f64;
        frac > overlap
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Space;
    use crate::rng::stream;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn w(l0: f64, l1: f64, eps: f64) -> LossWeights {
        LossWeights {
            lambda_pull: l0,
            lambda_push: l1,
            epsilon: eps,
            ..Default::default()
        }
    }

    fn grid(cells: Array2<f64>, h: usize, wd: usize) -> EmbeddingGrid {
        EmbeddingGrid::from_cells(cells, h, wd, 1, Space::Adapted).unwrap()
    }

    #[test]
    fn tritanh_symmetry_and_tanh_value() {
        let ww = w(1.3, 1.3, 0.0);
        assert_eq!(tritanh(0.7, 0.7, &ww), 0.0);
        let v = tritanh(1.0, 0.0, &w(1.0, 1.0, 0.0));
        assert!((v - 0.5f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn tritanh_is_stable_for_huge_inputs() {
        let ww = w(1.0, 1.0, 1e-6);
        assert!((tritanh(1e6, 0.0, &ww) - 1.0).abs() < 1e-12);
        assert!((tritanh(0.0, 1e6, &ww) + 1.0).abs() < 1e-12);
        let v = tritanh(800.0, 799.0, &ww);
        assert!(v.is_finite() && (v - 0.5f64.tanh()).abs() < 1e-9);
    }

    #[test]
    fn tritanh_gradient_matches_finite_differences() {
        let mut rng = stream(4, &[]);
        for _ in 0..200 {
            let ww = w(rng.random_range(0.1..3.0), rng.random_range(0.1..3.0), rng.random_range(0.0..0.5));
            let (a, b) = (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0));
            let (_, ga, gb) = tritanh_with_grad(a, b, &ww);
            let h = 1e-6;
            let fa = (tritanh(a + h, b, &ww) - tritanh(a - h, b, &ww)) / (2.0 * h);
            let fb = (tritanh(a, b + h, &ww) - tritanh(a, b - h, &ww)) / (2.0 * h);
            assert!((ga - fa).abs() < 1e-7, "{ga} vs {fa}");
            assert!((gb - fb).abs() < 1e-7, "{gb} vs {fb}");
        }
    }

    proptest! {
        #[test]
        fn tritanh_bounded_and_monotone(
            a in 0.0f64..20.0, b in 0.0f64..20.0,
            l0 in 0.05f64..5.0, l1 in 0.05f64..5.0, eps in 0.0f64..1.0,
        ) {
            let ww = w(l0, l1, eps);
            let (v, ga, gb) = tritanh_with_grad(a, b, &ww);
            prop_assert!((-1.0..=1.0).contains(&v));
            // strictly above -1 wherever the gap is representable in f64
            if l1 * b - l0 * a < 36.0 {
                prop_assert!(v > -1.0);
            }
            // strict monotonicity; derivatives underflow only deep in saturation
            prop_assert!(ga >= 0.0 && gb <= 0.0);
            let h = 1e-4;
            if (l0 * a - l1 * b).abs() < 20.0 {
                prop_assert!(tritanh(a + h, b, &ww) > v);
                prop_assert!(tritanh(a, b + h, &ww) < v);
            }
        }
    }

    #[test]
    fn focal_with_gamma_zero_is_half_bce() {
        let s = array![0.2, 0.7, 0.9, 0.4];
        let t = array![false, true, true, false];
        let bce_mean: f64 = s
            .iter()
            .zip(t.iter())
            .map(|(&p, &y): (&f64, &bool)| if y { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 4.0;
        let f = focal_loss(s.view(), t.view(), 0.0, 0.5);
        assert!((f - 0.5 * bce_mean).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_predictions_vanish() {
        let s = array![1.0, 0.0];
        let t = array![true, false];
        assert!(focal_loss(s.view(), t.view(), 2.0, 0.25) < 1e-12);
    }

    #[test]
    fn focal_fixture_2x2() {
        // hand-evaluated per cell: -a_t (1 - p_t)^2 ln p_t with alpha = 0.25
        let s = array![0.9, 0.3, 0.6, 0.2];
        let t = array![true, true, false, false];
        let cells = [
            -0.25 * 0.1f64.powi(2) * 0.9f64.ln(),
            -0.25 * 0.7f64.powi(2) * 0.3f64.ln(),
            -0.75 * 0.6f64.powi(2) * 0.4f64.ln(),
            -0.75 * 0.2f64.powi(2) * 0.8f64.ln(),
        ];
        let expected = cells.iter().sum::<f64>() / 4.0;
        assert!((focal_loss(s.view(), t.view(), 2.0, 0.25) - expected).abs() < 1e-9);
    }

    #[test]
    fn focal_and_bce_gradients_match_finite_differences() {
        let s = array![0.15, 0.55, 0.8, 0.35, 0.5];
        let t = array![true, false, true, false, true];
        let h = 1e-6;
        for gamma in [0.0, 1.0, 2.0, 2.5] {
            let (_, g) = focal_with_grad(s.view(), t.view(), gamma, 0.3);
            for i in 0..s.len() {
                let mut up = s.clone();
                up[i] += h;
                let mut dn = s.clone();
                dn[i] -= h;
                let fd = (focal_loss(up.view(), t.view(), gamma, 0.3) - focal_loss(dn.view(), t.view(), gamma, 0.3)) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-7);
            }
        }
        for target in [false, true] {
            let (_, g) = bce_with_grad(s.view(), target);
            for i in 0..s.len() {
                let mut up = s.clone();
                up[i] += h;
                let mut dn = s.clone();
                dn[i] -= h;
                let fd = (bce(up.view(), target) - bce(dn.view(), target)) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-6);
            }
        }
    }

    fn bank(v: Array2<f32>) -> AnchorBank {
        AnchorBank::from_vectors(v, Space::Raw).unwrap()
    }

    #[test]
    fn d_local_cases() {
        let b = bank(array![[0.0f32, 0.0], [3.0, 4.0]]);
        // on-anchor masked cells give 0 regardless of unmasked cells
        let g = grid(array![[0.0, 0.0], [9.0, 9.0], [3.0, 4.0], [1.0, 1.0]], 2, 2);
        let m = array![[true, false], [true, false]];
        assert_eq!(d_local(&g, &m, &b).unwrap(), Some(0.0));
        // one masked cell, one anchor: exactly that cell's distance
        let b1 = bank(array![[1.0f32, 1.0]]);
        let m1 = array![[false, false], [false, true]];
        let g1 = grid(array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [4.0, 5.0]], 2, 2);
        assert_eq!(d_local(&g1, &m1, &b1).unwrap(), Some(5.0));
        // empty mask is excluded
        assert_eq!(d_local(&g1, &Array2::from_elem((2, 2), false), &b1).unwrap(), None);
    }

    #[test]
    fn d_local_all_ones_equals_d_global() {
        let mut rng = stream(8, &[]);
        let b = bank(Array2::from_shape_fn((5, 3), |_| rng.random::<f32>()));
        let g = grid(Array2::from_shape_fn((12, 3), |_| rng.random::<f64>() * 2.0), 3, 4);
        let full = Array2::from_elem((3, 4), true);
        let a = d_local(&g, &full, &b).unwrap().unwrap();
        let c = d_global(&g, &b).unwrap();
        assert!((a - c).abs() < 1e-9);
    }

    #[test]
    fn d_global_matches_brute_force() {
        let mut rng = stream(21, &[]);
        let anchors = Array2::from_shape_fn((4, 3), |_| rng.random::<f32>());
        let cells = Array2::from_shape_fn((9, 3), |_| rng.random::<f64>());
        let b = bank(anchors.clone());
        let mut expected = 0.0;
        for c in 0..9 {
            let mut best = f64::INFINITY;
            for a in 0..4 {
                let d: f64 = (0..3).map(|k| (cells[[c, k]] - anchors[[a, k]] as f64).powi(2)).sum();
                best = best.min(d.sqrt());
            }
            expected += best / 9.0;
        }
        assert!((d_global(&grid(cells.clone(), 3, 3), &b).unwrap() - expected).abs() < 1e-9);
        // single cell grid equals its nearest distance
        let one = grid(cells.slice(ndarray::s![0..1, ..]).to_owned(), 1, 1);
        assert_eq!(d_global(&one, &b).unwrap(), b.nearest_distance(&one).unwrap()[[0, 0]]);
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let mut rng = stream(30, &[]);
        let b = bank(Array2::from_shape_fn((6, 4), |_| rng.random::<f32>()));
        let cells = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>() * 3.0);
        let mask = array![true, false, true, true, false];
        let (_, g) = d_local_with_grad(cells.view(), mask.view(), &b, Exec::Sequential).unwrap().unwrap();
        let f = |c: &Array2<f64>| d_local_with_grad(c.view(), mask.view(), &b, Exec::Sequential).unwrap().unwrap().0;
        let h = 1e-6;
        for i in 0..5 {
            for k in 0..4 {
                let mut up = cells.clone();
                up[[i, k]] += h;
                let mut dn = cells.clone();
                dn[[i, k]] -= h;
                assert!((g[[i, k]] - (f(&up) - f(&dn)) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn l_local_guard_and_composition() {
        let b = bank(array![[0.0f32]]);
        let nu_n = grid(array![[1.0]], 1, 1);
        let nu_p = grid(array![[2.0]], 1, 1);
        let scores = array![[0.4]];
        let ww = LossWeights::default();
        // empty mask: focal on an all-negative target only
        let empty = array![[false]];
        let focal_neg = focal_loss(array![0.4].view(), array![false].view(), 2.0, 0.25);
        assert!((l_local(&scores, &empty, &nu_n, &nu_p, &b, &ww).unwrap() - focal_neg).abs() < 1e-15);
        // 1x1 grids, one anchor: focal(0.4 -> positive) + tritanh(1, 2)
        let full = array![[true]];
        let expected = -0.25 * 0.6f64.powi(2) * 0.4f64.ln() + (1f64.exp() - 2f64.exp() + 1e-6) / (1f64.exp() + 2f64.exp() + 1e-6);
        assert!((l_local(&scores, &full, &nu_n, &nu_p, &b, &ww).unwrap() - expected).abs() < 1e-12);
        // the contrastive part drops when the clean embedding sits on the anchor
        let on = grid(array![[0.0]], 1, 1);
        assert!(l_local(&scores, &full, &on, &nu_p, &b, &ww).unwrap() < l_local(&scores, &full, &nu_n, &nu_p, &b, &ww).unwrap());
    }

    #[test]
    fn l_global_cases() {
        let b = bank(array![[0.0f32, 0.0]]);
        let ww = w(1.0, 1.0, 0.0);
        let delta = 1e-3;
        let dn = Array2::from_elem((2, 2), delta);
        let ds = Array2::from_elem((2, 2), 1.0 - delta);
        let nu_n = grid(Array2::zeros((4, 2)), 2, 2);
        let nu_s = grid(Array2::from_elem((4, 2), 30.0), 2, 2);
        let v = l_global(&dn, &ds, &nu_n, &nu_s, &b, &ww).unwrap();
        let floor = -2.0 * (1.0 - delta).ln();
        assert!((v - (floor - 1.0)).abs() < 1e-9);
        // swapping the roles strictly increases the contrastive term
        let swapped = l_global(&dn, &ds, &nu_s, &nu_n, &b, &ww).unwrap();
        assert!(swapped > v);
        // equal distances: contrastive term vanishes
        let same = l_global(&dn, &ds, &nu_s, &nu_s, &b, &ww).unwrap();
        assert!((same - floor).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let r = total_loss(0.1, -0.2, 0.3, 0.4, 0.5);
        assert!((r.total - (r.l_local + r.l_global)).abs() < 1e-12);
        assert!((r.l_local + 0.1).abs() < 1e-12);
        assert!((r.l_global - 1.2).abs() < 1e-12);
        assert!(r.is_finite());
    }

    #[test]
    fn mask_downsampling_threshold() {
        let mut m = Array2::from_elem((8, 8), false);
        // top-left 4x4 block: half covered (8 of 16)
        for y in 0..2 {
            for x in 0..4 {
                m[[y, x]] = true;
            }
        }
        // bottom-right block: 4 of 16 = 0.25 <= 0.3
        for y in 6..8 {
            for x in 6..8 {
                m[[y, x]] = true;
            }
        }
        let d = downsample_mask(&m, 2, 2, 0.3);
        assert_eq!(d, array![[true, false], [false, false]]);
        let all = downsample_mask(&Array2::from_elem((7, 5), true), 3, 2, 0.3);
        assert!(all.iter().all(|&v| v));
    }
}
