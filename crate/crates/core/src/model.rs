//! Batched training objective over adapter + discriminator with analytic
//! gradients, and the gradient of the global objective with respect to
//! synthetic embeddings used by PiEG.

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::anchor_bank::AnchorBank;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::{Discriminator, Model, ModelGrads};
use crate::objectives::{
    bce_with_grad, d_global_with_grad, d_local_with_grad, focal_with_grad, total_loss, tritanh_with_grad, LossReport,
    LossWeights,
};

/// Which cells the clean embedding is pulled at in the local contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Clean and corrupted embeddings share the corruption mask.
    #[default]
    Shared,
    /// The clean embedding uses every cell.
    AllOnesNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_llc: bool,
    pub use_lgc: bool,
    /// Separate synthetic global embeddings from clean ones with BCE.
    pub use_gpe_bce: bool,
    /// Drop the initial noise from the final synthetic embedding.
    pub drop_init_noise: bool,
    pub mask_mode: MaskMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_llc: true,
            use_lgc: true,
            use_gpe_bce: true,
            drop_init_noise: false,
            mask_mode: MaskMode::Shared,
        }
    }
}

/// Named rows of the contrastive-loss ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    None,
    Llc,
    Lgc,
    Glcl,
}

impl AblationPreset {
    pub fn apply(self, base: Ablation) -> Ablation {
        let (use_llc, use_lgc) = match self {
            AblationPreset::None => (false, false),
            AblationPreset::Llc => (true, false),
            AblationPreset::Lgc => (false, true),
            AblationPreset::Glcl => (true, true),
        };
        Ablation {
            use_llc,
            use_lgc,
            ..base
        }
    }
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AblationPreset::None),
            "llc" => Ok(AblationPreset::Llc),
            "lgc" => Ok(AblationPreset::Lgc),
            "glcl" => Ok(AblationPreset::Glcl),
            other => Err(Error::Config(format!("unknown ablation '{other}' (none|llc|lgc|glcl)"))),
        }
    }
}

impl Ablation {
    /// Whether synthetic global embeddings are needed at all.
    pub fn needs_gpe(&self) -> bool {
        self.use_lgc || self.use_gpe_bce
    }
}

/// One training item as raw backbone cells. `gpe_offset` is `nu_s - nu_n`
/// and is held constant when differentiating.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub raw_n: Array2<f64>,
    pub raw_p: Array2<f64>,
    /// Downsampled corruption mask, one entry per cell.
    pub mask: Array1<bool>,
    pub gpe_offset: Option<Array2<f64>>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Scales {
    focal: f64,
    bce_n: f64,
    bce_s: f64,
    lc: f64,
    gc: f64,
}

#[derive(Default)]
struct ItemTerms {
    focal: f64,
    bce_n: f64,
    bce_s: f64,
    l_lc: f64,
    l_gc: f64,
}

fn scaled(g: &[f64], s: f64) -> Array1<f64> {
    g.iter().map(|v| v * s).collect()
}

fn item_loss(
    model: &Model,
    item: &TrainItem,
    bank: &AnchorBank,
    w: &LossWeights,
    ab: &Ablation,
    sc: Scales,
    mut grads: Option<&mut ModelGrads>,
) -> Result<ItemTerms> {
    let mut terms = ItemTerms::default();
    let nu_n = model.adapter.forward_cells(item.raw_n.view());
    let nu_p = model.adapter.forward_cells(item.raw_p.view());

    let cache_p = model.disc.forward(nu_p.view());
    let (focal, gf) = focal_with_grad(cache_p.probs.view(), item.mask.view(), w.focal_gamma, w.focal_alpha);
    terms.focal = focal;
    let mut g_p = model.disc.backward(&cache_p, scaled(&gf, sc.focal).view(), grads.as_deref_mut().map(|g| &mut g.disc));

    let cache_n = model.disc.forward(nu_n.view());
    let (bce_n, gbn) = bce_with_grad(cache_n.probs.view(), false);
    terms.bce_n = bce_n;
    let mut g_n = model.disc.backward(&cache_n, scaled(&gbn, sc.bce_n).view(), grads.as_deref_mut().map(|g| &mut g.disc));

    if ab.use_llc {
        let normal_mask = match ab.mask_mode {
            MaskMode::Shared => item.mask.clone(),
            MaskMode::AllOnesNormal => Array1::from_elem(item.mask.len(), true),
        };
        let dn = d_local_with_grad(nu_n.view(), normal_mask.view(), bank, Exec::Sequential)?;
        let dp = d_local_with_grad(nu_p.view(), item.mask.view(), bank, Exec::Sequential)?;
        if let (Some((a, ga)), Some((b, gb))) = (dn, dp) {
            let (v, ta, tb) = tritanh_with_grad(a, b, w);
            terms.l_lc = v;
            g_n.scaled_add(sc.lc * ta, &ga);
            g_p.scaled_add(sc.lc * tb, &gb);
        }
    }

    if let Some(off) = &item.gpe_offset {
        let nu_s = &nu_n + off;
        let mut g_s = Array2::zeros(nu_s.raw_dim());
        if ab.use_gpe_bce {
            let cache_s = model.disc.forward(nu_s.view());
            let (bce_s, gbs) = bce_with_grad(cache_s.probs.view(), true);
            terms.bce_s = bce_s;
            g_s += &model.disc.backward(&cache_s, scaled(&gbs, sc.bce_s).view(), grads.as_deref_mut().map(|g| &mut g.disc));
        }
        if ab.use_lgc {
            let (a, ga) = d_global_with_grad(nu_n.view(), bank, Exec::Sequential)?;
            let (b, gb) = d_global_with_grad(nu_s.view(), bank, Exec::Sequential)?;
            let (v, ta, tb) = tritanh_with_grad(a, b, w);
            terms.l_gc = v;
            g_n.scaled_add(sc.gc * ta, &ga);
            g_s.scaled_add(sc.gc * tb, &gb);
        }
        g_n += &g_s;
    }

    if let Some(grads) = grads {
        model.adapter.backward(item.raw_n.view(), g_n.view(), &mut grads.adapter);
        model.adapter.backward(item.raw_p.view(), g_p.view(), &mut grads.adapter);
    }
    Ok(terms)
}

/// Batch loss report and, when `want_grads`, its gradient with respect to
/// every model parameter. Each term is averaged over the items it applies
/// to: all items for focal and clean BCE, items with synthetic embeddings
/// for the global terms, and items with a nonempty mask for the local
/// contrastive term.
pub fn loss_and_grad(
    model: &Model,
    items: &[TrainItem],
    bank: &AnchorBank,
    w: &LossWeights,
    ab: &Ablation,
    exec: Exec,
    want_grads: bool,
) -> Result<(LossReport, Option<ModelGrads>)> {
    if items.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let in_dim = model.adapter.linear.in_dim();
    for it in items {
        for (ctx, m) in [("clean cells", &it.raw_n), ("corrupted cells", &it.raw_p)] {
            if m.ncols() != in_dim {
                return Err(Error::DimMismatch {
                    context: ctx,
                    expected: in_dim,
                    actual: m.ncols(),
                });
            }
        }
        if it.mask.len() != it.raw_p.nrows() {
            return Err(Error::DimMismatch {
                context: "mask cells",
                expected: it.raw_p.nrows(),
                actual: it.mask.len(),
            });
        }
    }
    let b = items.len() as f64;
    let n_gpe = items.iter().filter(|it| it.gpe_offset.is_some()).count();
    let n_lc = items.iter().filter(|it| it.mask.iter().any(|&m| m)).count();
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let sc = Scales {
        focal: 1.0 / b,
        bce_n: 1.0 / b,
        bce_s: inv(n_gpe),
        lc: inv(n_lc),
        gc: inv(n_gpe),
    };

    let per_item: Vec<Result<(ItemTerms, Option<ModelGrads>)>> = exec.map(items, |it| {
        let mut g = want_grads.then(|| model.zero_grads());
        let t = item_loss(model, it, bank, w, ab, sc, g.as_mut())?;
        Ok((t, g))
    });

    let mut sum = ItemTerms::default();
    let mut grads = want_grads.then(|| model.zero_grads());
    for r in per_item {
        let (t, g) = r?;
        sum.focal += t.focal;
        sum.bce_n += t.bce_n;
        sum.bce_s += t.bce_s;
        sum.l_lc += t.l_lc;
        sum.l_gc += t.l_gc;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add_assign(&g);
        }
    }
    let report = total_loss(
        sum.focal * sc.focal,
        sum.l_lc * sc.lc,
        sum.bce_n * sc.bce_n,
        sum.bce_s * sc.bce_s,
        sum.l_gc * sc.gc,
    );
    Ok((report, grads))
}

/// Value of the global objective for one item and its gradient with respect
/// to the synthetic cells, parameters frozen. `d_global_n` is the clean
/// embedding's global distance and `bce_n` its BCE, both constant in `nu_s`.
pub fn global_objective_grad(
    disc: &Discriminator,
    nu_s: ArrayView2<f64>,
    d_global_n: f64,
    bce_n: f64,
    bank: &AnchorBank,
    w: &LossWeights,
    exec: Exec,
) -> Result<(f64, Array2<f64>)> {
    let cache = disc.forward(nu_s);
    let (bce_s, gb) = bce_with_grad(cache.probs.view(), true);
    let mut g = disc.backward(&cache, ArrayView1::from(&gb), None);
    let (ds, gd) = d_global_with_grad(nu_s, bank, exec)?;
    let (t, _, tb) = tritanh_with_grad(d_global_n, ds, w);
    g.scaled_add(tb, &gd);
    Ok((bce_n + bce_s + t, g))
}
