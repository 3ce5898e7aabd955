//! Synthetic global embeddings by normalized gradient ascent on the global
//! objective, starting from noised clean embeddings.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchor_bank::AnchorBank;
use crate::backbone::EmbeddingGrid;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::global_objective_grad;
use crate::network::Discriminator;
use crate::objectives::{bce, d_global_with_grad, LossWeights};

/// Gradients with a smaller L2 norm stop the ascent.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiegConfig {
    pub steps: usize,
    pub mu: f64,
    /// Identity covariance scale (noise std).
    pub sigma: f64,
    pub eta: f64,
    /// Keep the initial noise in the returned embedding.
    pub retain_noise: bool,
}

impl Default for PiegConfig {
    fn default() -> Self {
        PiegConfig {
            steps: 20,
            mu: 0.015,
            sigma: 1.0,
            eta: 0.01,
            retain_noise: true,
        }
    }
}

impl PiegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.sigma >= 0.0 && self.mu.is_finite() && self.eta.is_finite()) {
            return Err(Error::Config(format!("invalid pieg config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GpeOutcome {
    pub init: Array2<f64>,
    pub gpe: Array2<f64>,
    pub steps_taken: usize,
    /// Ascent stopped on a vanishing gradient.
    pub degenerate: bool,
}

pub fn init_noise<R: Rng + ?Sized>(shape: (usize, usize), cfg: &PiegConfig, rng: &mut R) -> Array2<f64> {
    if cfg.sigma == 0.0 {
        return Array2::from_elem(shape, cfg.mu);
    }
    let n = Normal::new(cfg.mu, cfg.sigma).expect("validated sigma");
    Array2::from_shape_fn(shape, |_| n.sample(rng))
}

/// `nu_n + rho`, `rho ~ N(mu, sigma^2)` elementwise.
pub fn init_gpe<R: Rng + ?Sized>(nu_n: &EmbeddingGrid, cfg: &PiegConfig, rng: &mut R) -> Result<EmbeddingGrid> {
    let cells = &nu_n.cells() + &init_noise((nu_n.n_cells(), nu_n.dim()), cfg, rng);
    nu_n.with_cells(cells, nu_n.space())
}

/// Run the ascent on cell matrices. `nu_n` and the discriminator are read only.
pub fn generate_cells<R: Rng + ?Sized>(
    nu_n: ArrayView2<f64>,
    disc: &Discriminator,
    bank: &AnchorBank,
    w: &LossWeights,
    cfg: &PiegConfig,
    rng: &mut R,
    exec: Exec,
) -> Result<GpeOutcome> {
    let init = &nu_n + &init_noise(nu_n.dim(), cfg, rng);
    let (d_n, _) = d_global_with_grad(nu_n, bank, exec)?;
    let bce_n = bce(disc.scores(nu_n).view(), false);
    let mut cur = init.clone();
    let mut moved = Array2::<f64>::zeros(nu_n.raw_dim());
    let mut steps_taken = 0;
    let mut degenerate = false;
    if cfg.eta > 0.0 {
        for _ in 0..cfg.steps {
            let (_, g) = global_objective_grad(disc, cur.view(), d_n, bce_n, bank, w, exec)?;
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite("synthetic embedding gradient".into()));
            }
            if norm < MIN_GRAD_NORM {
                degenerate = true;
                break;
            }
            let k = cfg.eta / norm;
            cur.scaled_add(k, &g);
            moved.scaled_add(k, &g);
            steps_taken += 1;
        }
    }
    let gpe = if cfg.retain_noise { cur } else { &nu_n + &moved };
    Ok(GpeOutcome {
        init,
        gpe,
        steps_taken,
        degenerate,
    })
}

pub fn generate_gpe<R: Rng + ?Sized>(
    nu_n: &EmbeddingGrid,
    disc: &Discriminator,
    bank: &AnchorBank,
    w: &LossWeights,
    cfg: &PiegConfig,
    rng: &mut R,
) -> Result<(EmbeddingGrid, GpeOutcome)> {
    let out = generate_cells(nu_n.cells(), disc, bank, w, cfg, rng, Exec::default())?;
    Ok((nu_n.with_cells(out.gpe.clone(), nu_n.space())?, out))
}

/// Global objective for one clean/synthetic pair, parameters frozen.
pub fn global_objective(
    nu_n: ArrayView2<f64>,
    nu_s: ArrayView2<f64>,
    disc: &Discriminator,
    bank: &AnchorBank,
    w: &LossWeights,
) -> Result<f64> {
    let (d_n, _) = d_global_with_grad(nu_n, bank, Exec::Sequential)?;
    let bce_n = bce(disc.scores(nu_n).view(), false);
    Ok(global_objective_grad(disc, nu_s, d_n, bce_n, bank, w, Exec::Sequential)?.0)
}
