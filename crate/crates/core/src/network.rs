//! Trainable per-cell maps: the linear feature adapter and the leaky MLP
//! discriminator. Both act on each grid cell independently with shared
//! weights, so everything is expressed on `cells x dim` matrices.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{EmbeddingGrid, Space};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Adapter output dimension; defaults to the backbone dimension.
    pub adapter_out_dim: Option<usize>,
    pub adapter_bias: bool,
    /// Std of the perturbation added to the identity initialization.
    pub adapter_init_noise: f64,
    pub disc_hidden: usize,
    pub disc_depth: usize,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            adapter_out_dim: None,
            adapter_bias: true,
            adapter_init_noise: 1e-3,
            disc_hidden: 1024,
            disc_depth: 2,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub leaky_slope: f64,
}

/// `y = x W^T + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    fn normal<R: Rng + ?Sized>(out: usize, inp: usize, std: f64, bias: bool, rng: &mut R) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        Linear {
            weight: Array2::from_shape_fn((out, inp), |_| n.sample(rng)),
            bias: bias.then(|| Array1::zeros(out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    fn zero_grads(&self) -> LinearGrads {
        LinearGrads {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    /// Accumulate parameter gradients; returns the gradient w.r.t. `x`.
    fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>, grads: Option<&mut LinearGrads>) -> Array2<f64> {
        if let Some(g) = grads {
            g.weight += &grad_out.t().dot(&x);
            if let Some(b) = &mut g.bias {
                *b += &grad_out.sum_axis(Axis(0));
            }
        }
        grad_out.dot(&self.weight)
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

impl LinearGrads {
    fn add_assign(&mut self, other: &LinearGrads) {
        self.weight += &other.weight;
        if let (Some(a), Some(b)) = (&mut self.bias, &other.bias) {
            *a += b;
        }
    }
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Shared 1x1 affine projection from backbone space into the learned space.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub linear: Linear,
}

impl Adapter {
    /// Identity plus `N(0, noise^2)` when square, Xavier-normal otherwise.
    pub fn init<R: Rng + ?Sized>(spec: AdapterSpec, noise: f64, rng: &mut R) -> Self {
        let linear = if spec.in_dim == spec.out_dim {
            let mut l = Linear::normal(spec.out_dim, spec.in_dim, noise.max(0.0) + f64::MIN_POSITIVE, spec.bias, rng);
            if noise <= 0.0 {
                l.weight.fill(0.0);
            }
            for i in 0..spec.in_dim {
                l.weight[[i, i]] += 1.0;
            }
            l
        } else {
            let std = (2.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            Linear::normal(spec.out_dim, spec.in_dim, std, spec.bias, rng)
        };
        Adapter { linear }
    }

    pub fn spec(&self) -> AdapterSpec {
        AdapterSpec {
            in_dim: self.linear.in_dim(),
            out_dim: self.linear.out_dim(),
            bias: self.linear.bias.is_some(),
        }
    }

    pub fn forward_cells(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.linear.forward(x)
    }

    pub fn adapt(&self, grid: &EmbeddingGrid) -> Result<EmbeddingGrid> {
        check_dim("adapter input", self.linear.in_dim(), grid.dim())?;
        grid.with_cells(self.forward_cells(grid.cells()), Space::Adapted)
    }
}

/// Cached activations of one discriminator forward pass.
#[derive(Clone, Debug)]
pub struct DiscCache {
    /// Input followed by each hidden activation.
    inputs: Vec<Array2<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<f64>>,
    pub probs: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub leaky_slope: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Discriminator {
    pub fn init<R: Rng + ?Sized>(spec: DiscriminatorSpec, rng: &mut R) -> Self {
        let gain = 2.0 / (1.0 + spec.leaky_slope * spec.leaky_slope);
        let mut hidden = Vec::with_capacity(spec.depth);
        let mut inp = spec.in_dim;
        for _ in 0..spec.depth {
            hidden.push(Linear::normal(spec.hidden, inp, (gain / inp as f64).sqrt(), true, rng));
            inp = spec.hidden;
        }
        let out = Linear::normal(1, inp, (1.0 / inp as f64).sqrt(), true, rng);
        Discriminator {
            hidden,
            out,
            leaky_slope: spec.leaky_slope,
        }
    }

    pub fn spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            in_dim: self.in_dim(),
            hidden: self.hidden.first().map_or(0, |l| l.out_dim()),
            depth: self.hidden.len(),
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.out).in_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> DiscCache {
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.hidden.len());
        for l in &self.hidden {
            let z = l.forward(inputs.last().expect("nonempty").view());
            let a = z.mapv(|v| if v > 0.0 { v } else { self.leaky_slope * v });
            pre.push(z);
            inputs.push(a);
        }
        let logits = self.out.forward(inputs.last().expect("nonempty").view());
        let probs = logits.column(0).mapv(sigmoid);
        DiscCache { inputs, pre, probs }
    }

    pub fn scores(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.forward(x).probs
    }

    /// Per-cell probabilities as an `L_H x L_W` grid.
    pub fn discriminate(&self, grid: &EmbeddingGrid) -> Result<Array2<f64>> {
        check_dim("discriminator input", self.in_dim(), grid.dim())?;
        Ok(self
            .scores(grid.cells())
            .into_shape_with_order((grid.height(), grid.width()))
            .expect("cell count"))
    }

    /// Backpropagate `d loss / d prob` through the network. Parameter
    /// gradients are accumulated into `grads` when given; the gradient with
    /// respect to the input cells is returned.
    pub fn backward(&self, cache: &DiscCache, grad_probs: ArrayView1<f64>, mut grads: Option<&mut DiscGrads>) -> Array2<f64> {
        let dz: Array1<f64> = grad_probs
            .iter()
            .zip(cache.probs.iter())
            .map(|(&g, &p)| g * p * (1.0 - p))
            .collect();
        let dz = dz.insert_axis(Axis(1));
        let last = cache.inputs.last().expect("nonempty");
        let mut g = self
            .out
            .backward(last.view(), dz.view(), grads.as_deref_mut().map(|gr| &mut gr.out));
        for (i, l) in self.hidden.iter().enumerate().rev() {
            let slope = self.leaky_slope;
            g.zip_mut_with(&cache.pre[i], |gv, &z| {
                if z <= 0.0 {
                    *gv *= slope;
                }
            });
            g = l.backward(cache.inputs[i].view(), g.view(), grads.as_deref_mut().map(|gr| &mut gr.hidden[i]));
        }
        g
    }

    pub fn zero_grads(&self) -> DiscGrads {
        DiscGrads {
            hidden: self.hidden.iter().map(|l| l.zero_grads()).collect(),
            out: self.out.zero_grads(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.hidden.iter().map(|l| l.n_params()).sum::<usize>() + self.out.n_params()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscGrads {
    pub hidden: Vec<LinearGrads>,
    pub out: LinearGrads,
}

/// Which optimizer group a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Adapter,
    Discriminator,
}

/// Adapter plus discriminator: everything that trains.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub adapter: Adapter,
    pub disc: Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub adapter: LinearGrads,
    pub disc: DiscGrads,
}

fn linear_slices(l: &Linear) -> Vec<&[f64]> {
    let mut v = vec![l.weight.as_slice().expect("standard layout")];
    if let Some(b) = &l.bias {
        v.push(b.as_slice().expect("contiguous"));
    }
    v
}

fn linear_slices_mut(l: &mut Linear) -> Vec<&mut [f64]> {
    let mut v = vec![l.weight.as_slice_mut().expect("standard layout")];
    if let Some(b) = &mut l.bias {
        v.push(b.as_slice_mut().expect("contiguous"));
    }
    v
}

fn grad_slices(g: &LinearGrads) -> Vec<&[f64]> {
    let mut v = vec![g.weight.as_slice().expect("standard layout")];
    if let Some(b) = &g.bias {
        v.push(b.as_slice().expect("contiguous"));
    }
    v
}

impl Model {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let out_dim = cfg.adapter_out_dim.unwrap_or(in_dim);
        if in_dim == 0 || out_dim == 0 || cfg.disc_hidden == 0 || cfg.disc_depth == 0 {
            return Err(Error::Config("network dimensions and depth must be positive".into()));
        }
        let adapter = Adapter::init(
            AdapterSpec {
                in_dim,
                out_dim,
                bias: cfg.adapter_bias,
            },
            cfg.adapter_init_noise,
            rng,
        );
        let disc = Discriminator::init(
            DiscriminatorSpec {
                in_dim: out_dim,
                hidden: cfg.disc_hidden,
                depth: cfg.disc_depth,
                leaky_slope: cfg.leaky_slope,
            },
            rng,
        );
        Ok(Model { adapter, disc })
    }

    /// Zero-valued model with the given shapes, to be filled by
    /// [`Model::set_flat_params`].
    pub fn zeros(a: AdapterSpec, d: DiscriminatorSpec) -> Result<Self> {
        check_dim("discriminator input", a.out_dim, d.in_dim)?;
        let lin = |out: usize, inp: usize, bias: bool| Linear {
            weight: Array2::zeros((out, inp)),
            bias: bias.then(|| Array1::zeros(out)),
        };
        let mut hidden = Vec::with_capacity(d.depth);
        let mut inp = d.in_dim;
        for _ in 0..d.depth {
            hidden.push(lin(d.hidden, inp, true));
            inp = d.hidden;
        }
        Ok(Model {
            adapter: Adapter {
                linear: lin(a.out_dim, a.in_dim, a.bias),
            },
            disc: Discriminator {
                hidden,
                out: lin(1, inp, true),
                leaky_slope: d.leaky_slope,
            },
        })
    }

    /// Multiply-accumulate count per grid cell for adapter plus discriminator.
    pub fn macs_per_cell(&self) -> u64 {
        let l = |x: &Linear| (x.in_dim() * x.out_dim()) as u64;
        l(&self.adapter.linear) + self.disc.hidden.iter().map(l).sum::<u64>() + l(&self.disc.out)
    }

    pub fn n_params(&self) -> usize {
        self.adapter.linear.n_params() + self.disc.n_params()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            adapter: self.adapter.linear.zero_grads(),
            disc: self.disc.zero_grads(),
        }
    }

    /// Parameter tensors in a fixed order: adapter, hidden layers, output.
    pub fn param_slices(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut v: Vec<_> = linear_slices(&self.adapter.linear)
            .into_iter()
            .map(|s| (ParamGroup::Adapter, s))
            .collect();
        for l in self.disc.hidden.iter().chain(std::iter::once(&self.disc.out)) {
            v.extend(linear_slices(l).into_iter().map(|s| (ParamGroup::Discriminator, s)));
        }
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut v: Vec<_> = linear_slices_mut(&mut self.adapter.linear)
            .into_iter()
            .map(|s| (ParamGroup::Adapter, s))
            .collect();
        for l in self.disc.hidden.iter_mut().chain(std::iter::once(&mut self.disc.out)) {
            v.extend(linear_slices_mut(l).into_iter().map(|s| (ParamGroup::Discriminator, s)));
        }
        v
    }

    /// Checksum-friendly flat copy of every parameter.
    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.n_params(), flat.len())?;
        let mut off = 0;
        for (_, s) in self.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }
}

impl ModelGrads {
    /// Same order as [`Model::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = grad_slices(&self.adapter);
        for g in self.disc.hidden.iter().chain(std::iter::once(&self.disc.out)) {
            v.extend(grad_slices(g));
        }
        v
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().into_iter().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.adapter.add_assign(&other.adapter);
        for (a, b) in self.disc.hidden.iter_mut().zip(&other.disc.hidden) {
            a.add_assign(b);
        }
        self.disc.out.add_assign(&other.disc.out);
    }
}

impl Adapter {
    /// Accumulate `d loss / d params` given `d loss / d output` for inputs `x`.
    pub fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>, grads: &mut LinearGrads) {
        self.linear.backward(x, grad_out, Some(grads));
    }
}
