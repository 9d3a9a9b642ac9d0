//! Focal cross-attention loss and the combined guidance loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Mask};
use crate::moments::{moment_loss_and_grad, MomentLoss, TokenMaps};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::scribble::ScribbleSet;

/// Every scalar the losses, the sampler and scribble propagation read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Focal weight of scribble cells; background cells get `1 - alpha`.
    pub alpha: f64,
    /// Exponent of the `(1 - sigmoid(A))` modulating factor.
    pub beta: f64,
    /// Centroid term weight.
    pub lambda1: f64,
    /// Orientation term weight.
    pub lambda2: f64,
    pub w_focal: f64,
    pub w_moment: f64,
    /// Multiplier on the latent gradient applied after each DDIM step.
    pub guidance_scale: f64,
    /// Classifier-free guidance scale.
    pub omega: f64,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta_ddim: f64,
    /// Merge threshold on the symmetric KL distance.
    pub tau: f64,
    /// Anchors merged per propagation call, over all scribbles together.
    pub top_k: usize,
    /// First and last 1-based inference step that runs propagation.
    pub k1: usize,
    pub k2: usize,
    pub propagation: bool,
    pub agg_resolutions: Vec<usize>,
    pub agg_weights: Vec<f64>,
    /// Side of the query block pooled into one anchor.
    pub anchor_factor: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 2.0,
            lambda1: 0.6,
            lambda2: 0.6,
            w_focal: 5.0,
            w_moment: 3.0,
            guidance_scale: 1.0,
            omega: 1.0,
            eta_ddim: 0.0,
            tau: 0.001,
            top_k: 20,
            k1: 5,
            k2: 15,
            propagation: true,
            agg_resolutions: vec![8, 16, 32],
            agg_weights: vec![1.0, 2.0, 4.0],
            anchor_factor: 2,
        }
    }
}

impl GuidanceConfig {
    /// Checks invariants and returns a copy whose aggregation weights sum to one.
    pub fn validated(&self) -> Result<Self> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be nonnegative");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.k1 > self.k2 {
            return bad("k1 must not exceed k2");
        }
        if self.anchor_factor == 0 {
            return bad("anchor_factor must be positive");
        }
        let scalars = [
            self.lambda1,
            self.lambda2,
            self.w_focal,
            self.w_moment,
            self.guidance_scale,
            self.omega,
            self.eta_ddim,
        ];
        if scalars.iter().any(|v| !v.is_finite()) {
            return bad("non-finite guidance scalar");
        }
        if self.agg_resolutions.is_empty() || self.agg_resolutions.contains(&0) {
            return bad("agg_resolutions must be a nonempty list of positive sizes");
        }
        if self.agg_weights.len() != self.agg_resolutions.len() {
            return bad("agg_weights and agg_resolutions differ in length");
        }
        if self.agg_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("agg_weights must be nonnegative");
        }
        let total: f64 = self.agg_weights.iter().sum();
        if total <= 0.0 {
            return bad("agg_weights sum to zero");
        }
        let mut out = self.clone();
        out.agg_weights = self.agg_weights.iter().map(|w| w / total).collect();
        Ok(out)
    }

    /// Largest aggregation resolution: the grid self-attention is aggregated onto.
    pub fn agg_target(&self) -> usize {
        self.agg_resolutions.iter().copied().max().unwrap_or(0)
    }
}

/// Per-cell focal term for logit `a` against label `m`.
#[inline]
fn focal_cell<T: Scalar>(a: T, m: T, alpha: T, beta: T) -> T {
    let one = T::one();
    // -ln p = softplus(-a), -ln(1-p) = softplus(a)
    let bce = m * softplus(-a) + (one - m) * softplus(a);
    let q = sigmoid(-a);
    let weight = alpha * m + (one - alpha) * (one - m);
    modulate(q, beta) * weight * bce
}

/// d(focal_cell)/da.
#[inline]
fn focal_cell_grad<T: Scalar>(a: T, m: T, alpha: T, beta: T) -> T {
    let one = T::one();
    let p = sigmoid(a);
    let q = sigmoid(-a);
    let bce = m * softplus(-a) + (one - m) * softplus(a);
    let weight = alpha * m + (one - alpha) * (one - m);
    weight * modulate(q, beta) * ((p - m) - beta * p * bce)
}

#[inline]
fn modulate<T: Scalar>(q: T, beta: T) -> T {
    if beta == T::zero() {
        T::one()
    } else {
        q.powf(beta)
    }
}

/// Mean over cells of `(1 - sigmoid(A))^beta * (alpha M + (1 - alpha)(1 - M)) * BCE(M, sigmoid(A))`.
pub fn focal_loss<T: Scalar>(attn: &Grid2D<T>, mask: &Mask, alpha: T, beta: T) -> Result<T> {
    let labels = mask.to_grid::<T>();
    attn.check_same_shape(&labels)?;
    let s: T = attn
        .values()
        .iter()
        .zip(labels.values())
        .map(|(&a, &m)| focal_cell(a, m, alpha, beta))
        .sum();
    Ok(s / T::from_usize_lossy(attn.len()))
}

/// Cellwise gradient of [`focal_loss`] with respect to the logits.
pub fn grad_focal_loss<T: Scalar>(
    attn: &Grid2D<T>,
    mask: &Mask,
    alpha: T,
    beta: T,
) -> Result<Grid2D<T>> {
    let labels = mask.to_grid::<T>();
    let n = T::from_usize_lossy(attn.len());
    attn.zip_map(&labels, |a, m| focal_cell_grad(a, m, alpha, beta) / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossLoss<T> {
    pub focal: T,
    pub moment: MomentLoss<T>,
    /// `w_focal * focal + w_moment * moment.total`.
    pub total: T,
}

fn focal_over_set<T: Scalar>(
    attn: &TokenMaps<T>,
    scribbles: &ScribbleSet,
    cfg: &GuidanceConfig,
    want_grad: bool,
) -> Result<(T, TokenMaps<T>)> {
    if scribbles.is_empty() {
        return Err(Error::EmptyScribbleSet);
    }
    let (alpha, beta) = (T::lit(cfg.alpha), T::lit(cfg.beta));
    let n_scribbles = T::from_usize_lossy(scribbles.len());
    let mut total = T::zero();
    let mut grads = BTreeMap::new();
    for s in scribbles.scribbles() {
        let w = T::one() / (n_scribbles * T::from_usize_lossy(s.tokens.len()));
        for token in &s.tokens {
            let a = attn
                .get(token)
                .ok_or_else(|| Error::MissingToken(token.clone()))?;
            total += w * focal_loss(a, &s.mask, alpha, beta)?;
            if want_grad {
                let g = grad_focal_loss(a, &s.mask, alpha, beta)?.map(|v| v * w);
                accumulate(&mut grads, token, &g, T::one());
            }
        }
    }
    Ok((total, grads))
}

fn accumulate<T: Scalar>(acc: &mut TokenMaps<T>, token: &str, g: &Grid2D<T>, scale: T) {
    match acc.get_mut(token) {
        Some(existing) => existing.add_scaled(g, scale),
        None => {
            acc.insert(token.to_string(), g.map(|v| v * scale));
        }
    }
}

/// Weighted focal plus moment loss over all scribbles and their tokens.
pub fn cross_loss<T: Scalar>(
    attn: &TokenMaps<T>,
    scribbles: &ScribbleSet,
    cfg: &GuidanceConfig,
) -> Result<CrossLoss<T>> {
    let (focal, _) = focal_over_set(attn, scribbles, cfg, false)?;
    let moment = crate::moments::moment_loss(attn, scribbles, T::lit(cfg.lambda1), T::lit(cfg.lambda2))?;
    Ok(combine(focal, moment, cfg))
}

fn combine<T: Scalar>(focal: T, moment: MomentLoss<T>, cfg: &GuidanceConfig) -> CrossLoss<T> {
    CrossLoss {
        focal,
        moment,
        total: T::lit(cfg.w_focal) * focal + T::lit(cfg.w_moment) * moment.total,
    }
}

/// Gradient of [`cross_loss`]'s total with respect to every logit.
pub fn grad_cross_loss<T: Scalar>(
    attn: &TokenMaps<T>,
    scribbles: &ScribbleSet,
    cfg: &GuidanceConfig,
) -> Result<TokenMaps<T>> {
    cross_loss_and_grad(attn, scribbles, cfg).map(|(_, g)| g)
}

pub fn cross_loss_and_grad<T: Scalar>(
    attn: &TokenMaps<T>,
    scribbles: &ScribbleSet,
    cfg: &GuidanceConfig,
) -> Result<(CrossLoss<T>, TokenMaps<T>)> {
    let (focal, focal_grads) = focal_over_set(attn, scribbles, cfg, true)?;
    let (moment, moment_grads) =
        moment_loss_and_grad(attn, scribbles, T::lit(cfg.lambda1), T::lit(cfg.lambda2))?;
    let mut grads = BTreeMap::new();
    for (token, g) in &focal_grads {
        accumulate(&mut grads, token, g, T::lit(cfg.w_focal));
    }
    for (token, g) in &moment_grads {
        accumulate(&mut grads, token, g, T::lit(cfg.w_moment));
    }
    Ok((combine(focal, moment, cfg), grads))
}
