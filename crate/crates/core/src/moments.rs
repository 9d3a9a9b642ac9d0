//! Image moments, principal-axis orientation, and the centroid / orientation
//! alignment losses between attention maps and scribble regions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::scalar::{sigmoid, Scalar};
use crate::scribble::ScribbleSet;

/// Relative anisotropy below which orientation is treated as undefined.
pub const ISOTROPY_EPS: f64 = 1e-3;

/// Activation maps keyed by token.
pub type TokenMaps<T> = BTreeMap<String, Grid2D<T>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSummary<T> {
    pub m00: T,
    pub m10: T,
    pub m01: T,
    pub mu20: T,
    pub mu02: T,
    pub mu11: T,
    pub centroid: (T, T),
    /// Principal-axis angle in `(-pi/2, pi/2]`, measured from +x towards +y.
    pub theta: T,
    pub isotropic: bool,
}

pub fn moment_summary<T: Scalar>(img: &Grid2D<T>) -> Result<MomentSummary<T>> {
    let (w, h) = img.shape();
    let mut m00 = T::zero();
    let mut m10 = T::zero();
    let mut m01 = T::zero();
    for y in 0..h {
        let fy = T::from_usize_lossy(y);
        for x in 0..w {
            let v = img.get(x, y);
            if v < T::zero() {
                return Err(Error::Distribution("negative intensity".into()));
            }
            m00 += v;
            m10 += T::from_usize_lossy(x) * v;
            m01 += fy * v;
        }
    }
    if m00 <= T::zero() {
        return Err(Error::ZeroMass);
    }
    let cx = m10 / m00;
    let cy = m01 / m00;
    // second pass about the centroid avoids cancellation in m20/m00 - cx^2
    let (mut s20, mut s02, mut s11) = (T::zero(), T::zero(), T::zero());
    for y in 0..h {
        let dy = T::from_usize_lossy(y) - cy;
        for x in 0..w {
            let v = img.get(x, y);
            let dx = T::from_usize_lossy(x) - cx;
            s20 += dx * dx * v;
            s02 += dy * dy * v;
            s11 += dx * dy * v;
        }
    }
    let (mu20, mu02, mu11) = (s20 / m00, s02 / m00, s11 / m00);
    let two = T::lit(2.0);
    let theta = (two * mu11).atan2(mu20 - mu02) / two;
    let anisotropy = ((mu20 - mu02).powi(2) + T::lit(4.0) * mu11 * mu11).sqrt();
    Ok(MomentSummary {
        m00,
        m10,
        m01,
        mu20,
        mu02,
        mu11,
        centroid: (cx, cy),
        theta,
        isotropic: anisotropy <= T::lit(ISOTROPY_EPS) * (mu20 + mu02),
    })
}

/// Difference between two axis angles, wrapped into `(-pi/2, pi/2]`.
pub fn axis_difference<T: Scalar>(a: T, b: T) -> T {
    let pi = T::PI();
    let half = T::FRAC_PI_2();
    let mut d = (a - b) % pi;
    if d > half {
        d -= pi;
    } else if d <= -half {
        d += pi;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentLoss<T> {
    pub centroid: T,
    pub central: T,
    pub total: T,
}

/// Centroid and orientation losses of every scribble's tokens.
///
/// Attention maps are raw logits; moments are taken on their logistic image.
pub fn moment_loss<T: Scalar>(
    attn: &TokenMaps<T>,
    scribbles: &ScribbleSet,
    lambda1: T,
    lambda2: T,
) -> Result<MomentLoss<T>> {
    evaluate(attn, scribbles, lambda1, lambda2, false).map(|(l, _)| l)
}

/// Gradient of the total moment loss with respect to every logit of every token map.
pub fn grad_moment_loss<T: Scalar>(
    attn: &TokenMaps<T>,
    scribbles: &ScribbleSet,
    lambda1: T,
    lambda2: T,
) -> Result<TokenMaps<T>> {
    evaluate(attn, scribbles, lambda1, lambda2, true).map(|(_, g)| g)
}

/// Loss and gradient in one pass.
pub fn moment_loss_and_grad<T: Scalar>(
    attn: &TokenMaps<T>,
    scribbles: &ScribbleSet,
    lambda1: T,
    lambda2: T,
) -> Result<(MomentLoss<T>, TokenMaps<T>)> {
    evaluate(attn, scribbles, lambda1, lambda2, true)
}

fn evaluate<T: Scalar>(
    attn: &TokenMaps<T>,
    scribbles: &ScribbleSet,
    lambda1: T,
    lambda2: T,
    want_grad: bool,
) -> Result<(MomentLoss<T>, TokenMaps<T>)> {
    if scribbles.is_empty() {
        return Err(Error::EmptyScribbleSet);
    }
    let n_scribbles = T::from_usize_lossy(scribbles.len());
    let two = T::lit(2.0);
    let central_norm = T::one() / (two * T::PI() * n_scribbles);
    let mut centroid_loss = T::zero();
    let mut central_loss = T::zero();
    let mut grads: TokenMaps<T> = BTreeMap::new();

    for scribble in scribbles.scribbles() {
        let target = moment_summary(&scribble.mask.to_grid::<T>())?;
        let per_token = T::one() / T::from_usize_lossy(scribble.tokens.len());
        for token in &scribble.tokens {
            let logits = attn
                .get(token)
                .ok_or_else(|| Error::MissingToken(token.clone()))?;
            logits.check_same_shape(&scribble.mask.to_grid())?;
            let prob = logits.map(sigmoid);
            let m = moment_summary(&prob)?;

            let (ex, ey) = (m.centroid.0 - target.centroid.0, m.centroid.1 - target.centroid.1);
            centroid_loss += per_token * (ex * ex + ey * ey) / n_scribbles;

            let orient = if m.isotropic || target.isotropic {
                None
            } else {
                Some(axis_difference(m.theta, target.theta))
            };
            if let Some(d) = orient {
                central_loss += per_token * d.abs() * central_norm;
            }

            if !want_grad {
                continue;
            }
            let c_weight = lambda1 * per_token / n_scribbles;
            let (u, v) = (m.mu20 - m.mu02, two * m.mu11);
            let denom = u * u + v * v;
            let o_weight = match orient {
                Some(d) if d != T::zero() && denom > T::zero() => {
                    lambda2 * per_token * central_norm * d.signum()
                }
                _ => T::zero(),
            };
            let (cx, cy) = m.centroid;
            let grad = Grid2D::from_fn(prob.width(), prob.height(), |x, y| {
                let p = prob.get(x, y);
                let dx = T::from_usize_lossy(x) - cx;
                let dy = T::from_usize_lossy(y) - cy;
                let mut g = c_weight * two * (ex * dx + ey * dy) / m.m00;
                if o_weight != T::zero() {
                    let d20 = (dx * dx - m.mu20) / m.m00;
                    let d02 = (dy * dy - m.mu02) / m.m00;
                    let d11 = (dx * dy - m.mu11) / m.m00;
                    let du = d20 - d02;
                    let dv = two * d11;
                    let dtheta = (u * dv - v * du) / (two * denom);
                    g += o_weight * dtheta;
                }
                g * p * (T::one() - p)
            });
            match grads.get_mut(token) {
                Some(acc) => acc.add_scaled(&grad, T::one()),
                None => {
                    grads.insert(token.clone(), grad);
                }
            }
        }
    }
    let loss = MomentLoss {
        centroid: centroid_loss,
        central: central_loss,
        total: lambda1 * centroid_loss + lambda2 * central_loss,
    };
    Ok((loss, grads))
}
