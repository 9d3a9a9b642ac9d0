//! Closed-form generative sandbox.
//!
//! The data distribution is a finite mixture of point masses at rendered
//! oriented-blob templates, so the noised marginal at every timestep is a
//! Gaussian mixture with an exact score. Cross- and self-attention are
//! analytic functions of the posterior template responsibilities.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, LatentState};
use crate::error::{Error, Result};
use crate::grid::{avg_pool, Grid2D, Mask};
use crate::moments::{axis_difference, TokenMaps};
use crate::propagation::{AttentionLevel, SelfAttentionStack};
use crate::scalar::{log_sum_exp, Scalar};

/// Templates whose responsibility is below this fraction of the largest are
/// left out of the self-attention mixture.
pub const SELF_ATTENTION_MIN_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub resolution: usize,
    pub classes: Vec<String>,
    pub orientations_deg: Vec<f64>,
    /// Blob centres in cell coordinates.
    pub centers: Vec<[f64; 2]>,
    /// Gaussian standard deviations along the major and minor axis, in cells.
    pub axes: [f64; 2],
    pub s_logit: f64,
    pub bandwidth: f64,
    pub priors: Option<Vec<f64>>,
    /// Place one blob of every class in each template instead of one blob per template.
    pub compose: bool,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let lattice = [8.5, 15.5, 22.5];
        Self {
            resolution: 32,
            classes: vec!["object".into()],
            orientations_deg: (0..6).map(|i| 30.0 * i as f64).collect(),
            centers: lattice
                .iter()
                .flat_map(|&y| lattice.iter().map(move |&x| [x, y]))
                .collect(),
            axes: [6.0, 2.0],
            s_logit: 10.0,
            bandwidth: 0.05,
            priors: None,
            compose: false,
        }
    }
}

/// Ground truth of one rendered object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub class: usize,
    pub center: (f64, f64),
    /// Major-axis angle in `(-pi/2, pi/2]`.
    pub theta: f64,
    pub axes: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template<T> {
    pub image: Grid2D<T>,
    /// Soft mask of each class present in the template.
    pub class_masks: Vec<(usize, Grid2D<T>)>,
    pub objects: Vec<ObjectTruth>,
    pub prior: T,
}

impl<T: Scalar> Template<T> {
    pub fn class_mask(&self, class: usize) -> Option<&Grid2D<T>> {
        self.class_masks.iter().find(|(c, _)| *c == class).map(|(_, m)| m)
    }

    pub fn object(&self, class: usize) -> Option<&ObjectTruth> {
        self.objects.iter().find(|o| o.class == class)
    }

    pub fn has_classes(&self, classes: &[usize]) -> bool {
        classes.iter().all(|c| self.class_mask(*c).is_some())
    }
}

#[derive(Debug, Clone)]
pub struct ToyWorld<T> {
    resolution: usize,
    classes: Vec<String>,
    templates: Vec<Template<T>>,
    s_logit: T,
    bandwidth: T,
    affinity: AffinityCache<T>,
}

/// Per-template self-attention rows, keyed by resolution; filled on first use.
#[derive(Clone, Default)]
struct AffinityCache<T>(Arc<Mutex<BTreeMap<usize, Arc<Vec<T>>>>>);

impl<T> std::fmt::Debug for AffinityCache<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let keys: Vec<usize> = self.0.lock().map(|m| m.keys().copied().collect()).unwrap_or_default();
        f.debug_tuple("AffinityCache").field(&keys).finish()
    }
}

/// Anisotropic Gaussian `exp(-d^T Sigma(theta)^-1 d / 2)` on the cell grid.
pub fn render_blob<T: Scalar>(n: usize, center: (f64, f64), theta: f64, axes: (f64, f64)) -> Grid2D<T> {
    let (c, s) = (theta.cos(), theta.sin());
    Grid2D::from_fn(n, n, |x, y| {
        let dx = x as f64 - center.0;
        let dy = y as f64 - center.1;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        T::lit((-0.5 * (u * u / (axes.0 * axes.0) + v * v / (axes.1 * axes.1))).exp())
    })
}

fn wrap_axis(theta: f64) -> f64 {
    axis_difference(theta, 0.0)
}

impl<T: Scalar> ToyWorld<T> {
    pub fn build(spec: &WorldSpec) -> Result<Self> {
        let n = spec.resolution;
        if spec.classes.is_empty() || spec.orientations_deg.is_empty() || spec.centers.is_empty() {
            return Err(Error::Config("world needs at least one class, orientation and center".into()));
        }
        let [major, minor] = spec.axes;
        if !(major > 0.0 && minor > 0.0) {
            return Err(Error::Config("blob axes must be positive".into()));
        }
        if (n as f64) < 4.0 * major.max(minor) {
            return Err(Error::Config(format!(
                "resolution {n} too small for blob axes {major}x{minor}"
            )));
        }
        if !(spec.bandwidth > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !(spec.s_logit > 0.0) {
            return Err(Error::Config("s_logit must be positive".into()));
        }
        let poses: Vec<((f64, f64), f64)> = spec
            .orientations_deg
            .iter()
            .flat_map(|&deg| spec.centers.iter().map(move |c| ((c[0], c[1]), deg.to_radians())))
            .collect();

        let mut layouts: Vec<Vec<ObjectTruth>> = Vec::new();
        if spec.compose {
            let mut partial: Vec<Vec<ObjectTruth>> = vec![Vec::new()];
            for class in 0..spec.classes.len() {
                let mut next = Vec::new();
                for layout in &partial {
                    for &(center, theta) in &poses {
                        if layout.iter().any(|o| o.center == center) {
                            continue;
                        }
                        let mut l = layout.clone();
                        l.push(ObjectTruth {
                            class,
                            center,
                            theta: wrap_axis(theta),
                            axes: (major, minor),
                        });
                        next.push(l);
                    }
                }
                partial = next;
            }
            layouts = partial;
        } else {
            for class in 0..spec.classes.len() {
                for &(center, theta) in &poses {
                    layouts.push(vec![ObjectTruth {
                        class,
                        center,
                        theta: wrap_axis(theta),
                        axes: (major, minor),
                    }]);
                }
            }
        }
        if layouts.len() < 2 {
            return Err(Error::Config("world needs at least two templates".into()));
        }
        let priors = match &spec.priors {
            None => vec![1.0 / layouts.len() as f64; layouts.len()],
            Some(p) => {
                if p.len() != layouts.len() || p.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Config(format!(
                        "expected {} positive priors, got {}",
                        layouts.len(),
                        p.len()
                    )));
                }
                let s: f64 = p.iter().sum();
                p.iter().map(|v| v / s).collect()
            }
        };
        let templates = layouts
            .into_iter()
            .zip(priors)
            .map(|(objects, prior)| {
                let class_masks: Vec<(usize, Grid2D<T>)> = objects
                    .iter()
                    .map(|o| (o.class, render_blob(n, o.center, o.theta, o.axes)))
                    .collect();
                let mut image = Grid2D::zeros(n, n);
                for (_, m) in &class_masks {
                    image = image.zip_map(m, |a, b| a.max(b)).expect("same shape");
                }
                Template {
                    image,
                    class_masks,
                    objects,
                    prior: T::lit(prior),
                }
            })
            .collect();
        Ok(Self {
            resolution: n,
            classes: spec.classes.clone(),
            templates,
            s_logit: T::lit(spec.s_logit),
            bandwidth: T::lit(spec.bandwidth),
            affinity: AffinityCache(Arc::default()),
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn templates(&self) -> &[Template<T>] {
        &self.templates
    }

    pub fn s_logit(&self) -> T {
        self.s_logit
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Unnormalized log posterior weight of every template; `-inf` outside the condition.
    pub fn log_weights(&self, x: &Grid2D<T>, alpha: T, condition: Option<&[usize]>) -> Result<Vec<T>> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::Config(format!("noise level alpha={alpha} outside (0, 1)")));
        }
        if x.shape() != (self.resolution, self.resolution) {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} in a {}x{} world",
                x.shape(),
                self.resolution,
                self.resolution
            )));
        }
        let scale = alpha.sqrt();
        let inv_var = T::one() / (T::lit(2.0) * (T::one() - alpha));
        let logw: Vec<T> = self
            .templates
            .iter()
            .map(|tpl| {
                if let Some(cond) = condition {
                    if !tpl.has_classes(cond) {
                        return T::neg_infinity();
                    }
                }
                let d2: T = x
                    .values()
                    .iter()
                    .zip(tpl.image.values())
                    .map(|(&xv, &mv)| {
                        let d = xv - scale * mv;
                        d * d
                    })
                    .sum();
                tpl.prior.ln() - d2 * inv_var
            })
            .collect();
        if condition.is_some_and(|c| !self.templates.iter().any(|t| t.has_classes(c))) {
            return Err(Error::Config("no template satisfies the condition".into()));
        }
        if logw.iter().any(|v| v.is_nan()) || logw.iter().all(|v| *v == T::neg_infinity()) {
            return Err(Error::NonFinite("template log weights"));
        }
        Ok(logw)
    }

    /// Posterior template weights at noise level `alpha`.
    pub fn responsibilities_at(&self, x: &Grid2D<T>, alpha: T, condition: Option<&[usize]>) -> Result<Vec<T>> {
        let logw = self.log_weights(x, alpha, condition)?;
        let lse = log_sum_exp(&logw);
        Ok(logw.into_iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn responsibilities(
        &self,
        state: &LatentState<T>,
        schedule: &DiffusionSchedule<T>,
        condition: Option<&[usize]>,
    ) -> Result<Vec<T>> {
        self.responsibilities_at(&state.x, schedule.alpha(state.t)?, condition)
    }

    /// `sum_i w_i image_i`.
    pub fn posterior_mean(&self, weights: &[T]) -> Grid2D<T> {
        let n = self.resolution;
        let mut out = Grid2D::zeros(n, n);
        for (tpl, &w) in self.templates.iter().zip(weights) {
            if w > T::zero() {
                out.add_scaled(&tpl.image, w);
            }
        }
        out
    }

    /// Exact noise prediction `(x - sqrt(alpha) E[x0 | x]) / sqrt(1 - alpha)`.
    pub fn epsilon_at(&self, x: &Grid2D<T>, alpha: T, condition: Option<&[usize]>) -> Result<Grid2D<T>> {
        let w = self.responsibilities_at(x, alpha, condition)?;
        let mean = self.posterior_mean(&w);
        let (a, b) = (alpha.sqrt(), (T::one() - alpha).sqrt());
        x.zip_map(&mean, |xv, mv| (xv - a * mv) / b)
    }

    pub fn model_epsilon(
        &self,
        state: &LatentState<T>,
        schedule: &DiffusionSchedule<T>,
        condition: Option<&[usize]>,
    ) -> Result<Grid2D<T>> {
        self.epsilon_at(&state.x, schedule.alpha(state.t)?, condition)
    }

    /// Cross-attention logits `s_logit * (sum_i w_i mask_i^c - 1/2)` for each class.
    pub fn cross_attention_maps(&self, weights: &[T], classes: &[usize]) -> Result<TokenMaps<T>> {
        let n = self.resolution;
        let half = T::lit(0.5);
        let mut maps = TokenMaps::new();
        for &c in classes {
            let name = self.classes.get(c).ok_or_else(|| Error::UnknownClass(format!("#{c}")))?;
            let mut soft = Grid2D::zeros(n, n);
            for (tpl, &w) in self.templates.iter().zip(weights) {
                if w > T::zero() {
                    if let Some(m) = tpl.class_mask(c) {
                        soft.add_scaled(m, w);
                    }
                }
            }
            maps.insert(name.clone(), soft.map(|v| self.s_logit * (v - half)));
        }
        Ok(maps)
    }

    /// Contracts `dL/dA` (per class token) through the responsibility softmax
    /// into `dL/dx`, where `weights` were computed from `x` at noise level `alpha`.
    pub fn latent_gradient(&self, weights: &[T], grads: &TokenMaps<T>, alpha: T) -> Result<Grid2D<T>> {
        let n = self.resolution;
        let resolved: Vec<(usize, &Grid2D<T>)> = grads
            .iter()
            .map(|(name, g)| Ok((self.class_index(name)?, g)))
            .collect::<Result<_>>()?;
        let dl_dw: Vec<T> = self
            .templates
            .iter()
            .zip(weights)
            .map(|(tpl, &w)| {
                if w <= T::zero() {
                    return T::zero();
                }
                resolved
                    .iter()
                    .filter_map(|(c, g)| tpl.class_mask(*c).map(|m| g.dot(m)))
                    .sum::<T>()
                    * self.s_logit
            })
            .collect();
        let mean: T = dl_dw.iter().zip(weights).map(|(&g, &w)| g * w).sum();
        let coef = alpha.sqrt() / (T::one() - alpha);
        let mut out = Grid2D::zeros(n, n);
        for ((tpl, &w), &g) in self.templates.iter().zip(weights).zip(&dl_dw) {
            if w > T::zero() {
                out.add_scaled(&tpl.image, coef * w * (g - mean));
            }
        }
        Ok(out)
    }

    /// Self-attention of the responsibility-weighted templates at each resolution.
    pub fn self_attention_stack(&self, weights: &[T], resolutions: &[usize]) -> Result<SelfAttentionStack<T>> {
        let wmax = weights.iter().copied().fold(T::zero(), T::max);
        let cutoff = wmax * T::lit(SELF_ATTENTION_MIN_WEIGHT);
        let active: Vec<(usize, T)> = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > T::zero() && w >= cutoff)
            .map(|(i, &w)| (i, w))
            .collect();
        let kept: T = active.iter().map(|(_, w)| *w).sum();
        if kept <= T::zero() {
            return Err(Error::Distribution("all responsibilities are zero".into()));
        }
        let mut levels = Vec::with_capacity(resolutions.len());
        for &r in resolutions {
            let per_template = self.template_affinities(r)?;
            let n = r * r;
            let mut rows = vec![T::zero(); n * n];
            for &(i, w) in &active {
                let w = w / kept;
                let src = &per_template[i * n * n..(i + 1) * n * n];
                for (o, &v) in rows.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
            levels.push(AttentionLevel::new(r, rows)?);
        }
        SelfAttentionStack::new(levels)
    }

    /// Row-stochastic affinities of every template's `r x r` downsampled image,
    /// concatenated in template order.
    fn template_affinities(&self, r: usize) -> Result<Arc<Vec<T>>> {
        if r == 0 || self.resolution % r != 0 {
            return Err(Error::NotDivisible {
                factor: r,
                size: self.resolution,
            });
        }
        let mut cache = self.affinity.0.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(rows) = cache.get(&r) {
            return Ok(rows.clone());
        }
        let n = r * r;
        let neg_inv_h = -T::one() / self.bandwidth;
        let mut all = vec![T::zero(); self.templates.len() * n * n];
        for (tpl, out) in self.templates.iter().zip(all.chunks_mut(n * n)) {
            let img = avg_pool(&tpl.image, self.resolution / r)?;
            let vals = img.values();
            for (a, row) in vals.iter().zip(out.chunks_mut(n)) {
                let mut z = T::zero();
                for (slot, &b) in row.iter_mut().zip(vals) {
                    let d = *a - b;
                    // max logit is 0 at the query itself, so no overflow
                    *slot = (d * d * neg_inv_h).exp();
                    z += *slot;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        let all = Arc::new(all);
        cache.insert(r, all.clone());
        Ok(all)
    }

    /// Most responsible template at the least-noisy timestep (ties go to the lower index).
    pub fn decode_final(&self, x0: &Grid2D<T>, schedule: &DiffusionSchedule<T>) -> Result<Decoded> {
        let logw = self.log_weights(x0, schedule.alpha(1)?, None)?;
        let mut best = 0;
        for (i, &l) in logw.iter().enumerate() {
            if l > logw[best] {
                best = i;
            }
        }
        let tpl = &self.templates[best];
        let masks = (0..self.classes.len())
            .map(|c| match tpl.class_mask(c) {
                Some(m) => Mask::threshold(m, T::lit(0.5)),
                None => Mask::new(self.resolution, self.resolution),
            })
            .collect();
        Ok(Decoded {
            template: best,
            class_masks: masks,
            objects: tpl.objects.clone(),
        })
    }

    /// Binary mask of `class` in template `index` (soft mask at least 1/2).
    pub fn binary_class_mask(&self, index: usize, class: usize) -> Mask {
        match self.templates[index].class_mask(class) {
            Some(m) => Mask::threshold(m, T::lit(0.5)),
            None => Mask::new(self.resolution, self.resolution),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub template: usize,
    /// One binary mask per world class.
    pub class_masks: Vec<Mask>,
    pub objects: Vec<ObjectTruth>,
}

impl Decoded {
    pub fn object(&self, class: usize) -> Option<&ObjectTruth> {
        self.objects.iter().find(|o| o.class == class)
    }
}
