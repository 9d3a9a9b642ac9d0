//! DDIM schedule and stepping, classifier-free combination and the guided sampler.

use serde::{Deserialize, Serialize};

use crate::attention::{cross_loss_and_grad, GuidanceConfig};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, Mask};
use crate::propagation::{aggregate_self_attention, merge_neighbors, pool_anchors, PropagationState};
use crate::rng::{sample_gaussian, Rng};
use crate::scalar::Scalar;
use crate::scribble::ScribbleSet;
use crate::toyworld::ToyWorld;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 50,
        }
    }
}

impl ScheduleSpec {
    pub fn build<T: Scalar>(&self) -> Result<DiffusionSchedule<T>> {
        make_schedule(self.train_steps, self.beta_start, self.beta_end, self.inference_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule<T> {
    train_steps: usize,
    /// `betas[t - 1]` is the variance at timestep `t`.
    betas: Vec<T>,
    /// `alphas_cum[t]` for `t` in `0..=T`, with `alphas_cum[0] = 1`.
    alphas_cum: Vec<T>,
    /// Descending.
    inference_steps: Vec<usize>,
}

/// Linear beta ramp over `train_steps` with `inference_steps` evenly spaced indices.
pub fn make_schedule<T: Scalar>(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    inference_steps: usize,
) -> Result<DiffusionSchedule<T>> {
    if inference_steps == 0 || inference_steps > train_steps {
        return Err(Error::Config(format!(
            "need 1 <= inference_steps ({inference_steps}) <= train_steps ({train_steps})"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
        )));
    }
    let betas: Vec<f64> = (0..train_steps)
        .map(|i| {
            if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
            }
        })
        .collect();
    let mut alphas_cum = Vec::with_capacity(train_steps + 1);
    let mut acc = 1.0f64;
    alphas_cum.push(T::one());
    for b in &betas {
        acc *= 1.0 - b;
        alphas_cum.push(T::lit(acc));
    }
    let steps = (1..=inference_steps)
        .rev()
        .map(|i| (i * train_steps + inference_steps / 2) / inference_steps)
        .collect();
    Ok(DiffusionSchedule {
        train_steps,
        betas: betas.into_iter().map(T::lit).collect(),
        alphas_cum,
        inference_steps: steps,
    })
}

impl<T: Scalar> DiffusionSchedule<T> {
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[T] {
        &self.alphas_cum
    }

    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    /// Cumulative alpha at timestep `t` (`t = 0` is the clean sample).
    pub fn alpha(&self, t: usize) -> Result<T> {
        self.alphas_cum.get(t).copied().ok_or(Error::Timestep(t))
    }

    /// Timestep the DDIM step from `t` lands on.
    pub fn predecessor(&self, t: usize) -> Result<usize> {
        let pos = self
            .inference_steps
            .iter()
            .position(|&s| s == t)
            .ok_or(Error::Timestep(t))?;
        Ok(self.inference_steps.get(pos + 1).copied().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub x: Grid2D<T>,
    pub t: usize,
}

impl<T: Scalar> LatentState<T> {
    pub fn new(x: Grid2D<T>, t: usize) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite("latent"));
        }
        Ok(Self { x, t })
    }

    /// Standard normal latent at the start of the reverse process.
    pub fn initial(schedule: &DiffusionSchedule<T>, width: usize, height: usize, rng: &mut Rng) -> Self {
        Self {
            x: sample_gaussian(rng, width, height),
            t: schedule.inference_steps[0],
        }
    }
}

/// `(1 + omega) eps_cond - omega eps_uncond`.
pub fn cfg_combine<T: Scalar>(eps_cond: &Grid2D<T>, eps_uncond: &Grid2D<T>, omega: T) -> Result<Grid2D<T>> {
    let one = T::one();
    eps_cond.zip_map(eps_uncond, |c, u| (one + omega) * c - omega * u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdimOutput<T> {
    pub state: LatentState<T>,
    pub pred_x0: Grid2D<T>,
}

/// One DDIM update from `state.t` to its predecessor in the schedule.
pub fn ddim_step<T: Scalar>(
    state: &LatentState<T>,
    eps_hat: &Grid2D<T>,
    schedule: &DiffusionSchedule<T>,
    eta: T,
    rng: &mut Rng,
) -> Result<DdimOutput<T>> {
    state.x.check_same_shape(eps_hat)?;
    let prev = schedule.predecessor(state.t)?;
    let a_t = schedule.alpha(state.t)?;
    let a_prev = schedule.alpha(prev)?;
    if a_t <= T::zero() {
        return Err(Error::Numerical {
            step: 0,
            t: state.t,
            reason: "alpha_t is zero".into(),
        });
    }
    let one = T::one();
    let sigma = eta * ((one - a_prev) / a_t).sqrt();
    let dir_var = one - a_prev - sigma * sigma;
    if dir_var < T::zero() {
        return Err(Error::Config(format!(
            "eta {eta} too large at t={}: negative direction variance",
            state.t
        )));
    }
    let (sa, sb) = (a_t.sqrt(), (one - a_t).sqrt());
    let pred_x0 = state.x.zip_map(eps_hat, |x, e| (x - sb * e) / sa)?;
    let (sp, dir) = (a_prev.sqrt(), dir_var.sqrt());
    let mut x = pred_x0.zip_map(eps_hat, |p, e| sp * p + dir * e)?;
    if sigma > T::zero() {
        let z: Grid2D<T> = sample_gaussian(rng, x.width(), x.height());
        x.add_scaled(&z, sigma);
    }
    Ok(DdimOutput {
        state: LatentState { x, t: prev },
        pred_x0,
    })
}

/// Classifier-free noise prediction of the world under `condition`.
pub fn guided_epsilon<T: Scalar>(
    world: &ToyWorld<T>,
    state: &LatentState<T>,
    schedule: &DiffusionSchedule<T>,
    condition: &[usize],
    omega: T,
) -> Result<Grid2D<T>> {
    let uncond = world.model_epsilon(state, schedule, None)?;
    if condition.is_empty() {
        return Ok(uncond);
    }
    let cond = world.model_epsilon(state, schedule, Some(condition))?;
    cfg_combine(&cond, &uncond, omega)
}

/// Unguided DDIM sampling; returns the latent after every step (the first entry is `x_T`).
pub fn sample_ddim<T: Scalar>(
    world: &ToyWorld<T>,
    condition: &[usize],
    schedule: &DiffusionSchedule<T>,
    omega: T,
    eta: T,
    rng: &mut Rng,
) -> Result<Vec<LatentState<T>>> {
    let n = world.resolution();
    let mut state = LatentState::initial(schedule, n, n, rng);
    let mut trajectory = vec![state.clone()];
    for _ in 0..schedule.inference_steps.len() {
        let eps = guided_epsilon(world, &state, schedule, condition, omega)?;
        state = ddim_step(&state, &eps, schedule, eta, rng)?.state;
        trajectory.push(state.clone());
    }
    Ok(trajectory)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// 1-based inference step index.
    pub step: usize,
    pub t: usize,
    pub focal: f64,
    pub moment_centroid: f64,
    pub moment_central: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Loss-mask cell count of every scribble, after this step's propagation.
    pub region_cells: Vec<usize>,
    pub merged: usize,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    pub final_state: LatentState<T>,
    /// Latent after every step; the first entry is `x_T`.
    pub trajectory: Vec<LatentState<T>>,
    pub steps: Vec<StepDiagnostics>,
    /// Scribbles carrying the final (possibly propagated) loss masks.
    pub scribbles: ScribbleSet,
}

/// Scribble classes in first-appearance order.
pub fn scribble_classes<T: Scalar>(world: &ToyWorld<T>, scribbles: &ScribbleSet) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for s in scribbles.scribbles() {
        for tok in &s.tokens {
            let c = world.class_index(tok)?;
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    Ok(out)
}

struct Propagator {
    state: PropagationState,
    originals: Vec<Mask>,
    /// Loss-mask cells per anchor side.
    block: usize,
}

impl Propagator {
    fn new(scribbles: &ScribbleSet, cfg: &GuidanceConfig) -> Result<Self> {
        let n = scribbles.width();
        let target = cfg.agg_target();
        if target % cfg.anchor_factor != 0 {
            return Err(Error::NotDivisible {
                factor: cfg.anchor_factor,
                size: target,
            });
        }
        let anchors = target / cfg.anchor_factor;
        if n % anchors != 0 || scribbles.height() != n {
            return Err(Error::NotDivisible { factor: anchors, size: n });
        }
        let block = n / anchors;
        let originals: Vec<Mask> = scribbles.scribbles().iter().map(|s| s.mask.clone()).collect();
        let regions = originals
            .iter()
            .map(|m| m.block_any(block))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            state: PropagationState::new(regions)?,
            originals,
            block,
        })
    }

    /// Original masks plus the blocks of every anchor absorbed so far.
    fn loss_masks(&self) -> Result<Vec<Mask>> {
        self.originals
            .iter()
            .zip(self.state.regions())
            .map(|(orig, region)| {
                let seeded = orig.block_any(self.block)?;
                let added = Mask::from_fn(region.width(), region.height(), |x, y| {
                    region.get(x, y) && !seeded.get(x, y)
                });
                orig.union(&added.block_fill(self.block))
            })
            .collect()
    }
}

/// Guided DDIM sampling: noise-prediction step, then a shift along the
/// negative cross-loss gradient evaluated at the pre-step latent, with
/// scribble propagation inside the configured step window.
pub fn guided_sample<T: Scalar>(
    world: &ToyWorld<T>,
    scribbles: &ScribbleSet,
    cfg: &GuidanceConfig,
    schedule: &DiffusionSchedule<T>,
    rng: &mut Rng,
) -> Result<SampleOutput<T>> {
    let cfg = cfg.validated()?;
    let n = world.resolution();
    if (scribbles.width(), scribbles.height()) != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "scribbles {}x{} in a {n}x{n} world",
            scribbles.width(),
            scribbles.height()
        )));
    }
    let classes = scribble_classes(world, scribbles)?;
    let (omega, eta, scale) = (T::lit(cfg.omega), T::lit(cfg.eta_ddim), T::lit(cfg.guidance_scale));
    let mut propagator = if cfg.propagation && !scribbles.is_empty() {
        Some(Propagator::new(scribbles, &cfg)?)
    } else {
        None
    };
    let mut active = scribbles.clone();

    let mut state = LatentState::initial(schedule, n, n, rng);
    let mut trajectory = vec![state.clone()];
    let mut steps = Vec::with_capacity(schedule.inference_steps.len());
    for step in 1..=schedule.inference_steps.len() {
        let t = state.t;
        let abort = |e: Error| match e {
            Error::NonFinite(what) => Error::Numerical {
                step,
                t,
                reason: format!("non-finite {what}"),
            },
            other => other,
        };
        let eps = guided_epsilon(world, &state, schedule, &classes, omega).map_err(abort)?;
        let mut next = ddim_step(&state, &eps, schedule, eta, rng)?.state;

        let mut diag = StepDiagnostics {
            step,
            t,
            focal: 0.0,
            moment_centroid: 0.0,
            moment_central: 0.0,
            total: 0.0,
            grad_norm: 0.0,
            region_cells: active.scribbles().iter().map(|s| s.mask.count()).collect(),
            merged: 0,
        };
        let needs_weights = !active.is_empty() && (scale != T::zero() || propagator.is_some());
        if needs_weights {
            let alpha = schedule.alpha(t)?;
            let cond = (!classes.is_empty()).then_some(classes.as_slice());
            let weights = world.responsibilities_at(&state.x, alpha, cond).map_err(abort)?;
            if scale != T::zero() {
                let attn = world.cross_attention_maps(&weights, &classes)?;
                let (loss, grads) = cross_loss_and_grad(&attn, &active, &cfg)?;
                let grad = world.latent_gradient(&weights, &grads, alpha)?;
                next.x.add_scaled(&grad, -scale);
                diag.focal = loss.focal.as_f64();
                diag.moment_centroid = loss.moment.centroid.as_f64();
                diag.moment_central = loss.moment.central.as_f64();
                diag.total = loss.total.as_f64();
                diag.grad_norm = grad.norm_sq().sqrt().as_f64();
            }
            if let Some(p) = propagator.as_mut() {
                if (cfg.k1..=cfg.k2).contains(&step) {
                    let stack = world.self_attention_stack(&weights, &cfg.agg_resolutions)?;
                    let agg = aggregate_self_attention(&stack, &cfg.agg_weights, cfg.agg_target())?;
                    let anchors = pool_anchors(&agg, cfg.anchor_factor)?;
                    let (merged_state, merges) =
                        merge_neighbors(&p.state, &anchors, T::lit(cfg.tau), cfg.top_k)?;
                    p.state = merged_state;
                    diag.merged = merges.len();
                    if !merges.is_empty() {
                        active = active.with_masks(p.loss_masks()?)?;
                    }
                    diag.region_cells = active.scribbles().iter().map(|s| s.mask.count()).collect();
                }
            }
        }
        if !next.x.is_finite() {
            return Err(Error::Numerical {
                step,
                t,
                reason: format!("non-finite latent (loss {}, gradient norm {})", diag.total, diag.grad_norm),
            });
        }
        steps.push(diag);
        state = next;
        trajectory.push(state.clone());
    }
    Ok(SampleOutput {
        final_state: state,
        trajectory,
        steps,
        scribbles: active,
    })
}
