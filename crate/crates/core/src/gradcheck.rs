//! Central finite-difference checks of the guidance gradients.

use serde::{Deserialize, Serialize};

use crate::attention::{cross_loss, cross_loss_and_grad, CrossLoss, GuidanceConfig};
use crate::diffusion::DiffusionSchedule;
use crate::error::Result;
use crate::grid::Grid2D;
use crate::moments::TokenMaps;
use crate::rng::{sample_gaussian, Rng};
use crate::scribble::{Scribble, ScribbleGeometry, ScribbleSet};
use crate::toyworld::ToyWorld;

/// Scale below which a numeric gradient counts as zero.
pub const GRADIENT_FLOOR: f64 = 1e-12;

/// `max |a - n| / max(max |n|, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max);
    diff / scale.max(GRADIENT_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub step: f64,
    pub attention_cases: usize,
    pub attention_size: usize,
    pub attention_tol: f64,
    pub latent_cases: usize,
    pub latent_tol: f64,
    /// Timestep the latent check evaluates at.
    pub latent_t: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            attention_cases: 20,
            attention_size: 16,
            attention_tol: 1e-4,
            latent_cases: 3,
            latent_tol: 1e-3,
            latent_t: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentError {
    pub component: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub components: Vec<ComponentError>,
    pub passed: bool,
}

/// Random bump-shaped logit maps for `tokens` plus one to three random strokes.
pub fn random_case(rng: &mut Rng, size: usize, tokens: &[&str]) -> Result<(TokenMaps<f64>, ScribbleSet)> {
    let s = size as f64;
    let mut maps = TokenMaps::new();
    for tok in tokens {
        let (cx, cy) = (rng.next_open01() * s, rng.next_open01() * s);
        let (sx, sy) = (1.0 + rng.next_open01() * s / 3.0, 1.0 + rng.next_open01() * s / 3.0);
        let noise: Grid2D<f64> = sample_gaussian(rng, size, size);
        let map = Grid2D::from_fn(size, size, |x, y| {
            let (dx, dy) = ((x as f64 - cx) / sx, (y as f64 - cy) / sy);
            6.0 * (-0.5 * (dx * dx + dy * dy)).exp() - 3.0 + 0.5 * noise.get(x, y)
        });
        maps.insert(tok.to_string(), map);
    }
    let count = 1 + rng.below(3);
    let mut scribbles = Vec::with_capacity(count);
    for _ in 0..count {
        let npts = 2 + rng.below(2);
        let pts = (0..npts)
            .map(|_| (rng.next_open01() * (s - 1.0), rng.next_open01() * (s - 1.0)))
            .collect();
        let geometry = ScribbleGeometry::polyline(pts, 1 + rng.below(2) as u32)?;
        let ntok = 1 + rng.below(tokens.len());
        let start = rng.below(tokens.len());
        let toks = (0..ntok).map(|k| tokens[(start + k) % tokens.len()].to_string()).collect();
        scribbles.push(Scribble::new(geometry, toks, size, size)?);
    }
    Ok((maps, ScribbleSet::new(size, size, scribbles)?))
}

/// Largest relative error of the analytic logit gradient over all cells of all maps.
pub fn attention_error(
    maps: &TokenMaps<f64>,
    scribbles: &ScribbleSet,
    cfg: &GuidanceConfig,
    step: f64,
    corrupt: f64,
) -> Result<f64> {
    let (_, grads) = cross_loss_and_grad(maps, scribbles, cfg)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (tok, map) in maps {
        let g = grads.get(tok);
        for i in 0..map.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = maps.clone();
                let m = probe.get_mut(tok).expect("token present");
                let mut v = m.values().to_vec();
                v[i] += delta;
                *m = Grid2D::new(map.width(), map.height(), v)?;
                Ok(cross_loss(&probe, scribbles, cfg)?.total)
            };
            numeric.push((eval(step)? - eval(-step)?) / (2.0 * step));
            analytic.push(g.map_or(0.0, |g| g.values()[i]) * corrupt);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn loss_of_latent(
    world: &ToyWorld<f64>,
    x: &Grid2D<f64>,
    alpha: f64,
    classes: &[usize],
    scribbles: &ScribbleSet,
    cfg: &GuidanceConfig,
) -> Result<CrossLoss<f64>> {
    let w = world.responsibilities_at(x, alpha, Some(classes))?;
    cross_loss(&world.cross_attention_maps(&w, classes)?, scribbles, cfg)
}

/// Largest relative error of the chained latent gradient at `x`.
pub fn latent_error(
    world: &ToyWorld<f64>,
    x: &Grid2D<f64>,
    alpha: f64,
    scribbles: &ScribbleSet,
    cfg: &GuidanceConfig,
    step: f64,
    corrupt: f64,
) -> Result<f64> {
    let classes = crate::diffusion::scribble_classes(world, scribbles)?;
    let w = world.responsibilities_at(x, alpha, Some(&classes))?;
    let attn = world.cross_attention_maps(&w, &classes)?;
    let (_, grads) = cross_loss_and_grad(&attn, scribbles, cfg)?;
    let analytic: Vec<f64> = world
        .latent_gradient(&w, &grads, alpha)?
        .values()
        .iter()
        .map(|g| g * corrupt)
        .collect();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let shifted = |delta: f64| -> Result<f64> {
            let mut v = x.values().to_vec();
            v[i] += delta;
            let probe = Grid2D::new(x.width(), x.height(), v)?;
            Ok(loss_of_latent(world, &probe, alpha, &classes, scribbles, cfg)?.total)
        };
        numeric.push((shifted(step)? - shifted(-step)?) / (2.0 * step));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Attention-space checks of the focal, moment and combined gradients, then
/// latent-space checks of the combined gradient on noisy template latents.
///
/// `corrupt` scales every analytic gradient; 1 leaves them untouched.
pub fn run_gradcheck(
    world: &ToyWorld<f64>,
    schedule: &DiffusionSchedule<f64>,
    cfg: &GuidanceConfig,
    opts: &GradCheckOptions,
    corrupt: f64,
) -> Result<GradCheckReport> {
    let cfg = cfg.validated()?;
    let mut rng = Rng::new(opts.seed);
    let variants = [
        ("focal", GuidanceConfig { w_focal: 1.0, w_moment: 0.0, ..cfg.clone() }),
        ("moment", GuidanceConfig { w_focal: 0.0, w_moment: 1.0, ..cfg.clone() }),
        ("cross", cfg.clone()),
    ];
    let mut worst = [0.0f64; 3];
    for _ in 0..opts.attention_cases {
        let (maps, scribbles) = random_case(&mut rng, opts.attention_size, &["a", "b"])?;
        for (k, (_, c)) in variants.iter().enumerate() {
            worst[k] = worst[k].max(attention_error(&maps, &scribbles, c, opts.step, corrupt)?);
        }
    }
    let mut components: Vec<ComponentError> = variants
        .iter()
        .zip(worst)
        .map(|((name, _), e)| ComponentError {
            component: format!("attention/{name}"),
            max_relative_error: e,
            tolerance: opts.attention_tol,
            passed: e <= opts.attention_tol,
        })
        .collect();

    let alpha = schedule.alpha(opts.latent_t)?;
    let scenario = crate::experiment::OrientedScenario::default();
    let mut latent = 0.0f64;
    for _ in 0..opts.latent_cases {
        let target = rng.below(world.templates().len());
        let scribbles = scenario.scribbles(world, target)?;
        let noise: Grid2D<f64> = sample_gaussian(&mut rng, world.resolution(), world.resolution());
        let x = world.templates()[target]
            .image
            .zip_map(&noise, |m, z| alpha.sqrt() * m + (1.0 - alpha).sqrt() * z)?;
        latent = latent.max(latent_error(world, &x, alpha, &scribbles, &cfg, opts.step, corrupt)?);
    }
    components.push(ComponentError {
        component: "latent/cross".into(),
        max_relative_error: latent,
        tolerance: opts.latent_tol,
        passed: latent <= opts.latent_tol,
    });
    let passed = components.iter().all(|c| c.passed);
    Ok(GradCheckReport { components, passed })
}
