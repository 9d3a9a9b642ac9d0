//! Seeded scribble scenarios on the toy world and their evaluation.

use serde::{Deserialize, Serialize};

use crate::attention::GuidanceConfig;
use crate::diffusion::{guided_sample, scribble_classes, DiffusionSchedule, SampleOutput};
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::metrics::{EvalReport, ScribbleEval};
use crate::moments::moment_summary;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scribble::{Scribble, ScribbleGeometry, ScribbleSet};
use crate::toyworld::{Decoded, ToyWorld};

/// A straight stroke along the major axis of a randomly drawn target object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrientedScenario {
    /// Half the stroke length, in cells.
    pub half_length: f64,
    pub thickness: u32,
}

impl Default for OrientedScenario {
    fn default() -> Self {
        Self {
            half_length: 5.0,
            thickness: 1,
        }
    }
}

impl OrientedScenario {
    /// Scribbles tracing every object of template `target`.
    pub fn scribbles<T: Scalar>(&self, world: &ToyWorld<T>, target: usize) -> Result<ScribbleSet> {
        let n = world.resolution();
        let tpl = world.templates().get(target).ok_or_else(|| Error::Config(format!("no template {target}")))?;
        let scribbles = tpl
            .objects
            .iter()
            .map(|o| {
                let (dx, dy) = (o.theta.cos() * self.half_length, o.theta.sin() * self.half_length);
                let (cx, cy) = o.center;
                let g = ScribbleGeometry::polyline(vec![(cx - dx, cy - dy), (cx + dx, cy + dy)], self.thickness)?;
                Scribble::new(g, vec![world.classes()[o.class].clone()], n, n)
            })
            .collect::<Result<Vec<_>>>()?;
        ScribbleSet::new(n, n, scribbles)
    }
}

#[derive(Debug, Clone)]
pub struct Trial<T> {
    pub seed: u64,
    pub target: usize,
    pub input: ScribbleSet,
    pub output: SampleOutput<T>,
    pub decoded: Decoded,
    pub report: EvalReport,
}

/// Draws a target template, scribbles it, and samples with guidance from the same stream.
pub fn run_oriented_trial<T: Scalar>(
    world: &ToyWorld<T>,
    scenario: &OrientedScenario,
    cfg: &GuidanceConfig,
    schedule: &DiffusionSchedule<T>,
    seed: u64,
) -> Result<Trial<T>> {
    let mut rng = Rng::new(seed);
    let target = rng.below(world.templates().len());
    let input = scenario.scribbles(world, target)?;
    run_trial(world, &input, Some(target), cfg, schedule, seed, &mut rng)
}

/// Samples once and scores the result against `target` (inferred from the scribbles when absent).
pub fn run_trial<T: Scalar>(
    world: &ToyWorld<T>,
    input: &ScribbleSet,
    target: Option<usize>,
    cfg: &GuidanceConfig,
    schedule: &DiffusionSchedule<T>,
    seed: u64,
    rng: &mut Rng,
) -> Result<Trial<T>> {
    let target = match target {
        Some(t) => t,
        None => infer_target(world, input)?,
    };
    let output = guided_sample(world, input, cfg, schedule, rng)?;
    let decoded = world.decode_final(&output.final_state.x, schedule)?;
    let report = evaluate(world, input, &decoded, target)?;
    Ok(Trial {
        seed,
        target,
        input: input.clone(),
        output,
        decoded,
        report,
    })
}

/// Scores a decoded sample: each scribble against its first token's class.
pub fn evaluate<T: Scalar>(
    world: &ToyWorld<T>,
    input: &ScribbleSet,
    decoded: &Decoded,
    target: usize,
) -> Result<EvalReport> {
    let tpl = world.templates().get(target).ok_or_else(|| Error::Config(format!("no template {target}")))?;
    let mut truths = Vec::with_capacity(input.len());
    let mut angles = Vec::with_capacity(input.len());
    for s in input.scribbles() {
        let class = world.class_index(&s.tokens[0])?;
        truths.push(world.binary_class_mask(target, class));
        let predicted = decoded.object(class).map(|o| o.theta);
        let wanted = tpl.object(class).map(|o| o.theta);
        angles.push((class, predicted.unwrap_or(0.0), wanted.unwrap_or(0.0)));
    }
    let items: Vec<ScribbleEval<'_>> = input
        .scribbles()
        .iter()
        .zip(&truths)
        .zip(&angles)
        .map(|((s, truth), &(class, predicted_theta, target_theta))| ScribbleEval {
            tokens: &s.tokens,
            scribble: &s.mask,
            predicted: &decoded.class_masks[class],
            truth,
            predicted_theta,
            target_theta,
        })
        .collect();
    EvalReport::from_scribbles(&items)
}

/// Template whose objects best match the scribbles' centroids and axes.
pub fn infer_target<T: Scalar>(world: &ToyWorld<T>, input: &ScribbleSet) -> Result<usize> {
    let classes = scribble_classes(world, input)?;
    let n = world.resolution() as f64;
    let summaries = input
        .scribbles()
        .iter()
        .map(|s| moment_summary::<f64>(&s.mask.to_grid()))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, usize)> = None;
    for (i, tpl) in world.templates().iter().enumerate() {
        if !tpl.has_classes(&classes) {
            continue;
        }
        let mut cost = 0.0;
        for (s, m) in input.scribbles().iter().zip(&summaries) {
            let class = world.class_index(&s.tokens[0])?;
            let Some(o) = tpl.object(class) else {
                cost += f64::INFINITY;
                continue;
            };
            let (dx, dy) = (m.centroid.0 - o.center.0, m.centroid.1 - o.center.1);
            cost += (dx * dx + dy * dy).sqrt() / n;
            if !m.isotropic {
                cost += crate::metrics::orientation_error(m.theta, o.theta) / 90.0;
            }
        }
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, i));
        }
    }
    best.map(|(_, i)| i)
        .ok_or_else(|| Error::Config("no template contains the scribbled classes".into()))
}

/// Mask of the final loss regions, for reporting.
pub fn final_regions<T>(trial: &Trial<T>) -> Vec<Mask> {
    trial.output.scribbles.scribbles().iter().map(|s| s.mask.clone()).collect()
}
