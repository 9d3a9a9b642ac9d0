use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use scribble_guidance::gradcheck::GradCheckOptions;
use scribble_guidance::{GuidanceConfig, ScheduleSpec, WorldSpec};

/// Everything one `generate` or `gradcheck` invocation reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub guidance: GuidanceConfig,
    pub schedule: ScheduleSpec,
    pub seeds: Vec<u64>,
    /// Template the scribbles were drawn from; inferred from the scribbles when absent.
    pub target: Option<usize>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub gradcheck: GradCheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            guidance: GuidanceConfig::default(),
            schedule: ScheduleSpec::default(),
            seeds: vec![0],
            target: None,
            output_dir: PathBuf::from("out"),
            workers: 0,
            gradcheck: GradCheckOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        self.guidance.validated()?;
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        let cap = if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        };
        cap.clamp(1, self.seeds.len())
    }
}
