//! Run configuration: one TOML file, every section optional, unknown keys
//! rejected. Relative paths are resolved against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gridalloc::grid::GridConfig;
use gridalloc::synth::{ScenarioFiles, SyntheticConfig};
use gridalloc::trainer::{CategoryMapping, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub regions: Option<PathBuf>,
    pub landuse: Option<PathBuf>,
    pub indicators: Option<PathBuf>,
    pub facilities: Option<PathBuf>,
    /// `class,weight` table for the static GPM baselines.
    pub class_weights: Option<PathBuf>,
    /// Optional `region_id,cell_id,weight` oracle for weight-quality scores.
    pub planted_weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub target_cell_count: usize,
    pub quantum: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        Self {
            target_cell_count: g.target_cell_count,
            quantum: g.quantum,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorSection {
    /// Load centers per region; omitted means ceil(sqrt(facilities)).
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataPaths,
    /// When present, `synth` generates the dataset into `<out_dir>/data`
    /// and the `[data]` input paths must be left out.
    pub synth: Option<SyntheticConfig>,
    pub grid: GridSection,
    pub train: TrainConfig,
    pub mapping: CategoryMapping,
    pub allocator: AllocatorSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("gridalloc-out"),
            data: DataPaths::default(),
            synth: None,
            grid: GridSection::default(),
            train: TrainConfig::default(),
            mapping: CategoryMapping::default(),
            allocator: AllocatorSection::default(),
        }
    }
}

/// Concrete input locations after synth defaults and path resolution.
#[derive(Debug, Clone)]
pub struct ResolvedInputs {
    pub regions: PathBuf,
    pub landuse: PathBuf,
    pub indicators: PathBuf,
    pub facilities: PathBuf,
    pub class_weights: PathBuf,
    pub planted_weights: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let d = &mut self.data;
        for p in [
            &mut d.regions,
            &mut d.landuse,
            &mut d.indicators,
            &mut d.facilities,
            &mut d.class_weights,
            &mut d.planted_weights,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.seed != 0 {
            bail!("train.seed is derived from the root seed; set `seed` at the top level instead");
        }
        if self.grid.target_cell_count == 0 {
            bail!("grid.target_cell_count must be positive");
        }
        if !(self.grid.quantum >= 0.0) {
            bail!("grid.quantum must be >= 0");
        }
        if self.allocator.k == Some(0) {
            bail!("allocator.k must be positive");
        }
        if let Some(s) = &self.synth {
            s.validate()?;
            let d = &self.data;
            if d.regions.is_some() || d.landuse.is_some() || d.indicators.is_some() || d.facilities.is_some() {
                bail!("[synth] generates the inputs; remove the [data] input paths or the [synth] section");
            }
        } else {
            let d = &self.data;
            for (name, p) in [
                ("regions", &d.regions),
                ("landuse", &d.landuse),
                ("indicators", &d.indicators),
                ("facilities", &d.facilities),
                ("class_weights", &d.class_weights),
            ] {
                if p.is_none() {
                    bail!("data.{name} is required when no [synth] section is given");
                }
            }
        }
        Ok(())
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            target_cell_count: self.grid.target_cell_count,
            quantum: self.grid.quantum,
        }
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn inputs(&self) -> ResolvedInputs {
        let d = &self.data;
        if self.synth.is_some() {
            let f = ScenarioFiles::in_dir(&self.synth_dir());
            ResolvedInputs {
                regions: f.regions,
                landuse: f.landuse,
                indicators: f.indicators,
                facilities: f.facilities,
                class_weights: d.class_weights.clone().unwrap_or(f.class_table),
                planted_weights: Some(d.planted_weights.clone().unwrap_or(f.planted_weights)),
            }
        } else {
            let req = |p: &Option<PathBuf>| p.clone().unwrap_or_default();
            ResolvedInputs {
                regions: req(&d.regions),
                landuse: req(&d.landuse),
                indicators: req(&d.indicators),
                facilities: req(&d.facilities),
                class_weights: req(&d.class_weights),
                planted_weights: d.planted_weights.clone(),
            }
        }
    }
}

impl ResolvedInputs {
    pub fn all(&self) -> Vec<&Path> {
        let mut v = vec![
            self.regions.as_path(),
            self.landuse.as_path(),
            self.indicators.as_path(),
            self.facilities.as_path(),
            self.class_weights.as_path(),
        ];
        v.extend(self.planted_weights.as_deref());
        v
    }
}
