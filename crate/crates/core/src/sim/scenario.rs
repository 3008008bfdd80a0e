//! Scenario files: structured TOML describing the world map, agent spawns,
//! strategy, and every tunable. The seed fully determines a run.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::explore::ExploreParams;
use crate::merge::MergeParams;
use crate::perception::PerceptionParams;
use crate::world::{GridWorld, Pose2};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown strategy '{0}' (expected mui, trust, smmr or mtare)")]
    BadStrategy(String),
    #[error("scenario defines no agent spawns")]
    NoAgents,
    #[error("spawn {index} at ({x:.2}, {y:.2}) is not traversable")]
    SpawnNotTraversable { index: usize, x: f64, y: f64 },
    #[error("spawns {a} and {b} coincide")]
    DuplicateSpawn { a: usize, b: usize },
    #[error("bad timing: tick {tick_s}, cycle {cycle_s}, limit {time_limit_s}")]
    BadTiming {
        tick_s: f64,
        cycle_s: f64,
        time_limit_s: f64,
    },
}

/// Exploration strategy variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Adaptive verification plus cooperative routing.
    Mui,
    /// Fixed-distance verification of every detected overlap.
    Trust,
    /// Merge immediately on the first valid overlap.
    Smmr,
    /// Adaptive merging but every agent plans alone.
    Mtare,
}

impl std::str::FromStr for Strategy {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mui" => Ok(Strategy::Mui),
            "trust" => Ok(Strategy::Trust),
            "smmr" => Ok(Strategy::Smmr),
            "mtare" => Ok(Strategy::Mtare),
            other => Err(ScenarioError::BadStrategy(other.to_string())),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Strategy::Mui => "mui",
            Strategy::Trust => "trust",
            Strategy::Smmr => "smmr",
            Strategy::Mtare => "mtare",
        };
        f.write_str(name)
    }
}

/// A fully resolved scenario; everything a run needs besides the seed
/// overrides from the command line.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub map_text: String,
    pub resolution: f64,
    pub spawns: Vec<Pose2>,
    pub strategy: Strategy,
    pub seed: u64,
    pub tick_s: f64,
    pub cycle_s: f64,
    pub time_limit_s: f64,
    pub v_max: f64,
    pub coverage_threshold: f64,
    pub beam_count: usize,
    pub max_range: f64,
    pub perception: PerceptionParams,
    pub merge: MergeParams,
    pub explore: ExploreParams,
    /// Fixed verification distance for the trust strategy, meters.
    pub d_fix: f64,
}

// Serde view of the file; everything optional except name, map and spawns.
#[derive(serde::Deserialize)]
struct ScenarioFile {
    name: String,
    map: String,
    #[serde(default = "default_resolution")]
    resolution: f64,
    spawns: Vec<[f64; 3]>,
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    sensor: SensorSection,
    #[serde(default)]
    perception: PerceptionParams,
    #[serde(default)]
    merge: MergeParams,
    #[serde(default)]
    explore: ExploreParams,
}

#[derive(serde::Deserialize)]
#[serde(default)]
struct SimSection {
    seed: u64,
    strategy: String,
    tick_s: f64,
    cycle_s: f64,
    time_limit_s: f64,
    v_max: f64,
    coverage_threshold: f64,
    d_fix: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            seed: 1,
            strategy: "mui".to_string(),
            tick_s: 0.1,
            cycle_s: 1.0,
            time_limit_s: 1800.0,
            v_max: 3.0,
            coverage_threshold: 0.99,
            d_fix: 40.0,
        }
    }
}

#[derive(serde::Deserialize)]
#[serde(default)]
struct SensorSection {
    beam_count: usize,
    max_range: f64,
}

impl Default for SensorSection {
    fn default() -> Self {
        SensorSection {
            beam_count: 360,
            max_range: 30.0,
        }
    }
}

fn default_resolution() -> f64 {
    0.25
}

impl Scenario {
    /// Load a scenario file; the map path is resolved relative to it.
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Scenario::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Scenario, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)?;
        let map_path = base_dir.join(&file.map);
        let map_text = std::fs::read_to_string(&map_path).map_err(|source| ScenarioError::Io {
            path: map_path.clone(),
            source,
        })?;
        let strategy: Strategy = file.sim.strategy.parse()?;
        if file.spawns.is_empty() {
            return Err(ScenarioError::NoAgents);
        }
        if file.sim.tick_s <= 0.0
            || file.sim.cycle_s < file.sim.tick_s
            || file.sim.time_limit_s <= 0.0
        {
            return Err(ScenarioError::BadTiming {
                tick_s: file.sim.tick_s,
                cycle_s: file.sim.cycle_s,
                time_limit_s: file.sim.time_limit_s,
            });
        }
        Ok(Scenario {
            name: file.name,
            map_text,
            resolution: file.resolution,
            spawns: file
                .spawns
                .iter()
                .map(|s| Pose2::new(s[0], s[1], s[2]))
                .collect(),
            strategy,
            seed: file.sim.seed,
            tick_s: file.sim.tick_s,
            cycle_s: file.sim.cycle_s,
            time_limit_s: file.sim.time_limit_s,
            v_max: file.sim.v_max,
            coverage_threshold: file.sim.coverage_threshold,
            beam_count: file.sensor.beam_count,
            max_range: file.sensor.max_range,
            perception: file.perception,
            merge: file.merge,
            explore: file.explore,
            d_fix: file.sim.d_fix,
        })
    }

    /// Check the spawn invariants against the loaded world.
    pub fn validate(&self, world: &GridWorld) -> Result<(), ScenarioError> {
        for (index, spawn) in self.spawns.iter().enumerate() {
            if !world.is_traversable(spawn.position()) {
                return Err(ScenarioError::SpawnNotTraversable {
                    index,
                    x: spawn.x,
                    y: spawn.y,
                });
            }
            for (other_idx, other) in self.spawns.iter().enumerate().take(index) {
                if spawn.distance(other) < 1e-9 {
                    return Err(ScenarioError::DuplicateSpawn {
                        a: other_idx,
                        b: index,
                    });
                }
            }
        }
        Ok(())
    }
}
