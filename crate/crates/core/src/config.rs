//! Trial configuration. Files are TOML; every omitted value is resolved to
//! its default at load time so a resolved config fully determines a trial.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::battery::{BatteryMode, BatteryParams};
use crate::interaction::InteractionParams;
use crate::motion::MotionParams;
use crate::planner::{MapError, MapFile};
use crate::viz::VizParams;

pub const PROTOCOL_VERSION: &str = "haven/1";

const BUILTIN_MAPS: [(&str, &str); 3] = [
    ("hallway_loop", include_str!("../../../maps/hallway_loop.map")),
    ("hallway_ring", include_str!("../../../maps/hallway_ring.map")),
    ("retrieval", include_str!("../../../maps/retrieval.map")),
];

pub fn builtin_map_names() -> impl Iterator<Item = &'static str> {
    BUILTIN_MAPS.iter().map(|(n, _)| *n)
}

pub fn builtin_map(name: &str) -> Option<&'static str> {
    BUILTIN_MAPS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config io error: {0}")]
    Io(String),
    #[error("map {path}: {source}")]
    Map {
        path: String,
        #[source]
        source: MapError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Hallway,
    Retrieval,
    Tour,
}

impl ScenarioKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "hallway" => Some(Self::Hallway),
            "retrieval" => Some(Self::Retrieval),
            "tour" => Some(Self::Tour),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hallway => "hallway",
            Self::Retrieval => "retrieval",
            Self::Tour => "tour",
        }
    }

    pub fn default_map(self) -> &'static str {
        match self {
            Self::Hallway => "builtin:hallway_loop",
            Self::Retrieval | Self::Tour => "builtin:retrieval",
        }
    }

    pub fn default_battery_mode(self) -> BatteryMode {
        match self {
            Self::Hallway => BatteryMode::Disabled,
            Self::Retrieval => BatteryMode::AtWaypointCheck,
            Self::Tour => BatteryMode::ContinuousMonitor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerParams {
    /// Static obstacles are inflated by this radius for the robot.
    pub inflation_radius: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self { inflation_radius: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub mode: BatteryMode,
    #[serde(flatten)]
    pub params: BatteryParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HallwayParams {
    pub hard_mode: bool,
    /// Obstruction distance before each target room center along the hallway.
    pub obstruction_offset: f64,
    /// Explicit obstruction points; replaces the offset rule when set.
    pub obstructions: Option<Vec<[f64; 2]>>,
    pub lookahead: f64,
    pub min_ahead: f64,
    /// Center distance kept from the human by a lateral shift.
    pub shift_clearance: f64,
    /// Distance at which the robot stops in front of an obstruction.
    pub obstruction_stop: f64,
    /// Human counts as at a room center within this distance.
    pub room_radius: f64,
    pub robot_room: Option<usize>,
    pub human_room: Option<usize>,
}

impl Default for HallwayParams {
    fn default() -> Self {
        Self {
            hard_mode: false,
            obstruction_offset: 3.5,
            obstructions: None,
            lookahead: 2.5,
            min_ahead: 0.2,
            shift_clearance: 0.65,
            obstruction_stop: 0.5,
            room_radius: 0.5,
            robot_room: None,
            human_room: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalParams {
    pub robot_gems: usize,
    pub human_gems: usize,
    pub collect_radius: f64,
    pub dwell: f64,
    /// Spawn slots in assignment order; shuffled from the seed when unset.
    pub slots: Option<Vec<u8>>,
    pub human_spawn: Option<[f64; 2]>,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            robot_gems: 5,
            human_gems: 5,
            collect_radius: 0.4,
            dwell: 1.5,
            slots: None,
            human_spawn: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TourParams {
    pub waypoints: Vec<[f64; 2]>,
    /// Robot start `[x, y, heading]`; the charging base when unset.
    pub start: Option<[f64; 3]>,
    /// Human spawn; no human when unset.
    pub human_spawn: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Idle,
    WaypointFollower { points: Vec<[f64; 2]> },
    Blocker {
        /// Active window in seconds; seeded when unset.
        window: Option<[f64; 2]>,
    },
    GreedyCollector,
    RandomWalk,
    /// Inputs come from a live participant.
    Remote,
}

impl PolicyConfig {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "idle" => Some(Self::Idle),
            "blocker" => Some(Self::Blocker { window: None }),
            "greedy" | "greedy_collector" => Some(Self::GreedyCollector),
            "random_walk" => Some(Self::RandomWalk),
            "remote" => Some(Self::Remote),
            _ => None,
        }
    }
}

/// Fully resolved trial configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub scenario: ScenarioKind,
    pub map: String,
    pub seed: u64,
    pub dt: f64,
    pub tick_budget: u64,
    pub planner: PlannerParams,
    pub motion: MotionParams,
    pub battery: BatteryConfig,
    pub viz: VizParams,
    pub interaction: InteractionParams,
    pub hallway: HallwayParams,
    pub retrieval: RetrievalParams,
    pub tour: TourParams,
    pub policy: PolicyConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBattery {
    mode: Option<BatteryMode>,
    capacity: Option<f64>,
    initial_range: Option<f64>,
    margin: Option<f64>,
    charge_rate: Option<f64>,
    dock_radius: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: ScenarioKind,
    map: Option<String>,
    seed: Option<u64>,
    dt: Option<f64>,
    tick_budget: Option<u64>,
    #[serde(default)]
    planner: PlannerParamsRaw,
    #[serde(default)]
    motion: toml::Table,
    #[serde(default)]
    battery: RawBattery,
    #[serde(default)]
    viz: toml::Table,
    #[serde(default)]
    interaction: toml::Table,
    #[serde(default)]
    hallway: toml::Table,
    #[serde(default)]
    retrieval: toml::Table,
    #[serde(default)]
    tour: toml::Table,
    policy: Option<toml::Value>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlannerParamsRaw {
    inflation_radius: Option<f64>,
}

/// Merges `overrides` onto the serialized defaults and deserializes.
fn merged<T: Serialize + for<'de> Deserialize<'de>>(
    defaults: &T,
    overrides: toml::Table,
    section: &str,
) -> Result<T, ConfigError> {
    let mut base = match toml::Value::try_from(defaults) {
        Ok(toml::Value::Table(t)) => t,
        _ => toml::Table::new(),
    };
    for (k, v) in overrides {
        base.insert(k, v);
    }
    toml::Value::Table(base)
        .try_into()
        .map_err(|e| ConfigError::Invalid(format!("[{section}] {e}")))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl SimConfig {
    /// Default configuration for a scenario.
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        Self {
            scenario: kind,
            map: kind.default_map().to_owned(),
            seed: 1,
            dt: 0.02,
            tick_budget: 9000,
            planner: PlannerParams::default(),
            motion: MotionParams::default(),
            battery: BatteryConfig {
                mode: kind.default_battery_mode(),
                params: BatteryParams::default(),
            },
            viz: VizParams::default(),
            interaction: InteractionParams::default(),
            hallway: HallwayParams::default(),
            retrieval: RetrievalParams::default(),
            tour: TourParams::default(),
            policy: match kind {
                ScenarioKind::Retrieval => PolicyConfig::GreedyCollector,
                _ => PolicyConfig::Idle,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax {
            line: e.span().map_or(1, |s| line_of(text, s.start)),
            message: e.message().to_owned(),
        })?;
        let d = Self::for_scenario(raw.scenario);
        let battery = BatteryConfig {
            mode: raw.battery.mode.unwrap_or(d.battery.mode),
            params: BatteryParams {
                capacity: raw.battery.capacity.unwrap_or(d.battery.params.capacity),
                initial_range: raw.battery.initial_range.or(d.battery.params.initial_range),
                margin: raw.battery.margin.unwrap_or(d.battery.params.margin),
                charge_rate: raw.battery.charge_rate.unwrap_or(d.battery.params.charge_rate),
                dock_radius: raw.battery.dock_radius.unwrap_or(d.battery.params.dock_radius),
            },
        };
        let policy = match raw.policy {
            None => d.policy.clone(),
            Some(toml::Value::String(s)) => PolicyConfig::parse(&s)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown policy {s:?}")))?,
            Some(v) => v
                .try_into()
                .map_err(|e| ConfigError::Invalid(format!("[policy] {e}")))?,
        };
        let cfg = Self {
            scenario: raw.scenario,
            map: raw.map.unwrap_or(d.map.clone()),
            seed: raw.seed.unwrap_or(d.seed),
            dt: raw.dt.unwrap_or(d.dt),
            tick_budget: raw.tick_budget.unwrap_or(d.tick_budget),
            planner: PlannerParams {
                inflation_radius: raw.planner.inflation_radius.unwrap_or(d.planner.inflation_radius),
            },
            motion: merged(&d.motion, raw.motion, "motion")?,
            battery,
            viz: merged(&d.viz, raw.viz, "viz")?,
            interaction: merged(&d.interaction, raw.interaction, "interaction")?,
            hallway: merged(&d.hallway, raw.hallway, "hallway")?,
            retrieval: merged(&d.retrieval, raw.retrieval, "retrieval")?,
            tour: merged(&d.tour, raw.tour, "tour")?,
            policy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // Relative map paths are taken from the config file's directory.
        if !cfg.map.starts_with("builtin:") && Path::new(&cfg.map).is_relative() {
            if let Some(dir) = path.parent() {
                cfg.map = dir.join(&cfg.map).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid("dt must be positive");
        }
        if self.tick_budget == 0 {
            return invalid("tick_budget must be positive");
        }
        if !(self.planner.inflation_radius >= 0.0 && self.planner.inflation_radius.is_finite()) {
            return invalid("planner inflation_radius must be non-negative");
        }
        self.motion
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.battery.params.validate().map_err(|e| ConfigError::Invalid(e.into()))?;
        self.viz.validate().map_err(|e| ConfigError::Invalid(e.into()))?;
        self.interaction.validate().map_err(|e| ConfigError::Invalid(e.into()))?;
        let r = &self.retrieval;
        if !(r.collect_radius > 0.0 && r.dwell >= 0.0) {
            return invalid("retrieval collect_radius must be positive and dwell non-negative");
        }
        if self.scenario == ScenarioKind::Tour && self.tour.waypoints.is_empty() {
            return invalid("tour scenario needs at least one waypoint");
        }
        Ok(())
    }

    /// Loads the referenced map: `builtin:<name>` or a file path.
    pub fn load_map(&self) -> Result<MapFile, ConfigError> {
        let map_err = |source| ConfigError::Map {
            path: self.map.clone(),
            source,
        };
        match self.map.strip_prefix("builtin:") {
            Some(name) => {
                let text = builtin_map(name)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown builtin map {name:?}")))?;
                MapFile::parse(text).map_err(map_err)
            }
            None => MapFile::load(&PathBuf::from(&self.map)).map_err(map_err),
        }
    }

    /// Canonical JSON form; the config hash is taken over these bytes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Number of ticks matching a duration in seconds.
    pub fn ticks(&self, seconds: f64) -> u64 {
        (seconds / self.dt).round() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_resolves_defaults() {
        let c = SimConfig::parse("scenario = \"retrieval\"\n").unwrap();
        assert_eq!(c, SimConfig::for_scenario(ScenarioKind::Retrieval));
        assert_eq!(c.battery.mode, BatteryMode::AtWaypointCheck);
        let h = SimConfig::parse("scenario = \"hallway\"\n").unwrap();
        assert_eq!(h.battery.mode, BatteryMode::Disabled);
    }

    #[test]
    fn overrides_apply_per_field() {
        let c = SimConfig::parse(
            "scenario = \"hallway\"\nseed = 9\n[motion]\nv_max = 0.5\n[hallway]\nhard_mode = true\n[battery]\nmode = \"continuous_monitor\"\ncapacity = 30.0\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.motion.v_max, 0.5);
        assert_eq!(c.motion.omega_max, 1.8);
        assert!(c.hallway.hard_mode);
        assert_eq!(c.battery.params.capacity, 30.0);
        assert_eq!(c.battery.mode, BatteryMode::ContinuousMonitor);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match SimConfig::parse("scenario = \"hallway\"\nseed = \"x\"\n") {
            Err(ConfigError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(SimConfig::parse("scenario = \"nope\"\n").is_err());
        assert!(SimConfig::parse("scenario = \"hallway\"\n[motion]\nbogus = 1\n").is_err());
        assert!(SimConfig::parse("scenario = \"hallway\"\n[motion]\nv_max = -1.0\n").is_err());
    }

    #[test]
    fn round_trips_through_toml_and_hash_is_stable() {
        let c = SimConfig::for_scenario(ScenarioKind::Hallway);
        let back = SimConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut other = c.clone();
        other.seed = 2;
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn builtin_maps_parse() {
        for name in builtin_map_names() {
            let m = MapFile::parse(builtin_map(name).unwrap()).unwrap();
            assert!(m.width > 0);
        }
        let r = MapFile::parse(builtin_map("retrieval").unwrap()).unwrap();
        assert_eq!(r.gem_slots.len(), 10);
        assert!(r.base.is_some());
        let h = MapFile::parse(builtin_map("hallway_loop").unwrap()).unwrap();
        assert_eq!(h.room_centers.len(), 4);
    }

    #[test]
    fn policy_forms() {
        let c = SimConfig::parse("scenario = \"retrieval\"\npolicy = \"blocker\"\n").unwrap();
        assert_eq!(c.policy, PolicyConfig::Blocker { window: None });
        let c = SimConfig::parse(
            "scenario = \"retrieval\"\n[policy]\nkind = \"waypoint_follower\"\npoints = [[1.0, 2.0]]\n",
        )
        .unwrap();
        assert_eq!(c.policy, PolicyConfig::WaypointFollower { points: vec![[1.0, 2.0]] });
    }
}
