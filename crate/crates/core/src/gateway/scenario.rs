//! Scenario documents: one JSON object with `grid`, `entities`,
//! `assignments`, `goals`, `script`, `seed` and `config`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::protocol::Command;
use crate::mas::{AutonomyLevel, GoalSpec};
use crate::netsim::EndpointId;
use crate::world::{
    ArmSpec, CellState, Defect, Entity, EntityBody, EntityId, EntityKind, GridMap, Motion, Pose2D,
    Posture, Role, RoverLimits, ScriptedEvent, ToolSpec, World, WorldError,
};

pub const MISSION_CONTROL: &str = "mission_control";
pub const SUPERVISOR: &str = "supervisor";

/// Where in the document parsing failed. `line`/`column` are 1-based and 0
/// when the error was found after syntax parsing.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub path: String,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}, column {}: ", self.line, self.column)?;
        }
        if !self.path.is_empty() && self.path != "." {
            write!(f, "{}: ", self.path)?;
        }
        f.write_str(&self.message)
    }
}

impl ParseError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        ParseError {
            line: 0,
            column: 0,
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Top row first; `.` free, `#` obstacle.
    pub rows: Vec<String>,
    pub resolution: f64,
    #[serde(default)]
    pub origin: Pose2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub fov: f64,
    pub range: f64,
}

impl SensorSpec {
    pub const ROVER_DEFAULT: SensorSpec = SensorSpec {
        fov: TAU,
        range: 3.0,
    };
}

/// Entity as written in a scenario. Kind-specific fields are optional here
/// and checked against `kind` when the entity is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpec {
    pub id: EntityId,
    pub kind: EntityKind,
    pub pose: Pose2D,
    #[serde(default)]
    pub footprint_radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<ArmSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_slots: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autonomy_level: Option<AutonomyLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<SensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posture: Option<Posture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defects: Option<Vec<Defect>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier: Option<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Pose2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<ToolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interest_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<Motion>,
}

impl EntitySpec {
    fn build(&self, path: &str) -> Result<Entity, ParseError> {
        let k = self.kind;
        let misplaced = |field: &str, allowed: bool| {
            if allowed {
                Ok(())
            } else {
                Err(ParseError::at(
                    format!("{path}.{field}"),
                    format!("not allowed on a {}", k.name()),
                ))
            }
        };
        use EntityKind::*;
        misplaced("role", self.role.is_none() || k == Rover)?;
        misplaced("arm", self.arm.is_none() || k == Rover)?;
        misplaced("storage_slots", self.storage_slots.is_none() || k == Rover)?;
        misplaced(
            "autonomy_level",
            self.autonomy_level.is_none() || k == Rover,
        )?;
        misplaced("posture", self.posture.is_none() || k == Astronaut)?;
        misplaced("defects", self.defects.is_none() || k == SolarPanelArray)?;
        misplaced("carrier", self.carrier.is_none() || k == ToolSlot)?;
        misplaced("offset", self.offset.is_none() || k == ToolSlot)?;
        misplaced("tool", self.tool.is_none() || k == ToolSlot)?;
        misplaced(
            "interest_score",
            self.interest_score.is_none() || k == SamplePoint,
        )?;
        let body = match k {
            Rover => EntityBody::Rover {
                role: self
                    .role
                    .ok_or_else(|| ParseError::at(format!("{path}.role"), "rovers need a role"))?,
                arm: self.arm,
                storage_slots: self.storage_slots.unwrap_or(0),
            },
            Astronaut => EntityBody::Astronaut {
                posture: self.posture.unwrap_or(Posture::Upright),
            },
            SolarPanelArray => EntityBody::SolarPanelArray {
                defects: self.defects.clone().unwrap_or_default(),
            },
            BaseStation => EntityBody::BaseStation,
            ToolSlot => EntityBody::ToolSlot {
                carrier: self.carrier.clone(),
                offset: self.offset.unwrap_or_default(),
                tool: self.tool.clone(),
            },
            SamplePoint => EntityBody::SamplePoint {
                interest_score: self.interest_score.ok_or_else(|| {
                    ParseError::at(
                        format!("{path}.interest_score"),
                        "sample points need a score",
                    )
                })?,
            },
        };
        Ok(Entity {
            id: self.id.clone(),
            pose: Pose2D::new(self.pose.x, self.pose.y, self.pose.theta),
            footprint_radius: self.footprint_radius,
            body,
            motion: self.motion,
        })
    }

    /// Sensor used for perception; rovers always carry one.
    pub fn effective_sensor(&self) -> Option<SensorSpec> {
        match (self.sensor, self.kind) {
            (Some(s), _) => Some(s),
            (None, EntityKind::Rover) => Some(SensorSpec::ROVER_DEFAULT),
            _ => None,
        }
    }
}

fn e4() -> AutonomyLevel {
    AutonomyLevel::E4
}

fn mission_control() -> EndpointId {
    EndpointId::new(MISSION_CONTROL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalScript {
    pub tick: u64,
    pub agent: EntityId,
    #[serde(default = "e4")]
    pub required_level: AutonomyLevel,
    pub goal: GoalSpec,
    #[serde(default = "mission_control")]
    pub originator: EndpointId,
}

/// Script entries handled by the kernel rather than the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", deny_unknown_fields)]
pub enum KernelAction {
    /// Applied exactly like an operator command at the start of the tick.
    Command { command: Command },
    Partition {
        a: EndpointId,
        b: EndpointId,
        partitioned: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelItem {
    pub tick: u64,
    #[serde(flatten)]
    pub action: KernelAction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ScriptItem {
    World(ScriptedEvent),
    Kernel(KernelItem),
}

impl ScriptItem {
    pub fn tick(&self) -> u64 {
        match self {
            ScriptItem::World(e) => e.tick,
            ScriptItem::Kernel(k) => k.tick,
        }
    }
}

impl<'de> Deserialize<'de> for ScriptItem {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        let kernel = matches!(
            v.get("event").and_then(Value::as_str),
            Some("Command" | "Partition")
        );
        let nested = |e: serde_path_to_error::Error<serde_json::Error>| {
            let p = e.path().to_string();
            if p == "." {
                D::Error::custom(e.into_inner())
            } else {
                D::Error::custom(format!("{p}: {}", e.into_inner()))
            }
        };
        if kernel {
            // Flattened tags need the buffered form anyway; check the inner
            // command on its own so errors keep their path.
            if let Some(c) = v.get("command") {
                let _: Command = serde_path_to_error::deserialize(c).map_err(|e| {
                    let p = e.path().to_string();
                    let field = if p == "." {
                        "command".to_string()
                    } else {
                        format!("command.{p}")
                    };
                    D::Error::custom(format!("{field}: {}", e.inner()))
                })?;
            }
            serde_path_to_error::deserialize(v)
                .map(ScriptItem::Kernel)
                .map_err(nested)
        } else {
            serde_path_to_error::deserialize(v)
                .map(ScriptItem::World)
                .map_err(nested)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub grid: GridSpec,
    #[serde(default)]
    pub entities: Vec<EntitySpec>,
    /// Astronaut -> assigned asset.
    #[serde(default)]
    pub assignments: BTreeMap<EntityId, EntityId>,
    #[serde(default)]
    pub goals: Vec<GoalScript>,
    #[serde(default)]
    pub script: Vec<ScriptItem>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: Value,
}

impl Scenario {
    /// Parses and validates a document.
    pub fn parse(text: &str) -> Result<Scenario, ParseError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ParseError {
                line: inner.line(),
                column: inner.column(),
                path,
                message: strip_position(&inner.to_string()),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Validates an already-parsed document (as embedded in a log header).
    pub fn from_value(v: Value) -> Result<Scenario, ParseError> {
        let scenario: Scenario = serde_path_to_error::deserialize(v)
            .map_err(|e| ParseError::at(e.path().to_string(), e.inner().to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn ground_truth(&self) -> Result<GridMap, ParseError> {
        for (i, row) in self.grid.rows.iter().enumerate() {
            if let Some(col) = row.find(|c| c != '.' && c != '#') {
                let ch = row[col..].chars().next().expect("found above");
                let msg = if ch == '?' {
                    "unknown cells are not allowed in ground truth".to_string()
                } else {
                    format!("unexpected cell character {ch:?}")
                };
                return Err(ParseError::at(
                    format!("grid.rows[{i}]"),
                    format!("{msg} at column {col}"),
                ));
            }
        }
        GridMap::from_rows(&self.grid.rows, self.grid.resolution, self.grid.origin)
            .map_err(|e| ParseError::at("grid", e.to_string()))
    }

    pub fn build_entities(&self) -> Result<Vec<Entity>, ParseError> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, e)| e.build(&format!("entities[{i}]")))
            .collect()
    }

    pub fn world_script(&self) -> Vec<ScriptedEvent> {
        self.script
            .iter()
            .filter_map(|s| match s {
                ScriptItem::World(e) => Some(e.clone()),
                ScriptItem::Kernel(_) => None,
            })
            .collect()
    }

    pub fn kernel_script(&self) -> Vec<KernelItem> {
        self.script
            .iter()
            .filter_map(|s| match s {
                ScriptItem::Kernel(k) => Some(k.clone()),
                ScriptItem::World(_) => None,
            })
            .collect()
    }

    pub fn build_world(&self, dt: f64, limits: RoverLimits) -> Result<World, WorldError> {
        let grid = self.ground_truth().map_err(|e| WorldError::InvalidEntity {
            id: EntityId::new("grid"),
            message: e.to_string(),
        })?;
        let entities = self
            .build_entities()
            .map_err(|e| WorldError::InvalidEntity {
                id: EntityId::new(e.path.clone()),
                message: e.message,
            })?;
        World::new(grid, entities, dt, limits, self.world_script())
    }

    fn spec(&self, id: &EntityId) -> Option<&EntitySpec> {
        self.entities.iter().find(|e| &e.id == id)
    }

    /// Ids that get a MAS endpoint: rovers, astronauts, Mission Control and
    /// the supervisor.
    pub fn endpoints(&self) -> BTreeSet<EndpointId> {
        let mut out: BTreeSet<EndpointId> = self
            .entities
            .iter()
            .filter(|e| matches!(e.kind, EntityKind::Rover | EntityKind::Astronaut))
            .map(|e| EndpointId::new(e.id.as_str()))
            .collect();
        out.insert(EndpointId::new(MISSION_CONTROL));
        out.insert(EndpointId::new(SUPERVISOR));
        out
    }

    fn validate(&self) -> Result<(), ParseError> {
        if !(self.grid.resolution > 0.0) {
            return Err(ParseError::at("grid.resolution", "must be positive"));
        }
        let grid = self.ground_truth()?;
        let mut ids = BTreeSet::new();
        for (i, e) in self.entities.iter().enumerate() {
            let path = format!("entities[{i}]");
            if !ids.insert(&e.id) {
                return Err(ParseError::at(
                    format!("{path}.id"),
                    format!("duplicate id `{}`", e.id),
                ));
            }
            if matches!(e.id.as_str(), MISSION_CONTROL | SUPERVISOR) {
                return Err(ParseError::at(
                    format!("{path}.id"),
                    "reserved endpoint name",
                ));
            }
            e.build(&path)?;
            if let Some(s) = e.sensor {
                if !(s.fov > 0.0 && s.fov <= TAU) || !(s.range >= 0.0) {
                    return Err(ParseError::at(
                        format!("{path}.sensor"),
                        "fov must lie in (0, 2π] and range must be >= 0",
                    ));
                }
            }
            if grid.world_to_cell(e.pose.position()).is_err() {
                return Err(ParseError::at(format!("{path}.pose"), "outside the grid"));
            }
            if let Some(c) = &e.carrier {
                if !self.entities.iter().any(|x| &x.id == c) {
                    return Err(ParseError::at(
                        format!("{path}.carrier"),
                        format!("unknown entity `{c}`"),
                    ));
                }
            }
        }
        let mut roles = BTreeSet::new();
        for e in self.entities.iter().filter(|e| e.kind == EntityKind::Rover) {
            if !roles.insert(e.role) {
                return Err(ParseError::at(
                    "entities",
                    format!(
                        "more than one {:?} rover",
                        e.role.expect("checked by build")
                    ),
                ));
            }
        }
        for (astro, asset) in &self.assignments {
            if self.spec(astro).map(|e| e.kind) != Some(EntityKind::Astronaut) {
                return Err(ParseError::at(
                    format!("assignments.{astro}"),
                    "not an astronaut",
                ));
            }
            if self.spec(asset).is_none() {
                return Err(ParseError::at(
                    format!("assignments.{astro}"),
                    format!("unknown asset `{asset}`"),
                ));
            }
        }
        let endpoints = self.endpoints();
        for (i, g) in self.goals.iter().enumerate() {
            if self.spec(&g.agent).map(|e| e.kind) != Some(EntityKind::Rover) {
                return Err(ParseError::at(
                    format!("goals[{i}].agent"),
                    format!("`{}` is not a rover", g.agent),
                ));
            }
            if !endpoints.contains(&g.originator) {
                return Err(ParseError::at(
                    format!("goals[{i}].originator"),
                    format!("unknown endpoint `{}`", g.originator),
                ));
            }
        }
        for (i, s) in self.script.iter().enumerate() {
            let path = format!("script[{i}]");
            match s {
                ScriptItem::World(ev) => {
                    if let Some(id) = ev.event.entity() {
                        if self.spec(id).is_none() {
                            return Err(ParseError::at(path, format!("unknown entity `{id}`")));
                        }
                    }
                    if let crate::world::WorldEvent::SetCells { cells, .. } = &ev.event {
                        if let Some(c) = cells
                            .cells()
                            .into_iter()
                            .find(|c| !grid.contains(c.col as i64, c.row as i64))
                        {
                            return Err(ParseError::at(path, format!("cell {c} outside the grid")));
                        }
                    }
                }
                ScriptItem::Kernel(k) => {
                    if let KernelAction::Partition { a, b, .. } = &k.action {
                        for e in [a, b] {
                            if !endpoints.contains(e) {
                                return Err(ParseError::at(
                                    path,
                                    format!("unknown endpoint `{e}`"),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Grid of the same shape with every cell Unknown: an agent's prior.
    pub fn blank_map(&self) -> Result<GridMap, ParseError> {
        let g = self.ground_truth()?;
        GridMap::new(
            g.width(),
            g.height(),
            g.resolution(),
            g.origin(),
            CellState::Unknown,
        )
        .map_err(|e| ParseError::at("grid", e.to_string()))
    }
}

/// serde_json appends " at line L column C"; the fields carry that already.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}
