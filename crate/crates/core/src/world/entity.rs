use std::fmt;

use serde::{Deserialize, Serialize};

use super::geometry::{Pose2D, Vec2};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn new(s: impl Into<String>) -> Self {
        EntityId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityKind {
    Rover,
    Astronaut,
    SolarPanelArray,
    BaseStation,
    ToolSlot,
    SamplePoint,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::Rover,
        EntityKind::Astronaut,
        EntityKind::SolarPanelArray,
        EntityKind::BaseStation,
        EntityKind::ToolSlot,
        EntityKind::SamplePoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Rover => "Rover",
            EntityKind::Astronaut => "Astronaut",
            EntityKind::SolarPanelArray => "SolarPanelArray",
            EntityKind::BaseStation => "BaseStation",
            EntityKind::ToolSlot => "ToolSlot",
            EntityKind::SamplePoint => "SamplePoint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Posture {
    Upright,
    Fallen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Leader,
    Secondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ToolKind {
    Shovel,
    Brush,
}

/// A surface defect in the panel's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub local_point: Vec2,
    pub has_crack: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub l1: f64,
    pub l2: f64,
    /// Arm base relative to the rover frame.
    pub mount_offset: Pose2D,
}

impl Default for ArmSpec {
    fn default() -> Self {
        ArmSpec {
            l1: 0.6,
            l2: 0.5,
            mount_offset: Pose2D::new(0.3, 0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: String,
    pub kind: ToolKind,
}

/// Kind-specific attributes. Holding them in the variant keeps posture on
/// astronauts only, defects on panels only, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EntityBody {
    Rover {
        role: Role,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arm: Option<ArmSpec>,
        #[serde(default)]
        storage_slots: usize,
    },
    Astronaut {
        posture: Posture,
    },
    SolarPanelArray {
        defects: Vec<Defect>,
    },
    BaseStation,
    ToolSlot {
        /// Entity the slot is mounted on; the slot pose follows it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        carrier: Option<EntityId>,
        #[serde(default)]
        offset: Pose2D,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tool: Option<ToolSpec>,
    },
    SamplePoint {
        interest_score: f64,
    },
}

impl EntityBody {
    pub fn kind(&self) -> EntityKind {
        match self {
            EntityBody::Rover { .. } => EntityKind::Rover,
            EntityBody::Astronaut { .. } => EntityKind::Astronaut,
            EntityBody::SolarPanelArray { .. } => EntityKind::SolarPanelArray,
            EntityBody::BaseStation => EntityKind::BaseStation,
            EntityBody::ToolSlot { .. } => EntityKind::ToolSlot,
            EntityBody::SamplePoint { .. } => EntityKind::SamplePoint,
        }
    }
}

/// Scripted straight-line walk towards a waypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub target: Vec2,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub pose: Pose2D,
    pub footprint_radius: f64,
    #[serde(flatten)]
    pub body: EntityBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<Motion>,
}

impl Entity {
    pub fn kind(&self) -> EntityKind {
        self.body.kind()
    }

    pub fn position(&self) -> Vec2 {
        self.pose.position()
    }

    pub fn posture(&self) -> Option<Posture> {
        match self.body {
            EntityBody::Astronaut { posture } => Some(posture),
            _ => None,
        }
    }

    pub fn role(&self) -> Option<Role> {
        match self.body {
            EntityBody::Rover { role, .. } => Some(role),
            _ => None,
        }
    }

    pub fn defects(&self) -> &[Defect] {
        match &self.body {
            EntityBody::SolarPanelArray { defects } => defects,
            _ => &[],
        }
    }

    pub fn interest_score(&self) -> Option<f64> {
        match self.body {
            EntityBody::SamplePoint { interest_score } => Some(interest_score),
            _ => None,
        }
    }

    /// Distance between footprint boundaries (0 when they overlap).
    pub fn boundary_distance(&self, other: &Entity) -> f64 {
        (self.position().distance(other.position())
            - self.footprint_radius
            - other.footprint_radius)
            .max(0.0)
    }
}
