//! Geometric perception oracle: detections from ground truth with field of
//! view and occlusion, instance tracking, fall/interaction/crack events and
//! semantic labeling of the known map.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{
    cells_in_disc, normalize_angle, CellState, Entity, EntityId, EntityKind, GridMap, Pose2D,
    Posture, SemLabel, Vec2, World,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectionClass {
    Astronaut,
    Rover,
    SolarPanel,
    Rock,
}

impl DetectionClass {
    pub fn of(kind: EntityKind) -> Option<Self> {
        match kind {
            EntityKind::Astronaut => Some(DetectionClass::Astronaut),
            EntityKind::Rover => Some(DetectionClass::Rover),
            EntityKind::SolarPanelArray => Some(DetectionClass::SolarPanel),
            _ => None,
        }
    }

    pub fn label(self) -> SemLabel {
        match self {
            DetectionClass::Astronaut => SemLabel::Astronaut,
            DetectionClass::Rover => SemLabel::Rover,
            DetectionClass::SolarPanel => SemLabel::SolarPanel,
            DetectionClass::Rock => SemLabel::Rock,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: DetectionClass,
    /// Ground-truth identity; the oracle knows it, trackers only use it for
    /// reporting.
    pub entity: EntityId,
    pub world_pos: Vec2,
    pub confidence: f64,
    pub source_sensor: String,
}

/// Whether a disc intersects the sensor cone within `range`.
pub fn disc_in_cone(sensor: Pose2D, fov: f64, range: f64, center: Vec2, radius: f64) -> bool {
    let rel = center - sensor.position();
    let d = rel.norm();
    if d - radius > range {
        return false;
    }
    if fov >= TAU - 1e-12 || d <= radius {
        return true;
    }
    let off = normalize_angle(rel.angle() - sensor.theta).abs();
    let widen = (radius / d).min(1.0).asin();
    off <= fov / 2.0 + widen
}

/// One detection per detectable entity (other than `own`) whose footprint
/// meets the cone and whose center is in line of sight. Obstacle cells under
/// the target's or the observer's own footprint do not occlude.
pub fn detect(
    world: &World,
    sensor_id: &str,
    sensor: Pose2D,
    fov: f64,
    range: f64,
    own: Option<&EntityId>,
) -> Vec<Detection> {
    if !(range > 0.0) {
        return Vec::new();
    }
    let grid = world.grid();
    let slack = grid.resolution() * std::f64::consts::FRAC_1_SQRT_2;
    let own_entity = own.and_then(|id| world.entity(id));
    let mut out = Vec::new();
    for e in world.entities() {
        if Some(&e.id) == own {
            continue;
        }
        let Some(class) = DetectionClass::of(e.kind()) else {
            continue;
        };
        if !disc_in_cone(sensor, fov, range, e.position(), e.footprint_radius) {
            continue;
        }
        let ignore = |c| {
            let p = grid.cell_center(c);
            p.distance(e.position()) <= e.footprint_radius + slack
                || own_entity
                    .is_some_and(|o| p.distance(o.position()) <= o.footprint_radius + slack)
        };
        if !world.line_of_sight(sensor.position(), e.position(), ignore) {
            continue;
        }
        let d = sensor.position().distance(e.position());
        out.push(Detection {
            class,
            entity: e.id.clone(),
            world_pos: e.position(),
            confidence: (1.0 - d / range).clamp(0.0, 1.0),
            source_sensor: sensor_id.to_string(),
        });
    }
    out
}

/// Keeps the most confident detection per entity across several sensors.
pub fn merge_detections(batches: impl IntoIterator<Item = Vec<Detection>>) -> Vec<Detection> {
    let mut best: std::collections::BTreeMap<EntityId, Detection> = Default::default();
    for d in batches.into_iter().flatten() {
        match best.get(&d.entity) {
            Some(prev) if prev.confidence >= d.confidence => {}
            _ => {
                best.insert(d.entity.clone(), d);
            }
        }
    }
    best.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Live,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub class: DetectionClass,
    pub entity: EntityId,
    pub last_pos: Vec2,
    pub last_seen_tick: u64,
    pub status: TrackStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TrackChange {
    Opened { track_id: u64, entity: EntityId },
    Staled { track_id: u64, entity: EntityId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracker {
    pub gate: f64,
    pub stale_window: u64,
    tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(gate: f64, stale_window: u64) -> Self {
        Tracker {
            gate,
            stale_window,
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn live(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.status == TrackStatus::Live)
    }

    /// Greedy nearest-neighbor association by class within the gate.
    /// Tracks unseen for more than `stale_window` ticks go stale first and
    /// never match again.
    pub fn update(&mut self, detections: &[Detection], tick: u64) -> Vec<TrackChange> {
        let mut changes = Vec::new();
        for t in &mut self.tracks {
            if t.status == TrackStatus::Live
                && tick.saturating_sub(t.last_seen_tick) > self.stale_window
            {
                t.status = TrackStatus::Stale;
                changes.push(TrackChange::Staled {
                    track_id: t.track_id,
                    entity: t.entity.clone(),
                });
            }
        }
        let mut pairs = Vec::new();
        for (ti, t) in self.tracks.iter().enumerate() {
            if t.status != TrackStatus::Live {
                continue;
            }
            for (di, d) in detections.iter().enumerate() {
                if d.class != t.class {
                    continue;
                }
                let dist = t.last_pos.distance(d.world_pos);
                if dist <= self.gate {
                    pairs.push((dist, ti, di));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; self.tracks.len()];
        let mut det_used = vec![false; detections.len()];
        for (_, ti, di) in pairs {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            let t = &mut self.tracks[ti];
            t.last_pos = detections[di].world_pos;
            t.last_seen_tick = tick;
            t.entity = detections[di].entity.clone();
        }
        for (di, d) in detections.iter().enumerate() {
            if det_used[di] {
                continue;
            }
            let track_id = self.next_id;
            self.next_id += 1;
            self.tracks.push(Track {
                track_id,
                class: d.class,
                entity: d.entity.clone(),
                last_pos: d.world_pos,
                last_seen_tick: tick,
                status: TrackStatus::Live,
            });
            changes.push(TrackChange::Opened {
                track_id,
                entity: d.entity.clone(),
            });
        }
        changes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallEvent {
    pub astronaut_track: u64,
    pub astronaut: EntityId,
    pub position: Vec2,
    pub tick: u64,
}

/// Falls of astronauts whose live track was refreshed this tick (i.e. some
/// sensor sees them now).
pub fn detect_fall(tracker: &Tracker, world: &World, tick: u64) -> Vec<FallEvent> {
    tracker
        .live()
        .filter(|t| t.class == DetectionClass::Astronaut && t.last_seen_tick == tick)
        .filter_map(|t| {
            let e = world.entity(&t.entity)?;
            (e.posture() == Some(Posture::Fallen)).then(|| FallEvent {
                astronaut_track: t.track_id,
                astronaut: e.id.clone(),
                position: e.position(),
                tick,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub astronaut_track: u64,
    pub astronaut: EntityId,
    pub asset: EntityId,
    pub asset_kind: EntityKind,
    pub distance: f64,
    pub tick: u64,
}

/// Every (visible astronaut, panel or rover) pair whose footprints are within
/// `d_int` of each other, boundary inclusive.
pub fn detect_interaction(
    tracker: &Tracker,
    world: &World,
    d_int: f64,
    tick: u64,
) -> Vec<InteractionEvent> {
    let mut out = Vec::new();
    for t in tracker.live() {
        if t.class != DetectionClass::Astronaut || t.last_seen_tick != tick {
            continue;
        }
        let Some(astro) = world.entity(&t.entity) else {
            continue;
        };
        for asset in world.entities() {
            if !matches!(
                asset.kind(),
                EntityKind::SolarPanelArray | EntityKind::Rover
            ) {
                continue;
            }
            let distance = astro.boundary_distance(asset);
            if distance <= d_int {
                out.push(InteractionEvent {
                    astronaut_track: t.track_id,
                    astronaut: astro.id.clone(),
                    asset: asset.id.clone(),
                    asset_kind: asset.kind(),
                    distance,
                    tick,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub panel: EntityId,
    pub local_point: Vec2,
    pub world_point: Vec2,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptError {
    #[error("panel `{panel}` is {distance:.2} m away, inspect range {range:.2} m")]
    OutOfInspectRange {
        panel: EntityId,
        distance: f64,
        range: f64,
    },
    #[error("entity `{0}` is not a solar panel array")]
    NotAPanel(EntityId),
}

/// Cracked defects of a panel in world coordinates. The rover must be within
/// `inspect_range` of the panel footprint.
pub fn inspect_panel(
    panel: &Entity,
    rover_pose: Pose2D,
    inspect_range: f64,
    tick: u64,
) -> Result<Vec<DefectReport>, PerceptError> {
    if panel.kind() != EntityKind::SolarPanelArray {
        return Err(PerceptError::NotAPanel(panel.id.clone()));
    }
    let distance =
        (rover_pose.position().distance(panel.position()) - panel.footprint_radius).max(0.0);
    if distance > inspect_range {
        return Err(PerceptError::OutOfInspectRange {
            panel: panel.id.clone(),
            distance,
            range: inspect_range,
        });
    }
    Ok(panel
        .defects()
        .iter()
        .filter(|d| d.has_crack)
        .map(|d| DefectReport {
            panel: panel.id.clone(),
            local_point: d.local_point,
            world_point: panel.pose.transform_point(d.local_point),
            tick,
        })
        .collect())
}

/// Relabels the known map: Free is regolith, Obstacle is rock, and the cells
/// under each visible entity's footprint take the entity's class.
pub fn semantic_overlay(known: &mut GridMap, world: &World, visible: &BTreeSet<EntityId>) {
    for i in 0..known.len() {
        let c = known.cell_of(i);
        let label = match known.get(c) {
            CellState::Free => SemLabel::Regolith,
            CellState::Obstacle => SemLabel::Rock,
            CellState::Unknown => continue,
        };
        known.set_label(c, Some(label));
    }
    for id in visible {
        let Some(e) = world.entity(id) else { continue };
        let Some(class) = DetectionClass::of(e.kind()) else {
            continue;
        };
        for c in cells_in_disc(known, e.position(), e.footprint_radius) {
            if known.get(c) != CellState::Unknown {
                known.set_label(c, Some(class.label()));
            }
        }
    }
}
