//! Discrete-time simulation kernel: ground-truth terrain, entities, rover
//! kinematics, scripted events and the clock.

mod entity;
mod geometry;
mod grid;

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use entity::{
    ArmSpec, Defect, Entity, EntityBody, EntityId, EntityKind, Motion, Posture, Role, ToolKind,
    ToolSpec,
};
pub use geometry::{normalize_angle, Pose2D, Vec2};
pub use grid::{CellIndex, CellState, GridError, GridMap, GridMapDoc, SemLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub tick: u64,
    pub dt: f64,
}

impl SimClock {
    pub fn new(dt: f64) -> Self {
        assert!(dt > 0.0, "dt must be positive");
        SimClock { tick: 0, dt }
    }

    pub fn seconds(&self) -> f64 {
        self.tick as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub v: f64,
    pub omega: f64,
}

impl VelocityCommand {
    pub const STOP: VelocityCommand = VelocityCommand { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        VelocityCommand { v, omega }
    }

    pub fn is_stop(&self) -> bool {
        self.v == 0.0 && self.omega == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoverLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for RoverLimits {
    fn default() -> Self {
        RoverLimits {
            v_max: 0.5,
            omega_max: 0.8,
        }
    }
}

impl RoverLimits {
    pub fn clamp(&self, cmd: VelocityCommand) -> VelocityCommand {
        let v = if cmd.v.is_finite() {
            cmd.v.clamp(-self.v_max, self.v_max)
        } else {
            0.0
        };
        let omega = if cmd.omega.is_finite() {
            cmd.omega.clamp(-self.omega_max, self.omega_max)
        } else {
            0.0
        };
        VelocityCommand { v, omega }
    }
}

/// A set of cells addressed by `[col, row]`; rectangles are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSet {
    List(Vec<[usize; 2]>),
    Rect {
        min: [usize; 2],
        max: [usize; 2],
    },
    /// Border cells of an inclusive rectangle.
    Outline {
        min: [usize; 2],
        max: [usize; 2],
    },
}

impl CellSet {
    pub fn cells(&self) -> Vec<CellIndex> {
        match self {
            CellSet::List(v) => v.iter().map(|c| CellIndex::new(c[0], c[1])).collect(),
            CellSet::Rect { min, max } => {
                let mut out = Vec::new();
                for row in min[1]..=max[1] {
                    for col in min[0]..=max[0] {
                        out.push(CellIndex::new(col, row));
                    }
                }
                out
            }
            CellSet::Outline { min, max } => {
                let mut out = Vec::new();
                for row in min[1]..=max[1] {
                    for col in min[0]..=max[0] {
                        if row == min[1] || row == max[1] || col == min[0] || col == max[0] {
                            out.push(CellIndex::new(col, row));
                        }
                    }
                }
                out
            }
        }
    }
}

/// Ground-truth changes driven by the scenario script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum WorldEvent {
    Fall {
        entity: EntityId,
    },
    Stand {
        entity: EntityId,
    },
    MoveTo {
        entity: EntityId,
        target: Vec2,
        speed: f64,
    },
    Teleport {
        entity: EntityId,
        pose: Pose2D,
    },
    SetCells {
        state: CellState,
        cells: CellSet,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub tick: u64,
    #[serde(flatten)]
    pub event: WorldEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Collision {
    pub entity: EntityId,
    pub at: Vec2,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub collisions: Vec<Collision>,
    pub applied: Vec<ScriptedEvent>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("duplicate entity id `{0}`")]
    DuplicateEntity(EntityId),
    #[error("unknown entity `{0}`")]
    UnknownEntity(EntityId),
    #[error("entity `{id}`: {message}")]
    InvalidEntity { id: EntityId, message: String },
    #[error("scripted cell {0} outside the grid")]
    CellOutOfBounds(CellIndex),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct World {
    grid: GridMap,
    entities: Vec<Entity>,
    #[serde(skip)]
    index: BTreeMap<EntityId, usize>,
    clock: SimClock,
    limits: RoverLimits,
    script: Vec<ScriptedEvent>,
    next_script: usize,
}

impl World {
    /// Builds a world. Solar panel footprints are rasterized into the terrain
    /// as obstacles; events scheduled at tick 0 are applied immediately.
    pub fn new(
        mut grid: GridMap,
        entities: Vec<Entity>,
        dt: f64,
        limits: RoverLimits,
        mut script: Vec<ScriptedEvent>,
    ) -> Result<World, WorldError> {
        let mut index = BTreeMap::new();
        for (i, e) in entities.iter().enumerate() {
            if !(e.footprint_radius >= 0.0) {
                return Err(WorldError::InvalidEntity {
                    id: e.id.clone(),
                    message: "footprint_radius must be >= 0".into(),
                });
            }
            if let EntityBody::SamplePoint { interest_score } = e.body {
                if !(0.0..=1.0).contains(&interest_score) {
                    return Err(WorldError::InvalidEntity {
                        id: e.id.clone(),
                        message: "interest_score must lie in [0, 1]".into(),
                    });
                }
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(WorldError::DuplicateEntity(e.id.clone()));
            }
        }
        for e in &entities {
            if let EntityBody::ToolSlot {
                carrier: Some(c), ..
            } = &e.body
            {
                if !index.contains_key(c) {
                    return Err(WorldError::UnknownEntity(c.clone()));
                }
            }
        }
        for ev in &script {
            if let Some(id) = ev.event.entity() {
                if !index.contains_key(id) {
                    return Err(WorldError::UnknownEntity(id.clone()));
                }
            }
            if let WorldEvent::SetCells { cells, .. } = &ev.event {
                for c in cells.cells() {
                    if !grid.contains(c.col as i64, c.row as i64) {
                        return Err(WorldError::CellOutOfBounds(c));
                    }
                }
            }
        }
        for e in entities
            .iter()
            .filter(|e| e.kind() == EntityKind::SolarPanelArray)
        {
            rasterize_disc(
                &mut grid,
                e.position(),
                e.footprint_radius,
                CellState::Obstacle,
            );
        }
        script.sort_by_key(|e| e.tick);
        let mut world = World {
            grid,
            entities,
            index,
            clock: SimClock::new(dt),
            limits,
            script,
            next_script: 0,
        };
        world.update_carried();
        world.apply_due_script();
        Ok(world)
    }

    pub fn grid(&self) -> &GridMap {
        &self.grid
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: &EntityId) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i])
    }

    pub fn entity_mut(&mut self, id: &EntityId) -> Option<&mut Entity> {
        self.index.get(id).map(|&i| &mut self.entities[i])
    }

    pub fn entities_of(&self, kind: EntityKind) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(move |e| e.kind() == kind)
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn tick(&self) -> u64 {
        self.clock.tick
    }

    pub fn limits(&self) -> RoverLimits {
        self.limits
    }

    pub fn pending_script(&self) -> usize {
        self.script.len() - self.next_script
    }

    /// Advances one tick: unicycle integration of every rover (missing
    /// commands mean stop), scripted walks, then script events due at the
    /// new tick.
    pub fn step(&mut self, commands: &BTreeMap<EntityId, VelocityCommand>) -> StepReport {
        let dt = self.clock.dt;
        let mut report = StepReport::default();
        for i in 0..self.entities.len() {
            match self.entities[i].kind() {
                EntityKind::Rover => {
                    let cmd = commands
                        .get(&self.entities[i].id)
                        .copied()
                        .unwrap_or_default();
                    let cmd = self.limits.clamp(cmd);
                    if let Some(c) = self.drive(i, cmd, dt) {
                        report.collisions.push(c);
                    }
                }
                _ => self.walk(i, dt),
            }
        }
        self.update_carried();
        self.clock.tick += 1;
        report.applied = self.apply_due_script();
        report
    }

    fn drive(&mut self, i: usize, cmd: VelocityCommand, dt: f64) -> Option<Collision> {
        let pose = self.entities[i].pose;
        let start = pose.position();
        let target = start + Vec2::new(pose.theta.cos(), pose.theta.sin()) * (cmd.v * dt);
        let theta = normalize_angle(pose.theta + cmd.omega * dt);
        let (end, blocked) = self.sweep_segment(start, target);
        self.entities[i].pose = Pose2D::new(end.x, end.y, theta);
        blocked.then(|| Collision {
            entity: self.entities[i].id.clone(),
            at: end,
        })
    }

    /// Last free point along the segment, sampled at resolution/4.
    fn sweep_segment(&self, start: Vec2, target: Vec2) -> (Vec2, bool) {
        let len = start.distance(target);
        if len == 0.0 {
            return (start, false);
        }
        let start_cell = self.grid.world_to_cell(start).ok();
        let step = self.grid.resolution() / 4.0;
        let n = (len / step).ceil() as usize;
        let mut last = start;
        for k in 1..=n {
            let p = start + (target - start) * (k as f64 / n as f64);
            let free = match self.grid.world_to_cell(p) {
                Ok(c) => Some(c) == start_cell || self.grid.get(c) != CellState::Obstacle,
                Err(_) => false,
            };
            if !free {
                return (last, true);
            }
            last = p;
        }
        (target, false)
    }

    fn walk(&mut self, i: usize, dt: f64) {
        let e = &mut self.entities[i];
        if e.posture() == Some(Posture::Fallen) {
            return;
        }
        let Some(m) = e.motion else { return };
        let pos = e.position();
        let to_go = m.target - pos;
        let reach = m.speed * dt;
        let next = if to_go.norm() <= reach {
            e.motion = None;
            m.target
        } else {
            pos + to_go.normalized() * reach
        };
        let theta = if to_go.norm() > 0.0 {
            to_go.angle()
        } else {
            e.pose.theta
        };
        e.pose = Pose2D::new(next.x, next.y, theta);
    }

    fn update_carried(&mut self) {
        for i in 0..self.entities.len() {
            if let EntityBody::ToolSlot {
                carrier: Some(c),
                offset,
                ..
            } = &self.entities[i].body
            {
                let carrier_pose = self.entities[self.index[c]].pose;
                self.entities[i].pose = carrier_pose.compose(offset);
            }
        }
    }

    fn apply_due_script(&mut self) -> Vec<ScriptedEvent> {
        let mut applied = Vec::new();
        while self.next_script < self.script.len()
            && self.script[self.next_script].tick <= self.clock.tick
        {
            let ev = self.script[self.next_script].clone();
            self.next_script += 1;
            self.apply_event(&ev.event);
            applied.push(ev);
        }
        if !applied.is_empty() {
            self.update_carried();
        }
        applied
    }

    fn apply_event(&mut self, ev: &WorldEvent) {
        match ev {
            WorldEvent::Fall { entity } | WorldEvent::Stand { entity } => {
                let fallen = matches!(ev, WorldEvent::Fall { .. });
                if let Some(e) = self.entity_mut(entity) {
                    if let EntityBody::Astronaut { posture } = &mut e.body {
                        *posture = if fallen {
                            Posture::Fallen
                        } else {
                            Posture::Upright
                        };
                    }
                }
            }
            WorldEvent::MoveTo {
                entity,
                target,
                speed,
            } => {
                if let Some(e) = self.entity_mut(entity) {
                    e.motion = Some(Motion {
                        target: *target,
                        speed: speed.abs(),
                    });
                }
            }
            WorldEvent::Teleport { entity, pose } => {
                if let Some(e) = self.entity_mut(entity) {
                    e.pose = Pose2D::new(pose.x, pose.y, pose.theta);
                    e.motion = None;
                }
            }
            WorldEvent::SetCells { state, cells } => {
                for c in cells.cells() {
                    self.grid.set(c, *state);
                }
            }
        }
    }

    /// Ground-truth states of the cells hit by rays inside the sensor cone,
    /// sorted by cell. A ray includes the first obstacle it meets and stops.
    pub fn raycast_reveal(
        &self,
        sensor: Pose2D,
        fov: f64,
        range: f64,
    ) -> Vec<(CellIndex, CellState)> {
        raycast_reveal(&self.grid, sensor, fov, range)
    }

    /// Whether the straight line from `from` to `to` crosses no obstacle cell
    /// other than the ones `ignore` accepts.
    pub fn line_of_sight(&self, from: Vec2, to: Vec2, ignore: impl Fn(CellIndex) -> bool) -> bool {
        let len = from.distance(to);
        let step = self.grid.resolution() / 2.0;
        let n = (len / step).ceil().max(1.0) as usize;
        for k in 0..=n {
            let p = from + (to - from) * (k as f64 / n as f64);
            match self.grid.world_to_cell(p) {
                Ok(c) if self.grid.get(c) == CellState::Obstacle && !ignore(c) => return false,
                _ => {}
            }
        }
        true
    }

    /// FNV-1a digest of the serialized state, for determinism checks.
    pub fn digest(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("world state serializes");
        fnv1a(&bytes)
    }

    // Test and tooling hooks; the kernel mutates the world only through step.
    pub fn set_cell(&mut self, c: CellIndex, state: CellState) {
        self.grid.set(c, state);
    }

    /// Takes the tool out of a slot.
    pub fn take_tool(&mut self, slot: &EntityId) -> Option<ToolSpec> {
        match &mut self.entity_mut(slot)?.body {
            EntityBody::ToolSlot { tool, .. } => tool.take(),
            _ => None,
        }
    }

    /// Puts a tool into an empty slot; false if the slot is taken or missing.
    pub fn put_tool(&mut self, slot: &EntityId, spec: ToolSpec) -> bool {
        match self.entity_mut(slot).map(|e| &mut e.body) {
            Some(EntityBody::ToolSlot { tool: t @ None, .. }) => {
                *t = Some(spec);
                true
            }
            _ => false,
        }
    }
}

impl WorldEvent {
    pub fn entity(&self) -> Option<&EntityId> {
        match self {
            WorldEvent::Fall { entity }
            | WorldEvent::Stand { entity }
            | WorldEvent::MoveTo { entity, .. }
            | WorldEvent::Teleport { entity, .. } => Some(entity),
            WorldEvent::SetCells { .. } => None,
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Marks every cell whose center lies inside the disc.
pub fn rasterize_disc(grid: &mut GridMap, center: Vec2, radius: f64, state: CellState) {
    for c in cells_in_disc(grid, center, radius) {
        grid.set(c, state);
    }
}

/// Cells whose centers lie within `radius` of `center`; always includes the
/// cell containing `center` when it is inside the grid.
pub fn cells_in_disc(grid: &GridMap, center: Vec2, radius: f64) -> Vec<CellIndex> {
    let res = grid.resolution();
    let g = grid.world_to_grid(center);
    let span = (radius / res).ceil() as i64 + 1;
    let (gc, gr) = (g.x.floor() as i64, g.y.floor() as i64);
    let mut out = Vec::new();
    for row in gr - span..=gr + span {
        for col in gc - span..=gc + span {
            if !grid.contains(col, row) {
                continue;
            }
            let c = CellIndex::new(col as usize, row as usize);
            if grid.cell_center(c).distance(center) <= radius || (col == gc && row == gr) {
                out.push(c);
            }
        }
    }
    out
}

pub fn raycast_reveal(
    grid: &GridMap,
    sensor: Pose2D,
    fov: f64,
    range: f64,
) -> Vec<(CellIndex, CellState)> {
    if !(range > 0.0) || !(fov > 0.0) {
        return Vec::new();
    }
    let fov = fov.min(TAU);
    let res = grid.resolution();
    let spacing = res / range;
    let full_circle = fov >= TAU - 1e-12;
    let mut n_rays = (fov / spacing).ceil() as usize;
    if !full_circle {
        n_rays += 1;
    }
    let n_rays = n_rays.max(1);
    let step = res / 2.0;
    let n_steps = (range / step).floor() as usize;
    let origin = sensor.position();
    let mut hit = vec![false; grid.len()];
    for k in 0..n_rays {
        let angle = if full_circle {
            sensor.theta + TAU * k as f64 / n_rays as f64
        } else if n_rays == 1 {
            sensor.theta
        } else {
            sensor.theta - fov / 2.0 + fov * k as f64 / (n_rays - 1) as f64
        };
        let dir = Vec2::new(angle.cos(), angle.sin());
        for s in 0..=n_steps {
            let p = origin + dir * (s as f64 * step);
            let Ok(c) = grid.world_to_cell(p) else { break };
            let i = grid.linear(c);
            hit[i] = true;
            if grid.cells()[i] == CellState::Obstacle {
                break;
            }
        }
    }
    hit.iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(i, _)| {
            let c = grid.cell_of(i);
            (c, grid.get(c))
        })
        .collect()
}
