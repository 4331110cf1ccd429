//! Planar two-link arm model, tool-changer and sample-collection state
//! machines, and the Secondary's sample storage.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{ArmSpec, EntityBody, EntityId, Pose2D, ToolKind, ToolSpec, Vec2, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result")]
pub enum ReachResult {
    Reachable { q1: f64, q2: f64 },
    Unreachable { distance: f64 },
}

impl ReachResult {
    pub fn is_reachable(&self) -> bool {
        matches!(self, ReachResult::Reachable { .. })
    }
}

pub fn arm_base(arm: &ArmSpec, rover_pose: Pose2D) -> Pose2D {
    rover_pose.compose(&arm.mount_offset)
}

/// Analytic inverse kinematics of the planar arm (elbow angle ≥ 0). Angles
/// are in the arm base frame.
pub fn check_reach(arm: &ArmSpec, rover_pose: Pose2D, target: Vec2) -> ReachResult {
    const EPS: f64 = 1e-9;
    let local = arm_base(arm, rover_pose).inverse_transform_point(target);
    let d = local.norm();
    let (l1, l2) = (arm.l1, arm.l2);
    if d < (l1 - l2).abs() - EPS || d > l1 + l2 + EPS {
        return ReachResult::Unreachable { distance: d };
    }
    let cos_q2 = ((d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = cos_q2.acos();
    let q1 = local.y.atan2(local.x) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    ReachResult::Reachable { q1, q2 }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ManipError {
    #[error("slot `{0}` does not exist")]
    UnknownSlot(EntityId),
    #[error("slot `{0}` is outside the sensor range")]
    SlotNotVisible(EntityId),
}

/// Pose estimate of a tool slot: ground truth plus zero-mean Gaussian noise
/// on the position.
pub fn localize_tool(
    world: &World,
    arm_base_pose: Pose2D,
    slot: &EntityId,
    sigma: f64,
    range: f64,
    rng: &mut impl Rng,
) -> Result<Pose2D, ManipError> {
    let e = world
        .entity(slot)
        .filter(|e| matches!(e.body, EntityBody::ToolSlot { .. }))
        .ok_or_else(|| ManipError::UnknownSlot(slot.clone()))?;
    if e.position().distance(arm_base_pose.position()) > range {
        return Err(ManipError::SlotNotVisible(slot.clone()));
    }
    if sigma <= 0.0 {
        return Ok(e.pose);
    }
    let n = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    let (dx, dy) = (n.sample(rng), n.sample(rng));
    Ok(Pose2D::new(e.pose.x + dx, e.pose.y + dy, e.pose.theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TcFault {
    Unreachable,
    SlotNotVisible,
    ToolAlreadyMounted,
    UnexpectedEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TcState {
    Stowed,
    Approach,
    Localize,
    Reach,
    Latch,
    Mounted,
    Unlatch,
    Retreat,
    Fault(TcFault),
}

impl TcState {
    pub const ALL: [TcState; 12] = [
        TcState::Stowed,
        TcState::Approach,
        TcState::Localize,
        TcState::Reach,
        TcState::Latch,
        TcState::Mounted,
        TcState::Unlatch,
        TcState::Retreat,
        TcState::Fault(TcFault::Unreachable),
        TcState::Fault(TcFault::SlotNotVisible),
        TcState::Fault(TcFault::ToolAlreadyMounted),
        TcState::Fault(TcFault::UnexpectedEvent),
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TcEvent {
    MountRequested,
    ArrivedAtSlot,
    PoseEstimated,
    SlotNotVisible,
    ReachOk,
    Unreachable,
    Latched,
    DismountRequested,
    Unlatched,
    Retreated,
    Reset,
}

impl TcEvent {
    pub const ALL: [TcEvent; 11] = [
        TcEvent::MountRequested,
        TcEvent::ArrivedAtSlot,
        TcEvent::PoseEstimated,
        TcEvent::SlotNotVisible,
        TcEvent::ReachOk,
        TcEvent::Unreachable,
        TcEvent::Latched,
        TcEvent::DismountRequested,
        TcEvent::Unlatched,
        TcEvent::Retreated,
        TcEvent::Reset,
    ];
}

/// Side effects of a tool-changer transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TcEffect {
    /// The tool leaves its slot and is held by the arm.
    ToolToArm,
    /// The held tool goes back into the slot.
    ToolToSlot,
    /// The cooperative layer must be told the tool could not be reached.
    AlertToolUnreachable,
}

/// Total transition function. Faults absorb everything except `Reset`,
/// which returns to `Stowed`; a fault never moves a tool.
pub fn tc_step(state: TcState, event: TcEvent) -> (TcState, Option<TcEffect>) {
    use TcEvent as E;
    use TcState as S;
    match (state, event) {
        (S::Fault(_), E::Reset) => (S::Stowed, None),
        (S::Fault(f), _) => (S::Fault(f), None),
        (S::Stowed, E::MountRequested) => (S::Approach, None),
        (S::Approach, E::ArrivedAtSlot) => (S::Localize, None),
        (S::Localize, E::PoseEstimated) => (S::Reach, None),
        (S::Localize, E::SlotNotVisible) => (S::Fault(TcFault::SlotNotVisible), None),
        (S::Reach, E::ReachOk) => (S::Latch, None),
        (S::Reach, E::Unreachable) => (
            S::Fault(TcFault::Unreachable),
            Some(TcEffect::AlertToolUnreachable),
        ),
        (S::Latch, E::Latched) => (S::Mounted, Some(TcEffect::ToolToArm)),
        (S::Mounted, E::MountRequested) => (S::Fault(TcFault::ToolAlreadyMounted), None),
        (S::Mounted, E::DismountRequested) => (S::Unlatch, None),
        (S::Unlatch, E::Unlatched) => (S::Retreat, Some(TcEffect::ToolToSlot)),
        (S::Retreat, E::Retreated) => (S::Stowed, None),
        // A reset outside a fault is a no-op.
        (s, E::Reset) => (s, None),
        _ => (S::Fault(TcFault::UnexpectedEvent), None),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToolLocation {
    Slot(EntityId),
    Arm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub spec: ToolSpec,
    pub location: ToolLocation,
}

/// Tool changer bound to the slot it is working on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolChanger {
    pub state: TcState,
    pub slot: Option<EntityId>,
}

impl Default for ToolChanger {
    fn default() -> Self {
        ToolChanger {
            state: TcState::Stowed,
            slot: None,
        }
    }
}

impl ToolChanger {
    /// Applies one event; tool effects move `tool` between slot and arm.
    pub fn step(&mut self, event: TcEvent, tool: Option<&mut Tool>) -> Option<TcEffect> {
        let (next, effect) = tc_step(self.state, event);
        self.state = next;
        if let (Some(effect), Some(tool)) = (effect, tool) {
            match effect {
                TcEffect::ToolToArm => tool.location = ToolLocation::Arm,
                TcEffect::ToolToSlot => {
                    if let Some(slot) = &self.slot {
                        tool.location = ToolLocation::Slot(slot.clone());
                    }
                }
                TcEffect::AlertToolUnreachable => {}
            }
        }
        effect
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Empty,
    Filled(EntityId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageState {
    pub slots: Vec<SlotState>,
}

impl StorageState {
    pub fn new(n: usize) -> Self {
        StorageState {
            slots: vec![SlotState::Empty; n],
        }
    }

    pub fn all_filled(&self) -> bool {
        self.slots.iter().all(|s| matches!(s, SlotState::Filled(_)))
    }

    pub fn contains(&self, sample: &EntityId) -> bool {
        self.slots
            .iter()
            .any(|s| matches!(s, SlotState::Filled(x) if x == sample))
    }

    /// Puts the sample in the first empty slot and returns its index. A
    /// sample already stored is not stored twice.
    pub fn store(&mut self, sample: &EntityId) -> Option<usize> {
        if let Some(i) = self
            .slots
            .iter()
            .position(|s| matches!(s, SlotState::Filled(x) if x == sample))
        {
            return Some(i);
        }
        let i = self.slots.iter().position(|s| *s == SlotState::Empty)?;
        self.slots[i] = SlotState::Filled(sample.clone());
        Some(i)
    }

    pub fn empty_all(&mut self) {
        for s in &mut self.slots {
            *s = SlotState::Empty;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScFault {
    ToolNotAssembled,
    OutOfScoopRange,
    StorageFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScState {
    VerifyTool,
    Scoop,
    Transfer,
    Unload,
    Done,
    Fault(ScFault),
}

impl ScState {
    pub const ALL: [ScState; 8] = [
        ScState::VerifyTool,
        ScState::Scoop,
        ScState::Transfer,
        ScState::Unload,
        ScState::Done,
        ScState::Fault(ScFault::ToolNotAssembled),
        ScState::Fault(ScFault::OutOfScoopRange),
        ScState::Fault(ScFault::StorageFull),
    ];
}

/// Observations the sample-collection machine reacts to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScContext {
    pub holding: Option<ToolKind>,
    pub sample_distance: f64,
    pub scoop_range: f64,
    /// The Secondary's storage is within arm reach.
    pub storage_reachable: bool,
}

/// One transition. Only a Shovel passes tool verification; the sample must
/// be within scoop range; unloading fills the first empty slot. `Transfer`
/// waits until the storage is reachable. `Done` and faults absorb.
pub fn sc_step(
    state: ScState,
    ctx: &ScContext,
    storage: &mut StorageState,
    sample: &EntityId,
) -> ScState {
    match state {
        ScState::VerifyTool => {
            if ctx.holding == Some(ToolKind::Shovel) {
                ScState::Scoop
            } else {
                ScState::Fault(ScFault::ToolNotAssembled)
            }
        }
        ScState::Scoop => {
            if ctx.sample_distance <= ctx.scoop_range {
                ScState::Transfer
            } else {
                ScState::Fault(ScFault::OutOfScoopRange)
            }
        }
        ScState::Transfer => {
            if ctx.storage_reachable {
                ScState::Unload
            } else {
                ScState::Transfer
            }
        }
        ScState::Unload => match storage.store(sample) {
            Some(_) => ScState::Done,
            None => ScState::Fault(ScFault::StorageFull),
        },
        s @ (ScState::Done | ScState::Fault(_)) => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn arm(l1: f64, l2: f64) -> ArmSpec {
        ArmSpec {
            l1,
            l2,
            mount_offset: Pose2D::default(),
        }
    }

    #[test]
    fn straight_arm_at_full_extension() {
        match check_reach(&arm(0.5, 0.5), Pose2D::default(), Vec2::new(1.0, 0.0)) {
            ReachResult::Reachable { q1, q2 } => {
                assert!(q2.abs() < 1e-6);
                assert!(q1.abs() < 1e-6);
            }
            r => panic!("{r:?}"),
        }
        assert!(
            !check_reach(&arm(0.5, 0.5), Pose2D::default(), Vec2::new(1.2, 0.0)).is_reachable()
        );
    }

    #[test]
    fn elbow_from_law_of_cosines() {
        match check_reach(&arm(0.6, 0.4), Pose2D::default(), Vec2::new(0.6, 0.4)) {
            ReachResult::Reachable { q2, .. } => assert!((q2 - FRAC_PI_2).abs() < 1e-9),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn forward_kinematics_round_trip() {
        let a = ArmSpec::default();
        let rover = Pose2D::new(3.0, -1.0, 0.7);
        let target = Vec2::new(3.5, -0.2);
        let ReachResult::Reachable { q1, q2 } = check_reach(&a, rover, target) else {
            panic!("target should be reachable")
        };
        let local = Vec2::new(
            a.l1 * q1.cos() + a.l2 * (q1 + q2).cos(),
            a.l1 * q1.sin() + a.l2 * (q1 + q2).sin(),
        );
        let world = arm_base(&a, rover).transform_point(local);
        assert!(world.distance(target) < 1e-9);
    }

    #[test]
    fn inner_hole_is_unreachable() {
        assert!(
            !check_reach(&arm(0.6, 0.4), Pose2D::default(), Vec2::new(0.1, 0.0)).is_reachable()
        );
    }

    fn slot_world(slot_at: Vec2) -> World {
        use crate::world::{CellState, Entity, GridMap, RoverLimits};
        let grid = GridMap::new(20, 20, 1.0, Pose2D::default(), CellState::Free).unwrap();
        let slot = Entity {
            id: "slot".into(),
            pose: Pose2D::new(slot_at.x, slot_at.y, 0.0),
            footprint_radius: 0.1,
            body: EntityBody::ToolSlot {
                carrier: None,
                offset: Pose2D::default(),
                tool: None,
            },
            motion: None,
        };
        World::new(grid, vec![slot], 1.0, RoverLimits::default(), vec![]).unwrap()
    }

    #[test]
    fn localization_noise_is_seeded() {
        let w = slot_world(Vec2::new(5.0, 5.0));
        let base = Pose2D::new(4.0, 5.0, 0.0);
        let exact = localize_tool(
            &w,
            base,
            &"slot".into(),
            0.0,
            2.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(exact.position(), Vec2::new(5.0, 5.0));
        let a = localize_tool(
            &w,
            base,
            &"slot".into(),
            0.01,
            2.0,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = localize_tool(
            &w,
            base,
            &"slot".into(),
            0.01,
            2.0,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.position().distance(Vec2::new(5.0, 5.0)) < 0.1);
        assert_eq!(
            localize_tool(
                &w,
                Pose2D::new(15.0, 5.0, 0.0),
                &"slot".into(),
                0.0,
                2.0,
                &mut ChaCha8Rng::seed_from_u64(1)
            ),
            Err(ManipError::SlotNotVisible("slot".into()))
        );
    }

    fn shovel(slot: &str) -> Tool {
        Tool {
            spec: ToolSpec {
                id: "shovel".into(),
                kind: ToolKind::Shovel,
            },
            location: ToolLocation::Slot(slot.into()),
        }
    }

    #[test]
    fn nominal_mount_and_dismount() {
        let mut tc = ToolChanger {
            state: TcState::Stowed,
            slot: Some("s1".into()),
        };
        let mut tool = shovel("s1");
        for e in [
            TcEvent::MountRequested,
            TcEvent::ArrivedAtSlot,
            TcEvent::PoseEstimated,
            TcEvent::ReachOk,
            TcEvent::Latched,
        ] {
            tc.step(e, Some(&mut tool));
        }
        assert_eq!(tc.state, TcState::Mounted);
        assert_eq!(tool.location, ToolLocation::Arm);
        for e in [
            TcEvent::DismountRequested,
            TcEvent::Unlatched,
            TcEvent::Retreated,
        ] {
            tc.step(e, Some(&mut tool));
        }
        assert_eq!(tc.state, TcState::Stowed);
        assert_eq!(tool, shovel("s1"));
    }

    #[test]
    fn unreachable_tool_faults_and_alerts() {
        let mut s = TcState::Stowed;
        for e in [
            TcEvent::MountRequested,
            TcEvent::ArrivedAtSlot,
            TcEvent::PoseEstimated,
        ] {
            s = tc_step(s, e).0;
        }
        assert_eq!(
            tc_step(s, TcEvent::Unreachable),
            (
                TcState::Fault(TcFault::Unreachable),
                Some(TcEffect::AlertToolUnreachable)
            )
        );
    }

    #[test]
    fn double_mount_faults() {
        assert_eq!(
            tc_step(TcState::Mounted, TcEvent::MountRequested).0,
            TcState::Fault(TcFault::ToolAlreadyMounted)
        );
    }

    #[test]
    fn tool_changer_is_total_and_closed() {
        for s in TcState::ALL {
            for e in TcEvent::ALL {
                let (next, _) = tc_step(s, e);
                assert!(TcState::ALL.contains(&next), "{s:?} + {e:?} -> {next:?}");
            }
        }
    }

    fn ctx(holding: Option<ToolKind>, near: bool) -> ScContext {
        ScContext {
            holding,
            sample_distance: if near { 0.5 } else { 3.0 },
            scoop_range: 0.8,
            storage_reachable: true,
        }
    }

    #[test]
    fn brush_fails_verification() {
        let mut st = StorageState::new(2);
        assert_eq!(
            sc_step(
                ScState::VerifyTool,
                &ctx(Some(ToolKind::Brush), true),
                &mut st,
                &"x".into()
            ),
            ScState::Fault(ScFault::ToolNotAssembled)
        );
    }

    #[test]
    fn unload_takes_first_empty_slot() {
        let mut st = StorageState {
            slots: vec![SlotState::Filled("a".into()), SlotState::Empty],
        };
        let s = sc_step(
            ScState::Unload,
            &ctx(Some(ToolKind::Shovel), true),
            &mut st,
            &"b".into(),
        );
        assert_eq!(s, ScState::Done);
        assert_eq!(st.slots[1], SlotState::Filled("b".into()));
        let s = sc_step(
            ScState::Unload,
            &ctx(Some(ToolKind::Shovel), true),
            &mut st,
            &"c".into(),
        );
        assert_eq!(s, ScState::Fault(ScFault::StorageFull));
    }

    #[test]
    fn sample_collection_is_total_and_closed() {
        for s in ScState::ALL {
            for holding in [None, Some(ToolKind::Shovel), Some(ToolKind::Brush)] {
                for near in [false, true] {
                    for reachable in [false, true] {
                        for full in [false, true] {
                            let mut st = if full {
                                StorageState {
                                    slots: vec![SlotState::Filled("z".into())],
                                }
                            } else {
                                StorageState::new(1)
                            };
                            let c = ScContext {
                                storage_reachable: reachable,
                                ..ctx(holding, near)
                            };
                            let next = sc_step(s, &c, &mut st, &"x".into());
                            assert!(ScState::ALL.contains(&next));
                        }
                    }
                }
            }
        }
    }
}
