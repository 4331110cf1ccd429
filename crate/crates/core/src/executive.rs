//! On-board E4 executive for the Leader and Secondary agents: goal
//! decomposition, sequential task execution, interrupts and replanning.
//!
//! One `Executive` per rover. The kernel feeds it inputs (accepted goals,
//! observations, interrupts) and applies what it returns (a velocity
//! command, outbound messages, goal reports, world effects).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manip::{
    arm_base, check_reach, localize_tool, sc_step, ManipError, ReachResult, ScContext, ScFault,
    ScState, StorageState, TcEffect, TcEvent, TcState, ToolChanger,
};
use crate::mas::{
    Area, AutonomyLevel, FailureReason, Goal, GoalId, GoalSpec, GoalStatus, GoalStatusReport,
    MessageBody, Observation, SampleTarget, Telecommand,
};
use crate::nav::{self, NavConfig, NavError, Path};
use crate::netsim::EndpointId;
use crate::percept::{inspect_panel, DefectReport};
use crate::supervise::{ErrorReport, Severity};
use crate::world::{
    fnv1a, normalize_angle, ArmSpec, CellState, EntityBody, EntityId, EntityKind, GridMap, Pose2D,
    Role, ToolKind, ToolSpec, Vec2, VelocityCommand, World,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    /// VisNIR score at or above which a sample is worth storing.
    pub interest_threshold: f64,
    pub max_retries: u32,
    pub inspect_range: f64,
    /// Stand-off from a sample point when analysing it.
    pub analyze_range: f64,
    pub scoop_range: f64,
    pub waypoint_tolerance: f64,
    pub rendezvous_radius: f64,
    pub rendezvous_timeout_ticks: u64,
    pub base_radius: f64,
    pub localize_sigma: f64,
    pub localize_range: f64,
    pub facing_tolerance: f64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            interest_threshold: 0.7,
            max_retries: 3,
            inspect_range: 1.5,
            analyze_range: 0.5,
            scoop_range: 0.8,
            waypoint_tolerance: 0.5,
            rendezvous_radius: 1.0,
            rendezvous_timeout_ticks: 400,
            base_radius: 1.0,
            localize_sigma: 0.01,
            localize_range: 3.0,
            facing_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskStatus {
    Waiting,
    Active,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Signal {
    SecondaryArrived,
    SampleStored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TaskKind {
    NavigateTo {
        target: Vec2,
        tolerance: f64,
    },
    SweepArea {
        waypoints: Vec<Vec2>,
    },
    InspectPanel {
        panel: EntityId,
    },
    AnalyzePoint {
        sample: EntityId,
        point: Vec2,
    },
    RequestSecondary {
        sample: EntityId,
    },
    RendezvousAwait {
        signal: Signal,
    },
    MountTool {
        tool: ToolKind,
    },
    CollectSample {
        sample: EntityId,
        point: Vec2,
    },
    StoreToSlot {
        sample: EntityId,
    },
    ReturnToBase {
        base: Vec2,
    },
    AwaitStorageEmptied,
    /// Background watch; `None` lasts as long as its plan.
    Supervise {
        duration_ticks: Option<u64>,
    },
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::NavigateTo { .. } => "NavigateTo",
            TaskKind::SweepArea { .. } => "SweepArea",
            TaskKind::InspectPanel { .. } => "InspectPanel",
            TaskKind::AnalyzePoint { .. } => "AnalyzePoint",
            TaskKind::RequestSecondary { .. } => "RequestSecondary",
            TaskKind::RendezvousAwait { .. } => "RendezvousAwait",
            TaskKind::MountTool { .. } => "MountTool",
            TaskKind::CollectSample { .. } => "CollectSample",
            TaskKind::StoreToSlot { .. } => "StoreToSlot",
            TaskKind::ReturnToBase { .. } => "ReturnToBase",
            TaskKind::AwaitStorageEmptied => "AwaitStorageEmptied",
            TaskKind::Supervise { .. } => "Supervise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub status: TaskStatus,
    pub attempts: u32,
}

impl Task {
    pub fn new(kind: TaskKind) -> Self {
        Task {
            kind,
            status: TaskStatus::Waiting,
            attempts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: u64,
    pub root_goal_id: GoalId,
    pub goal: Goal,
    /// Executed in order; tasks may be inserted after the cursor.
    pub tasks: Vec<Task>,
    pub cursor: usize,
    pub background: Option<Task>,
    /// Storage decision runs once the rendezvous completes.
    pub decide_after_store: bool,
    /// StoreSample goal requested from the Secondary for the current sample.
    pub store_goal: Option<GoalId>,
}

impl Plan {
    pub fn current(&self) -> Option<&Task> {
        self.tasks.get(self.cursor)
    }

    pub fn task_names(&self) -> Vec<&'static str> {
        self.tasks.iter().map(|t| t.kind.name()).collect()
    }
}

/// Parameters that shape decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanParams {
    /// Boustrophedon lane spacing, the sensor range.
    pub lane_spacing: f64,
    pub arrive_tolerance: f64,
    pub analyze_range: f64,
    pub rendezvous_radius: f64,
}

/// Lanes parallel to x, alternating direction, evenly spaced at most
/// `spacing` apart and half a gap inside the area.
pub fn boustrophedon(area: &Area, spacing: f64) -> Vec<Vec2> {
    let height = (area.max.y - area.min.y).max(0.0);
    let lanes = ((height / spacing.max(1e-6)).ceil() as usize).max(1);
    let gap = height / lanes as f64;
    let mut out = Vec::with_capacity(2 * lanes);
    for i in 0..lanes {
        let y = area.min.y + gap * (i as f64 + 0.5);
        let (a, b) = (Vec2::new(area.min.x, y), Vec2::new(area.max.x, y));
        if i % 2 == 0 {
            out.extend([a, b]);
        } else {
            out.extend([b, a]);
        }
    }
    out.dedup();
    out
}

/// Sweep waypoints split so that each sample is analysed right after the
/// waypoint that starts its nearest sweep segment.
fn interleave(waypoints: &[Vec2], samples: &[SampleTarget]) -> Vec<TaskKind> {
    let mut attach: Vec<(usize, f64, usize)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if waypoints.len() < 2 {
                return (0, 0.0, i);
            }
            let mut best = (0, 0.0, f64::INFINITY);
            for (k, w) in waypoints.windows(2).enumerate() {
                let d = w[1] - w[0];
                let len2 = d.dot(d);
                let t = if len2 > 0.0 {
                    ((s.point - w[0]).dot(d) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dist = (w[0] + d * t).distance(s.point);
                if dist < best.2 {
                    best = (k, t, dist);
                }
            }
            (best.0, best.1, i)
        })
        .collect();
    attach.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tasks = Vec::new();
    let mut next = 0;
    for (k, _, i) in attach {
        if k + 1 > next && !waypoints.is_empty() {
            tasks.push(TaskKind::SweepArea {
                waypoints: waypoints[next..=k].to_vec(),
            });
            next = k + 1;
        }
        tasks.push(TaskKind::AnalyzePoint {
            sample: samples[i].sample.clone(),
            point: samples[i].point,
        });
    }
    if next < waypoints.len() {
        tasks.push(TaskKind::SweepArea {
            waypoints: waypoints[next..].to_vec(),
        });
    }
    tasks
}

/// Tasks the Leader runs to have an interesting sample stored.
fn store_chain(sample: &EntityId, point: Vec2) -> Vec<TaskKind> {
    vec![
        TaskKind::RequestSecondary {
            sample: sample.clone(),
        },
        TaskKind::RendezvousAwait {
            signal: Signal::SecondaryArrived,
        },
        TaskKind::MountTool {
            tool: ToolKind::Shovel,
        },
        TaskKind::CollectSample {
            sample: sample.clone(),
            point,
        },
        TaskKind::StoreToSlot {
            sample: sample.clone(),
        },
    ]
}

/// Turns an accepted goal into a plan for an agent of `role`. Leaders never
/// get StoreSample work and Secondaries never analyse points.
pub fn decompose(
    goal: &Goal,
    role: Role,
    plan_id: u64,
    p: &PlanParams,
) -> Result<Plan, FailureReason> {
    let mut background = None;
    let mut decide_after_store = false;
    let kinds: Vec<TaskKind> = match (&goal.spec, role) {
        (GoalSpec::InspectPanels { targets }, _) => {
            background = Some(Task::new(TaskKind::Supervise {
                duration_ticks: None,
            }));
            targets
                .iter()
                .flat_map(|t| {
                    [
                        TaskKind::NavigateTo {
                            target: t.point,
                            tolerance: p.arrive_tolerance,
                        },
                        TaskKind::InspectPanel {
                            panel: t.panel.clone(),
                        },
                    ]
                })
                .collect()
        }
        (GoalSpec::MapAndSample { area, samples }, Role::Leader) => {
            interleave(&boustrophedon(area, p.lane_spacing), samples)
        }
        (GoalSpec::MapAndSample { area, .. }, Role::Secondary) => vec![TaskKind::SweepArea {
            waypoints: boustrophedon(area, p.lane_spacing),
        }],
        (GoalSpec::StoreSample { rendezvous, .. }, Role::Secondary) => {
            decide_after_store = true;
            vec![
                TaskKind::NavigateTo {
                    target: *rendezvous,
                    tolerance: p.rendezvous_radius,
                },
                TaskKind::RendezvousAwait {
                    signal: Signal::SampleStored,
                },
            ]
        }
        (GoalSpec::ReturnToBase { base }, _) => {
            vec![
                TaskKind::ReturnToBase { base: *base },
                TaskKind::AwaitStorageEmptied,
            ]
        }
        (GoalSpec::NavigateTo { target }, _) => vec![TaskKind::NavigateTo {
            target: *target,
            tolerance: p.arrive_tolerance,
        }],
        (GoalSpec::CollectSample { sample, point }, Role::Leader) => {
            let mut v = vec![TaskKind::NavigateTo {
                target: *point,
                tolerance: p.analyze_range,
            }];
            v.extend(store_chain(sample, *point));
            v
        }
        (GoalSpec::Supervise { duration_ticks }, _) => vec![TaskKind::Supervise {
            duration_ticks: Some(*duration_ticks),
        }],
        _ => return Err(FailureReason::UnknownGoalKind),
    };
    Ok(Plan {
        plan_id,
        root_goal_id: goal.goal_id,
        goal: goal.clone(),
        tasks: kinds.into_iter().map(Task::new).collect(),
        cursor: 0,
        background,
        decide_after_store,
        store_goal: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreDecision {
    ContinueMapping,
    ReturnToBase,
}

/// Return to base once every storage slot is filled.
pub fn decide_after_store(storage: &StorageState) -> StoreDecision {
    if storage.all_filled() {
        StoreDecision::ReturnToBase
    } else {
        StoreDecision::ContinueMapping
    }
}

/// Interrupt classes, highest priority first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Priority {
    Emergency,
    OperatorCommand,
    PlanStep,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecInput {
    Goal(Goal),
    Observation {
        from: EndpointId,
        observation: Observation,
    },
    Telecommand(Telecommand),
    /// An emergency case opened (`open`) or reached a terminal state.
    Emergency {
        case_id: u64,
        open: bool,
    },
    StorageEmptied,
    Collision {
        at: Vec2,
    },
}

impl ExecInput {
    pub fn priority(&self) -> Priority {
        match self {
            ExecInput::Emergency { .. } => Priority::Emergency,
            ExecInput::Telecommand(_) => Priority::OperatorCommand,
            _ => Priority::PlanStep,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub recipient: EndpointId,
    pub goal_id: Option<GoalId>,
    pub body: MessageBody,
}

/// Changes the executive makes to shared world state.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "effect")]
pub enum WorldEffect {
    ToolToArm { slot: EntityId },
    ToolToSlot { slot: EntityId },
}

/// Log-worthy executive happenings.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type")]
pub enum ExecEvent {
    PlanCreated {
        goal_id: GoalId,
        plan_id: u64,
        tasks: Vec<&'static str>,
        background: Option<&'static str>,
    },
    PlanSuspended {
        goal_id: GoalId,
        plan_id: u64,
        by: GoalId,
    },
    PlanResumed {
        goal_id: GoalId,
        plan_id: u64,
    },
    TaskStarted {
        goal_id: GoalId,
        index: usize,
        task: TaskKind,
    },
    TaskDone {
        goal_id: GoalId,
        index: usize,
        task: &'static str,
    },
    TaskFailed {
        goal_id: GoalId,
        index: usize,
        task: &'static str,
        reason: FailureReason,
    },
    TasksInserted {
        goal_id: GoalId,
        at: usize,
        tasks: Vec<&'static str>,
    },
    PathPlanned {
        goal_id: GoalId,
        target: Vec2,
        length: f64,
        points: usize,
        revision: u64,
    },
    Replan {
        goal_id: GoalId,
        task: &'static str,
        attempt: u32,
        reason: FailureReason,
        revision: u64,
    },
    WaypointSkipped {
        goal_id: GoalId,
        waypoint: Vec2,
        reason: FailureReason,
    },
    SampleSkipped {
        goal_id: GoalId,
        sample: EntityId,
        reason: Option<FailureReason>,
    },
    DefectReport(DefectReport),
    SampleAnalysis {
        sample: EntityId,
        interest_score: f64,
        interesting: bool,
    },
    ToolChanger {
        slot: EntityId,
        event: TcEvent,
        from: TcState,
        to: TcState,
    },
    ToolUnreachable {
        slot: EntityId,
        distance: f64,
        retry: bool,
    },
    SampleCollection {
        sample: EntityId,
        from: ScState,
        to: ScState,
    },
    SampleStored {
        goal_id: GoalId,
        sample: EntityId,
        storage: EntityId,
        slot: usize,
    },
    StorageDecision {
        goal_id: GoalId,
        decision: StoreDecision,
    },
    Halted {
        priority: Priority,
    },
    Resumed,
    TelecommandApplied {
        command: Telecommand,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecOutput {
    pub command: VelocityCommand,
    pub messages: Vec<Outbound>,
    /// Status reports with the originator they are owed to.
    pub reports: Vec<(GoalStatusReport, EndpointId)>,
    /// Goals this agent issued to others (already in `messages`).
    pub goals_issued: Vec<(Goal, EntityId)>,
    pub events: Vec<ExecEvent>,
    pub errors: Vec<ErrorReport>,
    pub effects: Vec<WorldEffect>,
}

/// Shared state an executive reads or touches during its tick.
pub struct TickContext<'a> {
    pub tick: u64,
    pub world: &'a World,
    pub storages: &'a mut BTreeMap<EntityId, StorageState>,
    /// Last goal id handed out; incremented before use.
    pub goal_ids: &'a mut u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSetup {
    pub id: EntityId,
    pub role: Role,
    pub level: AutonomyLevel,
    pub sensor_range: f64,
    pub arm: Option<ArmSpec>,
    /// Rover of the other role, if any.
    pub partner: Option<EntityId>,
}

#[derive(Debug, Clone)]
struct NavRun {
    target: Vec2,
    tolerance: f64,
    path: Option<Path>,
    revision: u64,
    attempts: u32,
}

impl NavRun {
    fn new(target: Vec2, tolerance: f64) -> Self {
        NavRun {
            target,
            tolerance,
            path: None,
            revision: 0,
            attempts: 0,
        }
    }
}

enum NavStep {
    Moving(VelocityCommand),
    Arrived,
    Failed(FailureReason),
}

#[derive(Debug, Clone)]
struct MountRun {
    tc: ToolChanger,
    estimate: Option<Vec2>,
    repositioned: bool,
    reposition: Option<NavRun>,
}

/// Per-task scratch state, reset whenever a task starts.
#[derive(Debug, Clone, Default)]
struct Run {
    started: u64,
    nav: Option<NavRun>,
    waypoint: usize,
    mount: Option<MountRun>,
    announced: bool,
}

enum Step {
    Continue(VelocityCommand),
    Done,
    Failed(FailureReason),
}

#[derive(Debug, Clone, Copy)]
struct Override {
    command: VelocityCommand,
    until: u64,
}

fn endpoint(id: &EntityId) -> EndpointId {
    EndpointId::new(id.as_str())
}

fn nav_failure(e: NavError) -> FailureReason {
    match e {
        NavError::GoalInObstacle => FailureReason::GoalInObstacle,
        NavError::Unreachable | NavError::OutOfBounds => FailureReason::Unreachable,
    }
}

/// Whether the part of `path` still ahead of `pos` crosses a known obstacle.
pub fn path_blocked(known: &GridMap, path: &Path, pos: Vec2) -> bool {
    let closest = path
        .points
        .iter()
        .enumerate()
        .min_by(|a, b| {
            a.1.distance(pos)
                .total_cmp(&b.1.distance(pos))
                .then(b.0.cmp(&a.0))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let step = known.resolution() / 2.0;
    let blocked = |p: Vec2| {
        known
            .world_to_cell(p)
            .is_ok_and(|c| known.get(c) == CellState::Obstacle)
    };
    let ahead = &path.points[closest.saturating_sub(1)..];
    if ahead.len() == 1 {
        return blocked(ahead[0]);
    }
    ahead.windows(2).any(|w| {
        let n = (w[0].distance(w[1]) / step).ceil().max(1.0) as usize;
        (0..=n).any(|k| blocked(w[0] + (w[1] - w[0]) * (k as f64 / n as f64)))
    })
}

#[derive(Debug, Clone)]
pub struct Executive {
    setup: AgentSetup,
    config: ExecConfig,
    nav: NavConfig,
    level: AutonomyLevel,
    known: GridMap,
    revision: u64,
    plan: Option<Plan>,
    suspended: Vec<Plan>,
    queue: VecDeque<Goal>,
    emergencies: BTreeSet<u64>,
    halted: bool,
    operator: Option<Override>,
    run: Run,
    sc_state: Option<ScState>,
    holding: Option<ToolSpec>,
    signals: BTreeSet<(Signal, GoalId)>,
    storage_emptied: bool,
    collided: bool,
    rng: ChaCha8Rng,
    next_plan: u64,
}

impl Executive {
    /// `known` starts as the agent's prior map, usually all Unknown.
    pub fn new(
        setup: AgentSetup,
        config: ExecConfig,
        nav: NavConfig,
        known: GridMap,
        seed: u64,
    ) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(setup.id.as_str().as_bytes()));
        Executive {
            level: setup.level,
            setup,
            config,
            nav,
            known,
            revision: 0,
            plan: None,
            suspended: Vec::new(),
            queue: VecDeque::new(),
            emergencies: BTreeSet::new(),
            halted: false,
            operator: None,
            run: Run::default(),
            sc_state: None,
            holding: None,
            signals: BTreeSet::new(),
            storage_emptied: false,
            collided: false,
            rng,
            next_plan: 1,
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.setup.id
    }

    pub fn endpoint(&self) -> EndpointId {
        endpoint(&self.setup.id)
    }

    pub fn role(&self) -> Role {
        self.setup.role
    }

    pub fn level(&self) -> AutonomyLevel {
        self.level
    }

    pub fn set_level(&mut self, level: AutonomyLevel) {
        self.level = level;
    }

    pub fn known(&self) -> &GridMap {
        &self.known
    }

    pub fn known_mut(&mut self) -> &mut GridMap {
        &mut self.known
    }

    /// Bumped whenever a cell of the known map changes state.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn plan(&self) -> Option<&Plan> {
        self.plan.as_ref()
    }

    /// Path of the navigation currently in progress.
    pub fn current_path(&self) -> Option<&Path> {
        self.run
            .nav
            .as_ref()
            .or_else(|| self.run.mount.as_ref().and_then(|m| m.reposition.as_ref()))
            .and_then(|n| n.path.as_ref())
    }

    pub fn suspended(&self) -> &[Plan] {
        &self.suspended
    }

    pub fn queued(&self) -> impl Iterator<Item = &Goal> {
        self.queue.iter()
    }

    pub fn holding(&self) -> Option<&ToolSpec> {
        self.holding.as_ref()
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn is_idle(&self) -> bool {
        self.plan.is_none() && self.queue.is_empty() && self.suspended.is_empty()
    }

    pub fn plan_params(&self) -> PlanParams {
        PlanParams {
            lane_spacing: self.setup.sensor_range,
            arrive_tolerance: self.nav.goal_tolerance,
            analyze_range: self.config.analyze_range,
            rendezvous_radius: self.config.rendezvous_radius,
        }
    }

    /// Writes sensed cells into the known map; returns how many changed.
    pub fn integrate(&mut self, cells: &[(crate::world::CellIndex, CellState)]) -> usize {
        let mut changed = 0;
        for &(c, s) in cells {
            if s != CellState::Unknown && self.known.get(c) != s {
                self.known.set(c, s);
                changed += 1;
            }
        }
        if changed > 0 {
            self.revision += 1;
        }
        changed
    }

    /// Adopts every known cell of a fused map; returns how many changed.
    pub fn adopt(&mut self, fused: &GridMap) -> usize {
        let mut changed = 0;
        for i in 0..fused.len() {
            let c = fused.cell_of(i);
            let s = fused.get(c);
            if s != CellState::Unknown && self.known.get(c) != s {
                self.known.set(c, s);
                changed += 1;
            }
            if s != CellState::Unknown {
                self.known.set_label(c, fused.label(c));
            }
        }
        if changed > 0 {
            self.revision += 1;
        }
        changed
    }

    fn pose(&self, world: &World) -> Pose2D {
        world
            .entity(&self.setup.id)
            .map(|e| e.pose)
            .unwrap_or_default()
    }

    fn report(&mut self, status: GoalStatus, reason: Option<FailureReason>, out: &mut ExecOutput) {
        let Some(plan) = self.plan.as_mut() else {
            return;
        };
        if let Ok(r) = crate::mas::update_goal_status(&mut plan.goal, status, reason) {
            out.reports.push((r, plan.goal.originator.clone()));
        }
    }

    pub fn tick(&mut self, mut inputs: Vec<ExecInput>, ctx: &mut TickContext) -> ExecOutput {
        let mut out = ExecOutput::default();
        inputs.sort_by_key(|i| i.priority());
        for input in inputs {
            self.accept_input(input, ctx, &mut out);
        }
        if !self.emergencies.is_empty() {
            if !self.halted {
                self.halted = true;
                out.events.push(ExecEvent::Halted {
                    priority: Priority::Emergency,
                });
            }
            out.command = VelocityCommand::STOP;
            return out;
        }
        if self.halted {
            self.halted = false;
            out.events.push(ExecEvent::Resumed);
        }
        if let Some(o) = self.operator {
            if ctx.tick < o.until {
                out.command = o.command;
                return out;
            }
            self.operator = None;
        }
        if self.plan.is_none() {
            self.start_next(ctx, &mut out);
        }
        if self.plan.is_some() {
            out.command = self.step_plan(ctx, &mut out);
        }
        self.collided = false;
        out
    }

    fn accept_input(&mut self, input: ExecInput, ctx: &mut TickContext, out: &mut ExecOutput) {
        match input {
            ExecInput::Emergency { case_id, open } => {
                if open {
                    self.emergencies.insert(case_id);
                } else {
                    self.emergencies.remove(&case_id);
                }
            }
            ExecInput::Telecommand(cmd) => {
                if self.level == AutonomyLevel::E4 {
                    return;
                }
                let (command, until) = match cmd {
                    Telecommand::Drive {
                        v,
                        omega,
                        duration_ticks,
                    } => (VelocityCommand::new(v, omega), ctx.tick + duration_ticks),
                    Telecommand::Halt => (VelocityCommand::STOP, ctx.tick + 1),
                };
                self.operator = Some(Override { command, until });
                out.events
                    .push(ExecEvent::TelecommandApplied { command: cmd });
            }
            ExecInput::Goal(goal) => {
                let preempts = goal.kind() == crate::mas::GoalKind::StoreSample;
                match &self.plan {
                    Some(current)
                        if preempts && current.goal.kind() != crate::mas::GoalKind::StoreSample =>
                    {
                        let mut current = self.plan.take().expect("matched Some");
                        out.events.push(ExecEvent::PlanSuspended {
                            goal_id: current.root_goal_id,
                            plan_id: current.plan_id,
                            by: goal.goal_id,
                        });
                        if let Some(t) = current.tasks.get_mut(current.cursor) {
                            t.status = TaskStatus::Waiting;
                        }
                        self.suspended.push(current);
                        self.run = Run::default();
                        self.begin(goal, ctx, out);
                    }
                    Some(_) => self.queue.push_back(goal),
                    None => self.begin(goal, ctx, out),
                }
            }
            ExecInput::Observation { observation, .. } => match observation {
                Observation::SecondaryArrived { goal_id, .. } => {
                    self.signals.insert((Signal::SecondaryArrived, goal_id));
                }
                Observation::SampleStored { goal_id, .. } => {
                    self.signals.insert((Signal::SampleStored, goal_id));
                }
                _ => {}
            },
            ExecInput::StorageEmptied => self.storage_emptied = true,
            ExecInput::Collision { at } => {
                self.collided = true;
                // Bump sensing: the cell just ahead of the stop point is solid.
                let theta = self.pose(ctx.world).theta;
                let ahead =
                    at + Vec2::new(theta.cos(), theta.sin()) * (self.known.resolution() / 2.0);
                if let (Ok(c), Ok(here)) = (
                    self.known.world_to_cell(ahead),
                    self.known.world_to_cell(at),
                ) {
                    if c != here && self.known.get(c) != CellState::Obstacle {
                        self.known.set(c, CellState::Obstacle);
                        self.revision += 1;
                    }
                }
            }
        }
    }

    /// Next work when idle: queued StoreSample goals first, then the most
    /// recently suspended plan, then other queued goals in arrival order.
    fn start_next(&mut self, ctx: &mut TickContext, out: &mut ExecOutput) {
        if let Some(i) = self
            .queue
            .iter()
            .position(|g| g.kind() == crate::mas::GoalKind::StoreSample)
        {
            let goal = self.queue.remove(i).expect("index from position");
            self.begin(goal, ctx, out);
            return;
        }
        if let Some(plan) = self.suspended.pop() {
            out.events.push(ExecEvent::PlanResumed {
                goal_id: plan.root_goal_id,
                plan_id: plan.plan_id,
            });
            self.plan = Some(plan);
            self.run = Run::default();
            self.activate(ctx.tick, out);
            return;
        }
        if let Some(goal) = self.queue.pop_front() {
            self.begin(goal, ctx, out);
        }
    }

    fn begin(&mut self, goal: Goal, ctx: &mut TickContext, out: &mut ExecOutput) {
        let plan_id = self.next_plan;
        self.next_plan += 1;
        let params = self.plan_params();
        match decompose(&goal, self.setup.role, plan_id, &params) {
            Ok(plan) => {
                out.events.push(ExecEvent::PlanCreated {
                    goal_id: plan.root_goal_id,
                    plan_id,
                    tasks: plan.task_names(),
                    background: plan.background.as_ref().map(|t| t.kind.name()),
                });
                self.plan = Some(plan);
                self.report(GoalStatus::Active, None, out);
                if let Some(bg) = self.plan.as_mut().and_then(|p| p.background.as_mut()) {
                    bg.status = TaskStatus::Active;
                }
                self.run = Run::default();
                self.activate(ctx.tick, out);
            }
            Err(reason) => {
                // No plan exists; report through a throwaway plan shell.
                self.plan = Some(Plan {
                    plan_id,
                    root_goal_id: goal.goal_id,
                    goal,
                    tasks: Vec::new(),
                    cursor: 0,
                    background: None,
                    decide_after_store: false,
                    store_goal: None,
                });
                self.report(GoalStatus::Active, None, out);
                self.finish(Some(reason), out);
            }
        }
    }

    fn activate(&mut self, tick: u64, out: &mut ExecOutput) {
        let Some(plan) = self.plan.as_mut() else {
            return;
        };
        self.run = Run {
            started: tick,
            ..Run::default()
        };
        if let Some(task) = plan.tasks.get_mut(plan.cursor) {
            task.status = TaskStatus::Active;
            out.events.push(ExecEvent::TaskStarted {
                goal_id: plan.root_goal_id,
                index: plan.cursor,
                task: task.kind.clone(),
            });
        }
    }

    /// Closes the active plan with Achieved (`None`) or Failed(reason).
    fn finish(&mut self, failure: Option<FailureReason>, out: &mut ExecOutput) {
        if let Some(bg) = self.plan.as_mut().and_then(|p| p.background.as_mut()) {
            bg.status = if failure.is_some() {
                TaskStatus::Failed
            } else {
                TaskStatus::Done
            };
        }
        match failure {
            None => self.report(GoalStatus::Achieved, None, out),
            Some(reason) => {
                self.report(GoalStatus::Failed, Some(reason), out);
                out.errors.push(ErrorReport {
                    source: self.setup.id.to_string(),
                    code: reason,
                    severity: Severity::Critical,
                    handled: false,
                });
            }
        }
        self.plan = None;
        self.run = Run::default();
        self.sc_state = None;
    }

    fn step_plan(&mut self, ctx: &mut TickContext, out: &mut ExecOutput) -> VelocityCommand {
        let (kind, index, goal_id) = {
            let plan = self.plan.as_ref().expect("caller checked");
            match plan.current() {
                Some(t) => (t.kind.clone(), plan.cursor, plan.root_goal_id),
                None => {
                    self.finish(None, out);
                    return VelocityCommand::STOP;
                }
            }
        };
        let step = self.step_task(&kind, goal_id, ctx, out);
        match step {
            Step::Continue(cmd) => cmd,
            Step::Done => {
                let plan = self.plan.as_mut().expect("still active");
                plan.tasks[index].status = TaskStatus::Done;
                out.events.push(ExecEvent::TaskDone {
                    goal_id,
                    index,
                    task: kind.name(),
                });
                plan.cursor += 1;
                if plan.cursor >= plan.tasks.len() {
                    self.finish(None, out);
                } else {
                    self.activate(ctx.tick, out);
                }
                VelocityCommand::STOP
            }
            Step::Failed(reason) => {
                let plan = self.plan.as_mut().expect("still active");
                plan.tasks[index].status = TaskStatus::Failed;
                out.events.push(ExecEvent::TaskFailed {
                    goal_id,
                    index,
                    task: kind.name(),
                    reason,
                });
                self.finish(Some(reason), out);
                VelocityCommand::STOP
            }
        }
    }

    /// Drives towards `run.target`, planning on first use and replanning
    /// when the path ahead meets a newly known obstacle. A replan needs a
    /// strictly newer map than the one the current path came from.
    fn nav_step(
        &mut self,
        run: &mut NavRun,
        pose: Pose2D,
        goal_id: GoalId,
        task: &'static str,
        out: &mut ExecOutput,
    ) -> NavStep {
        let pos = pose.position();
        if pos.distance(run.target) <= run.tolerance {
            return NavStep::Arrived;
        }
        if let Some(path) = &run.path {
            if !(self.collided || path_blocked(&self.known, path, pos)) {
                return NavStep::Moving(nav::follow(path, pose, &self.nav));
            }
            if self.revision <= run.revision {
                return NavStep::Failed(FailureReason::PathBlocked);
            }
            run.attempts += 1;
            if let Some(t) = self.plan.as_mut().and_then(|p| p.tasks.get_mut(p.cursor)) {
                t.attempts = t.attempts.max(run.attempts);
            }
            if run.attempts > self.config.max_retries {
                return NavStep::Failed(FailureReason::PathBlocked);
            }
            out.events.push(ExecEvent::Replan {
                goal_id,
                task,
                attempt: run.attempts,
                reason: FailureReason::PathBlocked,
                revision: self.revision,
            });
        }
        match nav::plan(&self.known, pos, run.target, &self.nav) {
            Ok(path) => {
                out.events.push(ExecEvent::PathPlanned {
                    goal_id,
                    target: run.target,
                    length: path.total_length,
                    points: path.points.len(),
                    revision: self.revision,
                });
                let cmd = nav::follow(&path, pose, &self.nav);
                run.path = Some(path);
                run.revision = self.revision;
                NavStep::Moving(cmd)
            }
            Err(e) => NavStep::Failed(nav_failure(e)),
        }
    }

    fn insert_after_cursor(&mut self, kinds: Vec<TaskKind>, out: &mut ExecOutput) {
        let plan = self.plan.as_mut().expect("active plan");
        let at = plan.cursor + 1;
        out.events.push(ExecEvent::TasksInserted {
            goal_id: plan.root_goal_id,
            at,
            tasks: kinds.iter().map(|k| k.name()).collect(),
        });
        for (i, k) in kinds.into_iter().enumerate() {
            plan.tasks.insert(at + i, Task::new(k));
        }
    }

    fn drive(
        &mut self,
        target: Vec2,
        tolerance: f64,
        pose: Pose2D,
        goal_id: GoalId,
        task: &'static str,
        out: &mut ExecOutput,
    ) -> Step {
        let mut run = self
            .run
            .nav
            .take()
            .unwrap_or_else(|| NavRun::new(target, tolerance));
        let step = self.nav_step(&mut run, pose, goal_id, task, out);
        self.run.nav = Some(run);
        match step {
            NavStep::Moving(cmd) => Step::Continue(cmd),
            NavStep::Arrived => Step::Done,
            NavStep::Failed(reason) => Step::Failed(reason),
        }
    }

    /// Visits waypoints in order; unreachable ones are skipped, not fatal.
    fn sweep(
        &mut self,
        waypoints: &[Vec2],
        pose: Pose2D,
        goal_id: GoalId,
        out: &mut ExecOutput,
    ) -> Step {
        while let Some(&wp) = waypoints.get(self.run.waypoint) {
            match self.drive(
                wp,
                self.config.waypoint_tolerance,
                pose,
                goal_id,
                "SweepArea",
                out,
            ) {
                Step::Continue(cmd) => return Step::Continue(cmd),
                Step::Done => {}
                Step::Failed(reason) => out.events.push(ExecEvent::WaypointSkipped {
                    goal_id,
                    waypoint: wp,
                    reason,
                }),
            }
            self.run.waypoint += 1;
            self.run.nav = None;
        }
        Step::Done
    }

    fn originator(&self) -> EndpointId {
        self.plan
            .as_ref()
            .map(|p| p.goal.originator.clone())
            .unwrap_or_else(|| EndpointId::new("mission_control"))
    }

    fn arm_point(&self, pose: Pose2D) -> Vec2 {
        match &self.setup.arm {
            Some(arm) => arm_base(arm, pose).position(),
            None => pose.position(),
        }
    }

    fn step_task(
        &mut self,
        kind: &TaskKind,
        goal_id: GoalId,
        ctx: &mut TickContext,
        out: &mut ExecOutput,
    ) -> Step {
        let pose = self.pose(ctx.world);
        let name = kind.name();
        match kind {
            TaskKind::NavigateTo { target, tolerance } => {
                self.drive(*target, *tolerance, pose, goal_id, name, out)
            }
            TaskKind::ReturnToBase { base } => {
                self.drive(*base, self.config.base_radius, pose, goal_id, name, out)
            }
            TaskKind::SweepArea { waypoints } => self.sweep(waypoints, pose, goal_id, out),
            TaskKind::InspectPanel { panel } => {
                let Some(p) = ctx.world.entity(panel) else {
                    return Step::Failed(FailureReason::OutOfInspectRange);
                };
                match inspect_panel(p, pose, self.config.inspect_range, ctx.tick) {
                    Ok(reports) => {
                        let to = self.originator();
                        for r in reports {
                            out.events.push(ExecEvent::DefectReport(r.clone()));
                            out.messages.push(Outbound {
                                recipient: to.clone(),
                                goal_id: Some(goal_id),
                                body: MessageBody::Observation(Observation::Defect(r)),
                            });
                        }
                        Step::Done
                    }
                    Err(_) => Step::Failed(FailureReason::OutOfInspectRange),
                }
            }
            TaskKind::AnalyzePoint { sample, point } => {
                match self.drive(*point, self.config.analyze_range, pose, goal_id, name, out) {
                    Step::Continue(cmd) => return Step::Continue(cmd),
                    Step::Failed(reason) => {
                        out.events.push(ExecEvent::SampleSkipped {
                            goal_id,
                            sample: sample.clone(),
                            reason: Some(reason),
                        });
                        return Step::Done;
                    }
                    Step::Done => {}
                }
                // VisNIR stand-in: the score is read off the sample point.
                let Some(score) = ctx.world.entity(sample).and_then(|e| e.interest_score()) else {
                    out.events.push(ExecEvent::SampleSkipped {
                        goal_id,
                        sample: sample.clone(),
                        reason: None,
                    });
                    return Step::Done;
                };
                let interesting = score >= self.config.interest_threshold;
                out.events.push(ExecEvent::SampleAnalysis {
                    sample: sample.clone(),
                    interest_score: score,
                    interesting,
                });
                out.messages.push(Outbound {
                    recipient: self.originator(),
                    goal_id: Some(goal_id),
                    body: MessageBody::Observation(Observation::SampleAnalysis {
                        sample: sample.clone(),
                        interest_score: score,
                        interesting,
                    }),
                });
                if interesting {
                    if self.setup.partner.is_some() {
                        self.insert_after_cursor(store_chain(sample, *point), out);
                    } else {
                        out.events.push(ExecEvent::SampleSkipped {
                            goal_id,
                            sample: sample.clone(),
                            reason: Some(FailureReason::SecondaryUnavailable),
                        });
                    }
                }
                Step::Done
            }
            TaskKind::RequestSecondary { sample } => {
                let Some(partner) = self.setup.partner.clone() else {
                    return Step::Failed(FailureReason::SecondaryUnavailable);
                };
                *ctx.goal_ids += 1;
                let id = GoalId(*ctx.goal_ids);
                let goal = Goal::new(
                    id,
                    AutonomyLevel::E4,
                    GoalSpec::StoreSample {
                        sample: sample.clone(),
                        rendezvous: pose.position(),
                    },
                    self.endpoint(),
                );
                out.messages.push(Outbound {
                    recipient: endpoint(&partner),
                    goal_id: Some(id),
                    body: MessageBody::GoalRequest(goal.clone()),
                });
                out.goals_issued.push((goal, partner));
                if let Some(plan) = self.plan.as_mut() {
                    plan.store_goal = Some(id);
                }
                Step::Done
            }
            TaskKind::RendezvousAwait { signal } => {
                self.await_signal(*signal, goal_id, pose, ctx, out)
            }
            TaskKind::MountTool { tool } => self.mount(*tool, pose, goal_id, ctx, out),
            TaskKind::CollectSample { sample, point } => {
                self.collect(sample, *point, false, pose, goal_id, ctx, out)
            }
            TaskKind::StoreToSlot { sample } => {
                self.collect(sample, pose.position(), true, pose, goal_id, ctx, out)
            }
            TaskKind::AwaitStorageEmptied => {
                if !ctx.storages.contains_key(&self.setup.id)
                    || std::mem::take(&mut self.storage_emptied)
                {
                    Step::Done
                } else {
                    Step::Continue(VelocityCommand::STOP)
                }
            }
            TaskKind::Supervise { duration_ticks } => match duration_ticks {
                Some(d) if ctx.tick.saturating_sub(self.run.started) >= *d => Step::Done,
                _ => Step::Continue(VelocityCommand::STOP),
            },
        }
    }

    fn await_signal(
        &mut self,
        signal: Signal,
        goal_id: GoalId,
        pose: Pose2D,
        ctx: &mut TickContext,
        out: &mut ExecOutput,
    ) -> Step {
        let plan = self.plan.as_ref().expect("active plan");
        let awaited = match signal {
            Signal::SecondaryArrived => plan.store_goal,
            Signal::SampleStored => Some(plan.root_goal_id),
        };
        let Some(awaited) = awaited else {
            return Step::Failed(FailureReason::SecondaryUnavailable);
        };
        if signal == Signal::SampleStored && !self.run.announced {
            self.run.announced = true;
            out.messages.push(Outbound {
                recipient: plan.goal.originator.clone(),
                goal_id: Some(awaited),
                body: MessageBody::Observation(Observation::SecondaryArrived {
                    goal_id: awaited,
                    position: pose.position(),
                }),
            });
        }
        if self.signals.remove(&(signal, awaited)) {
            if signal == Signal::SampleStored && plan.decide_after_store {
                self.after_store(goal_id, ctx, out);
            }
            return Step::Done;
        }
        if ctx.tick.saturating_sub(self.run.started) > self.config.rendezvous_timeout_ticks {
            return Step::Failed(FailureReason::RendezvousTimeout);
        }
        Step::Continue(VelocityCommand::STOP)
    }

    fn after_store(&mut self, goal_id: GoalId, ctx: &mut TickContext, out: &mut ExecOutput) {
        let mut decision = ctx
            .storages
            .get(&self.setup.id)
            .map(decide_after_store)
            .unwrap_or(StoreDecision::ContinueMapping);
        let pos = self.pose(ctx.world).position();
        let base = ctx
            .world
            .entities_of(EntityKind::BaseStation)
            .min_by(|a, b| {
                a.position()
                    .distance(pos)
                    .total_cmp(&b.position().distance(pos))
            })
            .map(|e| e.position());
        if base.is_none() {
            decision = StoreDecision::ContinueMapping;
        }
        out.events
            .push(ExecEvent::StorageDecision { goal_id, decision });
        if let (StoreDecision::ReturnToBase, Some(base)) = (decision, base) {
            self.insert_after_cursor(
                vec![
                    TaskKind::ReturnToBase { base },
                    TaskKind::AwaitStorageEmptied,
                ],
                out,
            );
        }
    }

    fn tc_event(&self, m: &mut MountRun, event: TcEvent, out: &mut ExecOutput) -> Option<TcEffect> {
        let from = m.tc.state;
        let effect = m.tc.step(event, None);
        out.events.push(ExecEvent::ToolChanger {
            slot: m.tc.slot.clone().unwrap_or_else(|| EntityId::new("")),
            event,
            from,
            to: m.tc.state,
        });
        effect
    }

    fn mount(
        &mut self,
        tool: ToolKind,
        pose: Pose2D,
        goal_id: GoalId,
        ctx: &mut TickContext,
        out: &mut ExecOutput,
    ) -> Step {
        if self.holding.as_ref().is_some_and(|t| t.kind == tool) {
            return Step::Done;
        }
        let Some(arm) = self.setup.arm else {
            return Step::Failed(FailureReason::ToolNotAssembled);
        };
        if self.run.mount.is_none() {
            let pos = pose.position();
            let slot = ctx
                .world
                .entities_of(EntityKind::ToolSlot)
                .filter(|e| matches!(&e.body, EntityBody::ToolSlot { tool: Some(t), .. } if t.kind == tool))
                .min_by(|a, b| {
                    a.position()
                        .distance(pos)
                        .total_cmp(&b.position().distance(pos))
                        .then(a.id.cmp(&b.id))
                })
                .map(|e| e.id.clone());
            let Some(slot) = slot else {
                return Step::Failed(FailureReason::ToolNotAssembled);
            };
            self.run.mount = Some(MountRun {
                tc: ToolChanger {
                    state: TcState::Stowed,
                    slot: Some(slot),
                },
                estimate: None,
                repositioned: false,
                reposition: None,
            });
        }
        let mut m = self.run.mount.take().expect("just set");
        let step = self.mount_step(&mut m, &arm, pose, goal_id, ctx, out);
        self.run.mount = Some(m);
        step
    }

    /// One tool-changer transition per tick. A fault is retried once after
    /// moving to a stand-off point facing the slot.
    fn mount_step(
        &mut self,
        m: &mut MountRun,
        arm: &ArmSpec,
        pose: Pose2D,
        goal_id: GoalId,
        ctx: &mut TickContext,
        out: &mut ExecOutput,
    ) -> Step {
        let slot = m.tc.slot.clone().expect("slot bound at start");
        let Some(slot_entity) = ctx.world.entity(&slot) else {
            return Step::Failed(FailureReason::ToolNotAssembled);
        };
        let slot_pos = slot_entity.position();
        let onboard = matches!(&slot_entity.body, EntityBody::ToolSlot { carrier: Some(c), .. } if *c == self.setup.id);
        match m.tc.state {
            TcState::Stowed => {
                self.tc_event(m, TcEvent::MountRequested, out);
            }
            TcState::Approach => {
                if let Some(mut nav) = m.reposition.take() {
                    if let NavStep::Moving(cmd) =
                        self.nav_step(&mut nav, pose, goal_id, "MountTool", out)
                    {
                        m.reposition = Some(nav);
                        return Step::Continue(cmd);
                    }
                }
                let err = normalize_angle((slot_pos - pose.position()).angle() - pose.theta);
                if onboard || err.abs() <= self.config.facing_tolerance {
                    self.tc_event(m, TcEvent::ArrivedAtSlot, out);
                } else {
                    let w = (2.0 * err).clamp(-self.nav.omega_max, self.nav.omega_max);
                    return Step::Continue(VelocityCommand::new(0.0, w));
                }
            }
            TcState::Localize => {
                let base = arm_base(arm, pose);
                let (sigma, range) = (self.config.localize_sigma, self.config.localize_range);
                match localize_tool(ctx.world, base, &slot, sigma, range, &mut self.rng) {
                    Ok(est) => {
                        m.estimate = Some(est.position());
                        self.tc_event(m, TcEvent::PoseEstimated, out);
                    }
                    Err(ManipError::SlotNotVisible(_)) | Err(ManipError::UnknownSlot(_)) => {
                        self.tc_event(m, TcEvent::SlotNotVisible, out);
                    }
                }
            }
            TcState::Reach => match check_reach(arm, pose, m.estimate.unwrap_or(slot_pos)) {
                ReachResult::Reachable { .. } => {
                    self.tc_event(m, TcEvent::ReachOk, out);
                }
                ReachResult::Unreachable { distance } => {
                    self.tc_event(m, TcEvent::Unreachable, out);
                    out.events.push(ExecEvent::ToolUnreachable {
                        slot: slot.clone(),
                        distance,
                        retry: !m.repositioned,
                    });
                }
            },
            TcState::Latch => {
                if self.tc_event(m, TcEvent::Latched, out) == Some(TcEffect::ToolToArm) {
                    if let EntityBody::ToolSlot { tool: Some(t), .. } = &slot_entity.body {
                        self.holding = Some(t.clone());
                    }
                    out.effects.push(WorldEffect::ToolToArm { slot });
                }
            }
            TcState::Mounted => return Step::Done,
            TcState::Fault(_) => {
                if m.repositioned {
                    return Step::Failed(FailureReason::ToolUnreachable);
                }
                out.errors.push(ErrorReport {
                    source: self.setup.id.to_string(),
                    code: FailureReason::ToolUnreachable,
                    severity: Severity::Warning,
                    handled: true,
                });
                self.tc_event(m, TcEvent::Reset, out);
                m.repositioned = true;
                m.estimate = None;
                if !onboard {
                    // Stand off so the arm base, once facing the slot, sits
                    // mid-reach from it.
                    let stand =
                        arm.mount_offset.x + 0.5 * (arm.l1 + arm.l2 + (arm.l1 - arm.l2).abs());
                    let away = (pose.position() - slot_pos).normalized();
                    let away = if away.norm() > 0.0 {
                        away
                    } else {
                        Vec2::new(-pose.theta.cos(), -pose.theta.sin())
                    };
                    m.reposition = Some(NavRun::new(slot_pos + away * stand, 0.15));
                }
            }
            TcState::Unlatch | TcState::Retreat => {
                return Step::Failed(FailureReason::ToolNotAssembled)
            }
        }
        Step::Continue(VelocityCommand::STOP)
    }

    /// Drives the sample-collection machine one transition per tick.
    /// `CollectSample` ends once the sample is scooped; `StoreToSlot` takes it
    /// from there to the partner's storage.
    #[allow(clippy::too_many_arguments)]
    fn collect(
        &mut self,
        sample: &EntityId,
        point: Vec2,
        store: bool,
        pose: Pose2D,
        goal_id: GoalId,
        ctx: &mut TickContext,
        out: &mut ExecOutput,
    ) -> Step {
        let Some(partner) = self.setup.partner.clone() else {
            return Step::Failed(FailureReason::SecondaryUnavailable);
        };
        let state = self.sc_state.unwrap_or(ScState::VerifyTool);
        if store
            && state == ScState::Transfer
            && ctx.tick.saturating_sub(self.run.started) > self.config.rendezvous_timeout_ticks
        {
            return Step::Failed(FailureReason::RendezvousTimeout);
        }
        let hand = self.arm_point(pose);
        let reach = self.setup.arm.map(|a| a.l1 + a.l2).unwrap_or(0.0);
        let storage_reachable = ctx
            .world
            .entity(&partner)
            .is_some_and(|e| hand.distance(e.position()) <= reach + e.footprint_radius);
        let sc = ScContext {
            holding: self.holding.as_ref().map(|t| t.kind),
            sample_distance: if store {
                0.0
            } else {
                pose.position().distance(point)
            },
            scoop_range: self.config.scoop_range,
            storage_reachable,
        };
        let Some(storage) = ctx.storages.get_mut(&partner) else {
            return Step::Failed(FailureReason::SecondaryUnavailable);
        };
        let next = sc_step(state, &sc, storage, sample);
        let slot_index = storage
            .slots
            .iter()
            .position(|s| matches!(s, crate::manip::SlotState::Filled(x) if x == sample));
        if next != state {
            out.events.push(ExecEvent::SampleCollection {
                sample: sample.clone(),
                from: state,
                to: next,
            });
        }
        self.sc_state = Some(next);
        match next {
            ScState::Fault(f) => Step::Failed(match f {
                ScFault::ToolNotAssembled => FailureReason::ToolNotAssembled,
                ScFault::OutOfScoopRange => FailureReason::OutOfScoopRange,
                ScFault::StorageFull => FailureReason::StorageFull,
            }),
            ScState::Transfer if !store => Step::Done,
            ScState::Done => {
                self.sc_state = None;
                let store_goal = self
                    .plan
                    .as_ref()
                    .and_then(|p| p.store_goal)
                    .unwrap_or(goal_id);
                let slot = slot_index.unwrap_or(0);
                out.events.push(ExecEvent::SampleStored {
                    goal_id: store_goal,
                    sample: sample.clone(),
                    storage: partner.clone(),
                    slot,
                });
                out.messages.push(Outbound {
                    recipient: endpoint(&partner),
                    goal_id: Some(store_goal),
                    body: MessageBody::Observation(Observation::SampleStored {
                        goal_id: store_goal,
                        sample: sample.clone(),
                        slot,
                    }),
                });
                Step::Done
            }
            _ => Step::Continue(VelocityCommand::STOP),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mas::InspectTarget;
    use crate::world::{CellIndex, Entity, RoverLimits};

    fn goal(id: u64, spec: GoalSpec) -> Goal {
        let mut g = Goal::new(
            GoalId(id),
            AutonomyLevel::E4,
            spec,
            EndpointId::new("mission_control"),
        );
        g.status = GoalStatus::Accepted;
        g
    }

    fn params() -> PlanParams {
        PlanParams {
            lane_spacing: 3.0,
            arrive_tolerance: 0.3,
            analyze_range: 0.5,
            rendezvous_radius: 1.0,
        }
    }

    fn area() -> Area {
        Area {
            min: Vec2::new(1.0, 1.0),
            max: Vec2::new(13.0, 10.0),
        }
    }

    fn rover(id: &str, x: f64, y: f64, role: Role) -> Entity {
        Entity {
            id: id.into(),
            pose: Pose2D::new(x, y, 0.0),
            footprint_radius: 0.3,
            body: EntityBody::Rover {
                role,
                arm: (role == Role::Leader).then(ArmSpec::default),
                storage_slots: if role == Role::Secondary { 2 } else { 0 },
            },
            motion: None,
        }
    }

    fn world(extra: Vec<Entity>) -> World {
        let grid = GridMap::from_rows(&vec![".".repeat(30); 20], 0.5, Pose2D::default()).unwrap();
        let mut es = vec![rover("leader", 2.0, 2.0, Role::Leader)];
        es.extend(extra);
        World::new(grid, es, 0.1, RoverLimits::default(), vec![]).unwrap()
    }

    fn exec(world: &World) -> Executive {
        let setup = AgentSetup {
            id: "leader".into(),
            role: Role::Leader,
            level: AutonomyLevel::E4,
            sensor_range: 3.0,
            arm: Some(ArmSpec::default()),
            partner: Some("sec".into()),
        };
        // Full prior knowledge of the terrain.
        Executive::new(
            setup,
            ExecConfig::default(),
            NavConfig::default(),
            world.grid().clone(),
            7,
        )
    }

    struct Harness {
        world: World,
        exec: Executive,
        storages: BTreeMap<EntityId, StorageState>,
        ids: u64,
        log: Vec<ExecOutput>,
    }

    impl Harness {
        fn new(world: World) -> Self {
            let exec = exec(&world);
            Harness {
                world,
                exec,
                storages: BTreeMap::from([(EntityId::new("sec"), StorageState::new(2))]),
                ids: 100,
                log: Vec::new(),
            }
        }

        fn tick(&mut self, inputs: Vec<ExecInput>) -> ExecOutput {
            let mut ctx = TickContext {
                tick: self.world.tick(),
                world: &self.world,
                storages: &mut self.storages,
                goal_ids: &mut self.ids,
            };
            let out = self.exec.tick(inputs, &mut ctx);
            for e in &out.effects {
                if let WorldEffect::ToolToArm { slot } = e {
                    self.world.take_tool(slot);
                }
            }
            let cmds = BTreeMap::from([(EntityId::new("leader"), out.command)]);
            self.world.step(&cmds);
            self.log.push(out.clone());
            out
        }

        fn run_until(&mut self, max: usize, mut done: impl FnMut(&ExecOutput) -> bool) -> bool {
            for _ in 0..max {
                let out = self.tick(vec![]);
                if done(&out) {
                    return true;
                }
            }
            false
        }

        fn events(&self) -> impl Iterator<Item = &ExecEvent> {
            self.log.iter().flat_map(|o| o.events.iter())
        }

        fn final_status(&self) -> Option<(GoalStatus, Option<FailureReason>)> {
            self.log
                .iter()
                .flat_map(|o| o.reports.iter())
                .filter(|(r, _)| r.status.is_terminal())
                .map(|(r, _)| (r.status, r.reason))
                .next_back()
        }
    }

    #[test]
    fn inspect_panels_decomposes_into_pairs_plus_background_supervise() {
        let targets = vec![
            InspectTarget {
                panel: "A".into(),
                point: Vec2::new(1.0, 1.0),
            },
            InspectTarget {
                panel: "B".into(),
                point: Vec2::new(5.0, 1.0),
            },
        ];
        let plan = decompose(
            &goal(1, GoalSpec::InspectPanels { targets }),
            Role::Leader,
            1,
            &params(),
        )
        .unwrap();
        assert_eq!(
            plan.task_names(),
            ["NavigateTo", "InspectPanel", "NavigateTo", "InspectPanel"]
        );
        assert_eq!(
            plan.background.as_ref().map(|t| t.kind.name()),
            Some("Supervise")
        );
    }

    #[test]
    fn map_and_sample_without_samples_is_a_pure_sweep() {
        let spec = GoalSpec::MapAndSample {
            area: area(),
            samples: vec![],
        };
        let plan = decompose(&goal(1, spec), Role::Leader, 1, &params()).unwrap();
        assert_eq!(plan.task_names(), ["SweepArea"]);
    }

    #[test]
    fn leader_sweep_interleaves_samples_and_secondary_ignores_them() {
        let samples = vec![
            SampleTarget {
                sample: "s1".into(),
                point: Vec2::new(7.0, 3.0),
            },
            SampleTarget {
                sample: "s2".into(),
                point: Vec2::new(2.0, 8.5),
            },
        ];
        let spec = GoalSpec::MapAndSample {
            area: area(),
            samples,
        };
        let lead = decompose(&goal(1, spec.clone()), Role::Leader, 1, &params()).unwrap();
        assert_eq!(
            lead.task_names(),
            [
                "SweepArea",
                "AnalyzePoint",
                "SweepArea",
                "AnalyzePoint",
                "SweepArea"
            ]
        );
        let sweep: usize = lead
            .tasks
            .iter()
            .map(|t| match &t.kind {
                TaskKind::SweepArea { waypoints } => waypoints.len(),
                _ => 0,
            })
            .sum();
        assert_eq!(sweep, boustrophedon(&area(), 3.0).len());
        let sec = decompose(&goal(1, spec), Role::Secondary, 1, &params()).unwrap();
        assert_eq!(sec.task_names(), ["SweepArea"]);
    }

    #[test]
    fn store_sample_is_secondary_only() {
        let spec = GoalSpec::StoreSample {
            sample: "s1".into(),
            rendezvous: Vec2::new(3.0, 3.0),
        };
        assert_eq!(
            decompose(&goal(1, spec.clone()), Role::Leader, 1, &params()).unwrap_err(),
            FailureReason::UnknownGoalKind
        );
        let plan = decompose(&goal(1, spec), Role::Secondary, 1, &params()).unwrap();
        assert_eq!(plan.task_names(), ["NavigateTo", "RendezvousAwait"]);
        assert!(plan.decide_after_store);
    }

    #[test]
    fn storage_decision_follows_fill_state() {
        let mut s = StorageState::new(2);
        s.store(&"a".into());
        assert_eq!(decide_after_store(&s), StoreDecision::ContinueMapping);
        s.store(&"b".into());
        assert_eq!(decide_after_store(&s), StoreDecision::ReturnToBase);
    }

    #[test]
    fn lanes_never_exceed_spacing() {
        for spacing in [0.7, 1.0, 2.5, 3.0, 20.0] {
            let wps = boustrophedon(&area(), spacing);
            let ys: Vec<f64> = wps.iter().step_by(2).map(|w| w.y).collect();
            assert!(ys.first().unwrap() - area().min.y <= spacing / 2.0 + 1e-9);
            assert!(area().max.y - ys.last().unwrap() <= spacing / 2.0 + 1e-9);
            for w in ys.windows(2) {
                assert!(w[1] - w[0] <= spacing + 1e-9);
            }
        }
    }

    #[test]
    fn emergency_halts_in_the_same_tick_and_resumes_after() {
        let mut h = Harness::new(world(vec![]));
        let g = goal(
            1,
            GoalSpec::NavigateTo {
                target: Vec2::new(12.0, 2.0),
            },
        );
        h.tick(vec![ExecInput::Goal(g)]);
        h.run_until(5, |_| false);
        assert!(!h.tick(vec![]).command.is_stop());
        let out = h.tick(vec![ExecInput::Emergency {
            case_id: 1,
            open: true,
        }]);
        assert!(out.command.is_stop());
        assert!(out.events.contains(&ExecEvent::Halted {
            priority: Priority::Emergency
        }));
        for _ in 0..10 {
            assert!(h.tick(vec![]).command.is_stop());
        }
        let out = h.tick(vec![ExecInput::Emergency {
            case_id: 1,
            open: false,
        }]);
        assert!(!out.command.is_stop());
        assert!(h.run_until(400, |o| o
            .reports
            .iter()
            .any(|(r, _)| r.status == GoalStatus::Achieved)));
    }

    #[test]
    fn operator_drive_overrides_plan_below_e4() {
        let mut h = Harness::new(world(vec![]));
        let drive = Telecommand::Drive {
            v: 0.2,
            omega: 0.0,
            duration_ticks: 3,
        };
        assert!(h
            .tick(vec![ExecInput::Telecommand(drive.clone())])
            .command
            .is_stop());
        h.exec.set_level(AutonomyLevel::E2);
        assert_eq!(
            h.tick(vec![ExecInput::Telecommand(drive)]).command,
            VelocityCommand::new(0.2, 0.0)
        );
        h.tick(vec![]);
        h.tick(vec![]);
        assert!(h.tick(vec![]).command.is_stop());
    }

    #[test]
    fn enclosed_goal_fails_unreachable_after_replan() {
        let mut h = Harness::new(world(vec![]));
        let target = Vec2::new(12.25, 6.25);
        h.tick(vec![ExecInput::Goal(goal(
            1,
            GoalSpec::NavigateTo { target },
        ))]);
        h.run_until(5, |_| false);
        let tc = h.exec.known().world_to_cell(target).unwrap();
        let ring: Vec<(CellIndex, CellState)> = (tc.row - 2..=tc.row + 2)
            .flat_map(|r| (tc.col - 2..=tc.col + 2).map(move |c| CellIndex::new(c, r)))
            .filter(|c| c.col.abs_diff(tc.col) == 2 || c.row.abs_diff(tc.row) == 2)
            .map(|c| (c, CellState::Obstacle))
            .collect();
        h.exec.integrate(&ring);
        h.run_until(5, |o| !o.reports.is_empty());
        assert!(h
            .events()
            .any(|e| matches!(e, ExecEvent::Replan { attempt: 1, .. })));
        assert_eq!(
            h.final_status(),
            Some((GoalStatus::Failed, Some(FailureReason::Unreachable)))
        );
        let errs: Vec<_> = h.log.iter().flat_map(|o| o.errors.iter()).collect();
        assert_eq!(errs.len(), 1);
        assert!(!errs[0].handled);
    }

    #[test]
    fn replans_are_capped() {
        let mut h = Harness::new(world(vec![]));
        let target = Vec2::new(13.0, 8.0);
        h.tick(vec![ExecInput::Goal(goal(
            1,
            GoalSpec::NavigateTo { target },
        ))]);
        for _ in 0..200 {
            // Keep dropping a new rock on the path a little ahead.
            if let Some(path) = h.exec.current_path() {
                let pos = h.world.entity(&"leader".into()).unwrap().position();
                if let Some(p) = path
                    .points
                    .iter()
                    .find(|p| p.distance(pos) > 1.2 && p.distance(target) > 1.0)
                {
                    let c = h.exec.known().world_to_cell(*p).unwrap();
                    h.exec.integrate(&[(c, CellState::Obstacle)]);
                }
            }
            if h.tick(vec![])
                .reports
                .iter()
                .any(|(r, _)| r.status.is_terminal())
            {
                break;
            }
        }
        let replans = h
            .events()
            .filter(|e| matches!(e, ExecEvent::Replan { .. }))
            .count();
        assert_eq!(replans, ExecConfig::default().max_retries as usize);
        assert_eq!(
            h.final_status(),
            Some((GoalStatus::Failed, Some(FailureReason::PathBlocked)))
        );
    }

    fn slot(offset: Pose2D) -> Entity {
        Entity {
            id: "slot".into(),
            pose: Pose2D::default(),
            footprint_radius: 0.1,
            body: EntityBody::ToolSlot {
                carrier: Some("leader".into()),
                offset,
                tool: Some(ToolSpec {
                    id: "shovel".into(),
                    kind: ToolKind::Shovel,
                }),
            },
            motion: None,
        }
    }

    fn secondary_at(x: f64, y: f64) -> Entity {
        rover("sec", x, y, Role::Secondary)
    }

    /// Runs a CollectSample goal, answering the store request as a Secondary
    /// parked next to the Leader would.
    fn collect(h: &mut Harness, point: Vec2) {
        let g = goal(
            1,
            GoalSpec::CollectSample {
                sample: "s1".into(),
                point,
            },
        );
        h.tick(vec![ExecInput::Goal(g)]);
        let mut inputs = vec![];
        for _ in 0..400 {
            let out = h.tick(std::mem::take(&mut inputs));
            for (g, _) in &out.goals_issued {
                inputs.push(ExecInput::Observation {
                    from: EndpointId::new("sec"),
                    observation: Observation::SecondaryArrived {
                        goal_id: g.goal_id,
                        position: Vec2::ZERO,
                    },
                });
            }
            if out.reports.iter().any(|(r, _)| r.status.is_terminal()) {
                return;
            }
        }
    }

    #[test]
    fn tool_unreachable_twice_fails_the_goal_with_alerting_error() {
        let sample = Entity {
            id: "s1".into(),
            pose: Pose2D::new(4.0, 2.0, 0.0),
            footprint_radius: 0.1,
            body: EntityBody::SamplePoint {
                interest_score: 0.9,
            },
            motion: None,
        };
        let mut h = Harness::new(world(vec![
            slot(Pose2D::new(-1.6, 0.0, 0.0)),
            secondary_at(3.0, 3.0),
            sample,
        ]));
        collect(&mut h, Vec2::new(4.0, 2.0));
        let unreachable: Vec<bool> = h
            .events()
            .filter_map(|e| match e {
                ExecEvent::ToolUnreachable { retry, .. } => Some(*retry),
                _ => None,
            })
            .collect();
        assert_eq!(unreachable, [true, false]);
        let errs: Vec<_> = h.log.iter().flat_map(|o| o.errors.iter()).collect();
        assert_eq!(
            errs.iter().map(|e| e.handled).collect::<Vec<_>>(),
            [true, false]
        );
        assert!(errs
            .iter()
            .all(|e| e.code == FailureReason::ToolUnreachable));
        assert_eq!(
            h.final_status(),
            Some((GoalStatus::Failed, Some(FailureReason::ToolUnreachable)))
        );
        assert!(h.exec.holding().is_none());
    }

    #[test]
    fn collect_sample_mounts_scoops_and_stores() {
        let sample = Entity {
            id: "s1".into(),
            pose: Pose2D::new(4.0, 2.0, 0.0),
            footprint_radius: 0.1,
            body: EntityBody::SamplePoint {
                interest_score: 0.9,
            },
            motion: None,
        };
        let mut h = Harness::new(world(vec![
            slot(Pose2D::new(0.6, 0.3, 0.0)),
            secondary_at(3.5, 2.8),
            sample,
        ]));
        collect(&mut h, Vec2::new(4.0, 2.0));
        assert_eq!(h.final_status(), Some((GoalStatus::Achieved, None)));
        assert_eq!(h.exec.holding().map(|t| t.kind), Some(ToolKind::Shovel));
        assert!(h.storages[&EntityId::new("sec")].contains(&"s1".into()));
        let stored: Vec<_> = h
            .log
            .iter()
            .flat_map(|o| o.messages.iter())
            .filter(|m| {
                matches!(
                    m.body,
                    MessageBody::Observation(Observation::SampleStored { .. })
                ) && m.recipient.as_str() == "sec"
            })
            .collect();
        assert_eq!(stored.len(), 1);
        // The slot is empty once the arm holds the tool.
        let e = h.world.entity(&"slot".into()).unwrap();
        assert!(matches!(e.body, EntityBody::ToolSlot { tool: None, .. }));
    }

    #[test]
    fn goals_arriving_while_busy_are_queued_and_store_sample_preempts() {
        let w = world(vec![]);
        let setup = AgentSetup {
            id: "leader".into(),
            role: Role::Secondary,
            level: AutonomyLevel::E4,
            sensor_range: 3.0,
            arm: None,
            partner: None,
        };
        let mut e = Executive::new(
            setup,
            ExecConfig::default(),
            NavConfig::default(),
            w.grid().clone(),
            1,
        );
        let mut storages = BTreeMap::new();
        let mut ids = 0;
        let mut ctx = TickContext {
            tick: 0,
            world: &w,
            storages: &mut storages,
            goal_ids: &mut ids,
        };
        let sweep = goal(
            1,
            GoalSpec::MapAndSample {
                area: area(),
                samples: vec![],
            },
        );
        let nav = goal(
            2,
            GoalSpec::NavigateTo {
                target: Vec2::new(3.0, 3.0),
            },
        );
        let store = goal(
            3,
            GoalSpec::StoreSample {
                sample: "s".into(),
                rendezvous: Vec2::new(5.0, 5.0),
            },
        );
        e.tick(vec![ExecInput::Goal(sweep)], &mut ctx);
        e.tick(vec![ExecInput::Goal(nav)], &mut ctx);
        assert_eq!(e.queued().count(), 1);
        let out = e.tick(vec![ExecInput::Goal(store)], &mut ctx);
        assert!(out
            .events
            .iter()
            .any(|ev| matches!(ev, ExecEvent::PlanSuspended { by: GoalId(3), .. })));
        assert_eq!(e.plan().unwrap().root_goal_id, GoalId(3));
        assert_eq!(e.suspended().len(), 1);
    }
}
