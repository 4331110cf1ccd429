//! The simulation loop. One `step` is one tick, in fixed phase order:
//! scripted actions, scripted goals, retransmissions, message delivery
//! through the autonomy gate, perception, supervision, executives (Leader
//! first), periodic map fusion, then world integration.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

use super::config::SimConfig;
use super::log::{EventRecord, Recorder};
use super::protocol::{
    AgentView, AlertView, Command, CommandAck, CommandError, GoalRecord, Snapshot,
};
use super::scenario::{
    GoalScript, KernelAction, KernelItem, Scenario, SensorSpec, MISSION_CONTROL, SUPERVISOR,
};
use super::GatewayError;
use crate::executive::{AgentSetup, ExecInput, ExecOutput, Executive, TickContext, WorldEffect};
use crate::fusion::{fuse, register, RigidTransform2D, TransformEstimate};
use crate::manip::StorageState;
use crate::mas::{
    gate_message, update_goal_status, AutonomyLevel, Delivery, FailureReason, GateDecision, Goal,
    GoalId, GoalStatus, GoalStatusReport, MasBus, MasMessage, MessageBody, PromptNotice,
    PromptReply,
};
use crate::netsim::{ChannelParams, EndpointId};
use crate::percept::{
    detect, detect_fall, detect_interaction, merge_detections, semantic_overlay, DetectionClass,
    TrackChange, Tracker,
};
use crate::supervise::{AlertRecipient, CaseState, SuperviseOutput, Supervisor};
use crate::world::{
    CellState, EntityBody, EntityId, EntityKind, GridMap, Posture, VelocityCommand, World,
};

const KERNEL: &str = "kernel";

pub struct Kernel {
    doc: Value,
    config: SimConfig,
    seed: u64,
    world: World,
    bus: MasBus,
    agents: Vec<Executive>,
    sensors: Vec<(EntityId, SensorSpec)>,
    supervisor: Supervisor,
    tracker: Tracker,
    storages: BTreeMap<EntityId, StorageState>,
    goal_ids: u64,
    goals: BTreeMap<GoalId, GoalRecord>,
    alerts: Vec<AlertView>,
    /// Linear indices of cells each agent has sensed itself.
    revealed: BTreeMap<EntityId, BTreeSet<usize>>,
    fused: GridMap,
    recorder: Recorder,
    inputs: BTreeMap<EntityId, Vec<ExecInput>>,
    goal_script: Vec<GoalScript>,
    kernel_script: Vec<KernelItem>,
    finished: bool,
}

impl Kernel {
    /// Builds the kernel from a scenario document and writes the
    /// `ScenarioLoaded` header, which embeds everything a replay needs.
    pub fn new(
        doc: Value,
        config: SimConfig,
        seed: u64,
        meta: Value,
    ) -> Result<Kernel, GatewayError> {
        let scenario = Scenario::from_value(doc.clone())?;
        let world = scenario.build_world(config.dt, config.limits)?;
        let mut bus = MasBus::new(
            seed,
            config.net.retransmit_period,
            config.net.default_params(),
        );
        for e in scenario.endpoints() {
            bus.register(e);
        }
        for c in &config.net.channels {
            let params = ChannelParams {
                latency_ticks: c.latency_ticks,
                drop_probability: c.drop_probability,
            };
            bus.configure_channel(&c.a, &c.b, params)
                .map_err(|e| GatewayError::Config(format!("net.channels: {e}")))?;
        }

        let blank = scenario.blank_map()?;
        let mut rovers: Vec<_> = scenario
            .entities
            .iter()
            .filter(|e| e.kind == EntityKind::Rover)
            .collect();
        rovers.sort_by_key(|e| (e.role, e.id.clone()));
        let mut agents = Vec::new();
        let mut storages = BTreeMap::new();
        for r in &rovers {
            let partner = rovers
                .iter()
                .find(|o| o.role != r.role)
                .map(|o| o.id.clone());
            let sensor = r.effective_sensor().expect("rovers carry a sensor");
            let setup = AgentSetup {
                id: r.id.clone(),
                role: r.role.expect("validated"),
                level: r.autonomy_level.unwrap_or(AutonomyLevel::E4),
                sensor_range: sensor.range,
                arm: r.arm,
                partner,
            };
            agents.push(Executive::new(
                setup,
                config.exec,
                config.nav,
                blank.clone(),
                seed,
            ));
            if let Some(n) = r.storage_slots.filter(|n| *n > 0) {
                storages.insert(r.id.clone(), StorageState::new(n));
            }
        }
        let sensors = scenario
            .entities
            .iter()
            .filter_map(|e| e.effective_sensor().map(|s| (e.id.clone(), s)))
            .collect();

        let mut goal_script = scenario.goals.clone();
        goal_script.sort_by_key(|g| g.tick);
        let mut kernel_script = scenario.kernel_script();
        kernel_script.sort_by_key(|k| k.tick);

        let mut recorder = Recorder::new();
        recorder.record(
            0,
            KERNEL,
            "ScenarioLoaded",
            json!({
                "scenario": doc,
                "seed": seed,
                "config": config,
                "meta": meta,
            }),
        );

        Ok(Kernel {
            supervisor: Supervisor::new(config.supervise, config.dt, scenario.assignments.clone()),
            tracker: Tracker::new(config.percept.gate, config.percept.stale_window),
            revealed: agents
                .iter()
                .map(|a| (a.id().clone(), BTreeSet::new()))
                .collect(),
            doc,
            config,
            seed,
            world,
            bus,
            agents,
            sensors,
            storages,
            goal_ids: 0,
            goals: BTreeMap::new(),
            alerts: Vec::new(),
            fused: blank,
            recorder,
            inputs: BTreeMap::new(),
            goal_script,
            kernel_script,
            finished: false,
        })
    }

    pub fn tick(&self) -> u64 {
        self.world.tick()
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn document(&self) -> &Value {
        &self.doc
    }

    pub fn agents(&self) -> &[Executive] {
        &self.agents
    }

    pub fn agent(&self, id: &EntityId) -> Option<&Executive> {
        self.agents.iter().find(|a| a.id() == id)
    }

    pub fn supervisor(&self) -> &Supervisor {
        &self.supervisor
    }

    pub fn storage(&self, id: &EntityId) -> Option<&StorageState> {
        self.storages.get(id)
    }

    pub fn goals(&self) -> &BTreeMap<GoalId, GoalRecord> {
        &self.goals
    }

    pub fn fused_map(&self) -> &GridMap {
        &self.fused
    }

    /// Cells sensed by at least one agent, as linear indices.
    pub fn revealed_union(&self) -> BTreeSet<usize> {
        self.revealed.values().flatten().copied().collect()
    }

    pub fn revealed_by(&self, agent: &EntityId) -> Option<&BTreeSet<usize>> {
        self.revealed.get(agent)
    }

    /// Whether every goal issued from outside the agents (scenario or
    /// operator) reached a terminal status.
    pub fn external_goals_terminal(&self) -> bool {
        self.goals
            .values()
            .filter(|g| g.external)
            .all(|g| g.status.is_terminal())
    }

    pub fn take_events(&mut self) -> Vec<EventRecord> {
        self.recorder.take()
    }

    fn agent_index(&self, id: &EntityId) -> Option<usize> {
        self.agents.iter().position(|a| a.id() == id)
    }

    fn log<T: serde::Serialize>(&mut self, source: &str, kind: &str, payload: &T) {
        let now = self.world.tick();
        self.recorder.record_value(now, source, kind, payload);
    }

    /// Logs every send attempt made since the last call.
    fn flush_net(&mut self) {
        for t in self.bus.take_transmissions() {
            self.log(t.sender.as_str(), "MessageSent", &t);
        }
    }

    fn relay(
        &mut self,
        from: &EndpointId,
        to: &EndpointId,
        goal_id: Option<GoalId>,
        body: MessageBody,
    ) -> Result<crate::mas::MsgId, GatewayError> {
        let now = self.world.tick();
        let id = self.bus.relay(from, to, goal_id, body, now)?;
        Ok(id)
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<(), GatewayError> {
        let now = self.world.tick();
        self.run_kernel_script(now);
        self.issue_scripted_goals(now)?;
        self.bus.retransmit_due(now)?;
        self.flush_net();
        self.deliver(now)?;
        self.flush_net();
        self.perceive(now);
        self.supervise(now)?;
        self.flush_net();
        let commands = self.run_executives(now)?;
        self.flush_net();
        if now > 0 && now.is_multiple_of(self.config.sync_interval) {
            self.fuse_maps();
        }
        let report = self.world.step(&commands);
        for c in report.collisions {
            self.recorder.record_value(now, "world", "Collision", &c);
            self.inputs
                .entry(c.entity.clone())
                .or_default()
                .push(ExecInput::Collision { at: c.at });
        }
        for ev in report.applied {
            self.recorder.record_value(now, "world", "ScriptEvent", &ev);
        }
        Ok(())
    }

    /// Final fusion and the `RunEnd` record. Idempotent.
    pub fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        self.fuse_maps();
        let union = self.revealed_union();
        let covered = union
            .iter()
            .filter(|&&i| self.fused.cells()[i] != CellState::Unknown)
            .count();
        let goals: Vec<_> = self
            .goals
            .values()
            .filter(|g| g.external)
            .cloned()
            .collect();
        let payload = json!({
            "ticks": self.world.tick(),
            "goals": goals,
            "all_goals_terminal": self.external_goals_terminal(),
            "revealed_union": union.len(),
            "fused_covered": covered,
        });
        self.log(KERNEL, "RunEnd", &payload);
    }

    fn run_kernel_script(&mut self, now: u64) {
        let due: Vec<KernelItem> = self
            .kernel_script
            .iter()
            .filter(|k| k.tick == now)
            .cloned()
            .collect();
        for item in due {
            match item.action {
                KernelAction::Command { command } => {
                    let _ = self.apply_command(&command, "script");
                }
                KernelAction::Partition { a, b, partitioned } => {
                    let res = self.bus.set_partition(&a, &b, partitioned);
                    let payload = json!({
                        "a": a,
                        "b": b,
                        "partitioned": partitioned,
                        "error": res.err().map(|e| e.to_string()),
                    });
                    self.log(KERNEL, "Partition", &payload);
                }
            }
        }
    }

    fn next_goal_id(&mut self) -> GoalId {
        self.goal_ids += 1;
        GoalId(self.goal_ids)
    }

    /// Sends a goal request on behalf of `originator` and tracks it.
    fn issue_goal(
        &mut self,
        agent: &EntityId,
        required_level: AutonomyLevel,
        spec: crate::mas::GoalSpec,
        originator: EndpointId,
        source: &str,
    ) -> Result<(GoalId, crate::mas::MsgId), GatewayError> {
        let goal_id = self.next_goal_id();
        let goal = Goal::new(goal_id, required_level, spec, originator.clone());
        self.goals.insert(
            goal_id,
            GoalRecord {
                goal_id,
                agent: agent.clone(),
                kind: goal.kind(),
                status: GoalStatus::Pending,
                reason: None,
                external: true,
            },
        );
        let to = EndpointId::new(agent.as_str());
        let msg_id = self.relay(
            &originator,
            &to,
            Some(goal_id),
            MessageBody::GoalRequest(goal.clone()),
        )?;
        let payload = json!({ "goal": goal, "agent": agent, "msg_id": msg_id });
        self.log(source, "GoalIssued", &payload);
        Ok((goal_id, msg_id))
    }

    fn issue_scripted_goals(&mut self, now: u64) -> Result<(), GatewayError> {
        let due: Vec<GoalScript> = self
            .goal_script
            .iter()
            .filter(|g| g.tick == now)
            .cloned()
            .collect();
        for g in due {
            self.issue_goal(
                &g.agent,
                g.required_level,
                g.goal,
                g.originator.clone(),
                g.originator.as_str(),
            )?;
        }
        Ok(())
    }

    /// Records a status change, updates the goal table and tells the
    /// originator.
    fn goal_status(
        &mut self,
        agent: &EntityId,
        report: GoalStatusReport,
        originator: &EndpointId,
    ) -> Result<(), GatewayError> {
        if let Some(g) = self.goals.get_mut(&report.goal_id) {
            g.status = report.status;
            g.reason = report.reason;
        }
        let payload = json!({
            "agent": agent,
            "originator": originator,
            "goal_id": report.goal_id,
            "kind": report.kind,
            "status": report.status,
            "reason": report.reason,
        });
        self.log(agent.as_str(), "GoalStatus", &payload);
        let from = EndpointId::new(agent.as_str());
        if &from != originator && self.bus.is_registered(originator) {
            self.relay(
                &from,
                originator,
                Some(report.goal_id),
                MessageBody::GoalStatus(report),
            )?;
        }
        Ok(())
    }

    fn deliver(&mut self, now: u64) -> Result<(), GatewayError> {
        for d in self.bus.poll(now)? {
            match d {
                Delivery::Acked { msg_id, by } => {
                    self.log(by.as_str(), "Acked", &json!({ "msg_id": msg_id }));
                }
                Delivery::Duplicate(m) => {
                    let payload = json!({
                        "msg_id": m.msg_id,
                        "kind": m.kind(),
                        "sender": m.sender,
                        "goal_id": m.goal_id,
                    });
                    self.log(m.recipient.as_str(), "DuplicateDropped", &payload);
                }
                Delivery::Fresh(m) => self.dispatch(m)?,
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, m: MasMessage) -> Result<(), GatewayError> {
        let payload = json!({
            "msg_id": m.msg_id,
            "kind": m.kind(),
            "sender": m.sender,
            "goal_id": m.goal_id,
        });
        self.log(m.recipient.as_str(), "Delivered", &payload);
        let recipient = EntityId::new(m.recipient.as_str());
        if let Some(i) = self.agent_index(&recipient) {
            return self.dispatch_to_agent(i, m);
        }
        if m.recipient.as_str() == SUPERVISOR {
            if let MessageBody::PromptResponse(PromptReply { case_id, response }) = m.body {
                let now = self.world.tick();
                match self.supervisor.on_prompt_response(case_id, response, now) {
                    Ok(outs) => self.handle_supervise(outs)?,
                    Err(e) => {
                        let payload = json!({ "case_id": case_id, "error": e.to_string() });
                        self.log(SUPERVISOR, "PromptResponseIgnored", &payload);
                    }
                }
            }
        }
        Ok(())
    }

    fn dispatch_to_agent(&mut self, i: usize, m: MasMessage) -> Result<(), GatewayError> {
        let agent = self.agents[i].id().clone();
        let level = self.agents[i].level();
        if let GateDecision::Reject(reason) = gate_message(level, &m) {
            let payload = json!({
                "msg_id": m.msg_id,
                "kind": m.kind(),
                "level": level,
                "reason": reason,
            });
            self.log(agent.as_str(), "GateRejected", &payload);
            if let MessageBody::GoalRequest(mut goal) = m.body {
                if let Ok(r) = update_goal_status(
                    &mut goal,
                    GoalStatus::Rejected,
                    Some(FailureReason::AutonomyLevelMismatch),
                ) {
                    self.goal_status(&agent, r, &goal.originator)?;
                }
            }
            return Ok(());
        }
        let input = match m.body {
            MessageBody::GoalRequest(mut goal) => {
                let payload = json!({
                    "goal_id": goal.goal_id,
                    "kind": goal.kind(),
                    "msg_id": m.msg_id,
                });
                self.log(agent.as_str(), "GoalApplied", &payload);
                let originator = goal.originator.clone();
                match update_goal_status(&mut goal, GoalStatus::Accepted, None) {
                    Ok(r) => self.goal_status(&agent, r, &originator)?,
                    Err(_) => return Ok(()),
                }
                ExecInput::Goal(goal)
            }
            MessageBody::Telecommand(t) => ExecInput::Telecommand(t),
            MessageBody::Observation(observation) => ExecInput::Observation {
                from: m.sender,
                observation,
            },
            _ => return Ok(()),
        };
        self.inputs.entry(agent).or_default().push(input);
        Ok(())
    }

    fn perceive(&mut self, now: u64) {
        let mut batches = Vec::new();
        let mut seen_by: BTreeMap<EntityId, BTreeSet<EntityId>> = BTreeMap::new();
        for (id, s) in &self.sensors {
            let Some(e) = self.world.entity(id) else {
                continue;
            };
            let dets = detect(&self.world, id.as_str(), e.pose, s.fov, s.range, Some(id));
            seen_by.insert(id.clone(), dets.iter().map(|d| d.entity.clone()).collect());
            batches.push(dets);
        }
        for a in &mut self.agents {
            let id = a.id().clone();
            let (Some(e), Some(s)) = (
                self.world.entity(&id),
                self.sensors.iter().find(|(x, _)| *x == id).map(|(_, s)| *s),
            ) else {
                continue;
            };
            let cells = self.world.raycast_reveal(e.pose, s.fov, s.range);
            a.integrate(&cells);
            let grid = self.world.grid();
            let mine = self.revealed.entry(id.clone()).or_default();
            mine.extend(
                cells
                    .iter()
                    .filter(|(_, st)| *st != CellState::Unknown)
                    .map(|(c, _)| grid.linear(*c)),
            );
            let visible = seen_by.remove(&id).unwrap_or_default();
            semantic_overlay(a.known_mut(), &self.world, &visible);
        }
        let merged = merge_detections(batches);
        for change in self.tracker.update(&merged, now) {
            let (kind, track_id, entity) = match change {
                TrackChange::Opened { track_id, entity } => ("TrackOpened", track_id, entity),
                TrackChange::Staled { track_id, entity } => ("TrackStaled", track_id, entity),
            };
            let payload = json!({ "track_id": track_id, "entity": entity });
            self.recorder.record_value(now, "percept", kind, &payload);
        }
    }

    fn supervise(&mut self, now: u64) -> Result<(), GatewayError> {
        let falls = detect_fall(&self.tracker, &self.world, now);
        let upright: Vec<EntityId> = self
            .tracker
            .live()
            .filter(|t| t.class == DetectionClass::Astronaut && t.last_seen_tick == now)
            .filter(|t| {
                self.world.entity(&t.entity).and_then(|e| e.posture()) == Some(Posture::Upright)
            })
            .map(|t| t.entity.clone())
            .collect();
        let mut outs = self.supervisor.observe_falls(&falls, &upright, now);
        outs.extend(self.supervisor.check_timeouts(now));
        let interactions =
            detect_interaction(&self.tracker, &self.world, self.config.percept.d_int, now);
        let world = &self.world;
        outs.extend(self.supervisor.check_assignments(
            &interactions,
            |id| world.entity(id).map(|e| e.kind()),
            now,
        ));
        self.handle_supervise(outs)
    }

    fn handle_supervise(&mut self, outs: Vec<SuperviseOutput>) -> Result<(), GatewayError> {
        let now = self.world.tick();
        for o in outs {
            self.recorder.record_tagged(now, SUPERVISOR, &o);
            match o {
                SuperviseOutput::CaseTransition {
                    case_id, from, to, ..
                } => {
                    let open = match (from, to) {
                        (None, _) => Some(true),
                        (_, s) if s.is_terminal() => Some(false),
                        _ => None,
                    };
                    if let Some(open) = open {
                        for a in &self.agents {
                            self.inputs
                                .entry(a.id().clone())
                                .or_default()
                                .push(ExecInput::Emergency { case_id, open });
                        }
                    }
                }
                SuperviseOutput::Prompt { case_id, astronaut } => {
                    let to = EndpointId::new(astronaut.as_str());
                    let body = MessageBody::Prompt(PromptNotice { case_id, astronaut });
                    self.relay(&EndpointId::new(SUPERVISOR), &to, None, body)?;
                }
                SuperviseOutput::Alert(alert) => {
                    let to = match (&alert.recipient, &alert.astronaut) {
                        (AlertRecipient::Astronaut, Some(a)) => EndpointId::new(a.as_str()),
                        _ => EndpointId::new(MISSION_CONTROL),
                    };
                    self.alerts.push(AlertView {
                        alert: alert.clone(),
                        acknowledged: false,
                    });
                    self.relay(
                        &EndpointId::new(SUPERVISOR),
                        &to,
                        None,
                        MessageBody::Alert(alert),
                    )?;
                }
                SuperviseOutput::InteractionLogged { .. } | SuperviseOutput::ErrorLogged(_) => {}
            }
        }
        Ok(())
    }

    fn run_executives(
        &mut self,
        now: u64,
    ) -> Result<BTreeMap<EntityId, VelocityCommand>, GatewayError> {
        let mut commands = BTreeMap::new();
        for i in 0..self.agents.len() {
            let id = self.agents[i].id().clone();
            let inputs = self.inputs.remove(&id).unwrap_or_default();
            let mut ctx = TickContext {
                tick: now,
                world: &self.world,
                storages: &mut self.storages,
                goal_ids: &mut self.goal_ids,
            };
            let out = self.agents[i].tick(inputs, &mut ctx);
            commands.insert(id.clone(), out.command);
            self.handle_exec_output(i, out)?;
        }
        Ok(commands)
    }

    fn handle_exec_output(&mut self, i: usize, out: ExecOutput) -> Result<(), GatewayError> {
        let now = self.world.tick();
        let id = self.agents[i].id().clone();
        let me = EndpointId::new(id.as_str());
        for ev in &out.events {
            self.recorder.record_tagged(now, id.as_str(), ev);
        }
        for (report, originator) in out.reports {
            self.goal_status(&id, report, &originator)?;
        }
        for (goal, to) in &out.goals_issued {
            self.goals.insert(
                goal.goal_id,
                GoalRecord {
                    goal_id: goal.goal_id,
                    agent: to.clone(),
                    kind: goal.kind(),
                    status: GoalStatus::Pending,
                    reason: None,
                    external: false,
                },
            );
            let payload = json!({ "goal": goal, "agent": to });
            self.log(id.as_str(), "GoalIssued", &payload);
        }
        for m in out.messages {
            self.relay(&me, &m.recipient, m.goal_id, m.body)?;
        }
        for e in out.errors {
            let outs = self.supervisor.on_error(e, now);
            self.handle_supervise(outs)?;
        }
        for effect in out.effects {
            let ok = match &effect {
                WorldEffect::ToolToArm { slot } => self.world.take_tool(slot).is_some(),
                WorldEffect::ToolToSlot { slot } => match self.agents[i].holding().cloned() {
                    Some(t) => self.world.put_tool(slot, t),
                    None => false,
                },
            };
            let mut payload = serde_json::to_value(&effect).expect("effects serialize");
            payload["applied"] = json!(ok);
            self.log(id.as_str(), "WorldEffect", &payload);
        }
        Ok(())
    }

    /// Fuses every agent's known map into one and hands it back to all of
    /// them. Agents are localized, so their maps already share a frame and
    /// fusion uses the identity; feature registration of the first pair is
    /// run and logged as a consistency check.
    fn fuse_maps(&mut self) {
        let Some(first) = self.agents.first() else {
            return;
        };
        let mut fused = first.known().blank_like();
        for a in &self.agents {
            fused = fuse(&fused, a.known(), &RigidTransform2D::IDENTITY);
        }
        let registration = if self.agents.len() >= 2 {
            let seed = self.seed ^ self.world.tick();
            Some(register(
                self.agents[0].known(),
                self.agents[1].known(),
                &self.config.fusion,
                seed,
            ))
        } else {
            None
        };
        let res = fused.resolution();
        let consistent = registration.map(|r| match r {
            TransformEstimate::Found { transform, .. } => {
                transform.rotation.abs() <= 2f64.to_radians() && transform.translation.norm() <= res
            }
            TransformEstimate::InsufficientOverlap => false,
        });
        let changed: BTreeMap<String, usize> = self
            .agents
            .iter_mut()
            .map(|a| (a.id().to_string(), a.adopt(&fused)))
            .collect();
        self.fused = fused;
        let payload = json!({
            "known_cells": self.fused.known_count(),
            "adopted": changed,
            "registration": registration,
            "consistent": consistent,
        });
        self.log("fusion", "MapFusion", &payload);
        let digest = format!("{:016x}", self.world.digest());
        self.log(KERNEL, "WorldDigest", &json!({ "digest": digest }));
    }

    /// Applies an operator command at the current tick boundary and logs
    /// the outcome.
    pub fn apply_command(
        &mut self,
        command: &Command,
        source: &str,
    ) -> Result<CommandAck, CommandError> {
        let result = self.apply_inner(command, source);
        let payload = match &result {
            Ok(ack) => json!({ "command": command, "ack": ack }),
            Err(e) => json!({ "command": command, "error": e }),
        };
        let kind = if result.is_ok() {
            "CommandApplied"
        } else {
            "CommandRejected"
        };
        self.log(source, kind, &payload);
        self.flush_net();
        result
    }

    fn agent_or_err(&self, agent: &EntityId) -> Result<usize, CommandError> {
        self.agent_index(agent)
            .ok_or_else(|| CommandError::UnknownRef {
                what: format!("agent `{agent}`"),
            })
    }

    fn apply_inner(&mut self, command: &Command, source: &str) -> Result<CommandAck, CommandError> {
        let bus_err = |e: GatewayError| CommandError::UnknownRef {
            what: e.to_string(),
        };
        let mc = EndpointId::new(MISSION_CONTROL);
        match command {
            Command::IssueGoal {
                agent,
                required_level,
                goal,
            } => {
                let i = self.agent_or_err(agent)?;
                let probe = probe_message(MessageBody::GoalRequest(Goal::new(
                    GoalId(0),
                    *required_level,
                    goal.clone(),
                    mc.clone(),
                )));
                if gate_message(self.agents[i].level(), &probe) != GateDecision::Accept {
                    return Err(CommandError::AutonomyLevelMismatch {
                        agent: agent.clone(),
                    });
                }
                let (goal_id, msg_id) = self
                    .issue_goal(agent, *required_level, goal.clone(), mc, source)
                    .map_err(bus_err)?;
                Ok(CommandAck {
                    goal_id: Some(goal_id),
                    msg_id: Some(msg_id),
                    ..CommandAck::default()
                })
            }
            Command::Telecommand { agent, telecommand } => {
                let i = self.agent_or_err(agent)?;
                let body = MessageBody::Telecommand(telecommand.clone());
                if gate_message(self.agents[i].level(), &probe_message(body.clone()))
                    != GateDecision::Accept
                {
                    return Err(CommandError::AutonomyLevelMismatch {
                        agent: agent.clone(),
                    });
                }
                let to = EndpointId::new(agent.as_str());
                let msg_id = self.relay(&mc, &to, None, body).map_err(bus_err)?;
                Ok(CommandAck {
                    msg_id: Some(msg_id),
                    ..CommandAck::default()
                })
            }
            Command::SetAutonomyLevel { agent, level } => {
                let i = self.agent_or_err(agent)?;
                self.agents[i].set_level(*level);
                Ok(CommandAck::default())
            }
            Command::PromptResponse {
                case_id,
                astronaut,
                response,
            } => {
                let case = match (case_id, astronaut) {
                    (Some(id), _) => self.supervisor.case(*id),
                    (None, Some(a)) => self
                        .supervisor
                        .cases()
                        .iter()
                        .rev()
                        .find(|c| &c.astronaut == a),
                    (None, None) => None,
                }
                .cloned()
                .ok_or_else(|| CommandError::UnknownRef {
                    what: "emergency case".into(),
                })?;
                if case.state != CaseState::Prompted {
                    return Err(CommandError::StaleResponse {
                        case_id: case.case_id,
                    });
                }
                let from = EndpointId::new(case.astronaut.as_str());
                let body = MessageBody::PromptResponse(PromptReply {
                    case_id: case.case_id,
                    response: *response,
                });
                let msg_id = self
                    .relay(&from, &EndpointId::new(SUPERVISOR), None, body)
                    .map_err(bus_err)?;
                Ok(CommandAck {
                    case_id: Some(case.case_id),
                    msg_id: Some(msg_id),
                    ..CommandAck::default()
                })
            }
            Command::ConfirmStorageEmptied { agent } => {
                self.agent_or_err(agent)?;
                if !self.storages.contains_key(agent) {
                    return Err(CommandError::UnknownRef {
                        what: format!("storage on `{agent}`"),
                    });
                }
                let pos = self
                    .world
                    .entity(agent)
                    .map(|e| e.position())
                    .expect("agents exist");
                let distance = self
                    .world
                    .entities_of(EntityKind::BaseStation)
                    .map(|b| (pos.distance(b.position()) - b.footprint_radius).max(0.0))
                    .fold(f64::INFINITY, f64::min);
                if !(distance <= self.config.exec.base_radius) {
                    return Err(CommandError::NotAtBase {
                        agent: agent.clone(),
                        distance,
                    });
                }
                let slots = self.storages[agent].slots.len();
                self.storages
                    .insert(agent.clone(), StorageState::new(slots));
                self.inputs
                    .entry(agent.clone())
                    .or_default()
                    .push(ExecInput::StorageEmptied);
                Ok(CommandAck::default())
            }
            Command::AcknowledgeAlert { alert_id } => {
                let a = self
                    .alerts
                    .iter_mut()
                    .find(|a| a.alert.alert_id == *alert_id)
                    .ok_or_else(|| CommandError::UnknownRef {
                        what: format!("alert {alert_id}"),
                    })?;
                a.acknowledged = true;
                Ok(CommandAck {
                    alert_id: Some(*alert_id),
                    ..CommandAck::default()
                })
            }
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            tick: self.world.tick(),
            dt: self.config.dt,
            map: self.fused.clone(),
            entities: self.world.entities().to_vec(),
            tracks: self.tracker.tracks().to_vec(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentView {
                    id: a.id().clone(),
                    role: a.role(),
                    level: a.level(),
                    goal: a.plan().map(|p| p.root_goal_id),
                    tasks: a
                        .plan()
                        .map(|p| p.task_names().into_iter().map(String::from).collect())
                        .unwrap_or_default(),
                    cursor: a.plan().map_or(0, |p| p.cursor),
                    holding: a.holding().cloned(),
                    halted: a.is_halted(),
                })
                .collect(),
            goals: self.goals.values().cloned().collect(),
            cases: self.supervisor.cases().to_vec(),
            alerts: self.alerts.clone(),
        }
    }

    /// Current known map of an agent, for tests and tooling.
    pub fn known_map(&self, agent: &EntityId) -> Option<&GridMap> {
        self.agent(agent).map(|a| a.known())
    }

    pub fn tool_in_slot(&self, slot: &EntityId) -> Option<&crate::world::ToolSpec> {
        match &self.world.entity(slot)?.body {
            EntityBody::ToolSlot { tool, .. } => tool.as_ref(),
            _ => None,
        }
    }
}

/// A message used only to ask the gate about a command before sending it.
fn probe_message(body: MessageBody) -> MasMessage {
    MasMessage {
        msg_id: crate::mas::MsgId(0),
        sender: EndpointId::new(MISSION_CONTROL),
        recipient: EndpointId::new(MISSION_CONTROL),
        sent_tick: 0,
        goal_id: None,
        body,
    }
}
