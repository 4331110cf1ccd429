//! Goal/observation protocol between agents, the astronaut device and
//! Mission Control: autonomy-level gating, goal lifecycle, and at-least-once
//! relay with receiver-side deduplication on top of [`crate::netsim`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{ChannelParams, EndpointId, NetError, Network, SendOutcome};
use crate::percept::DefectReport;
use crate::supervise::{Alert, PromptAnswer};
use crate::world::{EntityId, Vec2};

/// ECSS execution-autonomy level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AutonomyLevel {
    E1,
    E2,
    E3,
    E4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalId(pub u64);

impl fmt::Display for GoalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MsgId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GoalStatus {
    Pending,
    Accepted,
    Rejected,
    Active,
    Achieved,
    Failed,
}

impl GoalStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            GoalStatus::Rejected | GoalStatus::Achieved | GoalStatus::Failed
        )
    }

    pub fn can_become(self, next: GoalStatus) -> bool {
        use GoalStatus::*;
        matches!(
            (self, next),
            (Pending, Accepted)
                | (Pending, Rejected)
                | (Accepted, Active)
                | (Active, Achieved)
                | (Active, Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureReason {
    Unreachable,
    GoalInObstacle,
    PathBlocked,
    ToolUnreachable,
    ToolNotAssembled,
    OutOfScoopRange,
    OutOfInspectRange,
    StorageFull,
    AutonomyLevelMismatch,
    UnknownGoalKind,
    RendezvousTimeout,
    SecondaryUnavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GoalKind {
    InspectPanels,
    MapAndSample,
    StoreSample,
    ReturnToBase,
    NavigateTo,
    CollectSample,
    Supervise,
}

/// Axis-aligned rectangle in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub min: Vec2,
    pub max: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectTarget {
    pub panel: EntityId,
    pub point: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTarget {
    pub sample: EntityId,
    pub point: Vec2,
}

/// Goal kind together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum GoalSpec {
    InspectPanels {
        targets: Vec<InspectTarget>,
    },
    MapAndSample {
        area: Area,
        #[serde(default)]
        samples: Vec<SampleTarget>,
    },
    StoreSample {
        sample: EntityId,
        rendezvous: Vec2,
    },
    ReturnToBase {
        base: Vec2,
    },
    NavigateTo {
        target: Vec2,
    },
    CollectSample {
        sample: EntityId,
        point: Vec2,
    },
    Supervise {
        duration_ticks: u64,
    },
}

impl GoalSpec {
    pub fn kind(&self) -> GoalKind {
        match self {
            GoalSpec::InspectPanels { .. } => GoalKind::InspectPanels,
            GoalSpec::MapAndSample { .. } => GoalKind::MapAndSample,
            GoalSpec::StoreSample { .. } => GoalKind::StoreSample,
            GoalSpec::ReturnToBase { .. } => GoalKind::ReturnToBase,
            GoalSpec::NavigateTo { .. } => GoalKind::NavigateTo,
            GoalSpec::CollectSample { .. } => GoalKind::CollectSample,
            GoalSpec::Supervise { .. } => GoalKind::Supervise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub goal_id: GoalId,
    pub required_level: AutonomyLevel,
    #[serde(flatten)]
    pub spec: GoalSpec,
    pub originator: EndpointId,
    pub status: GoalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<FailureReason>,
}

impl Goal {
    pub fn new(
        goal_id: GoalId,
        required_level: AutonomyLevel,
        spec: GoalSpec,
        originator: EndpointId,
    ) -> Self {
        Goal {
            goal_id,
            required_level,
            spec,
            originator,
            status: GoalStatus::Pending,
            failure_reason: None,
        }
    }

    pub fn kind(&self) -> GoalKind {
        self.spec.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal goal transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: GoalStatus,
    pub to: GoalStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalStatusReport {
    pub goal_id: GoalId,
    pub kind: GoalKind,
    pub status: GoalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<FailureReason>,
}

/// Moves a goal along its lifecycle and returns the status report owed to
/// the goal's originator.
pub fn update_goal_status(
    goal: &mut Goal,
    new_status: GoalStatus,
    reason: Option<FailureReason>,
) -> Result<GoalStatusReport, IllegalTransition> {
    if !goal.status.can_become(new_status) {
        return Err(IllegalTransition {
            from: goal.status,
            to: new_status,
        });
    }
    goal.status = new_status;
    if reason.is_some() {
        goal.failure_reason = reason;
    }
    Ok(GoalStatusReport {
        goal_id: goal.goal_id,
        kind: goal.kind(),
        status: new_status,
        reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Telecommand {
    Drive {
        v: f64,
        omega: f64,
        duration_ticks: u64,
    },
    Halt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Observation {
    Defect(DefectReport),
    SampleAnalysis {
        sample: EntityId,
        interest_score: f64,
        interesting: bool,
    },
    SecondaryArrived {
        goal_id: GoalId,
        position: Vec2,
    },
    SampleStored {
        goal_id: GoalId,
        sample: EntityId,
        slot: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptNotice {
    pub case_id: u64,
    pub astronaut: EntityId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptReply {
    pub case_id: u64,
    pub response: PromptAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    GoalRequest,
    GoalStatus,
    Observation,
    Telecommand,
    Ack,
    Alert,
    Prompt,
    PromptResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum MessageBody {
    GoalRequest(Goal),
    GoalStatus(GoalStatusReport),
    Observation(Observation),
    Telecommand(Telecommand),
    Ack { ack_of: MsgId },
    Alert(Alert),
    Prompt(PromptNotice),
    PromptResponse(PromptReply),
}

impl MessageBody {
    pub fn kind(&self) -> MessageKind {
        match self {
            MessageBody::GoalRequest(_) => MessageKind::GoalRequest,
            MessageBody::GoalStatus(_) => MessageKind::GoalStatus,
            MessageBody::Observation(_) => MessageKind::Observation,
            MessageBody::Telecommand(_) => MessageKind::Telecommand,
            MessageBody::Ack { .. } => MessageKind::Ack,
            MessageBody::Alert(_) => MessageKind::Alert,
            MessageBody::Prompt(_) => MessageKind::Prompt,
            MessageBody::PromptResponse(_) => MessageKind::PromptResponse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasMessage {
    pub msg_id: MsgId,
    pub sender: EndpointId,
    pub recipient: EndpointId,
    pub sent_tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_id: Option<GoalId>,
    #[serde(flatten)]
    pub body: MessageBody,
}

impl MasMessage {
    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    AutonomyLevelMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GateDecision {
    Accept,
    Reject(RejectReason),
}

/// Admission rule for messages reaching an agent at `level`.
///
/// E4 takes E4 goals but no raw telecommands; below E4 the operator drives
/// and E4 goals are refused. E2/E3 take goals tagged with their own level
/// (recognized, never produced by the shipped scenarios). Safety traffic
/// (alerts, prompts) and protocol traffic always pass.
pub fn gate_message(level: AutonomyLevel, message: &MasMessage) -> GateDecision {
    match &message.body {
        MessageBody::GoalRequest(goal) if goal.required_level != level => {
            GateDecision::Reject(RejectReason::AutonomyLevelMismatch)
        }
        MessageBody::Telecommand(_) if level == AutonomyLevel::E4 => {
            GateDecision::Reject(RejectReason::AutonomyLevelMismatch)
        }
        _ => GateDecision::Accept,
    }
}

/// Alerts and prompts pass the gate regardless of level.
pub fn bypasses_gate(kind: MessageKind) -> bool {
    matches!(
        kind,
        MessageKind::Alert | MessageKind::Prompt | MessageKind::PromptResponse
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MasError {
    #[error("recipient `{0}` is not registered")]
    UnknownRecipient(EndpointId),
    #[error("sender `{0}` is not registered")]
    UnknownSender(EndpointId),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    /// First arrival of an application message.
    Fresh(MasMessage),
    /// A retransmission the receiver already processed.
    Duplicate(MasMessage),
    /// Transport acknowledgement closing an outstanding request.
    Acked { msg_id: MsgId, by: EndpointId },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transmission {
    pub msg_id: MsgId,
    pub kind: MessageKind,
    pub sender: EndpointId,
    pub recipient: EndpointId,
    pub attempt: u32,
    pub outcome: SendOutcome,
}

#[derive(Debug, Clone)]
struct Outstanding {
    message: MasMessage,
    next_retransmit: u64,
    attempts: u32,
}

/// Relay between registered endpoints. Goal requests are retransmitted every
/// `retransmit_period` ticks until acknowledged; receivers drop repeats by
/// `msg_id`.
#[derive(Debug, Clone)]
pub struct MasBus {
    endpoints: BTreeSet<EndpointId>,
    net: Network<MasMessage>,
    default_params: ChannelParams,
    next_msg_id: u64,
    retransmit_period: u64,
    outstanding: BTreeMap<MsgId, Outstanding>,
    seen: BTreeSet<(EndpointId, MsgId)>,
    transmissions: Vec<Transmission>,
}

impl MasBus {
    pub fn new(seed: u64, retransmit_period: u64, default_params: ChannelParams) -> Self {
        MasBus {
            endpoints: BTreeSet::new(),
            net: Network::new(seed),
            default_params,
            next_msg_id: 1,
            retransmit_period: retransmit_period.max(1),
            outstanding: BTreeMap::new(),
            seen: BTreeSet::new(),
            transmissions: Vec::new(),
        }
    }

    /// Registers an endpoint and opens default channels to every endpoint
    /// already known.
    pub fn register(&mut self, endpoint: EndpointId) {
        if !self.endpoints.insert(endpoint.clone()) {
            return;
        }
        let others: Vec<_> = self
            .endpoints
            .iter()
            .filter(|e| **e != endpoint)
            .cloned()
            .collect();
        for other in others {
            self.net.add_channel(&endpoint, &other, self.default_params);
        }
    }

    pub fn is_registered(&self, endpoint: &EndpointId) -> bool {
        self.endpoints.contains(endpoint)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &EndpointId> {
        self.endpoints.iter()
    }

    pub fn configure_channel(
        &mut self,
        a: &EndpointId,
        b: &EndpointId,
        params: ChannelParams,
    ) -> Result<(), MasError> {
        for e in [a, b] {
            if !self.endpoints.contains(e) {
                return Err(MasError::UnknownRecipient(e.clone()));
            }
        }
        self.net.add_channel(a, b, params);
        Ok(())
    }

    pub fn set_partition(
        &mut self,
        a: &EndpointId,
        b: &EndpointId,
        flag: bool,
    ) -> Result<(), MasError> {
        Ok(self.net.set_partition(a, b, flag)?)
    }

    pub fn network(&self) -> &Network<MasMessage> {
        &self.net
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    /// Drains the send log accumulated since the last call.
    pub fn take_transmissions(&mut self) -> Vec<Transmission> {
        std::mem::take(&mut self.transmissions)
    }

    /// Hands a new message to the channel for its endpoint pair.
    pub fn relay(
        &mut self,
        sender: &EndpointId,
        recipient: &EndpointId,
        goal_id: Option<GoalId>,
        body: MessageBody,
        now: u64,
    ) -> Result<MsgId, MasError> {
        if !self.endpoints.contains(sender) {
            return Err(MasError::UnknownSender(sender.clone()));
        }
        if !self.endpoints.contains(recipient) {
            return Err(MasError::UnknownRecipient(recipient.clone()));
        }
        let msg_id = MsgId(self.next_msg_id);
        self.next_msg_id += 1;
        let message = MasMessage {
            msg_id,
            sender: sender.clone(),
            recipient: recipient.clone(),
            sent_tick: now,
            goal_id,
            body,
        };
        if message.kind() == MessageKind::GoalRequest {
            self.outstanding.insert(
                msg_id,
                Outstanding {
                    message: message.clone(),
                    next_retransmit: now + self.retransmit_period,
                    attempts: 1,
                },
            );
        }
        self.transmit(message, 1, now)?;
        Ok(msg_id)
    }

    fn transmit(&mut self, message: MasMessage, attempt: u32, now: u64) -> Result<(), MasError> {
        let record = (
            message.msg_id,
            message.kind(),
            message.sender.clone(),
            message.recipient.clone(),
        );
        let outcome = self.net.send(&record.2, &record.3, message, now)?;
        self.transmissions.push(Transmission {
            msg_id: record.0,
            kind: record.1,
            sender: record.2,
            recipient: record.3,
            attempt,
            outcome,
        });
        Ok(())
    }

    /// Resends every unacknowledged goal request whose period elapsed.
    pub fn retransmit_due(&mut self, now: u64) -> Result<(), MasError> {
        let due: Vec<MsgId> = self
            .outstanding
            .iter()
            .filter(|(_, o)| o.next_retransmit <= now)
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            let o = self.outstanding.get_mut(&id).expect("listed above");
            o.attempts += 1;
            o.next_retransmit = now + self.retransmit_period;
            let (message, attempt) = (o.message.clone(), o.attempts);
            self.transmit(message, attempt, now)?;
        }
        Ok(())
    }

    /// Messages due now, classified. Goal requests are acknowledged on every
    /// arrival, including repeats, since the earlier Ack may have been lost.
    pub fn poll(&mut self, now: u64) -> Result<Vec<Delivery>, MasError> {
        let mut out = Vec::new();
        for message in self.net.deliver_due(now) {
            if let MessageBody::Ack { ack_of } = message.body {
                if self.outstanding.remove(&ack_of).is_some() {
                    out.push(Delivery::Acked {
                        msg_id: ack_of,
                        by: message.sender.clone(),
                    });
                }
                continue;
            }
            let fresh = self
                .seen
                .insert((message.recipient.clone(), message.msg_id));
            if message.kind() == MessageKind::GoalRequest {
                let (to, from) = (message.sender.clone(), message.recipient.clone());
                self.relay(
                    &from,
                    &to,
                    message.goal_id,
                    MessageBody::Ack {
                        ack_of: message.msg_id,
                    },
                    now,
                )?;
            }
            out.push(if fresh {
                Delivery::Fresh(message)
            } else {
                Delivery::Duplicate(message)
            });
        }
        Ok(out)
    }
}
