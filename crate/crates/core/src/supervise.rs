//! Background supervision: emergency cases with astronaut prompt and
//! timeout, assignment compliance, and escalation of unhandled errors to
//! Mission Control. Never commands motion.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mas::FailureReason;
use crate::percept::{FallEvent, InteractionEvent};
use crate::world::{EntityId, EntityKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptAnswer {
    Safe,
    Emergency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlertRecipient {
    Astronaut,
    MissionControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlertReason {
    /// The astronaut confirmed a real emergency.
    EmergencyConfirmed,
    /// The astronaut did not answer the safety prompt in time.
    NoPromptResponse,
    AssignmentViolation,
    UnhandledError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: u64,
    pub recipient: AlertRecipient,
    pub reason: AlertReason,
    /// Case, assignment or error source the alert is about.
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub astronaut: Option<EntityId>,
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseState {
    Detected,
    Prompted,
    ClosedSafe,
    Escalated,
}

impl CaseState {
    pub fn is_terminal(self) -> bool {
        matches!(self, CaseState::ClosedSafe | CaseState::Escalated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmergencyCase {
    pub case_id: u64,
    pub astronaut: EntityId,
    pub astronaut_track: u64,
    pub state: CaseState,
    pub t_detect: u64,
    pub t_prompt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub source: String,
    pub code: FailureReason,
    pub severity: Severity,
    pub handled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperviseConfig {
    pub t_ack_s: f64,
    pub debounce_ticks: u64,
}

impl Default for SuperviseConfig {
    fn default() -> Self {
        SuperviseConfig {
            t_ack_s: 30.0,
            debounce_ticks: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SuperviseError {
    #[error("astronaut `{0}` already has an open emergency case")]
    DuplicateCase(EntityId),
    #[error("case {0} is already closed")]
    StaleResponse(u64),
    #[error("no emergency case {0}")]
    UnknownCase(u64),
}

/// Everything supervision produces in a tick, in emission order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type")]
pub enum SuperviseOutput {
    CaseTransition {
        case_id: u64,
        astronaut: EntityId,
        from: Option<CaseState>,
        to: CaseState,
    },
    Prompt {
        case_id: u64,
        astronaut: EntityId,
    },
    Alert(Alert),
    InteractionLogged {
        astronaut: EntityId,
        asset: EntityId,
        assigned: Option<EntityId>,
    },
    ErrorLogged(ErrorReport),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Supervisor {
    config: SuperviseConfig,
    dt: f64,
    assignments: BTreeMap<EntityId, EntityId>,
    cases: Vec<EmergencyCase>,
    /// Astronauts whose current fall already produced a case; cleared once
    /// they are seen upright again.
    latched: BTreeSet<EntityId>,
    interaction_seen: BTreeMap<(EntityId, EntityId), u64>,
    error_seen: BTreeMap<(String, FailureReason), u64>,
    alerted: BTreeSet<(u64, AlertRecipient)>,
    next_case: u64,
    next_alert: u64,
}

impl Supervisor {
    pub fn new(
        config: SuperviseConfig,
        dt: f64,
        assignments: BTreeMap<EntityId, EntityId>,
    ) -> Self {
        Supervisor {
            config,
            dt,
            assignments,
            cases: Vec::new(),
            latched: BTreeSet::new(),
            interaction_seen: BTreeMap::new(),
            error_seen: BTreeMap::new(),
            alerted: BTreeSet::new(),
            next_case: 1,
            next_alert: 1,
        }
    }

    pub fn cases(&self) -> &[EmergencyCase] {
        &self.cases
    }

    pub fn case(&self, case_id: u64) -> Option<&EmergencyCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn open_cases(&self) -> usize {
        self.cases.iter().filter(|c| !c.state.is_terminal()).count()
    }

    pub fn assignments(&self) -> &BTreeMap<EntityId, EntityId> {
        &self.assignments
    }

    /// Ticks between prompt and escalation.
    pub fn timeout_ticks(&self) -> u64 {
        (self.config.t_ack_s / self.dt - 1e-9).ceil().max(0.0) as u64
    }

    fn alert(
        &mut self,
        recipient: AlertRecipient,
        reason: AlertReason,
        reference: String,
        astronaut: Option<EntityId>,
        now: u64,
    ) -> Alert {
        let alert = Alert {
            alert_id: self.next_alert,
            recipient,
            reason,
            reference,
            astronaut,
            tick: now,
        };
        self.next_alert += 1;
        alert
    }

    fn case_alert(
        &mut self,
        idx: usize,
        reason: AlertReason,
        now: u64,
        out: &mut Vec<SuperviseOutput>,
    ) {
        let case_id = self.cases[idx].case_id;
        if !self
            .alerted
            .insert((case_id, AlertRecipient::MissionControl))
        {
            return;
        }
        let astronaut = self.cases[idx].astronaut.clone();
        let a = self.alert(
            AlertRecipient::MissionControl,
            reason,
            format!("case:{case_id}"),
            Some(astronaut),
            now,
        );
        out.push(SuperviseOutput::Alert(a));
    }

    fn transition(&mut self, idx: usize, to: CaseState, out: &mut Vec<SuperviseOutput>) {
        let from = self.cases[idx].state;
        self.cases[idx].state = to;
        out.push(SuperviseOutput::CaseTransition {
            case_id: self.cases[idx].case_id,
            astronaut: self.cases[idx].astronaut.clone(),
            from: Some(from),
            to,
        });
    }

    /// Opens a case and prompts the astronaut in the same tick.
    pub fn on_fall(
        &mut self,
        fall: &FallEvent,
        now: u64,
    ) -> Result<Vec<SuperviseOutput>, SuperviseError> {
        if self.cases.iter().any(|c| {
            !c.state.is_terminal()
                && (c.astronaut == fall.astronaut || c.astronaut_track == fall.astronaut_track)
        }) {
            return Err(SuperviseError::DuplicateCase(fall.astronaut.clone()));
        }
        let case_id = self.next_case;
        self.next_case += 1;
        self.cases.push(EmergencyCase {
            case_id,
            astronaut: fall.astronaut.clone(),
            astronaut_track: fall.astronaut_track,
            state: CaseState::Detected,
            t_detect: now,
            t_prompt: now,
        });
        self.latched.insert(fall.astronaut.clone());
        let idx = self.cases.len() - 1;
        let mut out = vec![SuperviseOutput::CaseTransition {
            case_id,
            astronaut: fall.astronaut.clone(),
            from: None,
            to: CaseState::Detected,
        }];
        self.transition(idx, CaseState::Prompted, &mut out);
        out.push(SuperviseOutput::Prompt {
            case_id,
            astronaut: fall.astronaut.clone(),
        });
        Ok(out)
    }

    /// Per-tick fall handling: one case per fall, where a fall lasts until
    /// the astronaut is seen upright.
    pub fn observe_falls(
        &mut self,
        falls: &[FallEvent],
        seen_upright: &[EntityId],
        now: u64,
    ) -> Vec<SuperviseOutput> {
        for a in seen_upright {
            self.latched.remove(a);
        }
        let mut out = Vec::new();
        for f in falls {
            if self.latched.contains(&f.astronaut) {
                continue;
            }
            if let Ok(o) = self.on_fall(f, now) {
                out.extend(o);
            }
        }
        out
    }

    pub fn on_prompt_response(
        &mut self,
        case_id: u64,
        answer: PromptAnswer,
        now: u64,
    ) -> Result<Vec<SuperviseOutput>, SuperviseError> {
        let idx = self
            .cases
            .iter()
            .position(|c| c.case_id == case_id)
            .ok_or(SuperviseError::UnknownCase(case_id))?;
        if self.cases[idx].state != CaseState::Prompted {
            return Err(SuperviseError::StaleResponse(case_id));
        }
        let mut out = Vec::new();
        match answer {
            PromptAnswer::Safe => self.transition(idx, CaseState::ClosedSafe, &mut out),
            PromptAnswer::Emergency => {
                self.transition(idx, CaseState::Escalated, &mut out);
                self.case_alert(idx, AlertReason::EmergencyConfirmed, now, &mut out);
            }
        }
        Ok(out)
    }

    /// Escalates every prompted case whose deadline has come.
    pub fn check_timeouts(&mut self, now: u64) -> Vec<SuperviseOutput> {
        let deadline = self.timeout_ticks();
        let mut out = Vec::new();
        for idx in 0..self.cases.len() {
            let c = &self.cases[idx];
            if c.state == CaseState::Prompted && now >= c.t_prompt + deadline {
                self.transition(idx, CaseState::Escalated, &mut out);
                self.case_alert(idx, AlertReason::NoPromptResponse, now, &mut out);
            }
        }
        out
    }

    /// Alerts the astronaut and Mission Control when an assigned astronaut
    /// works on another asset of the kind they were assigned. A violation
    /// seen again within the debounce window (measured from its last
    /// sighting) stays silent.
    pub fn check_assignments(
        &mut self,
        interactions: &[InteractionEvent],
        kind_of: impl Fn(&EntityId) -> Option<EntityKind>,
        now: u64,
    ) -> Vec<SuperviseOutput> {
        let mut out = Vec::new();
        for ev in interactions {
            let key = (ev.astronaut.clone(), ev.asset.clone());
            let onset = self
                .interaction_seen
                .get(&key)
                .is_none_or(|&last| now.saturating_sub(last) > self.config.debounce_ticks);
            self.interaction_seen.insert(key, now);
            if !onset {
                continue;
            }
            let assigned = self.assignments.get(&ev.astronaut).cloned();
            let violation = assigned
                .as_ref()
                .is_some_and(|a| *a != ev.asset && kind_of(a) == Some(ev.asset_kind));
            if !violation {
                out.push(SuperviseOutput::InteractionLogged {
                    astronaut: ev.astronaut.clone(),
                    asset: ev.asset.clone(),
                    assigned,
                });
                continue;
            }
            let reference = format!(
                "assignment:{}:{}->{}",
                ev.astronaut,
                assigned.expect("violation implies assignment"),
                ev.asset
            );
            for recipient in [AlertRecipient::Astronaut, AlertRecipient::MissionControl] {
                let a = self.alert(
                    recipient,
                    AlertReason::AssignmentViolation,
                    reference.clone(),
                    Some(ev.astronaut.clone()),
                    now,
                );
                out.push(SuperviseOutput::Alert(a));
            }
        }
        out
    }

    /// Handled errors are logged; unhandled ones alert Mission Control once
    /// per (source, code) within the debounce window.
    pub fn on_error(&mut self, report: ErrorReport, now: u64) -> Vec<SuperviseOutput> {
        let mut out = vec![SuperviseOutput::ErrorLogged(report.clone())];
        if report.handled {
            return out;
        }
        let key = (report.source.clone(), report.code);
        let fresh = self
            .error_seen
            .get(&key)
            .is_none_or(|&last| now.saturating_sub(last) > self.config.debounce_ticks);
        self.error_seen.insert(key, now);
        if fresh {
            let a = self.alert(
                AlertRecipient::MissionControl,
                AlertReason::UnhandledError,
                format!("error:{}:{:?}", report.source, report.code),
                None,
                now,
            );
            out.push(SuperviseOutput::Alert(a));
        }
        out
    }
}
