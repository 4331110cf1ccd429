//! Console wire protocol: 4-byte big-endian length, then one UTF-8 JSON
//! document tagged by `type`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::log::EventRecord;
use crate::mas::{
    AutonomyLevel, FailureReason, GoalId, GoalKind, GoalSpec, GoalStatus, MsgId, Telecommand,
};
use crate::percept::Track;
use crate::supervise::{Alert, EmergencyCase, PromptAnswer};
use crate::world::{Entity, EntityId, GridMap, Role, ToolSpec};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 16 << 20;

fn e4() -> AutonomyLevel {
    AutonomyLevel::E4
}

/// Operator actions. Scenario scripts use the same commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command")]
pub enum Command {
    IssueGoal {
        agent: EntityId,
        #[serde(default = "e4")]
        required_level: AutonomyLevel,
        goal: GoalSpec,
    },
    Telecommand {
        agent: EntityId,
        telecommand: Telecommand,
    },
    SetAutonomyLevel {
        agent: EntityId,
        level: AutonomyLevel,
    },
    /// Answers the open prompt of `case_id`, or of `astronaut` when no id
    /// is given.
    PromptResponse {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        case_id: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        astronaut: Option<EntityId>,
        response: PromptAnswer,
    },
    ConfirmStorageEmptied {
        agent: EntityId,
    },
    AcknowledgeAlert {
        alert_id: u64,
    },
}

/// Ids assigned while applying a command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandAck {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_id: Option<GoalId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<MsgId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "reason")]
pub enum CommandError {
    #[error("agent `{agent}` is at the wrong autonomy level")]
    AutonomyLevelMismatch { agent: EntityId },
    #[error("unknown reference: {what}")]
    UnknownRef { what: String },
    #[error("`{agent}` is {distance:.2} m from the base")]
    NotAtBase { agent: EntityId, distance: f64 },
    #[error("case {case_id} is not awaiting a response")]
    StaleResponse { case_id: u64 },
    #[error("malformed command: {detail}")]
    Malformed { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRecord {
    pub goal_id: GoalId,
    pub agent: EntityId,
    pub kind: GoalKind,
    pub status: GoalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<FailureReason>,
    /// Issued by the scenario or an operator rather than another agent.
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub id: EntityId,
    pub role: Role,
    pub level: AutonomyLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<GoalId>,
    pub tasks: Vec<String>,
    pub cursor: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holding: Option<ToolSpec>,
    pub halted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertView {
    #[serde(flatten)]
    pub alert: Alert,
    pub acknowledged: bool,
}

/// Everything a console needs to draw the current state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub dt: f64,
    pub map: GridMap,
    pub entities: Vec<Entity>,
    pub tracks: Vec<Track>,
    pub agents: Vec<AgentView>,
    pub goals: Vec<GoalRecord>,
    pub cases: Vec<EmergencyCase>,
    pub alerts: Vec<AlertView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Frame {
    Hello {
        protocol: u32,
        tick: u64,
    },
    Snapshot {
        snapshot: Box<Snapshot>,
    },
    Event {
        record: EventRecord,
    },
    Command {
        id: u64,
        command: Command,
    },
    Ack {
        id: u64,
        #[serde(flatten)]
        ack: CommandAck,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        error: CommandError,
    },
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    /// The frame was read completely but is not a valid document; the
    /// stream is still in sync.
    #[error("malformed frame: {0}")]
    Malformed(String),
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let body = serde_json::to_vec(frame).expect("frames serialize");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&encode(frame))?;
    w.flush()
}

/// Next frame, or `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let text = std::str::from_utf8(&body).map_err(|e| FrameError::Malformed(e.to_string()))?;
    serde_json::from_str(text)
        .map(Some)
        .map_err(|e| FrameError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Vec2;

    #[test]
    fn length_prefix_is_big_endian_body_size() {
        let f = Frame::Hello {
            protocol: 1,
            tick: 7,
        };
        let bytes = encode(&f);
        let body = br#"{"type":"Hello","protocol":1,"tick":7}"#;
        assert_eq!(&bytes[..4], &(body.len() as u32).to_be_bytes());
        assert_eq!(&bytes[4..], body);
    }

    #[test]
    fn frames_round_trip_back_to_back() {
        let frames = vec![
            Frame::Command {
                id: 3,
                command: Command::IssueGoal {
                    agent: "leader".into(),
                    required_level: AutonomyLevel::E4,
                    goal: GoalSpec::NavigateTo {
                        target: Vec2::new(1.0, 2.0),
                    },
                },
            },
            Frame::Ack {
                id: 3,
                ack: CommandAck {
                    goal_id: Some(GoalId(9)),
                    ..CommandAck::default()
                },
            },
            Frame::Error {
                id: Some(4),
                error: CommandError::AutonomyLevelMismatch {
                    agent: "leader".into(),
                },
            },
        ];
        let mut buf = Vec::new();
        for f in &frames {
            write_frame(&mut buf, f).unwrap();
        }
        let mut r = buf.as_slice();
        for f in &frames {
            assert_eq!(read_frame(&mut r).unwrap().as_ref(), Some(f));
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn malformed_body_keeps_stream_in_sync() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&5u32.to_be_bytes());
        buf.extend_from_slice(b"{nope");
        write_frame(
            &mut buf,
            &Frame::Hello {
                protocol: 1,
                tick: 0,
            },
        )
        .unwrap();
        let mut r = buf.as_slice();
        assert!(matches!(read_frame(&mut r), Err(FrameError::Malformed(_))));
        assert!(matches!(
            read_frame(&mut r).unwrap(),
            Some(Frame::Hello { .. })
        ));
    }

    #[test]
    fn oversized_length_is_refused() {
        let bytes = (MAX_FRAME as u32 + 1).to_be_bytes();
        assert!(matches!(
            read_frame(&mut bytes.as_slice()),
            Err(FrameError::TooLarge(_))
        ));
    }

    #[test]
    fn console_commands_parse_from_documented_shape() {
        let c: Command = serde_json::from_str(
            r#"{"command":"PromptResponse","astronaut":"astro","response":"Safe"}"#,
        )
        .unwrap();
        assert_eq!(
            c,
            Command::PromptResponse {
                case_id: None,
                astronaut: Some("astro".into()),
                response: PromptAnswer::Safe
            }
        );
        let c: Command = serde_json::from_str(
            r#"{"command":"Telecommand","agent":"leader","telecommand":{"command":"drive","v":0.1,"omega":0,"duration_ticks":2}}"#,
        )
        .unwrap();
        assert!(matches!(c, Command::Telecommand { .. }));
    }
}
