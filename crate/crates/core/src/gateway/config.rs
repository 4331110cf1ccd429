//! Effective simulation parameters: built-in defaults, then the scenario's
//! `config` object, then the file named by `CISRU_SIM_CONFIG`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::GatewayError;
use crate::executive::ExecConfig;
use crate::fusion::FusionConfig;
use crate::nav::NavConfig;
use crate::netsim::{ChannelParams, EndpointId};
use crate::supervise::SuperviseConfig;
use crate::world::RoverLimits;

pub const CONFIG_ENV: &str = "CISRU_SIM_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptConfig {
    /// Interaction distance between footprints.
    pub d_int: f64,
    /// Track association gate.
    pub gate: f64,
    pub stale_window: u64,
}

impl Default for PerceptConfig {
    fn default() -> Self {
        PerceptConfig {
            d_int: 1.0,
            gate: 2.0,
            stale_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelOverride {
    pub a: EndpointId,
    pub b: EndpointId,
    pub latency_ticks: u64,
    pub drop_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub latency_ticks: u64,
    pub drop_probability: f64,
    pub retransmit_period: u64,
    pub channels: Vec<ChannelOverride>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            latency_ticks: 0,
            drop_probability: 0.0,
            retransmit_period: 5,
            channels: Vec::new(),
        }
    }
}

impl NetConfig {
    pub fn default_params(&self) -> ChannelParams {
        ChannelParams {
            latency_ticks: self.latency_ticks,
            drop_probability: self.drop_probability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub limits: RoverLimits,
    pub nav: NavConfig,
    pub fusion: FusionConfig,
    pub supervise: SuperviseConfig,
    pub exec: ExecConfig,
    pub percept: PerceptConfig,
    pub net: NetConfig,
    /// Ticks between map fusions (and world digests in the log).
    pub sync_interval: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.5,
            limits: RoverLimits::default(),
            nav: NavConfig::default(),
            fusion: FusionConfig::default(),
            supervise: SuperviseConfig::default(),
            exec: ExecConfig::default(),
            percept: PerceptConfig::default(),
            net: NetConfig::default(),
            sync_interval: 50,
        }
    }
}

/// Recursive object merge; anything that is not an object on both sides is
/// replaced by `over`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (_, Value::Null) => {}
        (b, o) => *b = o.clone(),
    }
}

impl SimConfig {
    /// Defaults overlaid with each layer in order.
    pub fn layered(layers: &[&Value]) -> Result<SimConfig, GatewayError> {
        let mut v = serde_json::to_value(SimConfig::default()).expect("config serializes");
        for layer in layers {
            if !matches!(layer, Value::Object(_) | Value::Null) {
                return Err(GatewayError::Config(
                    "config overrides must be a JSON object".into(),
                ));
            }
            merge(&mut v, layer);
        }
        let cfg: SimConfig = serde_path_to_error::deserialize(v)
            .map_err(|e| GatewayError::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scenario overrides plus the optional override file.
    pub fn resolve(
        scenario: &Value,
        override_file: Option<&Path>,
    ) -> Result<SimConfig, GatewayError> {
        let file = match override_file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| GatewayError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| GatewayError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Null,
        };
        SimConfig::layered(&[scenario, &file])
    }

    /// `resolve` with the override file taken from the environment.
    pub fn from_env(scenario: &Value) -> Result<SimConfig, GatewayError> {
        let path = std::env::var_os(CONFIG_ENV).filter(|p| !p.is_empty());
        SimConfig::resolve(scenario, path.as_deref().map(Path::new))
    }

    fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.into()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(0.0..=1.0).contains(&self.net.drop_probability)
            || self
                .net
                .channels
                .iter()
                .any(|c| !(0.0..=1.0).contains(&c.drop_probability))
        {
            return bad("drop_probability must lie in [0, 1]");
        }
        if self.sync_interval == 0 {
            return bad("sync_interval must be at least 1");
        }
        Ok(())
    }
}
