//! Simulated communication fabric: per-pair channels with fixed latency,
//! seeded random loss and partitions.
//!
//! Loss is silent. Reliability is the job of the protocol layer in
//! [`crate::mas`].

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::fnv1a;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EndpointId(pub String);

impl EndpointId {
    pub fn new(s: impl Into<String>) -> Self {
        EndpointId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EndpointId {
    fn from(s: &str) -> Self {
        EndpointId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub latency_ticks: u64,
    pub drop_probability: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            latency_ticks: 0,
            drop_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SendOutcome {
    Enqueued { deliver_tick: u64 },
    DroppedPartitioned,
    DroppedLost,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("no channel between `{0}` and `{1}`")]
    UnknownChannel(EndpointId, EndpointId),
}

/// Unordered endpoint pair, stored sorted.
pub fn channel_key(a: &EndpointId, b: &EndpointId) -> (EndpointId, EndpointId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Channel<M> {
    endpoints: (EndpointId, EndpointId),
    params: ChannelParams,
    partitioned: bool,
    in_flight: VecDeque<(u64, M)>,
    rng: ChaCha8Rng,
    stats: ChannelStats,
}

impl<M> Channel<M> {
    pub fn new(a: EndpointId, b: EndpointId, params: ChannelParams, seed: u64) -> Self {
        Channel {
            endpoints: channel_key(&a, &b),
            params,
            partitioned: false,
            in_flight: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: ChannelStats::default(),
        }
    }

    pub fn endpoints(&self) -> &(EndpointId, EndpointId) {
        &self.endpoints
    }

    pub fn params(&self) -> ChannelParams {
        self.params
    }

    pub fn is_partitioned(&self) -> bool {
        self.partitioned
    }

    pub fn set_partitioned(&mut self, flag: bool) {
        self.partitioned = flag;
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn send(&mut self, message: M, now: u64) -> SendOutcome {
        self.stats.sent += 1;
        if self.partitioned {
            self.stats.dropped += 1;
            return SendOutcome::DroppedPartitioned;
        }
        // One draw per send keeps the loss pattern a pure function of the seed
        // and the send sequence.
        let draw: f64 = self.rng.gen();
        if draw < self.params.drop_probability {
            self.stats.dropped += 1;
            return SendOutcome::DroppedLost;
        }
        let deliver_tick = now + self.params.latency_ticks;
        // Insert after every message due at or before deliver_tick so equal
        // ticks stay in send order.
        let pos = self.in_flight.partition_point(|(t, _)| *t <= deliver_tick);
        self.in_flight.insert(pos, (deliver_tick, message));
        SendOutcome::Enqueued { deliver_tick }
    }

    pub fn deliver_due(&mut self, now: u64) -> Vec<M> {
        let mut out = Vec::new();
        while self.in_flight.front().is_some_and(|(t, _)| *t <= now) {
            let (_, m) = self.in_flight.pop_front().expect("front checked");
            out.push(m);
        }
        self.stats.delivered += out.len() as u64;
        out
    }
}

/// All channels of a run, keyed by unordered endpoint pair.
#[derive(Debug, Clone)]
pub struct Network<M> {
    seed: u64,
    channels: BTreeMap<(EndpointId, EndpointId), Channel<M>>,
}

impl<M> Network<M> {
    pub fn new(seed: u64) -> Self {
        Network {
            seed,
            channels: BTreeMap::new(),
        }
    }

    /// Registers (or replaces) the channel for a pair. Its generator is seeded
    /// from the run seed and the pair names only.
    pub fn add_channel(&mut self, a: &EndpointId, b: &EndpointId, params: ChannelParams) {
        let key = channel_key(a, b);
        let seed = self.seed ^ fnv1a(format!("{}|{}", key.0, key.1).as_bytes());
        self.channels
            .insert(key.clone(), Channel::new(key.0, key.1, params, seed));
    }

    pub fn channel(&self, a: &EndpointId, b: &EndpointId) -> Option<&Channel<M>> {
        self.channels.get(&channel_key(a, b))
    }

    pub fn channels(&self) -> impl Iterator<Item = &Channel<M>> {
        self.channels.values()
    }

    pub fn send(
        &mut self,
        from: &EndpointId,
        to: &EndpointId,
        message: M,
        now: u64,
    ) -> Result<SendOutcome, NetError> {
        let ch = self
            .channels
            .get_mut(&channel_key(from, to))
            .ok_or_else(|| NetError::UnknownChannel(from.clone(), to.clone()))?;
        Ok(ch.send(message, now))
    }

    pub fn set_partition(
        &mut self,
        a: &EndpointId,
        b: &EndpointId,
        flag: bool,
    ) -> Result<(), NetError> {
        let ch = self
            .channels
            .get_mut(&channel_key(a, b))
            .ok_or_else(|| NetError::UnknownChannel(a.clone(), b.clone()))?;
        ch.set_partitioned(flag);
        Ok(())
    }

    /// Due messages of every channel, channels in key order, FIFO within each.
    pub fn deliver_due(&mut self, now: u64) -> Vec<M> {
        let mut out = Vec::new();
        for ch in self.channels.values_mut() {
            out.extend(ch.deliver_due(now));
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.channels.values().map(Channel::in_flight).sum()
    }
}
