//! The cloud/agent protocol as explicit message passing.
//!
//! Agents hold their own objective, box and state; the cloud holds `g`, the
//! multipliers and the noise channels. In round `k` the agents upload
//! `x_i(k-1)`, the cloud privatizes the Jacobian blocks and `g`, sends agent
//! `i` only the product `g_hat_{x_i}^T mu`, and then both sides update.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{DualSet, EnsembleState};
use crate::privacy::{NoiseSet, PrivacyPolicy};
use crate::problem::{BoxSet, ConstraintFunction, ObjectiveTerm};
use crate::schedule::{Schedule, StepSequence};
use crate::solver::{
    agent_payload, agent_primal_step, dual_step, RunTrace, SaddleMap, SolverConfig, TraceRecorder,
    ReferenceSolution,
};

/// Uplink: agent `from` reports its current state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMessage {
    pub k: u64,
    pub from: usize,
    pub x: Vec<f64>,
}

/// Downlink: the privatized product for agent `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadMessage {
    pub k: u64,
    pub to: usize,
    pub payload: Vec<f64>,
}

/// A FIFO mailbox; a transport could replace it without touching the nodes.
#[derive(Debug, Clone)]
pub struct Mailbox<T> {
    messages: Vec<T>,
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Self {
            messages: Vec::new(),
        }
    }
}

impl<T> Mailbox<T> {
    pub fn send(&mut self, msg: T) {
        self.messages.push(msg);
    }

    pub fn drain(&mut self) -> Vec<T> {
        std::mem::take(&mut self.messages)
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct AgentNode {
    pub id: usize,
    objective: ObjectiveTerm,
    bx: BoxSet,
    state: Vec<f64>,
}

impl AgentNode {
    pub fn new(id: usize, objective: ObjectiveTerm, bx: BoxSet, state: Vec<f64>) -> Result<Self> {
        check_len(bx.dim(), state.len(), "agent state")?;
        check_len(bx.dim(), objective.dim(), "agent objective")?;
        Ok(Self {
            id,
            objective,
            bx,
            state,
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn uplink(&self, k: u64) -> StateMessage {
        StateMessage {
            k,
            from: self.id,
            x: self.state.clone(),
        }
    }

    /// Local update from the received payload and the public step sizes.
    pub fn step(&mut self, msg: &PayloadMessage, alpha: f64, gamma: f64) -> Result<()> {
        if msg.to != self.id || msg.payload.len() != self.state.len() {
            return Err(Error::Protocol {
                round: msg.k,
                detail: format!("agent {} received a payload meant for {}", self.id, msg.to),
            });
        }
        let mut grad = vec![0.0; self.state.len()];
        self.objective.gradient(&self.state, &mut grad);
        self.state = agent_primal_step(&self.state, &msg.payload, alpha, gamma, &grad, &self.bx);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CloudNode {
    constraint: ConstraintFunction,
    dual_set: DualSet,
    mu: Vec<f64>,
    noise: NoiseSet,
    schedule: Schedule,
    seed: u64,
    noisy_dual: bool,
    debug: bool,
}

/// Pre- and post-noise payloads, kept only in debug mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadAudit {
    pub to: usize,
    pub exact: Vec<f64>,
    pub sent: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// Envelope of one message: values withheld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageMeta {
    pub k: u64,
    pub direction: Direction,
    pub from: String,
    pub to: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepLog {
    pub k: u64,
    pub uplink: Vec<MessageMeta>,
    pub downlink: Vec<MessageMeta>,
    pub mu_after: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<Vec<PayloadAudit>>,
}

impl CloudNode {
    pub fn new(
        constraint: ConstraintFunction,
        dual_set: DualSet,
        mu: Vec<f64>,
        noise: NoiseSet,
        schedule: Schedule,
        seed: u64,
        noisy_dual: bool,
    ) -> Result<Self> {
        check_len(constraint.m(), mu.len(), "cloud multipliers")?;
        check_len(constraint.m(), dual_set.m(), "dual set")?;
        if !noise.is_empty() {
            check_len(constraint.agent_blocks().len(), noise.blocks.len(), "noise channels")?;
        }
        Ok(Self {
            constraint,
            dual_set,
            mu,
            noise,
            schedule,
            seed,
            noisy_dual,
            debug: false,
        })
    }

    pub fn with_debug(mut self, debug: bool) -> Self {
        self.debug = debug;
        self
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn step_sizes(&self, k: u64) -> (f64, f64) {
        (self.schedule.alpha(k), self.schedule.gamma(k))
    }

    /// Stacks exactly one state message per agent into `x(k-1)`.
    fn assemble(&self, k: u64, msgs: Vec<StateMessage>) -> Result<Vec<f64>> {
        let blocks = self.constraint.agent_blocks();
        let mut x = vec![0.0; self.constraint.n()];
        let mut seen = vec![false; blocks.len()];
        for msg in msgs {
            let err = |detail: String| Error::Protocol { round: k, detail };
            if msg.k != k {
                return Err(err(format!("state from agent {} is stamped {}", msg.from, msg.k)));
            }
            let Some(cols) = blocks.get(msg.from) else {
                return Err(err(format!("unknown agent {}", msg.from)));
            };
            if seen[msg.from] {
                return Err(err(format!("duplicate state from agent {}", msg.from)));
            }
            if msg.x.len() != cols.len() {
                return Err(err(format!("agent {} sent {} values", msg.from, msg.x.len())));
            }
            seen[msg.from] = true;
            x[cols.clone()].copy_from_slice(&msg.x);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Protocol {
                round: k,
                detail: format!("missing state from agent {i}"),
            });
        }
        Ok(x)
    }

    /// Actions (2) and (3): privatized payloads out, `g_hat` kept for (4).
    fn privatize(
        &self,
        k: u64,
        x: &[f64],
        outbox: &mut [Mailbox<PayloadMessage>],
    ) -> (Vec<f64>, Option<Vec<PayloadAudit>>) {
        let g = self.constraint.eval(x);
        let jac = self.constraint.jacobian(x);
        let active = !self.noise.is_empty();
        let mut audit = self.debug.then(Vec::new);
        for (i, cols) in self.constraint.agent_blocks().iter().enumerate() {
            let mut block = self.constraint.block(&jac, i);
            let exact = audit
                .is_some()
                .then(|| agent_payload(&block, cols.len(), &self.mu));
            if active {
                let w = self.noise.blocks[i].draw(self.seed, k);
                for (b, v) in block.iter_mut().zip(&w) {
                    *b += v;
                }
            }
            let payload = agent_payload(&block, cols.len(), &self.mu);
            if let (Some(a), Some(exact)) = (audit.as_mut(), exact) {
                a.push(PayloadAudit {
                    to: i,
                    exact,
                    sent: payload.clone(),
                });
            }
            outbox[i].send(PayloadMessage { k, to: i, payload });
        }
        let mut g_hat = g;
        if active && self.noisy_dual {
            if let Some(ch) = &self.noise.g {
                for (a, v) in g_hat.iter_mut().zip(ch.draw(self.seed, k)) {
                    *a += v;
                }
            }
        }
        (g_hat, audit)
    }

    fn update(&mut self, g_hat: &[f64], alpha: f64, gamma: f64) {
        self.mu = dual_step(&self.mu, g_hat, alpha, gamma, &self.dual_set);
    }
}

/// One synchronous round `k >= 1`: upload, privatize, download, update.
pub fn run_round(agents: &mut [AgentNode], cloud: &mut CloudNode, k: u64) -> Result<TimestepLog> {
    let n_agents = cloud.constraint.agent_blocks().len();
    if agents.len() != n_agents {
        return Err(Error::Protocol {
            round: k,
            detail: format!("{} agents for {} blocks", agents.len(), n_agents),
        });
    }
    let (alpha, gamma) = cloud.step_sizes(k);

    let mut inbox: Mailbox<StateMessage> = Mailbox::default();
    let mut uplink = Vec::with_capacity(n_agents);
    for a in agents.iter() {
        let msg = a.uplink(k);
        uplink.push(MessageMeta {
            k,
            direction: Direction::Up,
            from: format!("agent{}", a.id),
            to: "cloud".into(),
            len: msg.x.len(),
        });
        inbox.send(msg);
    }
    let x = cloud.assemble(k, inbox.drain())?;

    let mut outboxes: Vec<Mailbox<PayloadMessage>> = (0..n_agents).map(|_| Mailbox::default()).collect();
    let (g_hat, audit) = cloud.privatize(k, &x, &mut outboxes);

    let mut downlink = Vec::with_capacity(n_agents);
    for a in agents.iter_mut() {
        let mut msgs = outboxes[a.id].drain();
        if msgs.len() != 1 {
            return Err(Error::Protocol {
                round: k,
                detail: format!("agent {} has {} payloads", a.id, msgs.len()),
            });
        }
        let msg = msgs.pop().expect("one message");
        downlink.push(MessageMeta {
            k,
            direction: Direction::Down,
            from: "cloud".into(),
            to: format!("agent{}", a.id),
            len: msg.payload.len(),
        });
        a.step(&msg, alpha, gamma)?;
    }
    cloud.update(&g_hat, alpha, gamma);

    Ok(TimestepLog {
        k,
        uplink,
        downlink,
        mu_after: cloud.mu.clone(),
        audit,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Retain pre-noise payloads in the logs.
    pub debug: bool,
    /// Return per-round logs (otherwise only the trace).
    pub keep_logs: bool,
}

/// Nodes built from a problem and configuration, starting at `z(0)`.
pub fn build_nodes(
    map: &SaddleMap,
    config: &SolverConfig,
    noise: NoiseSet,
    seed: u64,
    initial: &EnsembleState,
) -> Result<(Vec<AgentNode>, CloudNode)> {
    let spec = map.spec();
    let agents = spec
        .objectives()
        .iter()
        .zip(spec.boxes())
        .enumerate()
        .map(|(i, (obj, bx))| AgentNode::new(i, obj.clone(), bx.clone(), initial.x[spec.block(i)].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let cloud = CloudNode::new(
        spec.constraint().clone(),
        *map.dual_set(),
        initial.mu.clone(),
        noise,
        config.schedule.clone(),
        seed,
        config.noisy_dual,
    )?;
    Ok((agents, cloud))
}

fn gather(agents: &[AgentNode], cloud: &CloudNode, n: usize) -> EnsembleState {
    let mut x = Vec::with_capacity(n);
    for a in agents {
        x.extend_from_slice(&a.state);
    }
    EnsembleState::new(x, cloud.mu.clone())
}

/// Runs `rounds` protocol rounds and records the same trace as `solve`
/// would with `max_iters = rounds`.
pub fn simulate(
    map: &SaddleMap,
    config: &SolverConfig,
    policy: Option<&PrivacyPolicy>,
    seed: u64,
    rounds: u64,
    reference: Option<&ReferenceSolution>,
    options: SimOptions,
) -> Result<(RunTrace, Vec<TimestepLog>)> {
    if rounds == 0 {
        return Err(Error::Config("simulate needs at least one round".into()));
    }
    let policy = policy.filter(|p| p.is_active());
    let noise = match policy {
        Some(p) => NoiseSet::for_problem(map.spec(), p)?,
        None => NoiseSet::empty(),
    };
    let mut config = config.clone();
    config.max_iters = rounds;
    let mut rec = TraceRecorder::new(map, &config, reference)?;
    let z0 = rec.initial_state()?;
    rec.observe(0, &z0, false)?;
    let (mut agents, cloud) = build_nodes(map, &config, noise.clone(), seed, &z0)?;
    let mut cloud = cloud.with_debug(options.debug);
    let mut logs = Vec::new();
    let mut z = z0;
    let mut converged = false;
    let mut k = 0;
    while k < rounds {
        k += 1;
        let log = run_round(&mut agents, &mut cloud, k)?;
        if options.keep_logs {
            logs.push(log);
        }
        let next = gather(&agents, &cloud, map.n());
        if !(next.x.iter().chain(&next.mu).all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                iteration: k,
                what: "iterate after projection",
            });
        }
        let moved = next.distance(&z);
        z = next;
        converged = noise.is_empty() && moved <= config.fixed_point_tol;
        rec.observe(k, &z, converged || k == rounds)?;
        if converged {
            break;
        }
    }
    let mut trace = rec.finish(z, k, converged, &noise, seed);
    trace.metadata.policy = policy.copied();
    if let Some(p) = policy {
        trace.metadata.sensitivities = Some(crate::privacy::SensitivityBundle::from_spec(
            map.spec(),
            p.adjacency_bound,
            p.norm,
        )?);
    }
    Ok((trace, logs))
}

/// Line-delimited JSON, one record per message.
pub fn write_event_log(logs: &[TimestepLog], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for log in logs {
        for m in log.uplink.iter().chain(&log.downlink) {
            serde_json::to_writer(&mut w, m)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}
