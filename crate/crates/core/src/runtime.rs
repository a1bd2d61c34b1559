//! Synchronous rounds between agent workers and a coordinator.
//!
//! Every agent runs on its own thread and only ever sees [`RoundMessage`]s.
//! A round is: all agents step concurrently, the coordinator reduces their
//! messages in agent order and produces a broadcast for the next round.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    ZetaShare,
    QShare,
    AccompanyingRows,
    Control,
}

/// Row-major `rows × cols` block of numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Blob {
    pub fn vector(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn matrix(m: &nalgebra::DMatrix<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: m.transpose().as_slice().to_vec() }
    }

    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn empty() -> Self {
        Self { rows: 0, cols: 0, data: Vec::new() }
    }

    fn well_formed(&self) -> bool {
        self.rows * self.cols == self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub sender: usize,
    pub round: usize,
    pub kind: MessageKind,
    pub payload: Blob,
    /// Small per-message scalars (costs, residuals, counters).
    pub stats: Vec<f64>,
}

impl RoundMessage {
    pub const COORDINATOR: usize = usize::MAX;

    pub fn new(sender: usize, round: usize, kind: MessageKind, payload: Blob) -> Self {
        Self { sender, round, kind, payload, stats: Vec::new() }
    }

    pub fn with_stats(mut self, stats: Vec<f64>) -> Self {
        self.stats = stats;
        self
    }

    fn shape_ok(&self) -> bool {
        self.payload.well_formed()
            && match self.kind {
                MessageKind::ZetaShare => self.payload.cols == 1 || self.payload.data.is_empty(),
                _ => true,
            }
    }
}

pub trait Agent: Send {
    /// `inbox` is the coordinator's broadcast from the previous round
    /// (`None` in round 0).
    fn step(&mut self, round: usize, inbox: Option<&RoundMessage>) -> Result<RoundMessage, String>;
}

pub trait Coordinator {
    /// Called before every round, with the latest broadcast.
    fn should_stop(&mut self, round: usize, last: Option<&RoundMessage>) -> bool;

    /// `messages` is ordered by agent id.
    fn reduce(&mut self, round: usize, messages: &[RoundMessage]) -> Result<RoundMessage, String>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub max_rounds: usize,
    pub wall_time: Option<Duration>,
}

impl Budget {
    pub fn rounds(max_rounds: usize) -> Self {
        Self { max_rounds, wall_time: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Predicate,
    RoundBudget,
    TimeBudget,
}

#[derive(Debug)]
pub struct RunOutcome<A> {
    pub rounds: usize,
    pub agents: Vec<A>,
    pub last_broadcast: Option<RoundMessage>,
    pub stop: StopReason,
    /// Sum over rounds of the slowest agent plus the coordinator.
    pub parallel_seconds: f64,
    /// Sum of all agent and coordinator compute time.
    pub serial_seconds: f64,
    pub elapsed_seconds: f64,
}

impl<A> RunOutcome<A> {
    pub fn into_stopped(self) -> Result<Self, RuntimeError> {
        match self.stop {
            StopReason::Predicate => Ok(self),
            _ => Err(RuntimeError::BudgetExceeded { rounds: self.rounds }),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("budget exhausted after {rounds} rounds")]
    BudgetExceeded { rounds: usize },
    #[error("agent {id} failed: {reason}")]
    AgentFailure { id: usize, reason: String },
    #[error("coordinator failed in round {round}: {reason}")]
    CoordinatorFailure { round: usize, reason: String },
    #[error("no agents")]
    NoAgents,
}

enum Command {
    Step(usize, Option<Arc<RoundMessage>>),
}

type Reply = (usize, Result<RoundMessage, String>, Duration);

pub fn run_rounds<A, C>(agents: Vec<A>, coordinator: &mut C, budget: Budget) -> Result<RunOutcome<A>, RuntimeError>
where
    A: Agent,
    C: Coordinator,
{
    if agents.is_empty() {
        return Err(RuntimeError::NoAgents);
    }
    let n = agents.len();
    let start = Instant::now();

    thread::scope(|scope| {
        let (reply_tx, reply_rx) = mpsc::channel::<Reply>();
        let mut commands = Vec::with_capacity(n);
        let mut workers = Vec::with_capacity(n);
        for (id, mut agent) in agents.into_iter().enumerate() {
            let (tx, rx) = mpsc::channel::<Command>();
            let reply = reply_tx.clone();
            workers.push(scope.spawn(move || {
                for Command::Step(round, inbox) in rx {
                    let t = Instant::now();
                    let out = agent.step(round, inbox.as_deref());
                    if reply.send((id, out, t.elapsed())).is_err() {
                        break;
                    }
                }
                agent
            }));
            commands.push(tx);
        }
        drop(reply_tx);

        let mut last: Option<Arc<RoundMessage>> = None;
        let mut parallel = 0.0;
        let mut serial = 0.0;
        let mut round = 0;
        let mut failure = None;
        let stop = loop {
            if coordinator.should_stop(round, last.as_deref()) {
                break StopReason::Predicate;
            }
            if round >= budget.max_rounds {
                break StopReason::RoundBudget;
            }
            if budget.wall_time.is_some_and(|w| start.elapsed() >= w) {
                break StopReason::TimeBudget;
            }
            for tx in &commands {
                tx.send(Command::Step(round, last.clone())).expect("worker alive");
            }
            let mut slots: Vec<Option<RoundMessage>> = vec![None; n];
            let mut slowest = Duration::ZERO;
            for _ in 0..n {
                let (id, out, dt) = match reply_rx.recv() {
                    Ok(r) => r,
                    Err(_) => {
                        failure = Some(RuntimeError::AgentFailure { id: usize::MAX, reason: "worker exited".into() });
                        break;
                    }
                };
                slowest = slowest.max(dt);
                serial += dt.as_secs_f64();
                match out {
                    Ok(m) if m.sender != id || m.round != round => {
                        failure.get_or_insert(RuntimeError::AgentFailure {
                            id,
                            reason: format!("message stamped sender {} round {}", m.sender, m.round),
                        });
                    }
                    Ok(m) if !m.shape_ok() => {
                        failure.get_or_insert(RuntimeError::AgentFailure { id, reason: "payload shape does not match kind".into() });
                    }
                    Ok(m) => slots[id] = Some(m),
                    Err(reason) => {
                        failure.get_or_insert(RuntimeError::AgentFailure { id, reason });
                    }
                }
            }
            if failure.is_some() {
                break StopReason::Predicate;
            }
            let messages: Vec<RoundMessage> = slots.into_iter().map(|m| m.expect("every agent replied")).collect();
            let t = Instant::now();
            let reduced = coordinator.reduce(round, &messages);
            let dt = t.elapsed().as_secs_f64();
            parallel += slowest.as_secs_f64() + dt;
            serial += dt;
            match reduced {
                Ok(b) => last = Some(Arc::new(b)),
                Err(reason) => {
                    failure = Some(RuntimeError::CoordinatorFailure { round, reason });
                    break StopReason::Predicate;
                }
            }
            round += 1;
        };
        drop(commands);
        let mut agents = Vec::with_capacity(n);
        for (id, w) in workers.into_iter().enumerate() {
            match w.join() {
                Ok(a) => agents.push(a),
                Err(_) => {
                    failure.get_or_insert(RuntimeError::AgentFailure { id, reason: "agent panicked".into() });
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(RunOutcome {
            rounds: round,
            agents,
            last_broadcast: last.map(|m| Arc::try_unwrap(m).unwrap_or_else(|m| (*m).clone())),
            stop,
            parallel_seconds: parallel,
            serial_seconds: serial,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Echo(f64);

    impl Agent for Echo {
        fn step(&mut self, round: usize, _: Option<&RoundMessage>) -> Result<RoundMessage, String> {
            Ok(RoundMessage::new(0, round, MessageKind::Control, Blob::vector(vec![self.0])))
        }
    }

    struct Sum {
        stop_after: usize,
    }

    impl Coordinator for Sum {
        fn should_stop(&mut self, round: usize, _: Option<&RoundMessage>) -> bool {
            round >= self.stop_after
        }
        fn reduce(&mut self, round: usize, m: &[RoundMessage]) -> Result<RoundMessage, String> {
            let s = m.iter().map(|m| m.payload.data[0]).sum();
            Ok(RoundMessage::new(RoundMessage::COORDINATOR, round, MessageKind::Control, Blob::vector(vec![s])))
        }
    }

    #[test]
    fn wrong_sender_is_a_failure() {
        let err = run_rounds(vec![Echo(1.0), Echo(2.0)], &mut Sum { stop_after: 1 }, Budget::rounds(5)).unwrap_err();
        assert!(matches!(err, RuntimeError::AgentFailure { id: 1, .. }));
    }
}
