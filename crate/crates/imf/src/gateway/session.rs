use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use futures::{Stream, StreamExt};
use imf_core::experiments::Scenario;
use imf_core::netsim::SliceConfig;
use imf_core::supervisor::{EpisodeOptions, Rollout};
use imf_core::utility::{IntentPatch, IntentSet};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::Instant;
use tokio_stream::wrappers::BroadcastStream;

use super::{ApiError, ModelBundle, TelemetryFrame};
use crate::pipeline::ModelKind;
use crate::Error;

const MAX_RATE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Running,
    Paused,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingMutation {
    pub effective_step: usize,
    pub patch: IntentPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: u64,
    pub scenario: String,
    pub model: ModelKind,
    pub seed: u64,
    /// Index of the next step to run; equals the number of frames emitted.
    pub step: usize,
    pub horizon: usize,
    pub status: SessionStatus,
    pub steps_per_second: f64,
    /// Intents the next step will run under, before queued patches.
    pub intents: IntentSet,
    pub pending: Vec<PendingMutation>,
    /// Hex digest of the supervisor parameters.
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvanceAck {
    pub step: usize,
    pub status: SessionStatus,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAck {
    pub status: SessionStatus,
    pub steps_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationAck {
    /// Step whose frame first carries the patch; `None` for an empty patch.
    pub effective_step: Option<usize>,
    pub queued: bool,
    pub pending: usize,
}

pub(super) enum Command {
    View { reply: oneshot::Sender<SessionView> },
    Advance { steps: usize, reply: oneshot::Sender<Result<AdvanceAck, ApiError>> },
    SetRate { steps_per_second: f64, reply: oneshot::Sender<Result<RateAck, ApiError>> },
    Mutate { patch: IntentPatch, reply: oneshot::Sender<Result<MutationAck, ApiError>> },
    Subscribe { reply: oneshot::Sender<Subscription> },
}

#[derive(Clone)]
pub(super) struct SessionHandle {
    tx: mpsc::Sender<Command>,
}

impl SessionHandle {
    pub(super) async fn request<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, ApiError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).await.map_err(|_| ApiError::Internal("session loop stopped".into()))?;
        rx.await.map_err(|_| ApiError::Internal("session loop stopped".into()))
    }
}

/// Frames so far plus the live feed of the remaining ones, taken atomically
/// with respect to the episode loop.
pub(super) struct Subscription {
    history: Vec<Arc<str>>,
    live: broadcast::Receiver<Arc<str>>,
    remaining: usize,
}

impl Subscription {
    pub(super) fn into_stream(self) -> impl Stream<Item = Result<String, std::io::Error>> + Send {
        let replay = futures::stream::iter(self.history).map(|l| Ok(l.to_string()));
        let live = BroadcastStream::new(self.live)
            .take(self.remaining)
            .map(|r| r.map(|l| l.to_string()).map_err(|e| std::io::Error::other(e.to_string())));
        replay.chain(live)
    }
}

struct Session {
    id: u64,
    scenario: String,
    kind: ModelKind,
    seed: u64,
    bundle: Arc<ModelBundle>,
    config: SliceConfig,
    rollout: Rollout,
    queue: VecDeque<PendingMutation>,
    history: Vec<Arc<str>>,
    feed: broadcast::Sender<Arc<str>>,
    status: SessionStatus,
    rate: f64,
    next_tick: Option<Instant>,
}

pub(super) fn spawn(
    id: u64,
    scenario: Scenario,
    kind: ModelKind,
    bundle: Arc<ModelBundle>,
    seed: u64,
) -> Result<SessionHandle, Error> {
    let config = scenario.slice_config()?;
    let opts = EpisodeOptions { horizon: scenario.horizon, seed, initial: scenario.initial };
    let rollout = Rollout::new(bundle.model(kind), &bundle.lower, &config, scenario.intents.clone(), opts)?;
    let (feed, _) = broadcast::channel(scenario.horizon + 1);
    let session = Session {
        id,
        scenario: scenario.name,
        kind,
        seed,
        bundle,
        config,
        rollout,
        queue: VecDeque::new(),
        history: Vec::new(),
        feed,
        status: SessionStatus::Paused,
        rate: 0.0,
        next_tick: None,
    };
    let (tx, rx) = mpsc::channel(64);
    tokio::spawn(session.run(rx));
    Ok(SessionHandle { tx })
}

impl Session {
    async fn run(mut self, mut rx: mpsc::Receiver<Command>) {
        loop {
            let tick = self.next_tick;
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    Some(c) => self.handle(c),
                    None => break,
                },
                _ = tokio::time::sleep_until(tick.unwrap_or_else(Instant::now)), if tick.is_some() => {
                    if let Err(e) = self.step_once() {
                        tracing::error!(session = self.id, error = ?e, "step failed; pausing");
                        self.pause();
                    }
                    if let Some(t) = self.next_tick {
                        self.next_tick = Some(t + period(self.rate));
                    }
                }
            }
        }
    }

    fn handle(&mut self, cmd: Command) {
        // A dropped reply only means the client went away.
        match cmd {
            Command::View { reply } => {
                let _ = reply.send(self.view());
            }
            Command::Advance { steps, reply } => {
                let _ = reply.send(self.advance(steps));
            }
            Command::SetRate { steps_per_second, reply } => {
                let _ = reply.send(self.set_rate(steps_per_second));
            }
            Command::Mutate { patch, reply } => {
                let _ = reply.send(self.mutate(patch));
            }
            Command::Subscribe { reply } => {
                let _ = reply.send(Subscription {
                    history: self.history.clone(),
                    live: self.feed.subscribe(),
                    remaining: self.rollout.horizon() - self.rollout.step(),
                });
            }
        }
    }

    fn view(&self) -> SessionView {
        SessionView {
            id: self.id,
            scenario: self.scenario.clone(),
            model: self.kind,
            seed: self.seed,
            step: self.rollout.step(),
            horizon: self.rollout.horizon(),
            status: self.status,
            steps_per_second: self.rate,
            intents: self.rollout.intents().clone(),
            pending: self.queue.iter().cloned().collect(),
            model_checksum: format!("{:016x}", self.bundle.model(self.kind).checksum()),
        }
    }

    fn pause(&mut self) {
        self.rate = 0.0;
        self.next_tick = None;
        if self.status == SessionStatus::Running {
            self.status = SessionStatus::Paused;
        }
    }

    fn finished(&self) -> Result<(), ApiError> {
        if self.status == SessionStatus::Finished {
            return Err(ApiError::Conflict(format!("session {} is finished", self.id)));
        }
        Ok(())
    }

    /// Applies at most one queued patch, then runs one simulator step.
    fn step_once(&mut self) -> Result<(), Error> {
        let model = self.bundle.model(self.kind);
        if let Some(m) = self.queue.pop_front() {
            let next = m.patch.apply(self.rollout.intents())?;
            self.rollout.set_intents(model, next)?;
        }
        let rec = self.rollout.advance(model, &self.bundle.lower, &self.config)?;
        let frame = TelemetryFrame::from_record(self.id, model.agents(), &rec);
        let mut line = serde_json::to_string(&frame)?;
        line.push('\n');
        let line: Arc<str> = line.into();
        self.history.push(line.clone());
        // No subscribers is fine; late ones replay from history.
        let _ = self.feed.send(line);
        if self.rollout.is_finished() {
            self.status = SessionStatus::Finished;
            self.rate = 0.0;
            self.next_tick = None;
            self.queue.clear();
        }
        Ok(())
    }

    fn advance(&mut self, steps: usize) -> Result<AdvanceAck, ApiError> {
        self.finished()?;
        let n = steps.min(self.rollout.horizon() - self.rollout.step());
        for _ in 0..n {
            self.step_once().map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        Ok(AdvanceAck { step: self.rollout.step(), status: self.status, frames: n })
    }

    fn set_rate(&mut self, rate: f64) -> Result<RateAck, ApiError> {
        self.finished()?;
        if !(rate.is_finite() && (0.0..=MAX_RATE).contains(&rate)) {
            return Err(ApiError::BadRequest(format!("steps_per_second must be in [0, {MAX_RATE}], got {rate}")));
        }
        if rate == 0.0 {
            self.pause();
        } else {
            self.rate = rate;
            self.status = SessionStatus::Running;
            self.next_tick = Some(Instant::now() + period(rate));
        }
        Ok(RateAck { status: self.status, steps_per_second: self.rate })
    }

    fn mutate(&mut self, patch: IntentPatch) -> Result<MutationAck, ApiError> {
        self.finished()?;
        if patch.is_empty() {
            return Ok(MutationAck { effective_step: None, queued: false, pending: self.queue.len() });
        }
        let mut ahead = self.rollout.intents().clone();
        for m in &self.queue {
            ahead = m.patch.apply(&ahead).map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        patch.apply(&ahead).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let effective_step = self.rollout.step() + self.queue.len();
        if effective_step >= self.rollout.horizon() {
            return Err(ApiError::Conflict(format!(
                "patch would take effect at step {effective_step}, after the last step {}",
                self.rollout.horizon() - 1
            )));
        }
        self.queue.push_back(PendingMutation { effective_step, patch });
        Ok(MutationAck { effective_step: Some(effective_step), queued: true, pending: self.queue.len() })
    }
}

fn period(rate: f64) -> Duration {
    Duration::from_secs_f64(1.0 / rate)
}
