use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::PathBuf;
use std::process::{Child, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::dataset::{batch_indices, shard, LabeledSet};
use crate::nn::{MicroResNet, Mode};
use crate::tensor::BatchStats;
use crate::trainer::{
    adam_step, compute_gradients, mixed_precision_update, scheduler_lr, AdamState, EpochStats, LossScaler,
    Mark, Precision, TrainAborted, TrainConfig, TrainError, Transport,
};

use super::control::{Init, Reply, Request};
use super::{allreduce_mean, flatten_grads, read_frame, unflatten_grads, write_frame, GradMessage, ParallelError};

/// Test hook: make one worker misbehave in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// Report an error instead of a gradient.
    Error,
    /// Send nothing.
    Silent,
    /// Send a gradient whose first value is `+inf`.
    InfGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub worker: u32,
    /// 1-based count of `parallel_train_step` calls.
    pub round: u64,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupOptions {
    pub timeout: Duration,
    pub faults: Vec<Fault>,
    pub transport: Transport,
    /// Executable started as `<program> worker` under
    /// [`Transport::Processes`]; defaults to the current executable.
    pub program: Option<PathBuf>,
}

impl Default for GroupOptions {
    fn default() -> Self {
        GroupOptions::from_config(&TrainConfig::default())
    }
}

impl GroupOptions {
    pub fn from_config(config: &TrainConfig) -> Self {
        GroupOptions {
            timeout: config.sync_timeout,
            faults: Vec::new(),
            transport: config.transport,
            program: None,
        }
    }
}

struct Worker {
    id: u32,
    model: MicroResNet,
    adam: AdamState,
    scaler: LossScaler,
    precision: Precision,
    data: LabeledSet,
    faults: Vec<Fault>,
    pending: Option<(u64, BTreeMap<String, BatchStats>)>,
}

impl Worker {
    fn new(init: Init) -> Self {
        Worker {
            id: init.worker,
            model: init.model,
            adam: AdamState::new(),
            scaler: LossScaler::new(init.loss_scale, init.growth_interval),
            precision: init.precision,
            data: init.data,
            faults: init.faults,
            pending: None,
        }
    }

    fn handle(&mut self, request: Request) -> Option<Reply> {
        match request {
            Request::Shutdown => None,
            Request::Snapshot { round } => Some(Reply::Snapshot {
                worker: self.id,
                round,
                model: Box::new(self.model.clone()),
            }),
            Request::Abort { round } => {
                if matches!(self.pending, Some((r, _)) if r == round) {
                    self.pending = None;
                }
                None
            }
            Request::Compute { round, attempt, indices } => self.compute(round, attempt, &indices),
            Request::Apply { round, lr, grad } => Some(self.apply(round, &grad, lr)),
        }
    }

    fn compute(&mut self, round: u64, attempt: u64, indices: &[usize]) -> Option<Reply> {
        let fault = self
            .faults
            .iter()
            .find(|f| f.worker == self.id && f.round == attempt)
            .map(|f| f.kind);
        let failed = |message: String| Reply::Failed {
            worker: self.id,
            round,
            message,
        };
        match fault {
            Some(FaultKind::Silent) => return None,
            Some(FaultKind::Error) => return Some(failed("injected failure".into())),
            _ => {}
        }
        let mixed = self.precision == Precision::Mixed;
        let scale = if mixed { self.scaler.scale() } else { 1.0 };
        let result = self
            .data
            .batch(indices)
            .map_err(|e| e.to_string())
            .and_then(|batch| compute_gradients(&self.model, &batch, mixed, scale).map_err(|e| e.to_string()))
            .and_then(|step| {
                let mut flat = flatten_grads(&step.grads);
                if fault == Some(FaultKind::InfGradient) {
                    flat[0] = f64::INFINITY;
                }
                let msg = GradMessage::new(self.id, round, step.batch_size as u32, vec![flat.len() as u32], flat)
                    .and_then(|m| m.encode())
                    .map_err(|e| e.to_string())?;
                Ok((msg, step.loss, step.batch_stats))
            });
        Some(match result {
            Ok((bytes, loss, stats)) => {
                self.pending = Some((round, stats));
                Reply::Grad {
                    worker: self.id,
                    round,
                    loss,
                    grad: bytes,
                }
            }
            Err(message) => failed(message),
        })
    }

    fn apply(&mut self, round: u64, bytes: &[u8], lr: f64) -> Reply {
        let result = (|| -> Result<bool, String> {
            let msg = GradMessage::decode(bytes).map_err(|e| e.to_string())?;
            if msg.step != round {
                return Err(format!("broadcast for step {} during step {round}", msg.step));
            }
            let grads = unflatten_grads(self.model.params(), &msg.payload).map_err(|e| e.to_string())?;
            match self.precision {
                Precision::Full => {
                    adam_step(self.model.params_mut(), &grads, &mut self.adam, lr).map_err(|e| e.to_string())?;
                    Ok(true)
                }
                Precision::Mixed => {
                    mixed_precision_update(self.model.params_mut(), &grads, &mut self.adam, &mut self.scaler, lr)
                        .map_err(|e| e.to_string())
                }
            }
        })();
        let pending = self.pending.take();
        match result {
            Ok(applied) => {
                if let Some((r, stats)) = pending {
                    if r == round {
                        self.model.apply_batch_stats(&stats);
                    }
                }
                Reply::Applied {
                    worker: self.id,
                    round,
                    applied,
                }
            }
            Err(message) => Reply::Failed {
                worker: self.id,
                round,
                message,
            },
        }
    }
}

/// The worker side of the protocol: an init frame, then requests until
/// `Shutdown` or the end of input. Thread and process workers both run
/// this loop.
fn serve(
    mut recv: impl FnMut() -> Result<Option<Vec<u8>>, ParallelError>,
    mut send: impl FnMut(Vec<u8>) -> Result<(), ParallelError>,
) -> Result<(), ParallelError> {
    let Some(first) = recv()? else {
        return Ok(());
    };
    let mut worker = Worker::new(Init::decode(&first)?);
    while let Some(frame) = recv()? {
        let request = Request::decode(&frame)?;
        if request == Request::Shutdown {
            break;
        }
        if let Some(reply) = worker.handle(request) {
            send(reply.encode())?;
        }
    }
    Ok(())
}

/// Run a worker over a byte stream pair, as the `worker` subcommand does
/// over stdin and stdout.
pub fn serve_worker<R: Read, W: Write>(input: R, output: W) -> Result<(), ParallelError> {
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    serve(|| Ok(read_frame(&mut input)?), |bytes| Ok(write_frame(&mut output, &bytes)?))
}

enum Inbound {
    Frame(Vec<u8>),
    Closed { worker: u32, message: String },
}

/// The reducer's handle on one worker: a queue of outgoing frames plus
/// whatever has to be joined or reaped on shutdown.
struct Link {
    tx: Option<Sender<Vec<u8>>>,
    threads: Vec<JoinHandle<()>>,
    child: Option<Child>,
}

fn closed_message(result: Result<(), ParallelError>) -> String {
    match result {
        Ok(()) => "exited".into(),
        Err(e) => e.to_string(),
    }
}

fn thread_link(id: u32, inbound: Sender<Inbound>) -> Result<Link, ParallelError> {
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let handle = std::thread::Builder::new()
        .name(format!("worker-{id}"))
        .spawn(move || {
            let result = serve(
                || Ok(rx.recv().ok()),
                |bytes| {
                    inbound
                        .send(Inbound::Frame(bytes))
                        .map_err(|_| ParallelError::Disconnected("reducer has gone".into()))
                },
            );
            let _ = inbound.send(Inbound::Closed {
                worker: id,
                message: closed_message(result),
            });
        })?;
    Ok(Link {
        tx: Some(tx),
        threads: vec![handle],
        child: None,
    })
}

fn process_link(id: u32, program: &PathBuf, inbound: Sender<Inbound>) -> Result<Link, ParallelError> {
    let mut child = std::process::Command::new(program)
        .arg("worker")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| ParallelError::Config(format!("cannot start {}: {e}", program.display())))?;
    let mut stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
    let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let writer = std::thread::Builder::new()
        .name(format!("worker-{id}-send"))
        .spawn(move || {
            for frame in rx {
                if write_frame(&mut stdin, &frame).is_err() {
                    break;
                }
            }
        })?;
    let reader = std::thread::Builder::new()
        .name(format!("worker-{id}-recv"))
        .spawn(move || {
            let result = loop {
                match read_frame(&mut stdout) {
                    Ok(Some(frame)) => {
                        if inbound.send(Inbound::Frame(frame)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break Ok(()),
                    Err(e) => break Err(e.into()),
                }
            };
            let _ = inbound.send(Inbound::Closed {
                worker: id,
                message: closed_message(result),
            });
        })?;
    Ok(Link {
        tx: Some(tx),
        threads: vec![writer, reader],
        child: Some(child),
    })
}

/// What one synchronous step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Batch-size weighted mean of the workers' losses.
    pub loss: f64,
    /// False when mixed precision skipped the update on overflow.
    pub applied: bool,
    /// The reduced gradient every worker received (still loss-scaled under
    /// mixed precision).
    pub averaged: GradMessage,
}

/// K replicas plus the reducer, which lives on the caller's thread. The
/// replicas run on threads or in child processes; either way every
/// request, gradient and reply crosses as an encoded frame.
pub struct WorkerGroup {
    links: Vec<Link>,
    replies: Receiver<Inbound>,
    timeout: Duration,
    /// Tags every request; snapshots use rounds too.
    round: u64,
    attempts: u64,
    steps: u64,
    min_shard: usize,
}

impl WorkerGroup {
    pub fn spawn(model: &MicroResNet, config: &TrainConfig, data: Arc<LabeledSet>) -> Result<Self, ParallelError> {
        Self::spawn_with(model, config, data, GroupOptions::from_config(config))
    }

    pub fn spawn_with(
        model: &MicroResNet,
        config: &TrainConfig,
        data: Arc<LabeledSet>,
        options: GroupOptions,
    ) -> Result<Self, ParallelError> {
        if config.workers == 0 {
            return Err(ParallelError::Config("workers must be at least 1".into()));
        }
        let program = match (options.transport, options.program) {
            (Transport::Threads, _) => None,
            (Transport::Processes, Some(p)) => Some(p),
            (Transport::Processes, None) => Some(std::env::current_exe()?),
        };
        let (inbound, replies) = mpsc::channel();
        let mut group = WorkerGroup {
            links: Vec::with_capacity(config.workers),
            replies,
            timeout: options.timeout,
            round: 0,
            attempts: 0,
            steps: 0,
            min_shard: if model.mode() == Mode::Train { 2 } else { 1 },
        };
        for id in 0..config.workers as u32 {
            let link = match &program {
                None => thread_link(id, inbound.clone())?,
                Some(p) => process_link(id, p, inbound.clone())?,
            };
            group.links.push(link);
            let init = Init {
                worker: id,
                precision: config.precision,
                loss_scale: config.loss_scale,
                growth_interval: config.growth_interval,
                faults: options.faults.clone(),
                model: model.clone(),
                data: (*data).clone(),
            };
            group.send_frame(id as usize, init.encode())?;
        }
        Ok(group)
    }

    pub fn num_workers(&self) -> usize {
        self.links.len()
    }

    /// Steps that completed on every worker.
    pub fn steps_completed(&self) -> u64 {
        self.steps
    }

    /// Round-robin split of a global batch.
    pub fn shards(&self, global_batch: &[usize]) -> Vec<Vec<usize>> {
        (0..self.num_workers())
            .map(|w| shard(global_batch, w, self.num_workers()).expect("worker index in range"))
            .collect()
    }

    /// Whether every shard is large enough for the replicas' normalization
    /// mode (two samples in train mode, one in eval mode).
    pub fn can_step(&self, global_batch: &[usize]) -> bool {
        global_batch.len() >= self.min_shard * self.num_workers()
    }

    fn send_frame(&self, worker: usize, frame: Vec<u8>) -> Result<(), ParallelError> {
        self.links[worker]
            .tx
            .as_ref()
            .and_then(|tx| tx.send(frame).ok())
            .ok_or_else(|| ParallelError::Disconnected(format!("worker {worker} has exited")))
    }

    fn send(&self, worker: usize, request: &Request) -> Result<(), ParallelError> {
        self.send_frame(worker, request.encode())
    }

    fn broadcast(&self, request: &Request) -> Result<(), ParallelError> {
        let frame = request.encode();
        for w in 0..self.num_workers() {
            self.send_frame(w, frame.clone())?;
        }
        Ok(())
    }

    /// One reply per worker for `round`, in worker order.
    fn gather(&self, round: u64) -> Result<Vec<Reply>, ParallelError> {
        let deadline = Instant::now() + self.timeout;
        let mut got: BTreeMap<u32, Reply> = BTreeMap::new();
        while got.len() < self.num_workers() {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.replies.recv_timeout(left) {
                Ok(Inbound::Frame(bytes)) => {
                    let reply = Reply::decode(&bytes)?;
                    let (worker, r) = reply.tag();
                    if r != round {
                        continue;
                    }
                    if let Reply::Failed { worker, message, .. } = reply {
                        return Err(ParallelError::WorkerFailed { worker, message });
                    }
                    got.insert(worker, reply);
                }
                Ok(Inbound::Closed { worker, message }) => {
                    return Err(ParallelError::Disconnected(format!("worker {worker}: {message}")))
                }
                Err(RecvTimeoutError::Timeout) => {
                    let missing = (0..self.num_workers() as u32)
                        .filter(|w| !got.contains_key(w))
                        .collect();
                    return Err(ParallelError::Timeout {
                        missing,
                        waited: self.timeout,
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(ParallelError::Disconnected("all workers have exited".into()))
                }
            }
        }
        Ok(got.into_values().collect())
    }

    /// Shard the batch, reduce the local gradients and have every replica
    /// apply the same update. On any failure no replica changes.
    pub fn parallel_train_step(&mut self, global_batch: &[usize], lr: f64) -> Result<StepOutcome, ParallelError> {
        if !self.can_step(global_batch) {
            return Err(ParallelError::Config(format!(
                "batch of {} cannot give {} workers {} sample(s) each",
                global_batch.len(),
                self.num_workers(),
                self.min_shard
            )));
        }
        self.round += 1;
        self.attempts += 1;
        let round = self.round;
        let result = self.run_round(round, global_batch, lr);
        if result.is_err() {
            let _ = self.broadcast(&Request::Abort { round });
        } else {
            self.steps += 1;
        }
        result
    }

    fn run_round(&self, round: u64, global_batch: &[usize], lr: f64) -> Result<StepOutcome, ParallelError> {
        for (w, indices) in self.shards(global_batch).into_iter().enumerate() {
            let attempt = self.attempts;
            self.send(w, &Request::Compute { round, attempt, indices })?;
        }
        let mut messages = Vec::with_capacity(self.num_workers());
        let mut losses = Vec::with_capacity(self.num_workers());
        for reply in self.gather(round)? {
            if let Reply::Grad { grad, loss, .. } = reply {
                let msg = GradMessage::decode(&grad)?;
                losses.push((f64::from(msg.local_batch_size), loss));
                messages.push(msg);
            }
        }
        let averaged = allreduce_mean(&messages)?;
        self.broadcast(&Request::Apply {
            round,
            lr,
            grad: averaged.encode()?,
        })?;
        let mut applied = Vec::with_capacity(self.num_workers());
        for reply in self.gather(round)? {
            if let Reply::Applied { applied: a, .. } = reply {
                applied.push(a);
            }
        }
        if applied.iter().any(|&a| a != applied[0]) {
            return Err(ParallelError::Mismatch("workers disagreed on skipping the step".into()));
        }
        let total: f64 = losses.iter().map(|(b, _)| b).sum();
        let loss = losses.iter().map(|(b, l)| b / total * l).sum();
        Ok(StepOutcome {
            loss,
            applied: applied[0],
            averaged,
        })
    }

    /// A copy of every replica, in worker order.
    pub fn snapshots(&mut self) -> Result<Vec<MicroResNet>, ParallelError> {
        self.round += 1;
        let round = self.round;
        self.broadcast(&Request::Snapshot { round })?;
        Ok(self
            .gather(round)?
            .into_iter()
            .filter_map(|r| match r {
                Reply::Snapshot { model, .. } => Some(*model),
                _ => None,
            })
            .collect())
    }

    /// Worker 0's replica; the group shuts down.
    pub fn into_model(mut self) -> Result<MicroResNet, ParallelError> {
        self.snapshots()?
            .into_iter()
            .next()
            .ok_or_else(|| ParallelError::Disconnected("no workers".into()))
    }
}

impl Drop for WorkerGroup {
    fn drop(&mut self) {
        let _ = self.broadcast(&Request::Shutdown);
        for link in &mut self.links {
            link.tx = None;
        }
        for link in &mut self.links {
            if let Some(child) = &mut link.child {
                let _ = child.wait();
            }
            for h in link.threads.drain(..) {
                let _ = h.join();
            }
        }
    }
}

/// The epoch loop of [`crate::trainer::train_run`] over a worker group.
/// Global batches too small to give every worker its share are skipped.
pub fn train_data_parallel(
    config: &TrainConfig,
    model: &mut MicroResNet,
    data: &LabeledSet,
) -> Result<Vec<EpochStats>, TrainAborted> {
    let mut stats = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(stats);
    }
    let mut group = WorkerGroup::spawn(model, config, Arc::new(data.clone()))
        .map_err(|e| TrainAborted::new(Vec::new(), e))?;
    for epoch in 0..config.epochs {
        let start = Mark::now();
        let lr = scheduler_lr(config, epoch);
        let mut losses = Vec::new();
        let mut skipped = 0;
        let batches = match batch_indices(data.len(), config.batch_size, config.seed, epoch as u64) {
            Ok(b) => b,
            Err(e) => return Err(TrainAborted::new(stats, e)),
        };
        for idx in batches {
            if !group.can_step(&idx) {
                continue;
            }
            match group.parallel_train_step(&idx, lr) {
                Ok(out) => {
                    losses.push(out.loss);
                    if !out.applied {
                        skipped += 1;
                    }
                }
                Err(e) => {
                    if let Ok(m) = group.into_model() {
                        *model = m;
                    }
                    return Err(TrainAborted::new(stats, e));
                }
            }
        }
        if losses.is_empty() {
            let e = TrainError::Config(format!(
                "no batch of {} is large enough to split across {} workers",
                config.batch_size, config.workers
            ));
            return Err(TrainAborted::new(stats, e));
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr,
            wall_seconds: start.elapsed_seconds(),
            skipped_steps: skipped,
        });
    }
    *model = group.into_model().map_err(|e| TrainAborted::new(stats.clone(), e))?;
    Ok(stats)
}
