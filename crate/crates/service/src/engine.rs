//! The detection loop. It owns the detector; everything else talks to it
//! through a command queue.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use hedgefilter::config::RunConfig;
use hedgefilter::detect::{Detector, HedgeMode};
use hedgefilter::harness::{seeded_rng, RngPurpose};
use hedgefilter::hedge::Label;
use hedgefilter::record::{write_jsonl, ErrorRecord, InputRecord, StreamRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::api::{
    FeedbackAck, FeedbackError, FeedbackSubmission, ObservationSummary, PendingQuery, QueriesResponse, ServiceStats,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceOptions {
    pub policy: HedgeMode,
    /// How long a queried step waits for its label.
    pub timeout: Duration,
    /// How many past steps accept volunteered labels in arbitrary mode.
    pub window: u64,
    pub seed: u64,
    /// Append-only JSONL of records and submissions.
    pub log_path: Option<PathBuf>,
}

impl ServiceOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            policy: config.hedge_mode(),
            timeout: config.service.timeout,
            window: config.service.window,
            seed: config.seed,
            log_path: config.output_dir.as_ref().map(|d| d.join("service.jsonl")),
        }
    }
}

/// One line of detector input, already parsed or with the reason it could not be.
#[derive(Debug, Clone, PartialEq)]
pub struct InputLine {
    pub line: u64,
    pub input: Result<InputRecord, String>,
}

/// Reads JSONL input on a blocking thread. The channel holds a single line so
/// that reading never runs ahead of detection.
pub fn feed_lines<R: BufRead + Send + 'static>(reader: R) -> mpsc::Receiver<InputLine> {
    let (tx, rx) = mpsc::channel(1);
    std::thread::spawn(move || {
        for (i, line) in reader.lines().enumerate() {
            let Ok(line) = line else { break };
            let n = i as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let input = InputRecord::parse(&line).map_err(|e| e.to_string());
            if tx.blocking_send(InputLine { line: n, input }).is_err() {
                break;
            }
        }
    });
    rx
}

/// Feeds a prepared sequence of inputs.
pub fn feed_records(records: Vec<InputRecord>) -> mpsc::Receiver<InputLine> {
    let (tx, rx) = mpsc::channel(1);
    tokio::spawn(async move {
        for (i, input) in records.into_iter().enumerate() {
            if tx.send(InputLine { line: i as u64 + 1, input: Ok(input) }).await.is_err() {
                break;
            }
        }
    });
    rx
}

enum Command {
    State { since: u64, reply: oneshot::Sender<Vec<StreamRecord>> },
    Queries { reply: oneshot::Sender<QueriesResponse> },
    Feedback { submission: FeedbackSubmission, reply: oneshot::Sender<Result<FeedbackAck, FeedbackError>> },
    Stats { reply: oneshot::Sender<ServiceStats> },
}

/// Cheap, cloneable access to a running loop.
#[derive(Debug, Clone)]
pub struct ServiceHandle {
    tx: mpsc::Sender<Command>,
}

impl ServiceHandle {
    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Option<T> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).await.ok()?;
        rx.await.ok()
    }

    /// Records with `t > since`, in order.
    pub async fn state(&self, since: u64) -> Vec<StreamRecord> {
        self.ask(|reply| Command::State { since, reply }).await.unwrap_or_default()
    }

    pub async fn queries(&self) -> Option<QueriesResponse> {
        self.ask(|reply| Command::Queries { reply }).await
    }

    pub async fn feedback(&self, submission: FeedbackSubmission) -> Result<FeedbackAck, FeedbackError> {
        self.ask(|reply| Command::Feedback { submission, reply }).await.unwrap_or(Err(FeedbackError::Stopped))
    }

    pub async fn stats(&self) -> Option<ServiceStats> {
        self.ask(|reply| Command::Stats { reply }).await
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogEntry<'a> {
    Record(&'a StreamRecord),
    Error(&'a ErrorRecord),
    Submission { submission: &'a FeedbackSubmission, outcome: Result<&'a FeedbackAck, &'a FeedbackError> },
    Expired { id: u64, t: u64 },
}

struct Pending {
    query: PendingQuery,
    scored: StreamRecord,
    deadline: Instant,
}

enum Resolution {
    Answered,
    Expired,
}

struct Engine {
    detector: Detector,
    options: ServiceOptions,
    coins: ChaCha8Rng,
    records: Vec<StreamRecord>,
    pending: Option<Pending>,
    resolved: HashMap<u64, Resolution>,
    labeled_steps: HashSet<u64>,
    next_id: u64,
    stats: ServiceStats,
    output: Option<Box<dyn Write + Send>>,
    log: Option<File>,
}

/// Starts the loop on the current tokio runtime.
///
/// Records and input errors go to `output` as JSONL as soon as each step is
/// complete. The loop keeps serving requests after the input ends and stops
/// once every handle is dropped.
pub fn spawn(
    detector: Detector,
    options: ServiceOptions,
    input: mpsc::Receiver<InputLine>,
    output: Option<Box<dyn Write + Send>>,
) -> hedgefilter::Result<(ServiceHandle, JoinHandle<hedgefilter::Result<ServiceStats>>)> {
    let log = match &options.log_path {
        Some(path) => Some(OpenOptions::new().create(true).append(true).open(path)?),
        None => None,
    };
    let (tx, rx) = mpsc::channel(64);
    let engine = Engine {
        detector,
        coins: seeded_rng(options.seed, RngPurpose::QueryCoins),
        options,
        records: Vec::new(),
        pending: None,
        resolved: HashMap::new(),
        labeled_steps: HashSet::new(),
        next_id: 1,
        stats: ServiceStats::default(),
        output,
        log,
    };
    Ok((ServiceHandle { tx }, tokio::spawn(engine.run(input, rx))))
}

fn unix_millis(offset: Duration) -> u64 {
    (SystemTime::now() + offset).duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl Engine {
    async fn run(
        mut self,
        mut input: mpsc::Receiver<InputLine>,
        mut commands: mpsc::Receiver<Command>,
    ) -> hedgefilter::Result<ServiceStats> {
        let mut input_open = true;
        loop {
            if let Some(deadline) = self.pending.as_ref().map(|p| p.deadline) {
                tokio::select! {
                    cmd = commands.recv() => match cmd {
                        Some(cmd) => self.handle(cmd)?,
                        None => break,
                    },
                    _ = tokio::time::sleep_until(deadline) => self.expire()?,
                }
            } else if input_open {
                tokio::select! {
                    biased;
                    cmd = commands.recv() => match cmd {
                        Some(cmd) => self.handle(cmd)?,
                        None => break,
                    },
                    line = input.recv() => match line {
                        Some(line) => self.ingest(line)?,
                        None => input_open = false,
                    },
                }
            } else {
                match commands.recv().await {
                    Some(cmd) => self.handle(cmd)?,
                    None => break,
                }
            }
        }
        // Nobody can answer any more; the pending step proceeds unlabeled.
        if self.pending.is_some() {
            self.expire()?;
        }
        Ok(self.stats)
    }

    fn log(&mut self, entry: &LogEntry<'_>) -> hedgefilter::Result<()> {
        if let Some(log) = &mut self.log {
            write_jsonl(&mut *log, entry)?;
        }
        Ok(())
    }

    fn emit(&mut self, record: StreamRecord) -> hedgefilter::Result<()> {
        if let Some(out) = &mut self.output {
            write_jsonl(&mut *out, &record)?;
            out.flush()?;
        }
        self.log(&LogEntry::Record(&record))?;
        self.stats.records += 1;
        self.records.push(record);
        Ok(())
    }

    fn emit_error(&mut self, error: ErrorRecord) -> hedgefilter::Result<()> {
        if let Some(out) = &mut self.output {
            write_jsonl(&mut *out, &error)?;
            out.flush()?;
        }
        self.log(&LogEntry::Error(&error))?;
        self.stats.errors += 1;
        Ok(())
    }

    fn ingest(&mut self, line: InputLine) -> hedgefilter::Result<()> {
        let scored = line.input.and_then(|r| self.detector.score(&r.z, r.x.as_deref(), r.y).map_err(|e| e.to_string()));
        let scored = match scored {
            Ok(s) => s,
            Err(error) => return self.emit_error(ErrorRecord { line: line.line, error }),
        };
        let ask = match self.options.policy {
            HedgeMode::Full => true,
            HedgeMode::LabelEfficient => {
                let q = self.detector.query_probability(&scored);
                self.coins.random::<f64>() < q
            }
            HedgeMode::Arbitrary => false,
        };
        if !ask {
            let record = self.detector.finish(scored, false, None)?;
            return self.emit(record);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.stats.queries += 1;
        let query = PendingQuery {
            id,
            t: scored.t,
            z: ObservationSummary::of(&scored.z),
            log_belief: scored.log_belief,
            zeta: scored.zeta,
            tau: scored.tau,
            y_hat: scored.y_hat,
            created_at: unix_millis(Duration::ZERO),
            deadline: unix_millis(self.options.timeout),
        };
        self.pending = Some(Pending { query, scored, deadline: Instant::now() + self.options.timeout });
        Ok(())
    }

    fn expire(&mut self) -> hedgefilter::Result<()> {
        let Some(p) = self.pending.take() else { return Ok(()) };
        self.resolved.insert(p.query.id, Resolution::Expired);
        self.stats.expired += 1;
        self.log(&LogEntry::Expired { id: p.query.id, t: p.query.t })?;
        let record = self.detector.finish(p.scored, true, None)?;
        self.emit(record)
    }

    fn handle(&mut self, cmd: Command) -> hedgefilter::Result<()> {
        match cmd {
            Command::State { since, reply } => {
                let from = (since as usize).min(self.records.len());
                let _ = reply.send(self.records[from..].to_vec());
            }
            Command::Queries { reply } => {
                let queries = match self.options.policy {
                    HedgeMode::Arbitrary => Vec::new(),
                    _ => self.pending.iter().map(|p| p.query.clone()).collect(),
                };
                let _ = reply.send(QueriesResponse { mode: self.options.policy, queries });
            }
            Command::Feedback { submission, reply } => {
                let (outcome, finished) = self.feedback(&submission)?;
                match &outcome {
                    Ok(_) => self.stats.accepted += 1,
                    Err(_) => self.stats.rejected += 1,
                }
                self.log(&LogEntry::Submission { submission: &submission, outcome: outcome.as_ref() })?;
                if let Some(record) = finished {
                    self.emit(record)?;
                }
                let _ = reply.send(outcome);
            }
            Command::Stats { reply } => {
                let _ = reply.send(self.stats.clone());
            }
        }
        Ok(())
    }

    /// Validates and applies one submission. A completed queried step is returned for emission.
    fn feedback(
        &mut self,
        sub: &FeedbackSubmission,
    ) -> hedgefilter::Result<(Result<FeedbackAck, FeedbackError>, Option<StreamRecord>)> {
        let Ok(y) = Label::from_i64(sub.y) else {
            return Ok((Err(FeedbackError::InvalidLabel { y: sub.y }), None));
        };
        if self.options.policy == HedgeMode::Arbitrary {
            let Some(t) = sub.t else { return Ok((Err(FeedbackError::MissingTimestep), None)) };
            let last = self.records.len() as u64;
            if t == 0 || t > last || t + self.options.window <= last {
                return Ok((Err(FeedbackError::OutsideWindow { t }), None));
            }
            if !self.labeled_steps.insert(t) {
                return Ok((Err(FeedbackError::DuplicateTimestep { t }), None));
            }
            let y_hat = self.records[(t - 1) as usize].y_hat;
            let moved = self.detector.apply_late_feedback(y_hat, y);
            self.stats.updates += 1;
            let tau = self.detector.hedge().tau();
            return Ok((Ok(FeedbackAck { applied: true, t, tau, moved }), None));
        }
        let Some(id) = sub.id else { return Ok((Err(FeedbackError::MissingId), None)) };
        if self.pending.as_ref().is_some_and(|p| p.query.id == id) {
            let p = self.pending.take().expect("checked above");
            self.resolved.insert(id, Resolution::Answered);
            let moved = p.scored.y_hat != y;
            let record = self.detector.finish(p.scored, true, Some(y))?;
            self.stats.updates += 1;
            let ack = FeedbackAck { applied: true, t: record.t, tau: self.detector.hedge().tau(), moved };
            return Ok((Ok(ack), Some(record)));
        }
        let err = match self.resolved.get(&id) {
            Some(Resolution::Answered) => FeedbackError::DuplicateQuery { id },
            Some(Resolution::Expired) => FeedbackError::Expired { id },
            None => FeedbackError::UnknownQuery { id },
        };
        Ok((Err(err), None))
    }
}
