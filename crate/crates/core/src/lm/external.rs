//! Client for external scorers speaking the line protocol in [`super::protocol`]
//! over a subprocess's stdio or a TCP connection.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use super::protocol::{Message, PROTOCOL_VERSION};
use super::{
    mean, trigger_tokens, BackendDescriptor, BackendKind, ItemOutcome, LmError, ScoreRecord, ScoringBackend,
    CHARS_PER_TOKEN_HINT,
};
use crate::corpus::Document;
use crate::filter::TriggerPhrase;

const CLIENT_ID: &str = concat!("likefilter/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts per batch, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for each further attempt.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(100) }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExternalConfig {
    pub batch_size: usize,
    /// Batches sent before waiting for their responses.
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub read_timeout: Option<Duration>,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig { batch_size: 16, max_in_flight: 4, retry: RetryPolicy::default(), read_timeout: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub batch_attempts: u64,
    pub protocol_failures: u64,
    pub retries: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreItem {
    pub context: String,
    pub continuation: String,
    pub budget_hint: u32,
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    next_id: u64,
    stats: ClientStats,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            // closing stdin lets a well-behaved scorer exit on its own
            self.writer = Box::new(std::io::sink());
            if !matches!(child.try_wait(), Ok(Some(_))) {
                std::thread::sleep(Duration::from_millis(20));
                if !matches!(child.try_wait(), Ok(Some(_))) {
                    let _ = child.kill();
                }
            }
            let _ = child.wait();
        }
    }
}

pub struct ExternalScorer {
    conn: Mutex<Connection>,
    descriptor: BackendDescriptor,
    config: ExternalConfig,
}

impl std::fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScorer").field("descriptor", &self.descriptor).finish()
    }
}

struct Pending {
    batch: usize,
    item: usize,
}

impl ExternalScorer {
    /// Launches `program` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String], config: ExternalConfig) -> Result<Self, LmError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Box::new(BufReader::new(stdout)), Box::new(stdin), Some(child), config)
    }

    pub fn connect(addr: &str, config: ExternalConfig) -> Result<Self, LmError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(config.read_timeout)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::handshake(Box::new(reader), Box::new(stream), None, config)
    }

    /// Wraps an already established byte stream.
    pub fn from_streams(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        config: ExternalConfig,
    ) -> Result<Self, LmError> {
        Self::handshake(reader, writer, None, config)
    }

    fn handshake(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
        config: ExternalConfig,
    ) -> Result<Self, LmError> {
        if config.batch_size == 0 || config.max_in_flight == 0 || config.retry.max_attempts == 0 {
            return Err(LmError::Other("batch size, in-flight limit and attempts must be positive".into()));
        }
        let mut conn = Connection { reader, writer, child, next_id: 1, stats: ClientStats::default() };
        conn.send(&Message::Hello { version: PROTOCOL_VERSION, backend_id: CLIENT_ID.to_string() })?;
        let backend_id = match conn.receive()? {
            Message::Hello { version, backend_id } if version == PROTOCOL_VERSION => backend_id,
            Message::Hello { version, .. } => {
                return Err(LmError::Protocol(format!("scorer speaks protocol version {version}, expected {PROTOCOL_VERSION}")))
            }
            other => return Err(LmError::Protocol(format!("expected hello, got {other:?}"))),
        };
        let descriptor = BackendDescriptor {
            backend_id,
            kind: BackendKind::External,
            tokenizer_note: format!(
                "scorer-native tokenization; context budget sent as a character hint ({CHARS_PER_TOKEN_HINT} chars per token)"
            ),
        };
        Ok(ExternalScorer { conn: Mutex::new(conn), descriptor, config })
    }

    pub fn stats(&self) -> ClientStats {
        self.conn.lock().expect("scorer connection poisoned").stats
    }

    /// Scores each item, returning per-token log-probs or the scorer's
    /// per-item error message, in input order.
    pub fn external_score(&self, items: &[ScoreItem]) -> Result<Vec<Result<Vec<f64>, String>>, LmError> {
        let mut conn = self.conn.lock().expect("scorer connection poisoned");
        conn.run(items, &self.config)
    }
}

impl Connection {
    fn send(&mut self, message: &Message) -> Result<(), LmError> {
        self.writer.write_all(message.to_line().as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn receive(&mut self) -> Result<Message, LmError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(LmError::Protocol("scorer closed the connection".into()));
        }
        Message::parse(&line).map_err(|e| LmError::Protocol(format!("malformed response {:?}: {e}", line.trim_end())))
    }

    fn run(&mut self, items: &[ScoreItem], config: &ExternalConfig) -> Result<Vec<Result<Vec<f64>, String>>, LmError> {
        let batches: Vec<std::ops::Range<usize>> = (0..items.len())
            .step_by(config.batch_size)
            .map(|start| start..(start + config.batch_size).min(items.len()))
            .collect();
        let mut results: Vec<Option<Result<Vec<f64>, String>>> = vec![None; items.len()];
        let mut attempts = vec![0u32; batches.len()];
        let mut remaining = vec![0usize; batches.len()];
        let mut queue: VecDeque<usize> = (0..batches.len()).collect();
        let mut in_flight: Vec<usize> = Vec::new();
        let mut pending: HashMap<u64, Pending> = HashMap::new();

        loop {
            let mut failure = None;
            while in_flight.len() < config.max_in_flight && failure.is_none() {
                let Some(batch) = queue.pop_front() else { break };
                attempts[batch] += 1;
                self.stats.batch_attempts += 1;
                remaining[batch] = batches[batch].len();
                in_flight.push(batch);
                for item in batches[batch].clone() {
                    let id = self.next_id;
                    self.next_id += 1;
                    pending.insert(id, Pending { batch, item });
                    let request = &items[item];
                    let message = Message::Score {
                        id,
                        context: request.context.clone(),
                        continuation: request.continuation.clone(),
                        budget_hint: request.budget_hint,
                    };
                    if let Err(e) = self.send(&message) {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            if failure.is_none() && in_flight.is_empty() {
                break;
            }
            if failure.is_none() {
                failure = self.read_one(&mut pending, &mut results, &mut remaining, &mut in_flight).err().map(|e| e.to_string());
            }
            let Some(reason) = failure else { continue };

            // Everything in flight is resent with fresh ids; late answers to
            // the old ids are ignored.
            self.stats.protocol_failures += 1;
            pending.clear();
            let mut worst = 0;
            for batch in in_flight.drain(..).rev() {
                if attempts[batch] >= config.retry.max_attempts {
                    return Err(LmError::Unavailable { attempts: attempts[batch], last: reason });
                }
                worst = worst.max(attempts[batch]);
                for item in batches[batch].clone() {
                    results[item] = None;
                }
                self.stats.retries += 1;
                queue.push_front(batch);
            }
            log::warn!("scorer failure ({reason}); retrying");
            std::thread::sleep(config.retry.delay_before(worst + 1));
        }
        Ok(results.into_iter().map(|r| r.expect("every item answered")).collect())
    }

    fn read_one(
        &mut self,
        pending: &mut HashMap<u64, Pending>,
        results: &mut [Option<Result<Vec<f64>, String>>],
        remaining: &mut [usize],
        in_flight: &mut Vec<usize>,
    ) -> Result<(), LmError> {
        let (id, outcome) = match self.receive()? {
            Message::Result { id, token_logprobs, .. } => (id, validate_logprobs(token_logprobs)),
            Message::Error { id, message } => (id, Err(message)),
            other => return Err(LmError::Protocol(format!("unexpected message {other:?}"))),
        };
        let Some(Pending { batch, item }) = pending.remove(&id) else {
            log::debug!("ignoring response to stale or unknown id {id}");
            return Ok(());
        };
        results[item] = Some(outcome);
        remaining[batch] -= 1;
        if remaining[batch] == 0 {
            in_flight.retain(|b| *b != batch);
        }
        Ok(())
    }
}

fn validate_logprobs(values: Vec<f64>) -> Result<Vec<f64>, String> {
    if values.is_empty() {
        return Err("empty scoring".to_string());
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v > 0.0) {
        return Err(format!("invalid log-probability {bad}"));
    }
    Ok(values)
}

impl ScoringBackend for ExternalScorer {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn score_documents(
        &self,
        docs: &[Document],
        triggers: &[TriggerPhrase],
        budget: usize,
        _jobs: usize,
    ) -> Result<Vec<Vec<ItemOutcome>>, LmError> {
        let hints = triggers
            .iter()
            .map(|t| {
                let tokens = trigger_tokens(t, budget)?;
                Ok(u32::try_from((budget - tokens.len()) * CHARS_PER_TOKEN_HINT).unwrap_or(u32::MAX))
            })
            .collect::<Result<Vec<_>, LmError>>()?;
        let items: Vec<ScoreItem> = docs
            .iter()
            .flat_map(|doc| {
                triggers.iter().zip(&hints).map(|(t, hint)| ScoreItem {
                    context: doc.text.clone(),
                    continuation: t.text.clone(),
                    budget_hint: *hint,
                })
            })
            .collect();
        let mut outcomes = self.external_score(&items)?.into_iter();
        Ok(docs
            .iter()
            .map(|doc| {
                triggers
                    .iter()
                    .map(|t| {
                        let logprobs = outcomes.next().expect("one outcome per item")?;
                        Ok(ScoreRecord {
                            doc_id: doc.id.clone(),
                            trigger_id: t.trigger_id.clone(),
                            mean_logprob: mean(&logprobs),
                            token_count: logprobs.len(),
                            backend_id: self.descriptor.backend_id.clone(),
                        })
                    })
                    .collect()
            })
            .collect())
    }
}
