//! Autoregressive model abstraction and its exact toy implementations.
//!
//! The engine only ever asks a model one question: the next-token
//! distribution for a prefix at a temperature. [`TabularModel`] answers
//! from explicit conditional tables, which is what makes the exact
//! enumeration oracles possible; [`SeededRandomModel`] generates
//! reproducible random tables on the fly; [`ExternalModelClient`] speaks
//! a line-delimited JSON protocol to a real model over stdio or TCP.
//!
//! A prefix at the model's maximum length terminates with probability 1:
//! the end-of-keyword factor there is implicitly `1` and such prefixes
//! are never queried.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ConstraintSet;
use crate::dist::{DistributionError, TokenDistribution};
use crate::types::{TokenId, TokenSeq, Vocabulary};

/// How a generated keyword ends.
///
/// `PrefixFree` stops as soon as the sequence is a member of the
/// constraint set, which is only well-defined when no member is a proper
/// prefix of another. `Eok` stops when the dedicated end-of-keyword
/// coordinate is drawn, which works for any set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationMode {
    PrefixFree,
    Eok,
}

impl TerminationMode {
    /// Mirror of the sampler default: membership termination when legal,
    /// end-of-keyword otherwise.
    pub fn default_for(set: &ConstraintSet) -> Self {
        if set.is_prefix_free() {
            TerminationMode::PrefixFree
        } else {
            TerminationMode::Eok
        }
    }
}

impl std::str::FromStr for TerminationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eok" => Ok(TerminationMode::Eok),
            "prefixfree" => Ok(TerminationMode::PrefixFree),
            other => Err(format!("unknown mode {other:?} (expected eok|prefixfree)")),
        }
    }
}

impl std::fmt::Display for TerminationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TerminationMode::PrefixFree => write!(f, "prefixfree"),
            TerminationMode::Eok => write!(f, "eok"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("prefix too long: length {prefix_len} not below model max length {max_len}")]
    PrefixTooLong { prefix_len: usize, max_len: usize },
    #[error("no stored distribution for prefix [{0}]")]
    UnknownPrefix(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid distribution from external model: {0}")]
    InvalidDistribution(String),
    #[error("model table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// The autoregressive model contract: deterministic next-token
/// distributions given (prefix, temperature).
pub trait LanguageModel {
    fn vocab(&self) -> &Vocabulary;

    /// Upper bound on sequence length; prefixes of this length terminate
    /// with probability 1 and may not be queried.
    fn max_len(&self) -> usize;

    fn next_distribution(
        &self,
        prefix: &TokenSeq,
        temperature: f64,
    ) -> Result<TokenDistribution, ModelError>;
}

/// Softmax temperature on stored probabilities: `p^(1/T)` renormalized,
/// with the end-of-keyword coordinate participating. `T = 1` is the
/// identity.
pub fn apply_temperature(
    d: &TokenDistribution,
    temperature: f64,
) -> Result<TokenDistribution, ModelError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(ModelError::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return Ok(d.clone());
    }
    let inv = 1.0 / temperature;
    let powed: Vec<f64> = d.probs().iter().map(|p| p.powf(inv)).collect();
    let eok = d.eok_prob().powf(inv);
    let total: f64 = powed.iter().sum::<f64>() + eok;
    let probs = powed.into_iter().map(|p| p / total).collect();
    Ok(TokenDistribution::new(probs, eok / total)?)
}

/// Probability the model assigns to emitting exactly `seq`: the product
/// of conditional token probabilities, times the end-of-keyword factor
/// at the final position in [`TerminationMode::Eok`].
pub fn sequence_probability<M: LanguageModel + ?Sized>(
    model: &M,
    seq: &TokenSeq,
    temperature: f64,
    mode: TerminationMode,
) -> Result<f64, ModelError> {
    if seq.len() > model.max_len() {
        return Err(ModelError::PrefixTooLong {
            prefix_len: seq.len(),
            max_len: model.max_len(),
        });
    }
    let mut p = 1.0f64;
    for t in 0..seq.len() {
        let d = model.next_distribution(&seq.prefix(t), temperature)?;
        p *= d.prob(seq.get(t).unwrap());
    }
    if mode == TerminationMode::Eok && seq.len() < model.max_len() {
        p *= model.next_distribution(seq, temperature)?.eok_prob();
    }
    Ok(p)
}

/// Exhaustive conditional-probability tables: one stored distribution
/// per prefix shorter than `max_len`. The only model the enumeration
/// oracles accept.
#[derive(Debug, Clone)]
pub struct TabularModel {
    vocab: Vocabulary,
    max_len: usize,
    declared_mode: TerminationMode,
    tables: HashMap<TokenSeq, TokenDistribution>,
}

impl TabularModel {
    pub fn from_entries(
        vocab: Vocabulary,
        max_len: usize,
        declared_mode: TerminationMode,
        entries: impl IntoIterator<Item = (TokenSeq, TokenDistribution)>,
    ) -> Result<Self, ModelError> {
        assert!(max_len >= 1);
        let mut tables = HashMap::new();
        for (prefix, dist) in entries {
            if prefix.len() >= max_len {
                return Err(ModelError::Domain(format!(
                    "prefix [{prefix}] not shorter than max length {max_len}"
                )));
            }
            if !prefix.valid_for(&vocab) {
                return Err(ModelError::Domain(format!(
                    "prefix [{prefix}] has tokens outside the vocabulary"
                )));
            }
            if dist.vocab_size() != vocab.size() {
                return Err(ModelError::Domain(format!(
                    "distribution for [{prefix}] has {} entries, vocabulary has {}",
                    dist.vocab_size(),
                    vocab.size()
                )));
            }
            tables.insert(prefix, dist);
        }
        Ok(TabularModel {
            vocab,
            max_len,
            declared_mode,
            tables,
        })
    }

    pub fn declared_mode(&self) -> TerminationMode {
        self.declared_mode
    }

    /// Materializes any model into explicit tables by enumerating every
    /// prefix shorter than its max length. Only viable for tiny
    /// vocabularies; guarded by a prefix-count budget.
    pub fn materialize<M: LanguageModel + ?Sized>(
        model: &M,
        declared_mode: TerminationMode,
    ) -> Result<Self, ModelError> {
        const PREFIX_BUDGET: u64 = 2_000_000;
        let v = model.vocab().size() as u64;
        let mut count = 1u64;
        let mut level = 1u64;
        for _ in 1..model.max_len() {
            level = level.saturating_mul(v);
            count = count.saturating_add(level);
            if count > PREFIX_BUDGET {
                return Err(ModelError::Domain(format!(
                    "materialization would store more than {PREFIX_BUDGET} prefixes"
                )));
            }
        }
        let mut tables = HashMap::new();
        let mut stack = vec![TokenSeq::empty()];
        while let Some(prefix) = stack.pop() {
            let dist = model.next_distribution(&prefix, 1.0)?;
            if prefix.len() + 1 < model.max_len() {
                for t in 0..model.vocab().size() {
                    stack.push(prefix.extended(TokenId(t)));
                }
            }
            tables.insert(prefix, dist);
        }
        Ok(TabularModel {
            vocab: model.vocab().clone(),
            max_len: model.max_len(),
            declared_mode,
            tables,
        })
    }

    /// Total measure of the generation process: complete sequences
    /// weighted by their end-of-keyword factors plus the overflow mass at
    /// the maximum length. Equals 1 for any complete, normalized table.
    pub fn total_sequence_measure(&self) -> Result<f64, ModelError> {
        fn rec(m: &TabularModel, prefix: &TokenSeq) -> Result<f64, ModelError> {
            let d = m.next_distribution(prefix, 1.0)?;
            let mut total = d.eok_prob();
            for t in 0..m.vocab.size() {
                let p = d.prob(TokenId(t));
                if p == 0.0 {
                    continue;
                }
                total += if prefix.len() + 1 == m.max_len {
                    p
                } else {
                    p * rec(m, &prefix.extended(TokenId(t)))?
                };
            }
            Ok(total)
        }
        rec(self, &TokenSeq::empty())
    }

    /// Parses the table text format. Header line
    /// `vocab=<n> maxlen=<m> mode=<eok|prefixfree>`, then one line per
    /// prefix: `<prefix tokens>|<probs>|<eok_prob>`.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(ModelError::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let mut vocab_size = None;
        let mut max_len = None;
        let mut mode = None;
        for field in header.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| ModelError::Parse {
                line: 1,
                message: format!("bad header field {field:?}"),
            })?;
            match key {
                "vocab" => vocab_size = Some(value.parse::<u32>().map_err(|_| header_err(value))?),
                "maxlen" => max_len = Some(value.parse::<usize>().map_err(|_| header_err(value))?),
                "mode" => {
                    mode = Some(value.parse::<TerminationMode>().map_err(|e| {
                        ModelError::Parse { line: 1, message: e }
                    })?)
                }
                _ => {
                    return Err(ModelError::Parse {
                        line: 1,
                        message: format!("unknown header key {key:?}"),
                    })
                }
            }
        }
        let (vocab_size, max_len, mode) = match (vocab_size, max_len, mode) {
            (Some(v), Some(m), Some(d)) => (v, m, d),
            _ => {
                return Err(ModelError::Parse {
                    line: 1,
                    message: "header must declare vocab, maxlen, and mode".into(),
                })
            }
        };
        let vocab = Vocabulary::new(vocab_size);
        let mut entries = Vec::new();
        for (i, raw) in lines {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = raw.split('|').collect();
            if parts.len() != 3 {
                return Err(ModelError::Parse {
                    line,
                    message: "expected <prefix>|<probs>|<eok>".into(),
                });
            }
            let mut prefix_ids = Vec::new();
            for tok in parts[0].split_whitespace() {
                prefix_ids.push(tok.parse::<u32>().map_err(|_| ModelError::Parse {
                    line,
                    message: format!("bad prefix token {tok:?}"),
                })?);
            }
            let mut probs = Vec::new();
            for p in parts[1].split_whitespace() {
                probs.push(p.parse::<f64>().map_err(|_| ModelError::Parse {
                    line,
                    message: format!("bad probability {p:?}"),
                })?);
            }
            if probs.len() != vocab_size as usize {
                return Err(ModelError::Parse {
                    line,
                    message: format!(
                        "expected {vocab_size} probabilities, found {}",
                        probs.len()
                    ),
                });
            }
            let eok = parts[2]
                .trim()
                .parse::<f64>()
                .map_err(|_| ModelError::Parse {
                    line,
                    message: format!("bad eok probability {:?}", parts[2].trim()),
                })?;
            let dist = TokenDistribution::new(probs, eok).map_err(|e| ModelError::Parse {
                line,
                message: e.to_string(),
            })?;
            entries.push((TokenSeq::from(prefix_ids), dist));
        }
        TabularModel::from_entries(vocab, max_len, mode, entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "vocab={} maxlen={} mode={}\n",
            self.vocab.size(),
            self.max_len,
            self.declared_mode
        );
        let mut prefixes: Vec<&TokenSeq> = self.tables.keys().collect();
        prefixes.sort();
        for prefix in prefixes {
            let d = &self.tables[prefix];
            let _ = write!(out, "{prefix}|");
            for (i, p) in d.probs().iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{p}");
            }
            let _ = writeln!(out, "|{}", d.eok_prob());
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        Ok(fs::write(path, self.to_text())?)
    }
}

fn header_err(value: &str) -> ModelError {
    ModelError::Parse {
        line: 1,
        message: format!("bad header value {value:?}"),
    }
}

impl LanguageModel for TabularModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_distribution(
        &self,
        prefix: &TokenSeq,
        temperature: f64,
    ) -> Result<TokenDistribution, ModelError> {
        if prefix.len() >= self.max_len {
            return Err(ModelError::PrefixTooLong {
                prefix_len: prefix.len(),
                max_len: self.max_len,
            });
        }
        let base = self
            .tables
            .get(prefix)
            .ok_or_else(|| ModelError::UnknownPrefix(prefix.to_string()))?;
        apply_temperature(base, temperature)
    }
}

/// The two-token construction that makes per-step masking maximally
/// biased. All sequences have length 2 and terminate with probability 1;
/// the constraint set keeps both children of `v1` but only `v1` under
/// `v2`, so masking inflates the `v2 v1` path from `p_b * eps` to `p_b`.
pub fn worst_case_instance(
    p_bad: f64,
    eps: f64,
) -> Result<(TabularModel, ConstraintSet), ModelError> {
    if !(p_bad > 0.0 && p_bad < 1.0) {
        return Err(ModelError::Domain(format!(
            "p_bad must lie in (0,1), got {p_bad}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(ModelError::Domain(format!("eps must lie in (0,1), got {eps}")));
    }
    let vocab = Vocabulary::new(2);
    let entries = vec![
        (
            TokenSeq::empty(),
            TokenDistribution::new(vec![1.0 - p_bad, p_bad], 0.0)?,
        ),
        (
            TokenSeq::from_ids(&[0]),
            TokenDistribution::new(vec![0.5, 0.5], 0.0)?,
        ),
        (
            TokenSeq::from_ids(&[1]),
            TokenDistribution::new(vec![eps, 1.0 - eps], 0.0)?,
        ),
    ];
    let model = TabularModel::from_entries(vocab.clone(), 2, TerminationMode::Eok, entries)?;
    let set = ConstraintSet::new(
        vec![
            TokenSeq::from_ids(&[0, 0]),
            TokenSeq::from_ids(&[0, 1]),
            TokenSeq::from_ids(&[1, 0]),
        ],
        vocab,
    )
    .map_err(|e| ModelError::Domain(e.to_string()))?;
    Ok((model, set))
}

/// Reproducible random model: identical seed gives identical
/// distributions on every prefix. `concentration` sharpens the
/// per-prefix weights (0 is uniform).
#[derive(Debug, Clone)]
pub struct SeededRandomModel {
    vocab: Vocabulary,
    max_len: usize,
    seed: u64,
    concentration: f64,
}

impl SeededRandomModel {
    pub fn new(vocab: Vocabulary, max_len: usize, seed: u64, concentration: f64) -> Self {
        assert!(max_len >= 1);
        assert!(concentration >= 0.0);
        SeededRandomModel {
            vocab,
            max_len,
            seed,
            concentration,
        }
    }
}

impl LanguageModel for SeededRandomModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_distribution(
        &self,
        prefix: &TokenSeq,
        temperature: f64,
    ) -> Result<TokenDistribution, ModelError> {
        if prefix.len() >= self.max_len {
            return Err(ModelError::PrefixTooLong {
                prefix_len: prefix.len(),
                max_len: self.max_len,
            });
        }
        if !prefix.valid_for(&self.vocab) {
            return Err(ModelError::Domain(format!(
                "prefix [{prefix}] has tokens outside the vocabulary"
            )));
        }
        // Hash (seed, prefix) into a per-prefix stream so lookup order
        // cannot influence the values.
        let mut bytes = Vec::with_capacity(8 + prefix.len() * 4);
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        for t in prefix.tokens() {
            bytes.extend_from_slice(&t.0.to_le_bytes());
        }
        let mut state = crate::corpus::fnv1a64(&bytes);
        let n = self.vocab.size() as usize;
        let mut weights = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            state = splitmix64(state);
            // map to (0,1); never exactly 0
            let u = ((state >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
            weights.push(u.powf(self.concentration.max(f64::MIN_POSITIVE)));
        }
        let total: f64 = weights.iter().sum();
        let eok = weights.pop().unwrap() / total;
        let probs = weights.into_iter().map(|w| w / total).collect();
        let base = TokenDistribution::new(probs, eok)?;
        apply_temperature(&base, temperature)
    }
}

pub(crate) fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One request/response line pair of the external-model wire protocol.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub prefix: Vec<u32>,
    pub temperature: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub probs: Vec<f64>,
    pub eok: f64,
}

/// Where an external model lives: a TCP address (`tcp:<addr>`) or a
/// subprocess command line to spawn and talk to over stdio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Stdio(Vec<String>),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Endpoint, ModelError> {
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(ModelError::Domain("empty tcp address".into()));
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        let parts: Vec<String> = s.split_whitespace().map(String::from).collect();
        if parts.is_empty() {
            return Err(ModelError::Domain("empty endpoint".into()));
        }
        Ok(Endpoint::Stdio(parts))
    }
}

enum Transport {
    Tcp {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
    },
    Child {
        child: Child,
        stdin: ChildStdin,
        stdout: BufReader<ChildStdout>,
    },
}

/// Client for a model served over the wire protocol. One in-flight
/// request per connection; the transport sits behind a mutex so a shared
/// reference stays usable, but callers wanting parallelism should open
/// one client per worker.
pub struct ExternalModelClient {
    vocab: Vocabulary,
    max_len: usize,
    transport: Mutex<Transport>,
}

/// Mass deviation beyond which an external distribution is rejected
/// outright; smaller deviations are renormalized (float32 transport).
pub const EXTERNAL_MASS_TOLERANCE: f64 = 1e-4;

impl ExternalModelClient {
    pub fn connect(
        endpoint: &Endpoint,
        vocab: Vocabulary,
        max_len: usize,
        timeout: Option<Duration>,
    ) -> Result<Self, ModelError> {
        let transport = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| ModelError::Transport(format!("connect {addr}: {e}")))?;
                stream
                    .set_read_timeout(timeout)
                    .map_err(|e| ModelError::Transport(e.to_string()))?;
                let reader = BufReader::new(
                    stream
                        .try_clone()
                        .map_err(|e| ModelError::Transport(e.to_string()))?,
                );
                Transport::Tcp {
                    reader,
                    writer: stream,
                }
            }
            Endpoint::Stdio(cmd) => {
                let mut child = Command::new(&cmd[0])
                    .args(&cmd[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| ModelError::Transport(format!("spawn {:?}: {e}", cmd[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                Transport::Child {
                    child,
                    stdin,
                    stdout,
                }
            }
        };
        Ok(ExternalModelClient {
            vocab,
            max_len,
            transport: Mutex::new(transport),
        })
    }

    fn round_trip(&self, request: &WireRequest) -> Result<WireResponse, ModelError> {
        let mut line = serde_json::to_string(request)
            .map_err(|e| ModelError::Protocol(e.to_string()))?;
        line.push('\n');
        let mut transport = self.transport.lock().expect("transport lock");
        let mut response = String::new();
        match &mut *transport {
            Transport::Tcp { reader, writer } => {
                writer
                    .write_all(line.as_bytes())
                    .and_then(|_| writer.flush())
                    .map_err(|e| ModelError::Transport(e.to_string()))?;
                reader
                    .read_line(&mut response)
                    .map_err(|e| ModelError::Transport(e.to_string()))?;
            }
            Transport::Child { stdin, stdout, .. } => {
                stdin
                    .write_all(line.as_bytes())
                    .and_then(|_| stdin.flush())
                    .map_err(|e| ModelError::Transport(e.to_string()))?;
                stdout
                    .read_line(&mut response)
                    .map_err(|e| ModelError::Transport(e.to_string()))?;
            }
        }
        if response.is_empty() {
            return Err(ModelError::Transport("connection closed".into()));
        }
        serde_json::from_str(&response).map_err(|e| ModelError::Protocol(e.to_string()))
    }
}

impl LanguageModel for ExternalModelClient {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_distribution(
        &self,
        prefix: &TokenSeq,
        temperature: f64,
    ) -> Result<TokenDistribution, ModelError> {
        if prefix.len() >= self.max_len {
            return Err(ModelError::PrefixTooLong {
                prefix_len: prefix.len(),
                max_len: self.max_len,
            });
        }
        let request = WireRequest {
            prefix: prefix.tokens().iter().map(|t| t.0).collect(),
            temperature,
        };
        let response = self.round_trip(&request)?;
        if response.probs.len() != self.vocab.size() as usize {
            return Err(ModelError::Protocol(format!(
                "expected {} probabilities, got {}",
                self.vocab.size(),
                response.probs.len()
            )));
        }
        for &p in response.probs.iter().chain([&response.eok]) {
            if !(p.is_finite() && p >= 0.0) {
                return Err(ModelError::InvalidDistribution(format!(
                    "negative or non-finite probability {p}"
                )));
            }
        }
        let total: f64 = response.probs.iter().sum::<f64>() + response.eok;
        if (total - 1.0).abs() > EXTERNAL_MASS_TOLERANCE {
            return Err(ModelError::InvalidDistribution(format!(
                "mass {total} deviates from 1 beyond {EXTERNAL_MASS_TOLERANCE}"
            )));
        }
        let probs: Vec<f64> = response.probs.iter().map(|p| p / total).collect();
        Ok(TokenDistribution::new(probs, response.eok / total)?)
    }
}

impl Drop for ExternalModelClient {
    fn drop(&mut self) {
        if let Ok(Transport::Child { child, .. }) = self.transport.get_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Serves a model over the wire protocol until the peer disconnects.
/// There is no error shape on the wire: a malformed or out-of-contract
/// request terminates the session.
pub fn serve_model<M: LanguageModel + ?Sized>(
    model: &M,
    reader: impl std::io::Read,
    writer: impl Write,
) -> Result<(), ModelError> {
    let reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: WireRequest =
            serde_json::from_str(&line).map_err(|e| ModelError::Protocol(e.to_string()))?;
        let dist = model.next_distribution(
            &TokenSeq::from(request.prefix),
            request.temperature,
        )?;
        let response = WireResponse {
            probs: dist.probs().to_vec(),
            eok: dist.eok_prob(),
        };
        let mut out = serde_json::to_string(&response)
            .map_err(|e| ModelError::Protocol(e.to_string()))?;
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// The storefront example model: soccer=0, used=1, gloves=2, shirts=3,
/// shoes=4. Used across the test suites.
pub fn storefront_model() -> (TabularModel, ConstraintSet) {
    let vocab = Vocabulary::new(5);
    let entries = vec![
        (
            TokenSeq::empty(),
            TokenDistribution::new(vec![0.6, 0.4, 0.0, 0.0, 0.0], 0.0).unwrap(),
        ),
        (
            TokenSeq::from_ids(&[0]),
            TokenDistribution::new(vec![0.0, 0.0, 0.1, 0.0, 0.9], 0.0).unwrap(),
        ),
        (
            TokenSeq::from_ids(&[1]),
            TokenDistribution::new(vec![0.9, 0.0, 0.0, 0.1, 0.0], 0.0).unwrap(),
        ),
        (
            TokenSeq::from_ids(&[1, 0]),
            TokenDistribution::new(vec![0.0, 0.0, 0.1, 0.0, 0.9], 0.0).unwrap(),
        ),
    ];
    let model =
        TabularModel::from_entries(vocab.clone(), 3, TerminationMode::PrefixFree, entries)
            .unwrap();
    let set = ConstraintSet::new(
        vec![
            TokenSeq::from_ids(&[0, 2]),
            TokenSeq::from_ids(&[1, 3]),
            TokenSeq::from_ids(&[1, 0, 4]),
        ],
        vocab,
    )
    .unwrap();
    (model, set)
}
