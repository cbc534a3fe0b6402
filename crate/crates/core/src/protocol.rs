//! Teacher scoring service for flattened TopK-union queries.
//!
//! A client collects the student's TopK set at every response position,
//! flattens them into one sorted union `U`, and asks the teacher for the
//! `T × |U|` matrix of log-probabilities. Per-position maps are then cut back
//! out of the matrix with [`extract_position_maps`]. The codec accepts only the
//! flat-union shape; per-position lists (field tag `0x06`) are rejected.
//!
//! Wire format (all integers big-endian):
//!
//! ```text
//! frame   := len:u32 payload[len]
//! payload := kind:u8 field*
//! field   := tag:u8 size:u32 value[size]
//! ```
//!
//! The full field table lives in `docs/protocol.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::prob::{topk, Distribution, TokenId};
use crate::teacher::OracleTeacher;

/// Largest accepted payload. Larger frames are refused unread.
pub const MAX_FRAME: usize = 64 << 20;
/// Default refusal threshold on `|U|`.
pub const DEFAULT_UNION_CAP: usize = 4096;

pub const KIND_REQUEST: u8 = 0x01;
pub const KIND_RESPONSE: u8 = 0x02;
pub const KIND_ERROR: u8 = 0x03;

pub const TAG_REQUEST_ID: u8 = 0x01;
pub const TAG_PROMPT: u8 = 0x02;
pub const TAG_PI: u8 = 0x03;
pub const TAG_RESPONSE: u8 = 0x04;
pub const TAG_UNION: u8 = 0x05;
/// Reserved for per-position token lists; never accepted.
pub const TAG_PER_POSITION: u8 = 0x06;
pub const TAG_LOGPROBS: u8 = 0x10;
pub const TAG_SAMPLED: u8 = 0x11;
pub const TAG_ERROR_KIND: u8 = 0x20;
pub const TAG_REASON: u8 = 0x21;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub request_id: u64,
    pub prompt: u32,
    #[serde(default)]
    pub pi: Vec<TokenId>,
    pub response: Vec<TokenId>,
    /// Sorted, unique.
    pub token_ids_logprob: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub request_id: u64,
    /// `T` rows of `|U|` columns, row-major.
    pub logprobs: Vec<Vec<f64>>,
    /// Teacher log-probability of the response token at each position.
    pub sampled_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    /// The payload could not be decoded.
    Malformed = 1,
    /// `|U|` exceeds the server cap.
    Refused = 2,
    /// Decoded, but not scorable.
    Invalid = 3,
}

impl ErrorKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(ErrorKind::Malformed),
            2 => Some(ErrorKind::Refused),
            3 => Some(ErrorKind::Invalid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    /// Zero when the request id could not be recovered.
    pub request_id: u64,
    pub kind: ErrorKind,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Request(ScoreRequest),
    Response(ScoreResponse),
    Error(ErrorResponse),
}

/// Decoding failure, carrying whatever request id was readable.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}")]
pub struct DecodeError {
    pub request_id: Option<u64>,
    pub reason: String,
}

impl From<DecodeError> for Error {
    fn from(e: DecodeError) -> Self {
        Error::Protocol(e.reason)
    }
}

/// Sorted union of per-position sets and its size relative to `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Union {
    pub tokens: Vec<TokenId>,
    /// Largest per-position set size.
    pub k: usize,
    /// `|U| / K`.
    pub amplification: f64,
}

/// Flattens per-position TopK sets into one sorted unique list.
pub fn build_union(sets: &[Vec<TokenId>]) -> Result<Union> {
    if sets.is_empty() || sets.iter().any(Vec::is_empty) {
        return Err(Error::arg("every position needs a non-empty token set"));
    }
    let tokens: Vec<TokenId> = sets.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let k = sets.iter().map(Vec::len).max().unwrap_or(1);
    Ok(Union {
        amplification: tokens.len() as f64 / k as f64,
        tokens,
        k,
    })
}

/// Cuts position `t`'s requested set out of row `t`.
pub fn extract_position_maps(
    union: &[TokenId],
    resp: &ScoreResponse,
    sets: &[Vec<TokenId>],
) -> Result<Vec<BTreeMap<TokenId, f64>>> {
    if resp.logprobs.len() != sets.len() {
        return Err(Error::Protocol(format!(
            "response has {} rows, {} positions were requested",
            resp.logprobs.len(),
            sets.len()
        )));
    }
    sets.iter()
        .zip(&resp.logprobs)
        .enumerate()
        .map(|(t, (set, row))| {
            if row.len() != union.len() {
                return Err(Error::Protocol(format!(
                    "row {t} has {} columns, union has {}",
                    row.len(),
                    union.len()
                )));
            }
            set.iter()
                .map(|tok| match union.binary_search(tok) {
                    Ok(col) => Ok((*tok, row[col])),
                    Err(_) => Err(Error::Protocol(format!("token {tok} at position {t} is not in the union"))),
                })
                .collect()
        })
        .collect()
}

/// Student TopK sets along `response` and the request that covers them.
pub fn request_for(
    student: &Policy,
    request_id: u64,
    prompt: u32,
    pi: &[TokenId],
    response: &[TokenId],
    k: usize,
) -> Result<(ScoreRequest, Vec<Vec<TokenId>>)> {
    let sets = (0..response.len())
        .map(|t| {
            let d = student.dist_at(&student.context(prompt, &response[..t]));
            Ok(topk(&d, k)?.ids())
        })
        .collect::<Result<Vec<_>>>()?;
    let union = build_union(&sets)?;
    let req = ScoreRequest {
        request_id,
        prompt,
        pi: pi.to_vec(),
        response: response.to_vec(),
        token_ids_logprob: union.tokens,
    };
    Ok((req, sets))
}

// ---------------------------------------------------------------- codec

struct FieldWriter(Vec<u8>);

impl FieldWriter {
    fn new(kind: u8) -> Self {
        Self(vec![kind])
    }

    fn field(&mut self, tag: u8, value: &[u8]) {
        self.0.push(tag);
        self.0.extend_from_slice(&(value.len() as u32).to_be_bytes());
        self.0.extend_from_slice(value);
    }

    fn u32s(&mut self, tag: u8, xs: &[u32]) {
        let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_be_bytes()).collect();
        self.field(tag, &bytes);
    }

    fn f64s(&mut self, tag: u8, head: &[u32], xs: impl Iterator<Item = f64>) {
        let mut bytes: Vec<u8> = head.iter().flat_map(|x| x.to_be_bytes()).collect();
        bytes.extend(xs.flat_map(|x| x.to_bits().to_be_bytes()));
        self.field(tag, &bytes);
    }
}

/// Canonical payload bytes: fields in ascending tag order.
pub fn encode(msg: &Message) -> Vec<u8> {
    match msg {
        Message::Request(r) => {
            let mut w = FieldWriter::new(KIND_REQUEST);
            w.field(TAG_REQUEST_ID, &r.request_id.to_be_bytes());
            w.field(TAG_PROMPT, &r.prompt.to_be_bytes());
            w.u32s(TAG_PI, &r.pi);
            w.u32s(TAG_RESPONSE, &r.response);
            w.u32s(TAG_UNION, &r.token_ids_logprob);
            w.0
        }
        Message::Response(r) => {
            let mut w = FieldWriter::new(KIND_RESPONSE);
            w.field(TAG_REQUEST_ID, &r.request_id.to_be_bytes());
            let cols = r.logprobs.first().map_or(0, Vec::len);
            w.f64s(
                TAG_LOGPROBS,
                &[r.logprobs.len() as u32, cols as u32],
                r.logprobs.iter().flatten().copied(),
            );
            w.f64s(TAG_SAMPLED, &[], r.sampled_logprobs.iter().copied());
            w.0
        }
        Message::Error(e) => {
            let mut w = FieldWriter::new(KIND_ERROR);
            w.field(TAG_REQUEST_ID, &e.request_id.to_be_bytes());
            w.field(TAG_ERROR_KIND, &[e.kind as u8]);
            w.field(TAG_REASON, e.reason.as_bytes());
            w.0
        }
    }
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().expect("4-byte slice"))
}

fn read_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b.try_into().expect("8-byte slice"))
}

fn split_fields(body: &[u8]) -> std::result::Result<BTreeMap<u8, &[u8]>, String> {
    let mut fields = BTreeMap::new();
    let mut rest = body;
    while !rest.is_empty() {
        if rest.len() < 5 {
            return Err(format!("truncated field header ({} bytes left)", rest.len()));
        }
        let tag = rest[0];
        let size = read_u32(&rest[1..5]) as usize;
        if rest.len() - 5 < size {
            return Err(format!("field 0x{tag:02x} declares {size} bytes, {} remain", rest.len() - 5));
        }
        if fields.insert(tag, &rest[5..5 + size]).is_some() {
            return Err(format!("duplicate field 0x{tag:02x}"));
        }
        rest = &rest[5 + size..];
    }
    Ok(fields)
}

fn u32_list(tag: u8, b: &[u8]) -> std::result::Result<Vec<u32>, String> {
    if b.len() % 4 != 0 {
        return Err(format!("field 0x{tag:02x} length {} is not a multiple of 4", b.len()));
    }
    Ok(b.chunks_exact(4).map(read_u32).collect())
}

fn f64_list(tag: u8, b: &[u8]) -> std::result::Result<Vec<f64>, String> {
    if b.len() % 8 != 0 {
        return Err(format!("field 0x{tag:02x} length {} is not a multiple of 8", b.len()));
    }
    Ok(b.chunks_exact(8).map(|c| f64::from_bits(read_u64(c))).collect())
}

/// Inverse of [`encode`]. Field order is free; each tag appears at most once.
pub fn decode(payload: &[u8]) -> std::result::Result<Message, DecodeError> {
    let Some((&kind, body)) = payload.split_first() else {
        return Err(DecodeError {
            request_id: None,
            reason: "empty payload".into(),
        });
    };
    let fields = split_fields(body).map_err(|reason| DecodeError { request_id: None, reason })?;
    let request_id = match fields.get(&TAG_REQUEST_ID) {
        Some(b) if b.len() == 8 => Some(read_u64(b)),
        _ => None,
    };
    decode_fields(kind, &fields, request_id).map_err(|reason| DecodeError { request_id, reason })
}

fn decode_fields(
    kind: u8,
    fields: &BTreeMap<u8, &[u8]>,
    request_id: Option<u64>,
) -> std::result::Result<Message, String> {
    if fields.contains_key(&TAG_PER_POSITION) {
        return Err("per-position token lists are not supported; send the flattened union in field 0x05".into());
    }
    let allowed: &[u8] = match kind {
        KIND_REQUEST => &[TAG_REQUEST_ID, TAG_PROMPT, TAG_PI, TAG_RESPONSE, TAG_UNION],
        KIND_RESPONSE => &[TAG_REQUEST_ID, TAG_LOGPROBS, TAG_SAMPLED],
        KIND_ERROR => &[TAG_REQUEST_ID, TAG_ERROR_KIND, TAG_REASON],
        other => return Err(format!("unknown message kind 0x{other:02x}")),
    };
    if let Some(tag) = fields.keys().find(|t| !allowed.contains(t)) {
        return Err(format!("unexpected field 0x{tag:02x} for message kind 0x{kind:02x}"));
    }
    let get = |tag: u8| fields.get(&tag).copied().ok_or_else(|| format!("missing field 0x{tag:02x}"));
    let request_id = request_id.ok_or_else(|| "missing or malformed request id (field 0x01)".to_string())?;
    match kind {
        KIND_REQUEST => {
            let prompt = get(TAG_PROMPT)?;
            if prompt.len() != 4 {
                return Err("prompt field must be 4 bytes".into());
            }
            let union = u32_list(TAG_UNION, get(TAG_UNION)?)?;
            if union.windows(2).any(|w| w[0] >= w[1]) {
                return Err("union token ids must be strictly ascending".into());
            }
            Ok(Message::Request(ScoreRequest {
                request_id,
                prompt: read_u32(prompt),
                pi: fields.get(&TAG_PI).map_or(Ok(Vec::new()), |b| u32_list(TAG_PI, b))?,
                response: u32_list(TAG_RESPONSE, get(TAG_RESPONSE)?)?,
                token_ids_logprob: union,
            }))
        }
        KIND_RESPONSE => {
            let m = get(TAG_LOGPROBS)?;
            if m.len() < 8 {
                return Err("logprob matrix header truncated".into());
            }
            let (rows, cols) = (read_u32(&m[..4]) as usize, read_u32(&m[4..8]) as usize);
            let values = f64_list(TAG_LOGPROBS, &m[8..])?;
            if rows.checked_mul(cols) != Some(values.len()) {
                return Err(format!("matrix declares {rows}x{cols}, carries {} values", values.len()));
            }
            let logprobs = if cols == 0 {
                vec![Vec::new(); rows]
            } else {
                values.chunks_exact(cols).map(<[f64]>::to_vec).collect()
            };
            Ok(Message::Response(ScoreResponse {
                request_id,
                logprobs,
                sampled_logprobs: f64_list(TAG_SAMPLED, get(TAG_SAMPLED)?)?,
            }))
        }
        _ => {
            let k = get(TAG_ERROR_KIND)?;
            let kind = match k {
                [b] => ErrorKind::from_byte(*b).ok_or_else(|| format!("unknown error kind {b}"))?,
                _ => return Err("error kind must be 1 byte".into()),
            };
            let reason = String::from_utf8(get(TAG_REASON)?.to_vec()).map_err(|_| "reason is not UTF-8".to_string())?;
            Ok(Message::Error(ErrorResponse {
                request_id,
                kind,
                reason,
            }))
        }
    }
}

/// Writes `payload` behind its 4-byte length.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(Error::Protocol(format!("payload of {} bytes exceeds the frame limit", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Outcome of reading one frame.
#[derive(Debug)]
pub enum Frame {
    Payload(Vec<u8>),
    /// Clean end of stream at a frame boundary.
    Eof,
    /// Declared length beyond [`MAX_FRAME`]; the stream cannot be resynchronized.
    Oversized(usize),
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(Frame::Eof),
            Ok(0) => return Err(Error::Protocol("stream ended inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Ok(Frame::Oversized(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Protocol("stream ended inside a frame".into()),
            _ => e.into(),
        })?;
    Ok(Frame::Payload(payload))
}

/// Length prefix plus payload, as sent on the wire.
pub fn frame_bytes(msg: &Message) -> Vec<u8> {
    let payload = encode(msg);
    let mut out = (payload.len() as u32).to_be_bytes().to_vec();
    out.extend(payload);
    out
}

// --------------------------------------------------------------- server

/// What the server scores with.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoringModel {
    Policy(Policy),
    Oracle(OracleTeacher),
}

impl ScoringModel {
    /// Reads a policy snapshot, or an oracle binding when the file is JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        if text.trim_start().starts_with('{') {
            OracleTeacher::from_json(&text).map(ScoringModel::Oracle)
        } else {
            Policy::read_snapshot(text.as_bytes()).map(ScoringModel::Policy)
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ScoringModel::Policy(p) => p.vocab().size(),
            ScoringModel::Oracle(o) => o.family().vocab().size(),
        }
    }

    /// Next-token distribution after `prefix`, with `pi` in context.
    pub fn dist(&self, prompt: u32, pi: &[TokenId], prefix: &[TokenId]) -> Distribution {
        match self {
            ScoringModel::Policy(p) => p.dist_at(&p.context_with_pi(prompt, pi, prefix)),
            ScoringModel::Oracle(o) => o.dist(prompt, pi, prefix),
        }
    }
}

/// Stateless request handler around an immutable model.
#[derive(Debug, Clone)]
pub struct Scorer {
    model: ScoringModel,
    union_cap: usize,
}

impl Scorer {
    pub fn new(model: ScoringModel, union_cap: usize) -> Self {
        Self { model, union_cap }
    }

    pub fn model(&self) -> &ScoringModel {
        &self.model
    }

    fn error(request_id: u64, kind: ErrorKind, reason: impl Into<String>) -> Message {
        Message::Error(ErrorResponse {
            request_id,
            kind,
            reason: reason.into(),
        })
    }

    pub fn score(&self, req: &ScoreRequest) -> Message {
        let id = req.request_id;
        if req.response.is_empty() {
            return Self::error(id, ErrorKind::Invalid, "empty sequence");
        }
        if req.token_ids_logprob.is_empty() {
            return Self::error(id, ErrorKind::Invalid, "empty union");
        }
        if req.token_ids_logprob.len() > self.union_cap {
            return Self::error(
                id,
                ErrorKind::Refused,
                format!("union of {} tokens exceeds the cap of {}", req.token_ids_logprob.len(), self.union_cap),
            );
        }
        let n = self.model.vocab_size();
        let all = req.token_ids_logprob.iter().chain(&req.response).chain(&req.pi);
        if let Some(bad) = all.into_iter().find(|t| **t as usize >= n) {
            return Self::error(id, ErrorKind::Invalid, format!("token {bad} outside a vocabulary of {n}"));
        }
        let mut logprobs = Vec::with_capacity(req.response.len());
        let mut sampled = Vec::with_capacity(req.response.len());
        for t in 0..req.response.len() {
            let d = self.model.dist(req.prompt, &req.pi, &req.response[..t]);
            logprobs.push(req.token_ids_logprob.iter().map(|u| d.ln_prob(*u)).collect());
            sampled.push(d.ln_prob(req.response[t]));
        }
        Message::Response(ScoreResponse {
            request_id: id,
            logprobs,
            sampled_logprobs: sampled,
        })
    }

    /// Exactly one reply per decodable-or-not payload.
    pub fn handle(&self, payload: &[u8]) -> Message {
        match decode(payload) {
            Ok(Message::Request(req)) => self.score(&req),
            Ok(_) => Self::error(0, ErrorKind::Malformed, "expected a request message"),
            Err(e) => Self::error(e.request_id.unwrap_or(0), ErrorKind::Malformed, e.reason),
        }
    }
}

/// Serves one connection until end of stream. Returns the number of requests answered.
pub fn serve_stream<R: Read, W: Write>(scorer: &Scorer, mut r: R, mut w: W) -> Result<usize> {
    let mut served = 0;
    loop {
        match read_frame(&mut r)? {
            Frame::Eof => return Ok(served),
            Frame::Oversized(len) => {
                let reply = Scorer::error(0, ErrorKind::Malformed, format!("frame of {len} bytes exceeds the limit"));
                write_frame(&mut w, &encode(&reply))?;
                return Ok(served + 1);
            }
            Frame::Payload(p) => {
                write_frame(&mut w, &encode(&scorer.handle(&p)))?;
                served += 1;
            }
        }
    }
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(scorer: Arc<Scorer>, listener: TcpListener) -> Result<()> {
    for conn in listener.incoming() {
        let stream = conn?;
        let scorer = Arc::clone(&scorer);
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => s,
                Err(_) => return,
            };
            // A dropped client ends its own connection only.
            let _ = serve_stream(&scorer, io::BufReader::new(reader), stream);
        });
    }
    Ok(())
}

// --------------------------------------------------------------- client

/// Joins a read half and a write half into one stream.
#[derive(Debug)]
pub struct Duplex<R, W> {
    pub reader: R,
    pub writer: W,
}

impl<R: Read, W> Read for Duplex<R, W> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.reader.read(buf)
    }
}

impl<R, W: Write> Write for Duplex<R, W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.writer.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

#[derive(Debug)]
pub struct Client<S> {
    stream: S,
    child: Option<Child>,
}

impl<S: Read + Write> Client<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, child: None }
    }

    /// Sends one request and waits for its reply. Error replies become
    /// [`Error::Protocol`].
    pub fn query(&mut self, req: &ScoreRequest) -> Result<ScoreResponse> {
        write_frame(&mut self.stream, &encode(&Message::Request(req.clone())))?;
        let payload = match read_frame(&mut self.stream)? {
            Frame::Payload(p) => p,
            Frame::Eof => return Err(Error::Protocol("server closed the stream".into())),
            Frame::Oversized(n) => return Err(Error::Protocol(format!("reply of {n} bytes exceeds the limit"))),
        };
        match decode(&payload)? {
            Message::Response(r) if r.request_id == req.request_id => Ok(r),
            Message::Response(r) => Err(Error::Protocol(format!(
                "reply id {} does not match request id {}",
                r.request_id, req.request_id
            ))),
            Message::Error(e) => Err(Error::Protocol(format!("{:?}: {}", e.kind, e.reason))),
            Message::Request(_) => Err(Error::Protocol("server replied with a request".into())),
        }
    }
}

impl Client<TcpStream> {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        Ok(Self::new(TcpStream::connect(addr)?))
    }
}

impl Client<Duplex<ChildStdout, ChildStdin>> {
    /// Spawns a server speaking the protocol on its stdin and stdout.
    pub fn spawn(mut cmd: Command) -> Result<Self> {
        let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stream = Duplex {
            reader: child.stdout.take().expect("piped stdout"),
            writer: child.stdin.take().expect("piped stdin"),
        };
        Ok(Self {
            stream,
            child: Some(child),
        })
    }

    /// Closes the server's stdin and waits for it to exit.
    pub fn finish(self) -> Result<()> {
        let Self { stream, child } = self;
        drop(stream);
        if let Some(mut c) = child {
            let status = c.wait()?;
            if !status.success() {
                return Err(Error::Protocol(format!("server exited with {status}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{Logits, Vocab};
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_policy(seed: u64) -> Policy {
        let mut rng = rng_for(seed, &[]);
        let mut p = Policy::new(Vocab::new(12).unwrap(), 3).unwrap();
        for prompt in 0..3u32 {
            for a in 0..12u32 {
                let z = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
                p.set_logits(p.context(prompt, &[a]), Logits::new(z).unwrap()).unwrap();
            }
        }
        p
    }

    fn request(response: Vec<u32>, union: Vec<u32>) -> ScoreRequest {
        ScoreRequest {
            request_id: 7,
            prompt: 1,
            pi: vec![],
            response,
            token_ids_logprob: union,
        }
    }

    #[test]
    fn union_of_identical_sets_has_no_amplification() {
        let u = build_union(&[vec![3, 1, 2], vec![1, 2, 3], vec![2, 3, 1]]).unwrap();
        assert_eq!(u.tokens, vec![1, 2, 3]);
        assert_eq!(u.amplification, 1.0);
    }

    #[test]
    fn disjoint_sets_amplify_by_length() {
        let sets: Vec<Vec<u32>> = (0..4).map(|t| (0..3).map(|j| t * 3 + j).collect()).collect();
        let u = build_union(&sets).unwrap();
        assert_eq!(u.tokens.len(), 12);
        assert_eq!(u.amplification, 4.0);
    }

    #[test]
    fn overlapping_pairs() {
        let u = build_union(&[vec![1, 5], vec![5, 9], vec![1, 9]]).unwrap();
        assert_eq!(u.tokens, vec![1, 5, 9]);
        assert_eq!(u.amplification, 1.5);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(build_union(&[vec![1], vec![]]).is_err());
        assert!(build_union(&[]).is_err());
    }

    #[test]
    fn single_position_map_is_the_row() {
        let resp = ScoreResponse {
            request_id: 1,
            logprobs: vec![vec![-0.5, -1.5, -2.5]],
            sampled_logprobs: vec![-0.5],
        };
        let maps = extract_position_maps(&[2, 4, 6], &resp, &[vec![2, 4, 6]]).unwrap();
        assert_eq!(maps[0].values().copied().collect::<Vec<_>>(), vec![-0.5, -1.5, -2.5]);
    }

    #[test]
    fn overlapping_positions_keep_their_own_sets() {
        let resp = ScoreResponse {
            request_id: 1,
            logprobs: vec![vec![-1.0, -2.0, -3.0], vec![-4.0, -5.0, -6.0]],
            sampled_logprobs: vec![-1.0, -5.0],
        };
        let maps = extract_position_maps(&[1, 5, 9], &resp, &[vec![1, 5], vec![5, 9]]).unwrap();
        assert_eq!(maps[0], BTreeMap::from([(1, -1.0), (5, -2.0)]));
        assert_eq!(maps[1], BTreeMap::from([(5, -5.0), (9, -6.0)]));
    }

    #[test]
    fn missing_token_is_a_violation() {
        let resp = ScoreResponse {
            request_id: 1,
            logprobs: vec![vec![-1.0]],
            sampled_logprobs: vec![-1.0],
        };
        let err = extract_position_maps(&[1], &resp, &[vec![2]]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn empty_sequence_is_an_error_reply() {
        let s = Scorer::new(ScoringModel::Policy(random_policy(1)), DEFAULT_UNION_CAP);
        match s.score(&request(vec![], vec![1])) {
            Message::Error(e) => {
                assert_eq!(e.reason, "empty sequence");
                assert_eq!(e.request_id, 7);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oversized_union_is_refused() {
        let s = Scorer::new(ScoringModel::Policy(random_policy(1)), 2);
        match s.score(&request(vec![1, 2], vec![1, 2, 3])) {
            Message::Error(e) => assert_eq!(e.kind, ErrorKind::Refused),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn response_shape_and_sign() {
        let s = Scorer::new(ScoringModel::Policy(random_policy(2)), DEFAULT_UNION_CAP);
        let Message::Response(r) = s.score(&request(vec![3, 4, 5, 11], vec![0, 3, 4, 9, 11])) else {
            panic!("expected a response");
        };
        assert_eq!(r.logprobs.len(), 4);
        assert!(r.logprobs.iter().all(|row| row.len() == 5 && row.iter().all(|v| *v <= 0.0)));
        assert_eq!(r.sampled_logprobs.len(), 4);
    }

    #[test]
    fn per_position_field_is_rejected() {
        let mut p = encode(&Message::Request(request(vec![1], vec![1])));
        p.extend([TAG_PER_POSITION, 0, 0, 0, 4, 0, 0, 0, 1]);
        let e = decode(&p).unwrap_err();
        assert!(e.reason.contains("per-position"));
        assert_eq!(e.request_id, Some(7));
    }

    #[test]
    fn malformed_payload_gets_a_reply_with_the_id() {
        let s = Scorer::new(ScoringModel::Policy(random_policy(3)), DEFAULT_UNION_CAP);
        let mut p = encode(&Message::Request(request(vec![1], vec![2, 1])));
        match s.handle(&p) {
            Message::Error(e) => {
                assert_eq!(e.kind, ErrorKind::Malformed);
                assert_eq!(e.request_id, 7);
            }
            other => panic!("{other:?}"),
        }
        p.truncate(p.len() - 2);
        assert!(matches!(s.handle(&p), Message::Error(_)));
        assert!(matches!(s.handle(&[]), Message::Error(_)));
    }

    #[test]
    fn stream_round_trip_matches_direct_evaluation() {
        let policy = random_policy(4);
        let s = Scorer::new(ScoringModel::Policy(policy.clone()), DEFAULT_UNION_CAP);
        let response = vec![2, 7, 7, 1, 11];
        let (req, sets) = request_for(&policy, 9, 2, &[], &response, 4).unwrap();
        let mut wire = Vec::new();
        write_frame(&mut wire, &encode(&Message::Request(req.clone()))).unwrap();
        let mut out = Vec::new();
        assert_eq!(serve_stream(&s, wire.as_slice(), &mut out).unwrap(), 1);
        let mut client = Client::new(Duplex {
            reader: out.as_slice(),
            writer: io::sink(),
        });
        let resp = client.query(&req).unwrap();
        let maps = extract_position_maps(&req.token_ids_logprob, &resp, &sets).unwrap();
        for (t, map) in maps.iter().enumerate() {
            let d = policy.dist_at(&policy.context(2, &response[..t]));
            assert_eq!(map.len(), 4);
            for (tok, lp) in map {
                assert!((lp - d.ln_prob(*tok)).abs() <= 1e-12);
            }
            assert!((resp.sampled_logprobs[t] - d.ln_prob(response[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn oversized_frame_is_answered_then_closed() {
        let s = Scorer::new(ScoringModel::Policy(random_policy(5)), DEFAULT_UNION_CAP);
        let wire = ((MAX_FRAME + 1) as u32).to_be_bytes();
        let mut out = Vec::new();
        serve_stream(&s, &wire[..], &mut out).unwrap();
        let Frame::Payload(p) = read_frame(&mut out.as_slice()).unwrap() else {
            panic!("expected a reply");
        };
        assert!(matches!(decode(&p).unwrap(), Message::Error(ErrorResponse { kind: ErrorKind::Malformed, .. })));
    }

    proptest! {
        #[test]
        fn codec_round_trips(
            id in any::<u64>(),
            prompt in any::<u32>(),
            pi in prop::collection::vec(any::<u32>(), 0..3),
            response in prop::collection::vec(any::<u32>(), 0..6),
            union in prop::collection::btree_set(any::<u32>(), 0..8),
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..0.0, 3), 0..4),
        ) {
            let req = Message::Request(ScoreRequest {
                request_id: id, prompt, pi, response, token_ids_logprob: union.into_iter().collect(),
            });
            prop_assert_eq!(decode(&encode(&req)).unwrap(), req);
            let resp = Message::Response(ScoreResponse {
                request_id: id,
                sampled_logprobs: rows.iter().map(|r| r[0]).collect(),
                logprobs: rows,
            });
            prop_assert_eq!(decode(&encode(&resp)).unwrap(), resp);
        }

        #[test]
        fn union_never_exceeds_the_bound(
            sets in prop::collection::vec(prop::collection::btree_set(0u32..30, 1..5), 1..8),
        ) {
            let sets: Vec<Vec<u32>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
            let u = build_union(&sets).unwrap();
            prop_assert!(u.tokens.len() <= 30.min(sets.len() * u.k));
            prop_assert!(u.tokens.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
