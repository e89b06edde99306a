//! Newline-delimited JSON protocol for scoring triples with an external
//! model.
//!
//! Each request is one line:
//!
//! ```text
//! {"request_id":"req-0","mode":"TRIPLE","items":[{"head_text":"...","relation_text":"...","tail_text":"...",
//!   "augmentations":{"head":[],"relation":[],"tail":[]}}]}
//! ```
//!
//! and is answered by exactly one line, in order:
//!
//! ```text
//! {"request_id":"req-0","scores":[[0.8,0.2]]}
//! ```
//!
//! `TRIPLE` items get a `(p0, p1)` pair with `p0` the plausible class; `PAIR`
//! items omit `relation_text` and get a distribution over relations indexed
//! by relation id. Raw element texts are sent so the remote model can apply
//! its own tokenizer. A line that cannot be handled is answered with
//! `{"request_id":...,"error":"...","request":"<line>"}` and the connection
//! stays open.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, Triple};
use crate::scorers::{ClassifierState, Scorer};
use crate::textgen::{self, ENTITY_SEGMENT, RELATION_SEGMENT};

/// Allowed deviation of a returned distribution's sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Triple,
    Pair,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentations {
    #[serde(default)]
    pub head: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Vec<String>>,
    #[serde(default)]
    pub tail: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreItem {
    pub head_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_text: Option<String>,
    pub tail_text: String,
    #[serde(default)]
    pub augmentations: Augmentations,
}

impl ScoreItem {
    pub fn for_triple(kg: &KnowledgeGraph, t: &Triple) -> ScoreItem {
        ScoreItem {
            head_text: kg.entity_label(t.head).to_owned(),
            relation_text: Some(kg.relation_label(t.relation).to_owned()),
            tail_text: kg.entity_label(t.tail).to_owned(),
            augmentations: Augmentations {
                head: kg.entity_types(t.head).to_vec(),
                relation: Some(kg.relation_synonyms(t.relation).to_vec()),
                tail: kg.entity_types(t.tail).to_vec(),
            },
        }
    }

    pub fn for_pair(kg: &KnowledgeGraph, head: EntityId, tail: EntityId) -> ScoreItem {
        ScoreItem {
            head_text: kg.entity_label(head).to_owned(),
            relation_text: None,
            tail_text: kg.entity_label(tail).to_owned(),
            augmentations: Augmentations {
                head: kg.entity_types(head).to_vec(),
                relation: None,
                tail: kg.entity_types(tail).to_vec(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub request_id: String,
    pub mode: Mode,
    pub items: Vec<ScoreItem>,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Bridge("request has no items".into()));
        }
        for (i, item) in self.items.iter().enumerate() {
            let relation_ok = match (self.mode, &item.relation_text) {
                (Mode::Triple, Some(r)) => !r.trim().is_empty(),
                (Mode::Triple, None) => false,
                (Mode::Pair, r) => r.is_none(),
            };
            if item.head_text.trim().is_empty() || item.tail_text.trim().is_empty() || !relation_ok
            {
                return Err(Error::Bridge(format!(
                    "item {i}: missing or unexpected element text"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub request_id: String,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreResponse {
    /// Checks the id echo, item count, per-item width (2 for `TRIPLE`,
    /// `num_relations` for `PAIR` when given) and normalization.
    pub fn validate(&self, request: &ScoreRequest, num_relations: Option<usize>) -> Result<()> {
        if self.request_id != request.request_id {
            return Err(Error::Bridge(format!(
                "response id {:?} does not match request id {:?}",
                self.request_id, request.request_id
            )));
        }
        if self.scores.len() != request.items.len() {
            return Err(Error::Bridge(format!(
                "{} scores for {} items",
                self.scores.len(),
                request.items.len()
            )));
        }
        let width = match request.mode {
            Mode::Triple => Some(2),
            Mode::Pair => num_relations,
        };
        for (i, s) in self.scores.iter().enumerate() {
            if width.is_some_and(|w| w != s.len()) || s.is_empty() {
                return Err(Error::Bridge(format!(
                    "item {i}: {} scores, expected {width:?}",
                    s.len()
                )));
            }
            if s.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Bridge(format!("item {i}: invalid probability")));
            }
            let sum: f64 = s.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::Bridge(format!("item {i}: scores sum to {sum}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub request_id: Option<String>,
    pub error: String,
    pub request: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Error(ErrorResponse),
    Scores(ScoreResponse),
}

/// Model answering protocol requests from raw element texts.
pub trait TextScorer: Sync {
    fn score_items(&self, mode: Mode, items: &[ScoreItem]) -> Result<Vec<Vec<f64>>>;
}

impl TextScorer for ClassifierState {
    fn score_items(&self, mode: Mode, items: &[ScoreItem]) -> Result<Vec<Vec<f64>>> {
        items
            .par_iter()
            .map(|item| {
                let aug = &item.augmentations;
                let mut elements = vec![(
                    textgen::element_sentence(&item.head_text, &aug.head)?,
                    ENTITY_SEGMENT,
                )];
                if let (Mode::Triple, Some(r)) = (mode, &item.relation_text) {
                    let synonyms = aug.relation.as_deref().unwrap_or(&[]);
                    elements.push((textgen::element_sentence(r, synonyms)?, RELATION_SEGMENT));
                }
                elements.push((
                    textgen::element_sentence(&item.tail_text, &aug.tail)?,
                    ENTITY_SEGMENT,
                ));
                let seq = textgen::assemble(elements, self.max_len)?;
                Ok(match mode {
                    Mode::Triple => {
                        let s = self.classify_triple(&seq);
                        vec![s.p0, s.p1]
                    }
                    Mode::Pair => self.classify_relation(&seq).probs,
                })
            })
            .collect()
    }
}

/// Answers a single request line. Never fails: problems become an
/// [`ErrorResponse`].
pub fn handle_line(model: &dyn TextScorer, line: &str) -> String {
    let result = serde_json::from_str::<ScoreRequest>(line)
        .map_err(Error::from)
        .and_then(|req| {
            req.validate()?;
            let scores = model.score_items(req.mode, &req.items)?;
            Ok(ScoreResponse {
                request_id: req.request_id,
                scores,
            })
        });
    let reply = match result {
        Ok(resp) => Reply::Scores(resp),
        Err(e) => Reply::Error(ErrorResponse {
            request_id: serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("request_id")?.as_str().map(str::to_owned)),
            error: e.to_string(),
            request: line.to_owned(),
        }),
    };
    serde_json::to_string(&reply).expect("replies serialize")
}

/// Serves requests from `reader` until end of input, one response line per
/// non-empty request line.
pub fn serve_stream<R: BufRead, W: Write>(
    model: &dyn TextScorer,
    reader: R,
    mut writer: W,
) -> Result<()> {
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Bridge(e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        writeln!(writer, "{}", handle_line(model, line))
            .map_err(|e| Error::Bridge(e.to_string()))?;
        writer.flush().map_err(|e| Error::Bridge(e.to_string()))?;
    }
    Ok(())
}

/// Serves connections one at a time. Returns after `max_connections`
/// connections when given, otherwise runs until accepting fails.
pub fn serve_tcp(
    model: &dyn TextScorer,
    listener: &TcpListener,
    max_connections: Option<usize>,
) -> Result<()> {
    for (done, stream) in listener.incoming().enumerate() {
        let stream = stream.map_err(|e| Error::Bridge(e.to_string()))?;
        let reader = BufReader::new(
            stream
                .try_clone()
                .map_err(|e| Error::Bridge(e.to_string()))?,
        );
        serve_stream(model, reader, stream)?;
        if max_connections.is_some_and(|m| done + 1 >= m) {
            break;
        }
    }
    Ok(())
}

/// Where an external scorer lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`, optionally written `tcp://host:port`.
    Tcp(String),
    /// `exec:<program> [args...]`: a subprocess speaking the protocol on
    /// its standard streams.
    Exec(Vec<String>),
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Endpoint> {
        if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
            if argv.is_empty() {
                return Err(Error::InvalidConfig(
                    "exec endpoint without a command".into(),
                ));
            }
            return Ok(Endpoint::Exec(argv));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr
            .rsplit_once(':')
            .is_none_or(|(h, p)| h.is_empty() || p.parse::<u16>().is_err())
        {
            return Err(Error::InvalidConfig(format!(
                "bad endpoint {s:?}; expected host:port or exec:<command>"
            )));
        }
        Ok(Endpoint::Tcp(addr.to_owned()))
    }
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            // Closing stdin lets a well-behaved server exit on its own.
            self.writer = Box::new(std::io::sink());
            if child.wait().is_err() {
                let _ = child.kill();
            }
        }
    }
}

/// Client side of the protocol, usable anywhere a native scorer is.
/// Requests are serialized over one connection; ids are `req-0`, `req-1`,
/// ... in send order.
pub struct BridgeScorer {
    conn: Mutex<Connection>,
    next_id: AtomicU64,
    batch_size: usize,
}

impl BridgeScorer {
    pub fn connect(endpoint: &Endpoint) -> Result<BridgeScorer> {
        let io = |e: std::io::Error| Error::Bridge(e.to_string());
        let conn = match endpoint {
            Endpoint::Tcp(addr) => {
                let addr = addr
                    .to_socket_addrs()
                    .map_err(io)?
                    .next()
                    .ok_or_else(|| Error::Bridge(format!("cannot resolve {addr}")))?;
                let stream = TcpStream::connect(addr).map_err(io)?;
                Connection {
                    reader: Box::new(BufReader::new(stream.try_clone().map_err(io)?)),
                    writer: Box::new(stream),
                    child: None,
                }
            }
            Endpoint::Exec(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(io)?;
                Connection {
                    reader: Box::new(BufReader::new(child.stdout.take().expect("piped stdout"))),
                    writer: Box::new(child.stdin.take().expect("piped stdin")),
                    child: Some(child),
                }
            }
        };
        Ok(Self::from_connection(conn))
    }

    /// Client over arbitrary streams.
    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> BridgeScorer {
        Self::from_connection(Connection {
            reader: Box::new(reader),
            writer: Box::new(writer),
            child: None,
        })
    }

    fn from_connection(conn: Connection) -> BridgeScorer {
        BridgeScorer {
            conn: Mutex::new(conn),
            next_id: AtomicU64::new(0),
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Sends one request and returns its validated scores.
    pub fn call(
        &self,
        mode: Mode,
        items: Vec<ScoreItem>,
        num_relations: Option<usize>,
    ) -> Result<Vec<Vec<f64>>> {
        let io = |e: std::io::Error| Error::Bridge(e.to_string());
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Bridge("connection poisoned".into()))?;
        let request = ScoreRequest {
            request_id: format!("req-{}", self.next_id.fetch_add(1, Ordering::SeqCst)),
            mode,
            items,
        };
        request.validate()?;
        writeln!(conn.writer, "{}", serde_json::to_string(&request)?).map_err(io)?;
        conn.writer.flush().map_err(io)?;
        let mut line = String::new();
        if conn.reader.read_line(&mut line).map_err(io)? == 0 {
            return Err(Error::Bridge(
                "connection closed before a response arrived".into(),
            ));
        }
        match serde_json::from_str::<Reply>(line.trim_end())? {
            Reply::Error(e) => Err(Error::Bridge(format!("remote error: {}", e.error))),
            Reply::Scores(resp) => {
                resp.validate(&request, num_relations)?;
                Ok(resp.scores)
            }
        }
    }
}

impl Scorer for BridgeScorer {
    /// Remote `p0` of each triple.
    fn score_triples(&self, kg: &KnowledgeGraph, triples: &[Triple]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(triples.len());
        for chunk in triples.chunks(self.batch_size) {
            let items = chunk.iter().map(|t| ScoreItem::for_triple(kg, t)).collect();
            out.extend(
                self.call(Mode::Triple, items, None)?
                    .into_iter()
                    .map(|s| s[0]),
            );
        }
        Ok(out)
    }

    fn relation_scores(
        &self,
        kg: &KnowledgeGraph,
        head: EntityId,
        tail: EntityId,
    ) -> Result<Vec<f64>> {
        let items = vec![ScoreItem::for_pair(kg, head, tail)];
        let mut scores = self.call(Mode::Pair, items, Some(kg.num_relations()))?;
        Ok(scores.pop().expect("one item"))
    }

    fn decision_threshold(&self) -> Option<f64> {
        Some(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorers::classifier::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(num_relations: usize) -> ClassifierState {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut vocab = Vocabulary::default();
        for w in ["a", "b", "likes"] {
            vocab.insert(w);
        }
        ClassifierState::init(vocab, num_relations, 8, 32, 0.0, &mut rng)
    }

    fn item(h: &str, r: Option<&str>, t: &str) -> ScoreItem {
        ScoreItem {
            head_text: h.into(),
            relation_text: r.map(Into::into),
            tail_text: t.into(),
            augmentations: Augmentations::default(),
        }
    }

    #[test]
    fn zero_head_gives_even_pairs() {
        let line = serde_json::to_string(&ScoreRequest {
            request_id: "x".into(),
            mode: Mode::Triple,
            items: vec![item("a", Some("likes"), "b"), item("b", Some("likes"), "a")],
        })
        .unwrap();
        let reply: Reply = serde_json::from_str(&handle_line(&toy(3), &line)).unwrap();
        let Reply::Scores(resp) = reply else {
            panic!("{reply:?}")
        };
        assert_eq!(resp.request_id, "x");
        assert_eq!(resp.scores, vec![vec![0.5, 0.5]; 2]);
    }

    #[test]
    fn untrained_pair_is_uniform() {
        let line =
            r#"{"request_id":"p","mode":"PAIR","items":[{"head_text":"a","tail_text":"b"}]}"#;
        let Reply::Scores(resp) = serde_json::from_str(&handle_line(&toy(3), line)).unwrap() else {
            panic!()
        };
        assert_eq!(resp.scores.len(), 1);
        assert!(resp.scores[0].iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn malformed_line_echoes_request() {
        let reply: Reply = serde_json::from_str(&handle_line(&toy(3), "{not json")).unwrap();
        let Reply::Error(e) = reply else { panic!() };
        assert_eq!(e.request, "{not json");
        let line = r#"{"request_id":"7","mode":"TRIPLE","items":[]}"#;
        let Reply::Error(e) = serde_json::from_str(&handle_line(&toy(3), line)).unwrap() else {
            panic!()
        };
        assert_eq!(e.request_id.as_deref(), Some("7"));
    }

    #[test]
    fn serve_stream_keeps_going_after_errors() {
        let input = "garbage\n\n{\"request_id\":\"a\",\"mode\":\"PAIR\",\"items\":[{\"head_text\":\"a\",\"tail_text\":\"b\"}]}\n";
        let mut out = Vec::new();
        serve_stream(&toy(2), input.as_bytes(), &mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"error\""));
        assert!(lines[1].starts_with("{\"request_id\":\"a\",\"scores\""));
    }

    #[test]
    fn response_validation() {
        let req = ScoreRequest {
            request_id: "r".into(),
            mode: Mode::Triple,
            items: vec![item("a", Some("likes"), "b")],
        };
        let ok = ScoreResponse {
            request_id: "r".into(),
            scores: vec![vec![0.25, 0.75]],
        };
        ok.validate(&req, None).unwrap();
        let wrong_id = ScoreResponse {
            request_id: "s".into(),
            ..ok.clone()
        };
        assert!(wrong_id.validate(&req, None).is_err());
        let unnormalized = ScoreResponse {
            scores: vec![vec![0.3, 0.6]],
            ..ok.clone()
        };
        assert!(unnormalized.validate(&req, None).is_err());
        let short = ScoreResponse {
            scores: vec![],
            ..ok
        };
        assert!(short.validate(&req, None).is_err());
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            "127.0.0.1:9000".parse::<Endpoint>().unwrap(),
            Endpoint::Tcp("127.0.0.1:9000".into())
        );
        assert_eq!(
            "tcp://localhost:1".parse::<Endpoint>().unwrap(),
            Endpoint::Tcp("localhost:1".into())
        );
        assert_eq!(
            "exec:python3 serve.py".parse::<Endpoint>().unwrap(),
            Endpoint::Exec(vec!["python3".into(), "serve.py".into()])
        );
        assert!("nonsense".parse::<Endpoint>().is_err());
        assert!("exec:".parse::<Endpoint>().is_err());
    }
}
