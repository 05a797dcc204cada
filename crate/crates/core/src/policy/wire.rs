//! Framed policy protocol, version `v1`.
//!
//! Each frame is a 4-byte big-endian payload length followed by one JSON
//! object. Every object carries `"v": "v1"` and a `"kind"` discriminator.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{Candidate, GenerateParams, Policy, PolicyError, ScoreTarget, Scored, SnapshotKind, SnapshotOp, StepItem};
use crate::prompt::Prompt;

pub const PROTOCOL_VERSION: &str = "v1";
/// Frames above this size are rejected before allocation.
pub const MAX_FRAME_BYTES: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyRequest {
    Generate {
        prompt: Prompt,
        group_size: usize,
        temperature: f64,
        max_new_tokens: usize,
        seed: u64,
    },
    Score {
        prompt: Prompt,
        target: ScoreTarget,
        snapshot: SnapshotKind,
    },
    Step {
        items: Vec<StepItem>,
        learning_rate: f64,
    },
    Snapshot {
        #[serde(flatten)]
        op: SnapshotOp,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyResponse {
    Candidates { candidates: Vec<Candidate> },
    Scored { tokens: Vec<u32>, logprobs: Vec<f64> },
    Ack,
    Error { code: String, message: String },
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    v: String,
    #[serde(flatten)]
    body: T,
}

/// JSON payload of a message, without the length prefix.
pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(&Envelope { v: PROTOCOL_VERSION.to_string(), body: msg }).expect("protocol messages always serialize")
}

pub fn decode<T: for<'de> Deserialize<'de>>(payload: &[u8]) -> Result<T, PolicyError> {
    let env: Envelope<T> = serde_json::from_slice(payload).map_err(|e| PolicyError::Protocol(e.to_string()))?;
    if env.v != PROTOCOL_VERSION {
        return Err(PolicyError::Protocol(format!("unsupported protocol version {:?}", env.v)));
    }
    Ok(env.body)
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), PolicyError> {
    let len = u32::try_from(payload.len()).map_err(|_| PolicyError::Protocol("frame too large".into()))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, PolicyError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut header[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(PolicyError::Protocol("truncated frame header".into()))
            };
        }
        filled += n;
    }
    let len = u32::from_be_bytes(header);
    if len > MAX_FRAME_BYTES {
        return Err(PolicyError::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| PolicyError::Protocol(format!("truncated frame body: {e}")))?;
    Ok(Some(payload))
}

fn error_response(err: &PolicyError) -> PolicyResponse {
    let code = match err {
        PolicyError::Protocol(_) => "protocol",
        PolicyError::UnknownSnapshot(_) => "unknown_snapshot",
        PolicyError::StaleAlignment(_) => "stale_alignment",
        PolicyError::InvalidRequest(_) => "invalid_request",
        PolicyError::Io(_) => "io",
    };
    PolicyResponse::Error { code: code.to_string(), message: err.to_string() }
}

fn response_error(code: &str, message: String) -> PolicyError {
    match code {
        "unknown_snapshot" => PolicyError::UnknownSnapshot(message),
        "stale_alignment" => PolicyError::StaleAlignment(message),
        "invalid_request" => PolicyError::InvalidRequest(message),
        _ => PolicyError::Protocol(message),
    }
}

/// Answers one request with `policy`.
pub fn handle<P: Policy + ?Sized>(policy: &mut P, req: PolicyRequest) -> PolicyResponse {
    let result = match req {
        PolicyRequest::Generate { prompt, group_size, temperature, max_new_tokens, seed } => policy
            .generate(&prompt, &GenerateParams { group_size, temperature, max_new_tokens, seed })
            .map(|candidates| PolicyResponse::Candidates { candidates }),
        PolicyRequest::Score { prompt, target, snapshot } => policy
            .score(&prompt, &target, snapshot)
            .map(|s| PolicyResponse::Scored { tokens: s.tokens, logprobs: s.logprobs }),
        PolicyRequest::Step { items, learning_rate } => policy.apply_step(&items, learning_rate).map(|_| PolicyResponse::Ack),
        PolicyRequest::Snapshot { op } => policy.snapshot(&op).map(|_| PolicyResponse::Ack),
    };
    result.unwrap_or_else(|e| error_response(&e))
}

/// Serves `policy` until the peer closes the stream. Malformed frames get an
/// error response; the connection stays open.
pub fn serve<P: Policy + ?Sized, R: Read, W: Write>(policy: &mut P, reader: R, writer: W) -> Result<(), PolicyError> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    while let Some(payload) = read_frame(&mut reader)? {
        let resp = match decode::<PolicyRequest>(&payload) {
            Ok(req) => handle(policy, req),
            Err(e) => error_response(&e),
        };
        write_frame(&mut writer, &encode(&resp))?;
    }
    Ok(())
}

/// Client side of the protocol; one request in flight at a time.
pub struct RemotePolicy<R: Read, W: Write> {
    reader: BufReader<R>,
    writer: BufWriter<W>,
    child: Option<Child>,
}

impl<R: Read, W: Write> RemotePolicy<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader: BufReader::new(reader), writer: BufWriter::new(writer), child: None }
    }

    pub fn call(&mut self, req: &PolicyRequest) -> Result<PolicyResponse, PolicyError> {
        write_frame(&mut self.writer, &encode(req))?;
        let payload = read_frame(&mut self.reader)?.ok_or_else(|| PolicyError::Protocol("connection closed".into()))?;
        match decode::<PolicyResponse>(&payload)? {
            PolicyResponse::Error { code, message } => Err(response_error(&code, message)),
            other => Ok(other),
        }
    }

    fn expect_ack(&mut self, req: &PolicyRequest) -> Result<(), PolicyError> {
        match self.call(req)? {
            PolicyResponse::Ack => Ok(()),
            other => Err(PolicyError::Protocol(format!("expected ack, got {other:?}"))),
        }
    }
}

impl RemotePolicy<TcpStream, TcpStream> {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, PolicyError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self::new(stream, writer))
    }
}

impl RemotePolicy<ChildStdout, ChildStdin> {
    /// Launches an adapter process and talks to it over its stdio.
    pub fn spawn(mut command: Command) -> Result<Self, PolicyError> {
        let mut child = command.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| PolicyError::Protocol("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| PolicyError::Protocol("no stdout".into()))?;
        let mut remote = Self::new(stdout, stdin);
        remote.child = Some(child);
        Ok(remote)
    }
}

impl<R: Read, W: Write> Drop for RemotePolicy<R, W> {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl<R: Read + Send, W: Write + Send> Policy for RemotePolicy<R, W> {
    fn generate(&mut self, prompt: &Prompt, params: &GenerateParams) -> Result<Vec<Candidate>, PolicyError> {
        let req = PolicyRequest::Generate {
            prompt: prompt.clone(),
            group_size: params.group_size,
            temperature: params.temperature,
            max_new_tokens: params.max_new_tokens,
            seed: params.seed,
        };
        match self.call(&req)? {
            PolicyResponse::Candidates { candidates } => {
                if candidates.len() != params.group_size {
                    return Err(PolicyError::Protocol(format!(
                        "asked for {} candidates, got {}",
                        params.group_size,
                        candidates.len()
                    )));
                }
                if let Some(c) = candidates.iter().find(|c| c.tokens.len() != c.logprobs.len()) {
                    return Err(PolicyError::Protocol(format!(
                        "candidate has {} tokens but {} log-probs",
                        c.tokens.len(),
                        c.logprobs.len()
                    )));
                }
                Ok(candidates)
            }
            other => Err(PolicyError::Protocol(format!("expected candidates, got {other:?}"))),
        }
    }

    fn score(&mut self, prompt: &Prompt, target: &ScoreTarget, snapshot: SnapshotKind) -> Result<Scored, PolicyError> {
        let req = PolicyRequest::Score { prompt: prompt.clone(), target: target.clone(), snapshot };
        match self.call(&req)? {
            PolicyResponse::Scored { tokens, logprobs } if tokens.len() == logprobs.len() => Ok(Scored { tokens, logprobs }),
            other => Err(PolicyError::Protocol(format!("expected aligned scores, got {other:?}"))),
        }
    }

    fn apply_step(&mut self, items: &[StepItem], learning_rate: f64) -> Result<(), PolicyError> {
        self.expect_ack(&PolicyRequest::Step { items: items.to_vec(), learning_rate })
    }

    fn snapshot(&mut self, op: &SnapshotOp) -> Result<(), PolicyError> {
        self.expect_ack(&PolicyRequest::Snapshot { op: op.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ToyGrammar, ToyPolicy};
    use proptest::prelude::*;
    use std::io::Cursor;

    fn prompt() -> Prompt {
        Prompt { text: "q".into(), token_count: 1, record_ref: "a".into() }
    }

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        let payload = encode(&PolicyResponse::Ack);
        write_frame(&mut buf, &payload).unwrap();
        assert_eq!(&buf[..4], &(payload.len() as u32).to_be_bytes());
        assert_eq!(std::str::from_utf8(&buf[4..]).unwrap(), r#"{"v":"v1","kind":"ack"}"#);
        let mut cur = Cursor::new(buf);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), payload);
        assert!(read_frame(&mut cur).unwrap().is_none());
    }

    #[test]
    fn bad_version_and_truncation() {
        assert!(matches!(decode::<PolicyResponse>(br#"{"v":"v2","kind":"ack"}"#), Err(PolicyError::Protocol(_))));
        let mut cur = Cursor::new(vec![0, 0, 0, 9, b'{']);
        assert!(matches!(read_frame(&mut cur), Err(PolicyError::Protocol(_))));
        let mut cur = Cursor::new(vec![0, 0]);
        assert!(matches!(read_frame(&mut cur), Err(PolicyError::Protocol(_))));
    }

    #[test]
    fn remote_over_tcp_matches_local() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut toy = ToyPolicy::new(ToyGrammar::sql_task(), &["a".to_string()]).unwrap();
            serve(&mut toy, stream.try_clone().unwrap(), stream).unwrap();
        });
        let mut local = ToyPolicy::new(ToyGrammar::sql_task(), &["a".to_string()]).unwrap();
        let params = GenerateParams { group_size: 6, temperature: 0.9, max_new_tokens: 32, seed: 11 };
        {
            let mut remote = RemotePolicy::connect(addr).unwrap();
            let a = remote.generate(&prompt(), &params).unwrap();
            assert_eq!(a, local.generate(&prompt(), &params).unwrap());
            let item = StepItem { prompt_ref: "a".into(), tokens: a[0].tokens.clone(), coefficients: vec![0.5; a[0].tokens.len()] };
            remote.apply_step(&[item.clone()], 0.1).unwrap();
            local.apply_step(&[item], 0.1).unwrap();
            let target = ScoreTarget::Tokens(a[1].tokens.clone());
            assert_eq!(
                remote.score(&prompt(), &target, SnapshotKind::Current).unwrap(),
                local.score(&prompt(), &target, SnapshotKind::Current).unwrap()
            );
            let err = remote.snapshot(&SnapshotOp::Load { id: "nope".into(), into: SnapshotKind::Old }).unwrap_err();
            assert!(matches!(err, PolicyError::UnknownSnapshot(_)));
            remote.snapshot(&SnapshotOp::SwapOld).unwrap();
        }
        server.join().unwrap();
    }

    #[test]
    fn serve_answers_garbage_with_error() {
        let mut input = Vec::new();
        write_frame(&mut input, b"not json").unwrap();
        let mut out = Vec::new();
        let mut toy = ToyPolicy::new(ToyGrammar::four_way(), &["a".to_string()]).unwrap();
        serve(&mut toy, Cursor::new(input), &mut out).unwrap();
        let payload = read_frame(&mut Cursor::new(out)).unwrap().unwrap();
        assert!(matches!(decode::<PolicyResponse>(&payload).unwrap(), PolicyResponse::Error { code, .. } if code == "protocol"));
    }

    fn finite() -> impl Strategy<Value = f64> {
        -1e6f64..1e6
    }

    fn arb_prompt() -> impl Strategy<Value = Prompt> {
        (".{0,20}", 0usize..5000, "[a-z#0-9]{1,8}").prop_map(|(text, token_count, record_ref)| Prompt { text, token_count, record_ref })
    }

    fn arb_kind() -> impl Strategy<Value = SnapshotKind> {
        prop_oneof![Just(SnapshotKind::Current), Just(SnapshotKind::Old), Just(SnapshotKind::Reference)]
    }

    fn arb_request() -> impl Strategy<Value = PolicyRequest> {
        prop_oneof![
            (arb_prompt(), 1usize..16, 0.01f64..2.0, 1usize..4096, any::<u64>()).prop_map(|(prompt, group_size, temperature, max_new_tokens, seed)| {
                PolicyRequest::Generate { prompt, group_size, temperature, max_new_tokens, seed }
            }),
            (arb_prompt(), proptest::collection::vec(any::<u32>(), 0..8), ".{0,10}", any::<bool>(), arb_kind()).prop_map(|(prompt, toks, text, use_text, snapshot)| {
                let target = if use_text { ScoreTarget::Text(text) } else { ScoreTarget::Tokens(toks) };
                PolicyRequest::Score { prompt, target, snapshot }
            }),
            (proptest::collection::vec(("[a-z]{1,4}", proptest::collection::vec((any::<u32>(), finite()), 0..6)), 0..4), finite()).prop_map(|(items, learning_rate)| {
                let items = items
                    .into_iter()
                    .map(|(prompt_ref, pairs)| StepItem {
                        prompt_ref,
                        tokens: pairs.iter().map(|p| p.0).collect(),
                        coefficients: pairs.iter().map(|p| p.1).collect(),
                    })
                    .collect();
                PolicyRequest::Step { items, learning_rate }
            }),
            ("[a-z0-9-]{1,8}", arb_kind(), 0u8..3).prop_map(|(id, kind, which)| PolicyRequest::Snapshot {
                op: match which {
                    0 => SnapshotOp::Save { id, from: kind },
                    1 => SnapshotOp::Load { id, into: kind },
                    _ => SnapshotOp::SwapOld,
                }
            }),
        ]
    }

    fn arb_response() -> impl Strategy<Value = PolicyResponse> {
        prop_oneof![
            proptest::collection::vec(
                (proptest::collection::vec((any::<u32>(), -50.0f64..0.0), 0..6), ".{0,12}"),
                0..4
            )
            .prop_map(|cs| PolicyResponse::Candidates {
                candidates: cs
                    .into_iter()
                    .map(|(pairs, text)| Candidate {
                        tokens: pairs.iter().map(|p| p.0).collect(),
                        text,
                        logprobs: pairs.iter().map(|p| p.1).collect(),
                    })
                    .collect()
            }),
            proptest::collection::vec((any::<u32>(), -50.0f64..0.0), 0..6).prop_map(|pairs| PolicyResponse::Scored {
                tokens: pairs.iter().map(|p| p.0).collect(),
                logprobs: pairs.iter().map(|p| p.1).collect(),
            }),
            Just(PolicyResponse::Ack),
            ("[a-z_]{1,10}", ".{0,20}").prop_map(|(code, message)| PolicyResponse::Error { code, message }),
        ]
    }

    proptest! {
        #[test]
        fn request_round_trip(m in arb_request()) {
            let bytes = encode(&m);
            let back: PolicyRequest = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode(&back), bytes);
        }

        #[test]
        fn response_round_trip(m in arb_response()) {
            let bytes = encode(&m);
            let back: PolicyResponse = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
