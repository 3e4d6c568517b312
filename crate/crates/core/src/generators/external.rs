//! Out-of-process generators over a framed binary protocol.
//!
//! Request: `"LYRQ" | len u32 | batch u32 | seed u64 | 22 × f32`.
//! Response: `"LYRP" | len u32 | token_count u32 | tokens`.
//! All integers are little-endian and `len` counts the bytes after itself.
//! One response per request, in order. TCP and pipes use the same framing.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{gen_random, CoverageVector, GenError, Generator, GeneratorRequest};
use crate::dut::GROUPS;

pub const REQUEST_MAGIC: &[u8; 4] = b"LYRQ";
pub const RESPONSE_MAGIC: &[u8; 4] = b"LYRP";
pub const REQUEST_BODY_LEN: u32 = 4 + 8 + 4 * GROUPS as u32;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Upper bound on a response body; guards against garbage lengths.
pub const MAX_RESPONSE_LEN: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("frame length {got}, expected {expected}")]
    BadLength { expected: u32, got: u32 },
    #[error("token count {count} disagrees with frame length {len}")]
    TokenCount { count: u32, len: u32 },
    #[error("batch must be at least 1")]
    ZeroBatch,
    #[error("connection closed mid-frame")]
    Closed,
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for ProtocolError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::UnexpectedEof => ProtocolError::Closed,
            _ => ProtocolError::Io(e),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("cannot reach endpoint: {0}")]
    Connect(io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireRequest {
    pub batch: u32,
    pub seed: u64,
    pub coverage: [f32; GROUPS],
}

impl From<&GeneratorRequest> for WireRequest {
    fn from(r: &GeneratorRequest) -> Self {
        WireRequest {
            batch: r.batch,
            seed: r.seed,
            coverage: r.coverage.to_f32(),
        }
    }
}

impl WireRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + REQUEST_BODY_LEN as usize);
        out.extend_from_slice(REQUEST_MAGIC);
        out.write_u32::<LittleEndian>(REQUEST_BODY_LEN).unwrap();
        out.write_u32::<LittleEndian>(self.batch).unwrap();
        out.write_u64::<LittleEndian>(self.seed).unwrap();
        for v in self.coverage {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ProtocolError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != REQUEST_MAGIC {
            return Err(ProtocolError::BadMagic(magic));
        }
        let len = r.read_u32::<LittleEndian>()?;
        if len != REQUEST_BODY_LEN {
            return Err(ProtocolError::BadLength {
                expected: REQUEST_BODY_LEN,
                got: len,
            });
        }
        let batch = r.read_u32::<LittleEndian>()?;
        if batch == 0 {
            return Err(ProtocolError::ZeroBatch);
        }
        let seed = r.read_u64::<LittleEndian>()?;
        let mut coverage = [0f32; GROUPS];
        for v in coverage.iter_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
        Ok(WireRequest { batch, seed, coverage })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub tokens: Vec<u8>,
}

impl WireResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.tokens.len());
        out.extend_from_slice(RESPONSE_MAGIC);
        out.write_u32::<LittleEndian>(4 + self.tokens.len() as u32).unwrap();
        out.write_u32::<LittleEndian>(self.tokens.len() as u32).unwrap();
        out.extend_from_slice(&self.tokens);
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ProtocolError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RESPONSE_MAGIC {
            return Err(ProtocolError::BadMagic(magic));
        }
        let len = r.read_u32::<LittleEndian>()?;
        if !(4..=MAX_RESPONSE_LEN).contains(&len) {
            return Err(ProtocolError::BadLength { expected: 4, got: len });
        }
        let count = r.read_u32::<LittleEndian>()?;
        if count != len - 4 {
            return Err(ProtocolError::TokenCount { count, len });
        }
        let mut tokens = vec![0u8; count as usize];
        r.read_exact(&mut tokens)?;
        Ok(WireResponse { tokens })
    }
}

/// Answers requests from `r` on `w` until the peer closes cleanly.
pub fn serve<R: Read, W: Write>(
    r: R,
    w: W,
    mut handler: impl FnMut(&WireRequest) -> Vec<u8>,
) -> Result<u64, ProtocolError> {
    let mut r = BufReader::new(r);
    let mut w = BufWriter::new(w);
    let mut served = 0;
    loop {
        let req = match WireRequest::read_from(&mut r) {
            Ok(req) => req,
            Err(ProtocolError::Closed) => return Ok(served),
            Err(e) => return Err(e),
        };
        w.write_all(&WireResponse { tokens: handler(&req) }.encode())?;
        w.flush()?;
        served += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    /// Child process speaking the protocol on stdin/stdout.
    Process { program: String, args: Vec<String> },
}

impl std::str::FromStr for Endpoint {
    type Err = String;
    /// `tcp://host:port` or `exec:program arg...`.
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or("empty exec endpoint")?;
            Ok(Endpoint::Process {
                program,
                args: parts.collect(),
            })
        } else {
            Err(format!("endpoint {s:?} must start with tcp:// or exec:"))
        }
    }
}

enum Transport {
    Tcp(TcpStream),
    Pipe {
        child: Child,
        stdin: ChildStdin,
        responses: Receiver<Result<WireResponse, ProtocolError>>,
    },
}

impl Drop for Transport {
    fn drop(&mut self) {
        if let Transport::Pipe { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn pipe_reader(stdout: ChildStdout) -> Receiver<Result<WireResponse, ProtocolError>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut r = BufReader::new(stdout);
        loop {
            let frame = WireResponse::read_from(&mut r);
            let stop = frame.is_err();
            if tx.send(frame).is_err() || stop {
                break;
            }
        }
    });
    rx
}

pub struct ExternalGenerator {
    transport: Transport,
    timeout: Duration,
    /// On any protocol failure, log it and answer with `gen_random` instead.
    pub fallback_to_random: bool,
    pub fallbacks: u64,
}

impl ExternalGenerator {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self, ExternalError> {
        let transport = match endpoint {
            Endpoint::Tcp(addr) => {
                let s = TcpStream::connect(addr).map_err(ExternalError::Connect)?;
                s.set_read_timeout(Some(timeout)).map_err(ExternalError::Connect)?;
                s.set_write_timeout(Some(timeout)).map_err(ExternalError::Connect)?;
                s.set_nodelay(true).map_err(ExternalError::Connect)?;
                Transport::Tcp(s)
            }
            Endpoint::Process { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(ExternalError::Connect)?;
                let stdin = child.stdin.take().expect("stdin piped");
                let responses = pipe_reader(child.stdout.take().expect("stdout piped"));
                Transport::Pipe { child, stdin, responses }
            }
        };
        Ok(ExternalGenerator {
            transport,
            timeout,
            fallback_to_random: false,
            fallbacks: 0,
        })
    }

    pub fn request(&mut self, req: &GeneratorRequest) -> Result<Vec<u8>, ExternalError> {
        let frame = WireRequest::from(req).encode();
        let timeout = self.timeout;
        let timed_out = |e: &io::Error| matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut);
        match &mut self.transport {
            Transport::Tcp(s) => {
                s.write_all(&frame).map_err(|e| {
                    if timed_out(&e) {
                        ExternalError::Timeout(timeout)
                    } else {
                        ExternalError::Protocol(e.into())
                    }
                })?;
                match WireResponse::read_from(s) {
                    Ok(resp) => Ok(resp.tokens),
                    Err(ProtocolError::Io(e)) if timed_out(&e) => Err(ExternalError::Timeout(timeout)),
                    Err(e) => Err(e.into()),
                }
            }
            Transport::Pipe { stdin, responses, .. } => {
                stdin.write_all(&frame).and_then(|_| stdin.flush()).map_err(ProtocolError::from)?;
                match responses.recv_timeout(timeout) {
                    Ok(resp) => Ok(resp?.tokens),
                    Err(RecvTimeoutError::Timeout) => Err(ExternalError::Timeout(timeout)),
                    Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::Closed.into()),
                }
            }
        }
    }
}

pub fn gen_external(req: &GeneratorRequest, gen: &mut ExternalGenerator) -> Result<Vec<u8>, ExternalError> {
    match gen.request(req) {
        Ok(t) => Ok(t),
        Err(e) if gen.fallback_to_random => {
            log::warn!("external generator failed ({e}); using random stimulus");
            gen.fallbacks += 1;
            Ok(gen_random(req))
        }
        Err(e) => Err(e),
    }
}

impl Generator for ExternalGenerator {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<Vec<u8>, GenError> {
        Ok(gen_external(req, self)?)
    }
}

/// Coverage vector carried by a decoded request.
pub fn request_coverage(req: &WireRequest) -> CoverageVector {
    CoverageVector::from_f32(req.coverage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Instruction;
    use crate::legality::repair_stream;
    use crate::token::tokenize;
    use std::net::TcpListener;

    fn nops(n: u32) -> Vec<u8> {
        (0..n).flat_map(|_| tokenize(&Instruction::nop()).0).collect()
    }

    fn echo_server(handler: fn(&WireRequest) -> Vec<u8>) -> (String, thread::JoinHandle<()>) {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        let h = thread::spawn(move || {
            let (s, _) = l.accept().unwrap();
            let _ = serve(s.try_clone().unwrap(), s, handler);
        });
        (addr, h)
    }

    fn req(batch: u32) -> GeneratorRequest {
        GeneratorRequest::new(CoverageVector::default(), batch, 42)
    }

    #[test]
    fn frame_layout() {
        let r = WireRequest {
            batch: 1,
            seed: 2,
            coverage: [0.5; GROUPS],
        };
        let f = r.encode();
        assert_eq!(f.len(), 8 + 100);
        assert_eq!(&f[..8], b"LYRQ\x64\0\0\0");
        assert_eq!(&f[8..12], &[1, 0, 0, 0]);
        assert_eq!(&f[20..24], &0.5f32.to_le_bytes());
        assert_eq!(WireRequest::read_from(&mut &f[..]).unwrap(), r);
        let p = WireResponse { tokens: vec![7, 8] }.encode();
        assert_eq!(p, b"LYRP\x06\0\0\0\x02\0\0\0\x07\x08");
    }

    #[test]
    fn malformed_frames() {
        assert!(matches!(
            WireResponse::read_from(&mut &b"LYRX\x04\0\0\0\0\0\0\0"[..]),
            Err(ProtocolError::BadMagic(_))
        ));
        assert!(matches!(
            WireResponse::read_from(&mut &b"LYRP\x06\0\0\0\x01\0\0\0\x07\x08"[..]),
            Err(ProtocolError::TokenCount { .. })
        ));
        assert!(matches!(
            WireResponse::read_from(&mut &b"LYRP\x06\0\0\0\x02\0\0\0\x07"[..]),
            Err(ProtocolError::Closed)
        ));
        let mut bad = WireRequest {
            batch: 0,
            seed: 0,
            coverage: [0.0; GROUPS],
        }
        .encode();
        assert!(matches!(WireRequest::read_from(&mut &bad[..]), Err(ProtocolError::ZeroBatch)));
        bad[4] = 99;
        assert!(matches!(WireRequest::read_from(&mut &bad[..]), Err(ProtocolError::BadLength { .. })));
    }

    #[test]
    fn nop_echo_over_tcp() {
        let (addr, h) = echo_server(|r| nops(r.batch));
        let mut g = ExternalGenerator::connect(&Endpoint::Tcp(addr), DEFAULT_TIMEOUT).unwrap();
        let (insts, _) = repair_stream(&g.generate(&req(8)).unwrap());
        assert_eq!(insts, vec![Instruction::nop(); 8]);
        let (insts, _) = repair_stream(&g.generate(&req(256)).unwrap());
        assert_eq!(insts.len(), 256);
        drop(g);
        h.join().unwrap();
    }

    #[test]
    fn malformed_response_is_protocol_error() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        let h = thread::spawn(move || {
            let (mut s, _) = l.accept().unwrap();
            WireRequest::read_from(&mut s).unwrap();
            s.write_all(b"JUNKJUNKJUNK").unwrap();
        });
        let mut g = ExternalGenerator::connect(&Endpoint::Tcp(addr), DEFAULT_TIMEOUT).unwrap();
        assert!(matches!(
            g.request(&req(1)),
            Err(ExternalError::Protocol(ProtocolError::BadMagic(_)))
        ));
        h.join().unwrap();
    }

    #[test]
    fn timeout_and_fallback() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        let h = thread::spawn(move || {
            let (s, _) = l.accept().unwrap();
            thread::sleep(Duration::from_millis(600));
            drop(s);
        });
        let mut g = ExternalGenerator::connect(&Endpoint::Tcp(addr), Duration::from_millis(100)).unwrap();
        assert!(matches!(g.request(&req(1)), Err(ExternalError::Timeout(_))));
        g.fallback_to_random = true;
        assert_eq!(gen_external(&req(3), &mut g).unwrap(), gen_random(&req(3)));
        assert_eq!(g.fallbacks, 1);
        h.join().unwrap();
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!("tcp://127.0.0.1:9".parse(), Ok(Endpoint::Tcp("127.0.0.1:9".into())));
        assert_eq!(
            "exec:python3 -m srv".parse(),
            Ok(Endpoint::Process {
                program: "python3".into(),
                args: vec!["-m".into(), "srv".into()]
            })
        );
        assert!("udp://x".parse::<Endpoint>().is_err());
    }
}
