//! Client for external trainer processes.
//!
//! Each connection carries one request at a time. A pool of `workers`
//! connections (one per trainer process or TCP connection) gives the engine
//! its concurrency. A connection that times out, breaks, or answers for the
//! wrong architecture is dropped and re-established on next use.

use std::io::{self, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use super::protocol::{
    read_message, write_message, ClientMessage, KdSpec, ServerMessage, PROTO_VERSION, SPACE_MISMATCH,
};
use super::{EvalError, EvalRequest, EvalResult, Evaluator};
use crate::distill::PredictionCache;
use crate::search_space::SearchSpaceConfig;

type Connector = Box<dyn Fn() -> io::Result<Connection> + Send + Sync>;

struct Connection {
    writer: Option<Box<dyn Write + Send>>,
    incoming: Receiver<io::Result<ServerMessage>>,
    child: Option<Child>,
    stream: Option<TcpStream>,
}

impl Connection {
    fn new<R: Read + Send + 'static>(reader: R, writer: Box<dyn Write + Send>) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                match read_message::<_, ServerMessage>(&mut reader) {
                    Ok(Some(msg)) => {
                        if tx.send(Ok(msg)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => {
                        let _ = tx.send(Err(io::Error::new(io::ErrorKind::UnexpectedEof, "trainer closed the stream")));
                        break;
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Self { writer: Some(writer), incoming: rx, child: None, stream: None }
    }

    fn send(&mut self, msg: &ClientMessage) -> Result<(), EvalError> {
        let w = self.writer.as_mut().ok_or_else(|| EvalError::Transport("connection closed".into()))?;
        write_message(w, msg).map_err(|e| EvalError::Transport(e.to_string()))
    }

    fn recv(&self, timeout: Duration) -> Result<ServerMessage, EvalError> {
        match self.incoming.recv_timeout(timeout) {
            Ok(Ok(msg)) => Ok(msg),
            Ok(Err(e)) if e.kind() == io::ErrorKind::InvalidData => Err(EvalError::Protocol(e.to_string())),
            Ok(Err(e)) => Err(EvalError::Transport(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(EvalError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(EvalError::Transport("reader stopped".into())),
        }
    }

    fn handshake(&mut self, space_hash: &str, timeout: Duration) -> Result<(), EvalError> {
        self.send(&ClientMessage::Hello { proto: PROTO_VERSION, space_hash: space_hash.to_owned() })?;
        match self.recv(timeout)? {
            ServerMessage::HelloOk { proto, space_hash: theirs } => {
                if proto != PROTO_VERSION {
                    Err(EvalError::Handshake(format!("protocol version {proto}, expected {PROTO_VERSION}")))
                } else if theirs != space_hash {
                    Err(EvalError::Handshake(format!("{SPACE_MISMATCH}: trainer has {theirs}, engine has {space_hash}")))
                } else {
                    Ok(())
                }
            }
            ServerMessage::Error { code, message, .. } => Err(EvalError::Handshake(format!("{code}: {message}"))),
            other => Err(EvalError::Handshake(format!("unexpected reply {other:?}"))),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // Closing the writer ends the trainer's input; then make sure it is gone.
        self.writer.take();
        if let Some(s) = &self.stream {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

pub struct ExternalEvaluator {
    space_hash: String,
    timeout: Duration,
    connector: Option<Connector>,
    /// Idle slots; `None` marks a slot whose connection must be re-opened.
    idle: Mutex<Vec<Option<Connection>>>,
    available: Condvar,
}

impl std::fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEvaluator")
            .field("space_hash", &self.space_hash)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

fn spawn_child(command: &[String]) -> io::Result<Connection> {
    let (program, args) =
        command.split_first().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty trainer command"))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let mut conn = Connection::new(stdout, Box::new(stdin));
    conn.child = Some(child);
    Ok(conn)
}

fn open_tcp(address: &str) -> io::Result<Connection> {
    let stream = TcpStream::connect(address)?;
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    let writer = stream.try_clone()?;
    let mut conn = Connection::new(reader, Box::new(writer));
    conn.stream = Some(stream);
    Ok(conn)
}

impl ExternalEvaluator {
    fn with_connector(
        connector: Connector,
        space: &SearchSpaceConfig,
        timeout: Duration,
        workers: usize,
    ) -> Result<Self, EvalError> {
        let space_hash = space.hash();
        let mut idle = Vec::with_capacity(workers.max(1));
        for _ in 0..workers.max(1) {
            let mut conn = connector().map_err(|e| EvalError::Transport(e.to_string()))?;
            conn.handshake(&space_hash, timeout)?;
            idle.push(Some(conn));
        }
        Ok(Self { space_hash, timeout, connector: Some(connector), idle: Mutex::new(idle), available: Condvar::new() })
    }

    /// Runs `command` as a trainer speaking the protocol on stdin/stdout.
    pub fn spawn(command: &[String], space: &SearchSpaceConfig, timeout: Duration) -> Result<Self, EvalError> {
        Self::spawn_pool(command, space, timeout, 1)
    }

    /// One trainer process per worker.
    pub fn spawn_pool(
        command: &[String],
        space: &SearchSpaceConfig,
        timeout: Duration,
        workers: usize,
    ) -> Result<Self, EvalError> {
        let command = command.to_vec();
        Self::with_connector(Box::new(move || spawn_child(&command)), space, timeout, workers)
    }

    pub fn connect(address: &str, space: &SearchSpaceConfig, timeout: Duration) -> Result<Self, EvalError> {
        Self::connect_pool(address, space, timeout, 1)
    }

    /// One TCP connection per worker.
    pub fn connect_pool(
        address: &str,
        space: &SearchSpaceConfig,
        timeout: Duration,
        workers: usize,
    ) -> Result<Self, EvalError> {
        let address = address.to_owned();
        Self::with_connector(Box::new(move || open_tcp(&address)), space, timeout, workers)
    }

    /// A single connection over arbitrary streams. It is not re-opened after
    /// a failure.
    pub fn from_streams<R, W>(reader: R, writer: W, space: &SearchSpaceConfig, timeout: Duration) -> Result<Self, EvalError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let space_hash = space.hash();
        let mut conn = Connection::new(reader, Box::new(writer));
        conn.handshake(&space_hash, timeout)?;
        Ok(Self {
            space_hash,
            timeout,
            connector: None,
            idle: Mutex::new(vec![Some(conn)]),
            available: Condvar::new(),
        })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn checkout(&self) -> Result<Connection, EvalError> {
        let mut idle = self.idle.lock().expect("pool lock");
        let slot = loop {
            if let Some(slot) = idle.pop() {
                break slot;
            }
            idle = self.available.wait(idle).expect("pool lock");
        };
        drop(idle);
        match slot {
            Some(conn) => Ok(conn),
            None => {
                let reopened = self
                    .connector
                    .as_ref()
                    .ok_or_else(|| EvalError::Transport("connection lost and cannot be re-opened".into()))
                    .and_then(|connect| connect().map_err(|e| EvalError::Transport(e.to_string())))
                    .and_then(|mut conn| conn.handshake(&self.space_hash, self.timeout).map(|_| conn));
                if reopened.is_err() {
                    self.checkin(None);
                }
                reopened
            }
        }
    }

    fn checkin(&self, conn: Option<Connection>) {
        self.idle.lock().expect("pool lock").push(conn);
        self.available.notify_one();
    }

    fn exchange(&self, conn: &mut Connection, req: &EvalRequest, cache: Option<&PredictionCache>) -> Result<EvalResult, EvalError> {
        let kd = if req.teacher_ids.is_empty() {
            None
        } else {
            let cache = cache.ok_or_else(|| EvalError::Protocol("teachers given without a prediction cache".into()))?;
            let files = req
                .teacher_ids
                .iter()
                .map(|id| {
                    if !cache.contains(id) {
                        return Err(EvalError::Cache(crate::distill::DistillError::Missing(id.clone())));
                    }
                    Ok(cache.data_path(id).to_string_lossy().into_owned())
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(KdSpec { weight: req.kd_weight, teacher_files: files })
        };
        conn.send(&ClientMessage::Train {
            arch_id: req.arch_id.to_string(),
            spec: req.spec.clone(),
            seed: req.seed,
            epochs: req.epochs,
            kd,
        })?;
        match conn.recv(self.timeout)? {
            ServerMessage::Result { arch_id, score, metric, per_epoch, preds_file } => {
                if arch_id != req.arch_id.as_str() {
                    return Err(EvalError::Correlation { expected: req.arch_id.clone(), got: arch_id });
                }
                let preds_ref = match (preds_file, cache) {
                    (Some(file), Some(cache)) => {
                        let path = Path::new(&file);
                        let path = if path.is_absolute() { path.to_owned() } else { cache.dir().join(path) };
                        cache.import_file(&req.arch_id, &path)?;
                        Some(req.arch_id.clone())
                    }
                    _ => None,
                };
                let result = EvalResult { arch_id: req.arch_id.clone(), score, metric_name: metric, per_epoch, preds_ref };
                result.check()?;
                Ok(result)
            }
            ServerMessage::Error { arch_id, code, message } => match arch_id {
                Some(got) if got != req.arch_id.as_str() => {
                    Err(EvalError::Correlation { expected: req.arch_id.clone(), got })
                }
                _ => Err(EvalError::Trainer { code, message }),
            },
            ServerMessage::HelloOk { .. } => Err(EvalError::Protocol("unexpected hello_ok".into())),
        }
    }
}

impl Evaluator for ExternalEvaluator {
    fn name(&self) -> &str {
        "external"
    }

    fn evaluate(&self, req: &EvalRequest, cache: Option<&PredictionCache>) -> Result<EvalResult, EvalError> {
        let mut conn = self.checkout()?;
        let outcome = self.exchange(&mut conn, req, cache);
        // Only a clean exchange or a trainer-reported error leaves the
        // stream in a known state.
        let reusable = matches!(&outcome, Ok(_) | Err(EvalError::Trainer { .. }) | Err(EvalError::Cache(_)));
        self.checkin(if reusable { Some(conn) } else { None });
        outcome
    }
}

/// Answers `hello` for `space_hash` and every `train` with `score`, over one
/// pair of streams. Used by tests and by the CLI's stub trainer.
pub fn serve_stub<R: io::BufRead, W: Write>(mut input: R, mut output: W, space_hash: &str, score: f64) -> io::Result<()> {
    while let Some(msg) = read_message::<_, ClientMessage>(&mut input)? {
        let reply = match msg {
            ClientMessage::Hello { space_hash: theirs, .. } if theirs == space_hash => {
                ServerMessage::HelloOk { proto: PROTO_VERSION, space_hash: theirs }
            }
            ClientMessage::Hello { .. } => ServerMessage::Error {
                arch_id: None,
                code: SPACE_MISMATCH.into(),
                message: "space hash differs".into(),
            },
            ClientMessage::Train { arch_id, epochs, .. } => ServerMessage::Result {
                arch_id,
                score,
                metric: "stub".into(),
                per_epoch: vec![score; epochs.max(1) as usize],
                preds_file: None,
            },
        };
        write_message(&mut output, &reply)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{spec_digest, SamplingMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::net::TcpListener;

    fn request(space: &SearchSpaceConfig, seed: u64) -> EvalRequest {
        let spec = space.sample(&mut ChaCha8Rng::seed_from_u64(seed), SamplingMode::PerFactor).unwrap();
        EvalRequest { arch_id: spec_digest(&spec), spec, seed, teacher_ids: vec![], kd_weight: 0.0, epochs: 3 }
    }

    /// Serves one TCP connection with `handler` after answering the handshake.
    fn tcp_stub<F>(space_hash: String, handler: F) -> String
    where
        F: Fn(ClientMessage) -> Option<ServerMessage> + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut writer = stream;
                while let Ok(Some(msg)) = read_message::<_, ClientMessage>(&mut reader) {
                    let reply = match msg {
                        ClientMessage::Hello { .. } => {
                            Some(ServerMessage::HelloOk { proto: PROTO_VERSION, space_hash: space_hash.clone() })
                        }
                        other => handler(other),
                    };
                    if let Some(r) = reply {
                        write_message(&mut writer, &r).unwrap();
                    }
                }
            }
        });
        addr
    }

    #[test]
    fn echo_round_trip() {
        let space = SearchSpaceConfig::default();
        let addr = tcp_stub(space.hash(), |msg| match msg {
            ClientMessage::Train { arch_id, .. } => Some(ServerMessage::Result {
                arch_id,
                score: 0.5,
                metric: "roc_auc".into(),
                per_epoch: vec![0.4, 0.5],
                preds_file: None,
            }),
            _ => None,
        });
        let eval = ExternalEvaluator::connect(&addr, &space, Duration::from_secs(5)).unwrap();
        for s in 0..3 {
            let req = request(&space, s);
            let res = eval.evaluate(&req, None).unwrap();
            assert_eq!(res.score, 0.5);
            assert_eq!(res.arch_id, req.arch_id);
            assert_eq!(res.metric_name, "roc_auc");
        }
    }

    #[test]
    fn wrong_arch_id_is_correlation_error() {
        let space = SearchSpaceConfig::default();
        let addr = tcp_stub(space.hash(), |_| {
            Some(ServerMessage::Result {
                arch_id: "f".repeat(64),
                score: 0.5,
                metric: "m".into(),
                per_epoch: vec![],
                preds_file: None,
            })
        });
        let eval = ExternalEvaluator::connect(&addr, &space, Duration::from_secs(5)).unwrap();
        assert!(matches!(eval.evaluate(&request(&space, 1), None), Err(EvalError::Correlation { .. })));
    }

    #[test]
    fn silent_trainer_times_out() {
        let space = SearchSpaceConfig::default();
        let addr = tcp_stub(space.hash(), |_| None);
        let bound = Duration::from_millis(200);
        let eval = ExternalEvaluator::connect(&addr, &space, bound).unwrap();
        let started = std::time::Instant::now();
        match eval.evaluate(&request(&space, 1), None) {
            Err(EvalError::Timeout(d)) => assert_eq!(d, bound),
            other => panic!("{other:?}"),
        }
        assert!(started.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn handshake_mismatch() {
        let space = SearchSpaceConfig::default();
        let addr = tcp_stub("not-the-hash".into(), |_| None);
        assert!(matches!(
            ExternalEvaluator::connect(&addr, &space, Duration::from_secs(5)),
            Err(EvalError::Handshake(_))
        ));
    }

    #[test]
    fn trainer_error_and_preds_registration() {
        let space = SearchSpaceConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let outside = tempfile::tempdir().unwrap();
        let cache = PredictionCache::open(dir.path().join("cache")).unwrap();
        let staging = PredictionCache::open(outside.path()).unwrap();
        let req = request(&space, 4);
        let m = crate::distill::LogitMatrix::new(2, 2, vec![0.0, 1.0, 0.5, -0.5]).unwrap();
        staging.write(&req.arch_id, &m, "fp").unwrap();
        let produced = staging.data_path(&req.arch_id).to_string_lossy().into_owned();
        let failing = req.arch_id.to_string();
        let addr = tcp_stub(space.hash(), move |msg| match msg {
            ClientMessage::Train { arch_id, .. } if arch_id == failing => Some(ServerMessage::Result {
                arch_id,
                score: 0.7,
                metric: "m".into(),
                per_epoch: vec![0.7],
                preds_file: Some(produced.clone()),
            }),
            ClientMessage::Train { arch_id, .. } => Some(ServerMessage::Error {
                arch_id: Some(arch_id),
                code: "oom".into(),
                message: "out of memory".into(),
            }),
            _ => None,
        });
        let eval = ExternalEvaluator::connect(&addr, &space, Duration::from_secs(5)).unwrap();
        let res = eval.evaluate(&req, Some(&cache)).unwrap();
        assert_eq!(res.preds_ref.as_ref(), Some(&req.arch_id));
        assert_eq!(cache.read(&req.arch_id).unwrap().0, m);
        match eval.evaluate(&request(&space, 5), Some(&cache)) {
            Err(EvalError::Trainer { code, .. }) => assert_eq!(code, "oom"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pipes_with_stub_server() {
        let space = SearchSpaceConfig::default();
        let (to_server_r, to_server_w) = pipe();
        let (to_client_r, to_client_w) = pipe();
        let hash = space.hash();
        thread::spawn(move || serve_stub(BufReader::new(to_server_r), to_client_w, &hash, 0.25));
        let eval = ExternalEvaluator::from_streams(to_client_r, to_server_w, &space, Duration::from_secs(5)).unwrap();
        assert_eq!(eval.evaluate(&request(&space, 2), None).unwrap().score, 0.25);
    }

    /// In-memory pipe built from a channel of byte chunks.
    fn pipe() -> (ChanReader, ChanWriter) {
        let (tx, rx) = mpsc::channel();
        (ChanReader { rx, buf: Vec::new(), pos: 0 }, ChanWriter { tx })
    }

    struct ChanReader {
        rx: Receiver<Vec<u8>>,
        buf: Vec<u8>,
        pos: usize,
    }

    impl Read for ChanReader {
        fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
            if self.pos == self.buf.len() {
                match self.rx.recv() {
                    Ok(chunk) => {
                        self.buf = chunk;
                        self.pos = 0;
                    }
                    Err(_) => return Ok(0),
                }
            }
            let n = out.len().min(self.buf.len() - self.pos);
            out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
            self.pos += n;
            Ok(n)
        }
    }

    struct ChanWriter {
        tx: mpsc::Sender<Vec<u8>>,
    }

    impl Write for ChanWriter {
        fn write(&mut self, data: &[u8]) -> io::Result<usize> {
            self.tx.send(data.to_vec()).map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
            Ok(data.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }
}
