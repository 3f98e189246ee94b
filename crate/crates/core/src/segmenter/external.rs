use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::protocol::{decode_response, encode_request};
use super::{Capabilities, Segmenter, SegmenterError, SliceRequest, SliceResponse};

/// Client for a backend process (stdin/stdout) or TCP server speaking the wire protocol.
/// One request is in flight at a time.
pub struct ExternalSegmenter {
    name: String,
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    timeout: Duration,
}

fn spawn_reader<R: std::io::Read + Send + 'static>(source: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(source).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl ExternalSegmenter {
    /// Launches `command` (program followed by its arguments).
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, SegmenterError> {
        let joined = command.join(" ");
        let (program, args) = command
            .split_first()
            .ok_or_else(|| SegmenterError::InvalidSpec("exec:".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| SegmenterError::Spawn {
                command: joined.clone(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            name: format!("exec:{joined}"),
            writer: Box::new(stdin),
            lines: spawn_reader(stdout),
            child: Some(child),
            timeout,
        })
    }

    pub fn connect(address: &str, timeout: Duration) -> Result<Self, SegmenterError> {
        let wrap = |source| SegmenterError::Connect {
            address: address.to_string(),
            source,
        };
        let stream = TcpStream::connect(address).map_err(wrap)?;
        let reader = stream.try_clone().map_err(wrap)?;
        Ok(Self {
            name: format!("tcp:{address}"),
            writer: Box::new(stream),
            lines: spawn_reader(reader),
            child: None,
            timeout,
        })
    }
}

impl ExternalSegmenter {
    /// Sends one raw line and returns the raw reply line, without any validation. Used for
    /// conformance checks that must be able to send malformed requests.
    pub fn exchange(&mut self, line: &str, request_id: Option<u64>) -> Result<String, SegmenterError> {
        let mut line = line.trim_end_matches('\n').to_string();
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(SegmenterError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(SegmenterError::Timeout {
                request_id: request_id.unwrap_or(0),
                seconds: self.timeout.as_secs_f64(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(SegmenterError::Protocol("backend closed its output".into())),
        }
    }
}

impl Segmenter for ExternalSegmenter {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            name: self.name.clone(),
            deterministic: false,
        }
    }

    fn segment_slice(&mut self, req: &SliceRequest) -> Result<SliceResponse, SegmenterError> {
        req.validate()?;
        let reply = self.exchange(&encode_request(req), Some(req.request_id))?;
        decode_response(&reply, req)
    }
}

impl Drop for ExternalSegmenter {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
