use std::io::{BufRead, BufReader, ErrorKind};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::wire::GazeSample;
use super::TransportError;

/// Newline-delimited gaze records from a TCP server. Malformed records are
/// skipped and counted; the stream ends at EOF or after one idle timeout.
#[derive(Debug)]
pub struct GazeStream {
    reader: BufReader<TcpStream>,
    idle_timeout: Duration,
    malformed: u64,
    line: String,
    done: bool,
}

impl GazeStream {
    pub fn malformed(&self) -> u64 {
        self.malformed
    }
}

pub fn ingest_gaze(
    endpoint: impl ToSocketAddrs + std::fmt::Debug,
    connect_timeout: Duration,
    idle_timeout: Duration,
) -> Result<GazeStream, TransportError> {
    let label = format!("{endpoint:?}");
    let addrs: Vec<_> = endpoint
        .to_socket_addrs()
        .map_err(|_| TransportError::Resolve(label.clone()))?
        .collect();
    if addrs.is_empty() {
        return Err(TransportError::Resolve(label));
    }
    let mut last_err = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, connect_timeout) {
            Ok(stream) => {
                stream.set_read_timeout(Some(idle_timeout))?;
                return Ok(GazeStream {
                    reader: BufReader::new(stream),
                    idle_timeout,
                    malformed: 0,
                    line: String::new(),
                    done: false,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one address").into())
}

impl Iterator for GazeStream {
    type Item = Result<GazeSample, TransportError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.line.clear();
            match self.reader.read_line(&mut self.line) {
                Ok(0) => self.done = true,
                Ok(_) => match GazeSample::decode(&self.line) {
                    Ok(sample) => return Some(Ok(sample)),
                    Err(_) if self.line.trim().is_empty() => {}
                    Err(_) => self.malformed += 1,
                },
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    self.done = true;
                    return Some(Err(TransportError::IdleTimeout(self.idle_timeout)));
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        None
    }
}
