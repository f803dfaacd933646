//! Byte-level carriers for encoded frames.

use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::frame::{Frame, HEADER_LEN};

/// Failure modes of a raw carrier; [`super::Link`] maps them to session errors.
#[derive(Debug)]
pub enum RecvError {
    Timeout,
    Closed,
    Io(io::Error),
    Malformed(String),
}

/// Moves whole encoded frames between two endpoints, in order.
pub trait Transport: Send {
    fn send(&mut self, frame: Vec<u8>) -> io::Result<()>;
    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, RecvError>;
}

/// In-process transport over a pair of channels.
pub struct Loopback {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl Loopback {
    pub fn pair() -> (Loopback, Loopback) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        (Loopback { tx: tx_a, rx: rx_a }, Loopback { tx: tx_b, rx: rx_b })
    }
}

impl Transport for Loopback {
    fn send(&mut self, frame: Vec<u8>) -> io::Result<()> {
        self.tx
            .send(frame)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "loopback peer dropped"))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, RecvError> {
        match self.rx.recv_timeout(timeout) {
            Ok(f) => Ok(f),
            Err(RecvTimeoutError::Timeout) => Err(RecvError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(RecvError::Closed),
        }
    }
}

/// How long a dropped TCP transport waits for its queued frames to drain.
const LINGER: Duration = Duration::from_secs(2);

/// TCP transport. Writes go through a dedicated thread so that two parties
/// sending large frames to each other at the same time cannot deadlock on
/// full socket buffers.
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    control: TcpStream,
    tx: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<()>>,
    done: Receiver<()>,
    write_error: Arc<Mutex<Option<io::Error>>>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> io::Result<TcpTransport> {
        stream.set_nodelay(true)?;
        stream.set_nonblocking(false)?;
        let mut write_half = stream.try_clone()?;
        let control = stream.try_clone()?;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let (done_tx, done) = mpsc::channel();
        let write_error = Arc::new(Mutex::new(None));
        let err_slot = Arc::clone(&write_error);
        let writer = std::thread::Builder::new()
            .name("p2n2-tcp-writer".into())
            .spawn(move || {
                for frame in rx {
                    if let Err(e) = write_half.write_all(&frame).and_then(|_| write_half.flush()) {
                        *err_slot.lock().unwrap() = Some(e);
                        break;
                    }
                }
                let _ = write_half.shutdown(Shutdown::Write);
                let _ = done_tx.send(());
            })?;
        Ok(TcpTransport {
            reader: BufReader::with_capacity(1 << 16, stream),
            control,
            tx: Some(tx),
            writer: Some(writer),
            done,
            write_error,
        })
    }

    fn map_read_err(e: io::Error) -> RecvError {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => RecvError::Timeout,
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe => RecvError::Closed,
            _ => RecvError::Io(e),
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: Vec<u8>) -> io::Result<()> {
        if let Some(e) = self.write_error.lock().unwrap().take() {
            return Err(e);
        }
        self.tx
            .as_ref()
            .expect("writer alive until drop")
            .send(frame)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "tcp writer stopped"))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, RecvError> {
        self.reader
            .get_ref()
            .set_read_timeout(Some(timeout.max(Duration::from_millis(1))))
            .map_err(RecvError::Io)?;
        let mut header = [0u8; HEADER_LEN];
        self.reader.read_exact(&mut header).map_err(Self::map_read_err)?;
        let (_, _, _, len) =
            Frame::decode_header(&header).map_err(|e| RecvError::Malformed(e.to_string()))?;
        let mut frame = Vec::with_capacity(HEADER_LEN + len);
        frame.extend_from_slice(&header);
        frame.resize(HEADER_LEN + len, 0);
        self.reader
            .read_exact(&mut frame[HEADER_LEN..])
            .map_err(Self::map_read_err)?;
        Ok(frame)
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        drop(self.tx.take());
        // Give queued frames (typically a final Abort) a chance to leave, then
        // force the socket closed so a blocked writer cannot outlive us.
        let _ = self.done.recv_timeout(LINGER);
        let _ = self.control.shutdown(Shutdown::Both);
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
    }
}
