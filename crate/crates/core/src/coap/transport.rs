use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU16, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{decode, encode, CodecError, CoapMessage, MessageType};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("no response after {attempts} transmissions")]
    Timeout { attempts: u32 },
    #[error("peer reset the exchange")]
    Reset,
    #[error("handler produced no response")]
    NoResponse,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Request/response exchange carrying encoded CoAP bytes.
pub trait CoapLink: Send + Sync {
    fn exchange(&self, request: &CoapMessage) -> Result<CoapMessage, TransportError>;

    fn next_message_id(&self) -> u16;
}

type Handler = dyn Fn(&[u8]) -> Option<Vec<u8>> + Send + Sync;

/// Hands encoded requests straight to a server-side byte handler.
pub struct InProcessLink {
    handler: Arc<Handler>,
    next_id: AtomicU16,
}

impl InProcessLink {
    pub fn new(handler: Arc<Handler>) -> Self {
        Self {
            handler,
            next_id: AtomicU16::new(1),
        }
    }
}

impl CoapLink for InProcessLink {
    fn exchange(&self, request: &CoapMessage) -> Result<CoapMessage, TransportError> {
        let bytes = encode(request)?;
        let reply = (self.handler)(&bytes).ok_or(TransportError::NoResponse)?;
        let msg = decode(&reply)?;
        if msg.mtype == MessageType::Reset {
            return Err(TransportError::Reset);
        }
        Ok(msg)
    }

    fn next_message_id(&self) -> u16 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }
}

/// Confirmable retransmission schedule.
#[derive(Debug, Clone, Copy)]
pub struct RetransmitPolicy {
    pub ack_timeout: Duration,
    pub max_retransmit: u32,
}

impl Default for RetransmitPolicy {
    fn default() -> Self {
        Self {
            ack_timeout: Duration::from_secs(2),
            max_retransmit: 4,
        }
    }
}

pub struct UdpLink {
    socket: Mutex<UdpSocket>,
    peer: SocketAddr,
    policy: RetransmitPolicy,
    next_id: AtomicU16,
}

impl UdpLink {
    pub fn connect(peer: impl ToSocketAddrs, policy: RetransmitPolicy) -> io::Result<Self> {
        let peer = peer
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no peer address"))?;
        let bind: SocketAddr = if peer.is_ipv4() {
            "127.0.0.1:0".parse().unwrap()
        } else {
            "[::1]:0".parse().unwrap()
        };
        let socket = UdpSocket::bind(bind)?;
        Ok(Self {
            socket: Mutex::new(socket),
            peer,
            policy,
            next_id: AtomicU16::new(1),
        })
    }
}

impl CoapLink for UdpLink {
    fn exchange(&self, request: &CoapMessage) -> Result<CoapMessage, TransportError> {
        let bytes = encode(request)?;
        let socket = self.socket.lock().unwrap_or_else(|e| e.into_inner());
        let retries = if request.mtype == MessageType::Confirmable {
            self.policy.max_retransmit
        } else {
            0
        };
        let mut timeout = self.policy.ack_timeout;
        let mut buf = [0u8; 1500];
        for _ in 0..=retries {
            socket.send_to(&bytes, self.peer)?;
            let deadline = Instant::now() + timeout;
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    break;
                }
                socket.set_read_timeout(Some(left))?;
                let n = match socket.recv_from(&mut buf) {
                    Ok((n, from)) if from == self.peer => n,
                    Ok(_) => continue,
                    Err(e)
                        if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
                    {
                        break
                    }
                    Err(e) => return Err(e.into()),
                };
                let Ok(reply) = decode(&buf[..n]) else {
                    continue;
                };
                if reply.message_id != request.message_id {
                    continue;
                }
                if reply.mtype == MessageType::Reset {
                    return Err(TransportError::Reset);
                }
                if reply.token == request.token {
                    return Ok(reply);
                }
            }
            timeout *= 2;
        }
        Err(TransportError::Timeout {
            attempts: retries + 1,
        })
    }

    fn next_message_id(&self) -> u16 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }
}

/// Blocking UDP server thread that answers each datagram via a byte handler.
pub struct UdpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl UdpServer {
    pub fn spawn(addr: impl ToSocketAddrs, handler: Arc<Handler>) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(100)))?;
        let addr = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("coap-server".into())
            .spawn(move || {
                let mut buf = [0u8; 1500];
                while !flag.load(Ordering::Relaxed) {
                    let (n, from) = match socket.recv_from(&mut buf) {
                        Ok(v) => v,
                        Err(_) => continue,
                    };
                    if let Some(reply) = handler(&buf[..n]) {
                        let _ = socket.send_to(&reply, from);
                    }
                }
            })?;
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_thread();
    }

    fn stop_thread(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for UdpServer {
    fn drop(&mut self) {
        self.stop_thread();
    }
}
