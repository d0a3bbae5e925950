//! TCP backend over `std::net`.
//!
//! A connection opens with a preamble `"DFLC" | sender u32 | has_addr u8 |
//! addr (6)`, answered by the listener's node id (u32). Each frame is then
//! preceded by the sender's send time (u64 µs since the Unix epoch) so the
//! receiver can measure one-way latency on a shared host clock.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;

use super::{
    Delivery, FabricError, Frame, Micros, PeerAddress, Received, SendReceipt, StatsRegistry,
    Transport, FRAME_HEADER_LEN,
};
use crate::ids::NodeId;

const PREAMBLE_MAGIC: &[u8; 4] = b"DFLC";
const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(2);
const ACCEPT_POLL: Duration = Duration::from_millis(2);

pub fn wall_clock_micros() -> Micros {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as Micros)
        .unwrap_or(0)
}

/// Factory for TCP endpoints sharing one stats registry.
#[derive(Clone)]
pub struct TcpFabric {
    stats: Arc<StatsRegistry>,
    max_frame: usize,
}

impl TcpFabric {
    pub fn new(max_frame: usize) -> Self {
        TcpFabric {
            stats: Arc::new(StatsRegistry::new()),
            max_frame,
        }
    }

    pub fn endpoint(&self, node: NodeId) -> TcpEndpoint {
        let (tx, rx) = mpsc::channel();
        TcpEndpoint {
            inner: Arc::new(Inner {
                node,
                stats: self.stats.clone(),
                max_frame: self.max_frame,
                listeners: Mutex::new(Vec::new()),
                conns: Mutex::new(HashMap::new()),
                tx: Mutex::new(tx),
                rx: Mutex::new(rx),
                closed: AtomicBool::new(false),
            }),
        }
    }

    pub fn stats(&self) -> Arc<StatsRegistry> {
        self.stats.clone()
    }
}

struct ListenerHandle {
    addr: PeerAddress,
    stop: Arc<AtomicBool>,
    accepted: Arc<Mutex<Vec<TcpStream>>>,
}

struct Inner {
    node: NodeId,
    stats: Arc<StatsRegistry>,
    max_frame: usize,
    listeners: Mutex<Vec<ListenerHandle>>,
    conns: Mutex<HashMap<PeerAddress, (TcpStream, NodeId)>>,
    tx: Mutex<Sender<Delivery>>,
    rx: Mutex<Receiver<Delivery>>,
    closed: AtomicBool,
}

#[derive(Clone)]
pub struct TcpEndpoint {
    inner: Arc<Inner>,
}

fn read_u32(s: &mut TcpStream) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    s.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn serve_connection(
    mut stream: TcpStream,
    local: PeerAddress,
    me: NodeId,
    tx: Sender<Delivery>,
    stats: Arc<StatsRegistry>,
    max_frame: usize,
) {
    let _ = stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT));
    let mut pre = [0u8; 11];
    if stream.read_exact(&mut pre).is_err() || &pre[..4] != PREAMBLE_MAGIC {
        return;
    }
    let src_node = NodeId(u32::from_be_bytes([pre[4], pre[5], pre[6], pre[7]]));
    let src_addr = if pre[8] == 1 {
        let mut a = [0u8; 6];
        if stream.read_exact(&mut a).is_err() {
            return;
        }
        PeerAddress::from_bytes(&a).ok()
    } else {
        None
    };
    // pre[9..11] reserved
    if stream.write_all(&me.0.to_be_bytes()).is_err() {
        return;
    }
    let _ = stream.set_read_timeout(None);
    loop {
        let mut ts = [0u8; 8];
        let mut header = [0u8; FRAME_HEADER_LEN];
        if stream.read_exact(&mut ts).is_err() || stream.read_exact(&mut header).is_err() {
            return;
        }
        let Ok((kind, corr, len)) = Frame::decode_header(&header, max_frame) else {
            return;
        };
        let mut body = vec![0u8; len];
        if stream.read_exact(&mut body).is_err() {
            return;
        }
        let sent_at = u64::from_be_bytes(ts);
        let now = wall_clock_micros();
        let frame = Frame::new(kind, corr, body);
        stats
            .link(src_node, me)
            .record_received(frame.wire_len(), now.saturating_sub(sent_at), now);
        let d = Delivery {
            frame,
            src_node,
            src_addr,
            dst_addr: local,
            sent_at,
            arrived_at: now,
        };
        if tx.send(d).is_err() {
            return;
        }
    }
}

impl TcpEndpoint {
    fn connect(&self, to: PeerAddress) -> std::io::Result<(TcpStream, NodeId)> {
        let mut s = TcpStream::connect_timeout(&to.to_socket_addr(), CONNECT_TIMEOUT)?;
        s.set_nodelay(true)?;
        let mut pre = Vec::with_capacity(17);
        pre.extend_from_slice(PREAMBLE_MAGIC);
        pre.extend_from_slice(&self.inner.node.0.to_be_bytes());
        match self.primary_address() {
            Some(a) => {
                pre.push(1);
                pre.extend_from_slice(&[0, 0]);
                pre.extend_from_slice(&a.to_bytes());
            }
            None => {
                pre.push(0);
                pre.extend_from_slice(&[0, 0]);
            }
        }
        s.write_all(&pre)?;
        s.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let peer = NodeId(read_u32(&mut s)?);
        s.set_read_timeout(None)?;
        Ok((s, peer))
    }

    fn write_to(&self, to: PeerAddress, record: &[u8]) -> std::io::Result<NodeId> {
        let mut conns = self.inner.conns.lock();
        if let Some((s, peer)) = conns.get_mut(&to) {
            if s.write_all(record).is_ok() {
                return Ok(*peer);
            }
            conns.remove(&to);
        }
        let (mut s, peer) = self.connect(to)?;
        s.write_all(record)?;
        conns.insert(to, (s, peer));
        Ok(peer)
    }
}

impl Transport for TcpEndpoint {
    fn node_id(&self) -> NodeId {
        self.inner.node
    }

    fn now(&self) -> Micros {
        wall_clock_micros()
    }

    fn bound_addresses(&self) -> Vec<PeerAddress> {
        self.inner.listeners.lock().iter().map(|l| l.addr).collect()
    }

    fn bind(&self, addr: PeerAddress) -> Result<(), FabricError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(FabricError::Closed);
        }
        let listener = TcpListener::bind(addr.to_socket_addr()).map_err(|e| {
            if e.kind() == ErrorKind::AddrInUse {
                FabricError::AddressInUse(addr)
            } else {
                FabricError::Io(e)
            }
        })?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let accepted = Arc::new(Mutex::new(Vec::new()));
        let (stop2, accepted2) = (stop.clone(), accepted.clone());
        let me = self.inner.node;
        let tx = self.inner.tx.lock().clone();
        let stats = self.inner.stats.clone();
        let max_frame = self.inner.max_frame;
        thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || {
                while !stop2.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let _ = stream.set_nonblocking(false);
                            let _ = stream.set_nodelay(true);
                            if let Ok(c) = stream.try_clone() {
                                accepted2.lock().push(c);
                            }
                            let (tx, stats) = (tx.clone(), stats.clone());
                            thread::spawn(move || {
                                serve_connection(stream, addr, me, tx, stats, max_frame)
                            });
                        }
                        Err(e) if e.kind() == ErrorKind::WouldBlock => {
                            thread::sleep(ACCEPT_POLL)
                        }
                        Err(_) => thread::sleep(ACCEPT_POLL),
                    }
                }
            })?;
        self.inner.listeners.lock().push(ListenerHandle {
            addr,
            stop,
            accepted,
        });
        Ok(())
    }

    fn release(&self, addr: PeerAddress) -> Result<(), FabricError> {
        let mut ls = self.inner.listeners.lock();
        let pos = ls
            .iter()
            .position(|l| l.addr == addr)
            .ok_or(FabricError::NotBound(addr))?;
        let l = ls.remove(pos);
        l.stop.store(true, Ordering::SeqCst);
        for s in l.accepted.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        Ok(())
    }

    fn send_frame(&self, to: PeerAddress, frame: &Frame) -> Result<SendReceipt, FabricError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(FabricError::Closed);
        }
        frame.check_size(self.inner.max_frame)?;
        let now = wall_clock_micros();
        let mut record = Vec::with_capacity(8 + frame.wire_len());
        record.extend_from_slice(&now.to_be_bytes());
        record.extend_from_slice(&frame.encode());
        match self.write_to(to, &record) {
            Ok(peer) => {
                self.inner
                    .stats
                    .link(self.inner.node, peer)
                    .record_sent(frame.wire_len(), frame.kind.is_control(), now);
                Ok(SendReceipt::Sent)
            }
            Err(_) => {
                self.inner.stats.record_routing_error(self.inner.node);
                Err(FabricError::Unroutable(to))
            }
        }
    }

    fn recv_frame(&self, timeout: Micros) -> Result<Received, FabricError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(FabricError::Closed);
        }
        let rx = self.inner.rx.lock();
        match rx.recv_timeout(Duration::from_micros(timeout)) {
            Ok(d) => Ok(Received::Frame(d)),
            Err(RecvTimeoutError::Timeout) => Ok(Received::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(FabricError::Closed),
        }
    }

    fn stats(&self) -> Arc<StatsRegistry> {
        self.inner.stats.clone()
    }

    fn close(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        let addrs = self.bound_addresses();
        for a in addrs {
            let _ = self.release(a);
        }
        for (_, (s, _)) in self.inner.conns.lock().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::FrameKind;
    use std::net::TcpListener as StdListener;

    fn free_addr() -> PeerAddress {
        let l = StdListener::bind("127.0.0.1:0").unwrap();
        let port = l.local_addr().unwrap().port();
        drop(l);
        format!("127.0.0.1:{port}").parse().unwrap()
    }

    #[test]
    fn frames_cross_real_sockets_in_order() {
        let fabric = TcpFabric::new(1024);
        let a = fabric.endpoint(NodeId(0));
        let b = fabric.endpoint(NodeId(1));
        let (aa, ba) = (free_addr(), free_addr());
        a.bind(aa).unwrap();
        b.bind(ba).unwrap();
        for i in 0..20 {
            a.send_frame(ba, &Frame::new(FrameKind::Control, i, vec![i as u8; 10]))
                .unwrap();
        }
        for i in 0..20 {
            match b.recv_frame(2_000_000).unwrap() {
                Received::Frame(d) => {
                    assert_eq!(d.frame.correlation_id, i);
                    assert_eq!(d.src_node, NodeId(0));
                    assert_eq!(d.src_addr, Some(aa));
                }
                Received::Timeout => panic!("timed out at frame {i}"),
            }
        }
        let link = fabric.stats().snapshot();
        let c = link.link(NodeId(0), NodeId(1)).unwrap().counters;
        assert_eq!(c.frames_sent, 20);
        assert_eq!(c.frames_received, 20);
        a.close();
        b.close();
    }

    #[test]
    fn bind_twice_fails_and_timeout_returns() {
        let fabric = TcpFabric::new(1024);
        let a = fabric.endpoint(NodeId(0));
        let b = fabric.endpoint(NodeId(1));
        let addr = free_addr();
        a.bind(addr).unwrap();
        assert!(matches!(b.bind(addr), Err(FabricError::AddressInUse(_))));
        let start = std::time::Instant::now();
        assert_eq!(a.recv_frame(50_000).unwrap(), Received::Timeout);
        let waited = start.elapsed();
        assert!(waited >= Duration::from_millis(50));
        assert!(waited < Duration::from_millis(500));
        a.close();
    }

    #[test]
    fn released_address_becomes_unroutable() {
        let fabric = TcpFabric::new(1024);
        let a = fabric.endpoint(NodeId(0));
        let b = fabric.endpoint(NodeId(1));
        let ba = free_addr();
        b.bind(ba).unwrap();
        b.release(ba).unwrap();
        thread::sleep(Duration::from_millis(20));
        assert!(a
            .send_frame(ba, &Frame::new(FrameKind::Control, 0, vec![]))
            .is_err());
    }
}
