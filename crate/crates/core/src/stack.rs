//! IP/UDP/RTP encapsulation, per-interface FIFO queues, static routing and
//! per-flow packet accounting.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use thiserror::Error;

use crate::engine::SimTime;

pub const RTP_HEADER_BYTES: u32 = 12;
pub const UDP_HEADER_BYTES: u32 = 8;
pub const IP_HEADER_BYTES: u32 = 20;
pub const MTU_BYTES: u32 = 1500;
pub const DEFAULT_QUEUE_CAPACITY: usize = 50;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Header {
    Rtp,
    Udp,
    Ip,
}

impl Header {
    pub const fn bytes(self) -> u32 {
        match self {
            Header::Rtp => RTP_HEADER_BYTES,
            Header::Udp => UDP_HEADER_BYTES,
            Header::Ip => IP_HEADER_BYTES,
        }
    }
}

const RTP_UDP_IP: &[Header] = &[Header::Rtp, Header::Udp, Header::Ip];
const UDP_IP: &[Header] = &[Header::Udp, Header::Ip];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StackError {
    #[error("payload must be at least one byte")]
    EmptyPayload,
    #[error("packet of {wire} bytes exceeds the {MTU_BYTES}-byte MTU")]
    ExceedsMtu { wire: u32 },
}

/// Application payload size plus the ordered header stack wrapped around it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encapsulation {
    pub payload_bytes: u32,
    pub headers: &'static [Header],
}

impl Encapsulation {
    /// Size at the IP layer.
    pub fn wire_bytes(&self) -> u32 {
        self.payload_bytes + self.headers.iter().map(|h| h.bytes()).sum::<u32>()
    }

    pub fn has_rtp(&self) -> bool {
        self.headers.contains(&Header::Rtp)
    }
}

/// Wraps a payload in UDP/IP, plus RTP when `with_rtp`.
pub fn encapsulate(payload_bytes: u32, with_rtp: bool) -> Result<Encapsulation, StackError> {
    if payload_bytes == 0 {
        return Err(StackError::EmptyPayload);
    }
    let encap = Encapsulation {
        payload_bytes,
        headers: if with_rtp { RTP_UDP_IP } else { UDP_IP },
    };
    let wire = encap.wire_bytes();
    if wire > MTU_BYTES {
        return Err(StackError::ExceedsMtu { wire });
    }
    Ok(encap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowId(pub u32);

/// A network-layer packet carrying application data `T`.
#[derive(Debug, Clone)]
pub struct Packet<T> {
    pub id: u64,
    pub flow: FlowId,
    pub encap: Encapsulation,
    pub src: NodeId,
    pub dst: NodeId,
    pub sequence_number: u64,
    pub created_at: SimTime,
    pub enqueued_at: Option<SimTime>,
    pub dequeued_at: Option<SimTime>,
    pub delivered_at: Option<SimTime>,
    pub app: T,
}

impl<T> Packet<T> {
    pub fn wire_bytes(&self) -> u32 {
        self.encap.wire_bytes()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub enqueued: u64,
    pub dequeues: u64,
    pub drops_full: u64,
    /// Sum of (dequeued_at − enqueued_at) in microseconds.
    pub sum_wait_us: u64,
}

impl QueueStats {
    pub fn avg_wait(&self) -> Option<SimTime> {
        (self.dequeues > 0).then(|| SimTime(self.sum_wait_us / self.dequeues))
    }

    pub fn avg_wait_ms(&self) -> Option<f64> {
        (self.dequeues > 0).then(|| self.sum_wait_us as f64 / self.dequeues as f64 / 1e3)
    }

    pub fn merge(&mut self, other: &QueueStats) {
        self.enqueued += other.enqueued;
        self.dequeues += other.dequeues;
        self.drops_full += other.drops_full;
        self.sum_wait_us += other.sum_wait_us;
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum EnqueueOutcome<T> {
    Accepted,
    /// Queue was full; the item is handed back.
    DroppedFull(T),
}

/// Bounded drop-tail FIFO that measures each item's time in queue.
#[derive(Debug, Clone)]
pub struct FifoQueue<T> {
    capacity: usize,
    items: VecDeque<(SimTime, T)>,
    stats: QueueStats,
}

impl<T> FifoQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1024)),
            stats: QueueStats::default(),
        }
    }

    pub fn enqueue(&mut self, item: T, now: SimTime) -> EnqueueOutcome<T> {
        if self.items.len() >= self.capacity {
            self.stats.drops_full += 1;
            return EnqueueOutcome::DroppedFull(item);
        }
        self.stats.enqueued += 1;
        self.items.push_back((now, item));
        EnqueueOutcome::Accepted
    }

    /// Removes the head and returns it with its time in queue.
    pub fn dequeue(&mut self, now: SimTime) -> Option<(T, SimTime)> {
        let (at, item) = self.items.pop_front()?;
        let waited = now - at;
        self.stats.dequeues += 1;
        self.stats.sum_wait_us += waited.0;
        Some((item, waited))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stats(&self) -> QueueStats {
        self.stats
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter().map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextHop {
    Local,
    Forward(NodeId),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("node {dst} is unreachable from node {at}")]
pub struct Unreachable {
    pub at: NodeId,
    pub dst: NodeId,
}

/// Static hop-count shortest paths. Ties break toward the lowest node id.
#[derive(Debug, Clone, Default)]
pub struct RoutingTable {
    next: HashMap<(NodeId, NodeId), NodeId>,
}

impl RoutingTable {
    pub fn shortest_paths(adjacency: &BTreeMap<NodeId, BTreeSet<NodeId>>) -> Self {
        let mut next = HashMap::new();
        for &src in adjacency.keys() {
            // BFS from src, remembering the first hop used to reach each node
            let mut first_hop: BTreeMap<NodeId, NodeId> = BTreeMap::new();
            let mut frontier = VecDeque::new();
            for &n in adjacency.get(&src).into_iter().flatten() {
                if n != src && !first_hop.contains_key(&n) {
                    first_hop.insert(n, n);
                    frontier.push_back(n);
                }
            }
            while let Some(u) = frontier.pop_front() {
                let hop = first_hop[&u];
                for &v in adjacency.get(&u).into_iter().flatten() {
                    if v != src && !first_hop.contains_key(&v) {
                        first_hop.insert(v, hop);
                        frontier.push_back(v);
                    }
                }
            }
            for (dst, hop) in first_hop {
                next.insert((src, dst), hop);
            }
        }
        Self { next }
    }

    pub fn route_next_hop(&self, at: NodeId, dst: NodeId) -> Result<NextHop, Unreachable> {
        if at == dst {
            return Ok(NextHop::Local);
        }
        self.next
            .get(&(at, dst))
            .map(|&n| NextHop::Forward(n))
            .ok_or(Unreachable { at, dst })
    }

    pub fn path(&self, src: NodeId, dst: NodeId) -> Result<Vec<NodeId>, Unreachable> {
        let mut path = vec![src];
        let mut at = src;
        while let NextHop::Forward(n) = self.route_next_hop(at, dst)? {
            path.push(n);
            at = n;
        }
        Ok(path)
    }
}

/// Per-flow packet fate counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_queue: u64,
    pub dropped_mac: u64,
    pub dropped_routing: u64,
}

impl FlowCounters {
    pub fn accounted(&self) -> u64 {
        self.delivered + self.dropped_queue + self.dropped_mac + self.dropped_routing
    }

    pub fn dropped(&self) -> u64 {
        self.dropped_queue + self.dropped_mac + self.dropped_routing
    }
}
