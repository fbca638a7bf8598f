use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

pub type TaskId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Index into the simulation's request table.
    Arrival(usize),
    TaskComplete(TaskId),
    QuantumExpiry { instance: usize, epoch: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time_s: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time_s
            .total_cmp(&other.time_s)
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-queue over `(time_s, seq)`. Sequence numbers come from one counter
/// shared with task submission, so ordering at equal times follows
/// enqueue order across events and tasks alike.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<std::cmp::Reverse<SimEvent>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Hands out the next sequence number without enqueueing anything.
    pub fn next_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub fn push(&mut self, time_s: f64, kind: EventKind) -> u64 {
        let seq = self.next_seq();
        self.heap.push(std::cmp::Reverse(SimEvent { time_s, seq, kind }));
        seq
    }

    pub fn peek(&self) -> Option<&SimEvent> {
        self.heap.peek().map(|r| &r.0)
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|r| r.0)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_then_seq() {
        let mut q = EventQueue::new();
        q.push(2.0, EventKind::Arrival(0));
        q.push(1.0, EventKind::Arrival(1));
        q.push(1.0, EventKind::TaskComplete(7));
        q.push(0.5, EventKind::Arrival(2));
        let order: Vec<EventKind> = std::iter::from_fn(|| q.pop()).map(|e| e.kind).collect();
        assert_eq!(
            order,
            vec![
                EventKind::Arrival(2),
                EventKind::Arrival(1),
                EventKind::TaskComplete(7),
                EventKind::Arrival(0),
            ]
        );
    }

    #[test]
    fn seq_is_strictly_increasing() {
        let mut q = EventQueue::new();
        let a = q.push(0.0, EventKind::Arrival(0));
        let b = q.next_seq();
        let c = q.push(0.0, EventKind::Arrival(1));
        assert!(a < b && b < c);
    }
}
