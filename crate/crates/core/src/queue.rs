//! Bounded FIFO queues for data items and control signals.
//!
//! Every edge of a pipeline carries two queues: a [`DataQueue`] for the
//! items themselves and a parallel [`SignalQueue`] for out-of-band control
//! messages. Both are strictly capacity-bounded; the scheduler's fireability
//! check is what keeps them from overflowing during a run.

use std::collections::VecDeque;

use crate::region::CompositeRef;

/// Kind of a control signal travelling on a [`SignalQueue`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignalKind {
    /// Opens a region: all data items until the matching `RegionEnd` belong
    /// to the parent object carried in the signal payload.
    RegionBegin,
    /// Closes the region opened by the matching `RegionBegin`.
    RegionEnd,
    /// Application-defined signal identified by a small tag.
    UserDefined(u32),
}

impl SignalKind {
    pub fn is_region(&self) -> bool {
        matches!(self, SignalKind::RegionBegin | SignalKind::RegionEnd)
    }
}

/// A control message delivered precisely relative to the data stream.
///
/// `credit` counts the data items the receiver must consume before this
/// signal may be delivered. It is assigned once at emission and only ever
/// drained to zero by receiver-side credit transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signal {
    pub kind: SignalKind,
    pub credit: u64,
    /// Parent handle for region signals; `None` for user signals.
    pub payload: Option<CompositeRef>,
}

impl Signal {
    pub fn new(kind: SignalKind, payload: Option<CompositeRef>) -> Self {
        debug_assert!(
            !kind.is_region() || payload.is_some(),
            "region signals must carry a parent payload"
        );
        Signal {
            kind,
            credit: 0,
            payload,
        }
    }
}

/// Bounded FIFO of opaque data items.
#[derive(Debug, Clone)]
pub struct DataQueue<T> {
    capacity: usize,
    buffer: VecDeque<T>,
    total_enqueued: u64,
    total_dequeued: u64,
}

impl<T> DataQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "data queue capacity must be positive");
        DataQueue {
            capacity,
            buffer: VecDeque::with_capacity(capacity),
            total_enqueued: 0,
            total_dequeued: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn free(&self) -> usize {
        self.capacity - self.buffer.len()
    }

    /// Enqueues items in order until the queue is full; returns how many
    /// were accepted. Partial enqueue is the contract, not an error.
    pub fn enqueue_many(&mut self, items: impl IntoIterator<Item = T>) -> usize {
        let mut accepted = 0;
        for item in items {
            if self.buffer.len() == self.capacity {
                break;
            }
            self.buffer.push_back(item);
            accepted += 1;
        }
        self.total_enqueued += accepted as u64;
        debug_assert!(self.buffer.len() <= self.capacity);
        accepted
    }

    /// Enqueues a single item; returns it back if the queue is full.
    pub fn try_enqueue(&mut self, item: T) -> Result<(), T> {
        if self.buffer.len() == self.capacity {
            return Err(item);
        }
        self.buffer.push_back(item);
        self.total_enqueued += 1;
        Ok(())
    }

    pub fn dequeue(&mut self) -> Option<T> {
        let item = self.buffer.pop_front();
        if item.is_some() {
            self.total_dequeued += 1;
        }
        item
    }

    /// Removes the first `n` items, in FIFO order. Panics if fewer are queued.
    pub fn dequeue_many(&mut self, n: usize) -> impl Iterator<Item = T> + '_ {
        assert!(n <= self.buffer.len(), "dequeue beyond occupancy");
        self.total_dequeued += n as u64;
        self.buffer.drain(..n)
    }

    pub fn total_enqueued(&self) -> u64 {
        self.total_enqueued
    }

    pub fn total_dequeued(&self) -> u64 {
        self.total_dequeued
    }
}

/// Bounded FIFO of [`Signal`]s, parallel to one `DataQueue`.
#[derive(Debug, Clone)]
pub struct SignalQueue {
    capacity: usize,
    buffer: VecDeque<Signal>,
}

impl SignalQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "signal queue capacity must be positive");
        SignalQueue {
            capacity,
            buffer: VecDeque::with_capacity(capacity.min(64)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn free(&self) -> usize {
        self.capacity - self.buffer.len()
    }

    pub fn head(&self) -> Option<&Signal> {
        self.buffer.front()
    }

    pub fn head_mut(&mut self) -> Option<&mut Signal> {
        self.buffer.front_mut()
    }

    pub fn try_enqueue(&mut self, signal: Signal) -> Result<(), Signal> {
        if self.buffer.len() == self.capacity {
            return Err(signal);
        }
        self.buffer.push_back(signal);
        Ok(())
    }

    pub fn dequeue(&mut self) -> Option<Signal> {
        self.buffer.pop_front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Signal> {
        self.buffer.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn enqueue_respects_capacity() {
        let mut q = DataQueue::new(4);
        assert_eq!(q.enqueue_many([1, 2, 3]), 3);
        assert_eq!(q.enqueue_many([4, 5]), 1);
        assert_eq!(q.len(), 4);
        assert_eq!(q.enqueue_many([6]), 0);
    }

    #[test]
    fn partial_enqueue_at_occupancy_two() {
        let mut q = DataQueue::new(4);
        q.enqueue_many([1, 2]);
        assert_eq!(q.enqueue_many([3, 4, 5, 6, 7]), 2);
        assert_eq!(q.len(), 4);
    }

    #[test]
    fn dequeue_many_preserves_order() {
        let mut q = DataQueue::new(8);
        q.enqueue_many(0..6);
        let head: Vec<_> = q.dequeue_many(4).collect();
        assert_eq!(head, vec![0, 1, 2, 3]);
        assert_eq!(q.dequeue(), Some(4));
    }

    #[test]
    fn signal_queue_bounds() {
        let mut s = SignalQueue::new(2);
        assert!(s.try_enqueue(Signal::new(SignalKind::UserDefined(1), None)).is_ok());
        assert!(s.try_enqueue(Signal::new(SignalKind::UserDefined(2), None)).is_ok());
        assert!(s.try_enqueue(Signal::new(SignalKind::UserDefined(3), None)).is_err());
        assert_eq!(s.head().unwrap().kind, SignalKind::UserDefined(1));
    }

    proptest! {
        /// FIFO order: dequeue order equals enqueue order, whatever the
        /// interleaving of enqueues and dequeues.
        #[test]
        fn fifo_order(ops in proptest::collection::vec((any::<bool>(), 0u16..64), 1..200)) {
            let mut q = DataQueue::new(16);
            let mut model: std::collections::VecDeque<u16> = Default::default();
            for (push, v) in ops {
                if push {
                    if q.try_enqueue(v).is_ok() {
                        model.push_back(v);
                    }
                    prop_assert!(q.len() <= q.capacity());
                } else {
                    prop_assert_eq!(q.dequeue(), model.pop_front());
                }
            }
            // conservation: everything enqueued is dequeued or still buffered
            prop_assert_eq!(q.total_enqueued(), q.total_dequeued() + q.len() as u64);
        }
    }
}
