//! Synchronous, lossless message exchange between graph neighbors.

use std::sync::Mutex;

use super::Topology;
use crate::error::{Error, Result};

/// One read recorded by a [`Mailbox`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub reader: usize,
    pub sender: usize,
}

/// Per-round message slots, one per node. Reads are only allowed between
/// neighbors, so a node can never observe data it would not receive over
/// the graph.
#[derive(Debug)]
pub struct Mailbox<'a, T> {
    topology: &'a Topology,
    slots: Vec<Option<T>>,
    log: Option<Mutex<Vec<Access>>>,
}

impl<'a, T> Mailbox<'a, T> {
    pub fn new(topology: &'a Topology) -> Self {
        Self {
            topology,
            slots: (0..topology.node_count()).map(|_| None).collect(),
            log: None,
        }
    }

    /// Like [`Mailbox::new`], recording every successful read.
    pub fn with_log(topology: &'a Topology) -> Self {
        Self {
            log: Some(Mutex::new(Vec::new())),
            ..Self::new(topology)
        }
    }

    pub fn post(&mut self, sender: usize, message: T) {
        self.slots[sender] = Some(message);
    }

    pub fn read(&self, reader: usize, sender: usize) -> Result<&T> {
        if !self.topology.is_neighbor(reader, sender) {
            return Err(Error::Internal(format!("node {reader} attempted to read from non-neighbor {sender}")));
        }
        let msg = self.slots[sender]
            .as_ref()
            .ok_or_else(|| Error::Internal(format!("node {sender} has not posted this round")))?;
        if let Some(log) = &self.log {
            log.lock().expect("access log poisoned").push(Access { reader, sender });
        }
        Ok(msg)
    }

    /// Messages of every neighbor of `reader`, ascending by sender id.
    pub fn gather(&self, reader: usize) -> Result<Vec<(usize, &T)>> {
        self.topology
            .neighbors(reader)
            .iter()
            .map(|&j| self.read(reader, j).map(|m| (j, m)))
            .collect()
    }

    pub fn take_log(&mut self) -> Vec<Access> {
        self.log
            .as_mut()
            .map(|l| std::mem::take(l.get_mut().expect("access log poisoned")))
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_neighbor_reads_rejected() {
        let ring = Topology::ring(5).unwrap();
        let mut mb = Mailbox::with_log(&ring);
        for m in 0..5 {
            mb.post(m, m * 10);
        }
        assert_eq!(*mb.read(0, 4).unwrap(), 40);
        assert!(matches!(mb.read(0, 2), Err(Error::Internal(_))));
        let got: Vec<_> = mb.gather(2).unwrap().into_iter().map(|(j, &v)| (j, v)).collect();
        assert_eq!(got, vec![(1, 10), (2, 20), (3, 30)]);
        let log = mb.take_log();
        assert_eq!(log.len(), 4);
        assert!(log.iter().all(|a| ring.is_neighbor(a.reader, a.sender)));
    }

    #[test]
    fn unposted_slot_is_an_error() {
        let t = Topology::complete(2).unwrap();
        let mb: Mailbox<'_, u8> = Mailbox::new(&t);
        assert!(mb.read(0, 1).is_err());
    }
}
