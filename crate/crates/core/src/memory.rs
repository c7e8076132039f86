//! Quantum memory management (QMMU): per-interface memory banks with
//! oldest-first eviction on overflow.

use std::collections::BTreeMap;

use crate::ids::DatagramKey;
use crate::link::LinkLevelLabel;
use crate::physics::WernerParam;
use crate::sim::SimTime;

/// What a stored qubit is currently used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRole {
    /// Far half of a fresh link-level pair; the q-datagram that owns it is
    /// still on its way over the classical channel.
    Awaiting,
    /// Source end node's half of an in-flight q-datagram.
    Source(DatagramKey),
    /// Half of a q-datagram buffered at a switch, waiting for the next pair.
    Buffered(DatagramKey),
    /// Pair generated in continuous mode before anyone asked for it.
    Cached,
}

impl SlotRole {
    pub fn datagram(self) -> Option<DatagramKey> {
        match self {
            SlotRole::Source(k) | SlotRole::Buffered(k) => Some(k),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoredQubit {
    pub label: LinkLevelLabel,
    /// Werner parameter of the pair at generation, before memory noise.
    pub werner: WernerParam,
    /// When this half was written into memory.
    pub birth: SimTime,
    /// Age reference for eviction: birth, or arrival of the q-datagram.
    pub buffering_start: SimTime,
    pub role: SlotRole,
    order: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("label {0} already occupies a slot")]
    DuplicateLabel(LinkLevelLabel),
    #[error("no slot holds label {0}")]
    UnknownLabel(LinkLevelLabel),
}

/// Memory qubits attached to one interface.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    slots: BTreeMap<LinkLevelLabel, StoredQubit>,
    next_order: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory bank needs at least one qubit");
        MemoryBank {
            capacity,
            slots: BTreeMap::new(),
            next_order: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    pub fn get(&self, label: &LinkLevelLabel) -> Option<&StoredQubit> {
        self.slots.get(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredQubit> {
        self.slots.values()
    }

    pub fn count_role(&self, pred: impl Fn(SlotRole) -> bool) -> usize {
        self.slots.values().filter(|s| pred(s.role)).count()
    }

    /// Which occupant gives way when the bank is full: the oldest cached
    /// pair, else the q-datagram with the earliest buffering start, else the
    /// oldest awaiting half.
    pub fn eviction_victim(&self) -> Option<LinkLevelLabel> {
        let oldest = |pred: fn(SlotRole) -> bool| {
            self.slots
                .values()
                .filter(|s| pred(s.role))
                .min_by(|a, b| {
                    a.buffering_start
                        .cmp(&b.buffering_start)
                        .then(a.order.cmp(&b.order))
                })
                .map(|s| s.label)
        };
        oldest(|r| r == SlotRole::Cached)
            .or_else(|| oldest(|r| r.datagram().is_some()))
            .or_else(|| oldest(|r| r == SlotRole::Awaiting))
    }

    /// Store a qubit, evicting per [`Self::eviction_victim`] if the bank is full.
    /// Returns the evicted occupant, if any.
    pub fn insert(
        &mut self,
        label: LinkLevelLabel,
        werner: WernerParam,
        birth: SimTime,
        role: SlotRole,
    ) -> Result<Option<StoredQubit>, MemoryError> {
        if self.slots.contains_key(&label) {
            return Err(MemoryError::DuplicateLabel(label));
        }
        let evicted = if self.is_full() {
            let victim = self.eviction_victim().expect("full bank has occupants");
            self.slots.remove(&victim)
        } else {
            None
        };
        let order = self.next_order;
        self.next_order += 1;
        self.slots.insert(
            label,
            StoredQubit {
                label,
                werner,
                birth,
                buffering_start: birth,
                role,
                order,
            },
        );
        Ok(evicted)
    }

    pub fn remove(&mut self, label: &LinkLevelLabel) -> Option<StoredQubit> {
        self.slots.remove(label)
    }

    /// Change what a slot is used for and restart its age clock.
    pub fn assign(
        &mut self,
        label: &LinkLevelLabel,
        role: SlotRole,
        buffering_start: SimTime,
    ) -> Result<(), MemoryError> {
        let slot = self
            .slots
            .get_mut(label)
            .ok_or(MemoryError::UnknownLabel(*label))?;
        slot.role = role;
        slot.buffering_start = buffering_start;
        Ok(())
    }
}
