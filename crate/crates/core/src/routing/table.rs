use std::collections::BTreeMap;

use crate::connection::ConnectionId;
use crate::engine::SimTime;
use crate::world::NodeId;

/// Routing-table key. Plain AODV keeps one route per destination; the
/// multi-connection variant keeps one per (destination, connection) so each
/// connection can ride its own admitted path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RouteKey {
    pub dest: NodeId,
    pub conn: Option<ConnectionId>,
}

impl RouteKey {
    pub fn new(dest: NodeId, conn: Option<ConnectionId>) -> Self {
        RouteKey { dest, conn }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteEntry {
    pub dest: NodeId,
    pub next_hop: NodeId,
    pub hop_count: u32,
    pub dest_seq_no: u32,
    pub expires_at: SimTime,
    pub valid: bool,
    /// Upstream neighbours that forward through this entry; they are told
    /// when it breaks.
    pub precursors: Vec<NodeId>,
    /// Last time data went through this entry (or when it was installed).
    pub last_used: SimTime,
}

impl RouteEntry {
    pub fn usable(&self, now: SimTime) -> bool {
        self.valid && now <= self.expires_at
    }

    /// Carried data within the last `window` seconds.
    pub fn active(&self, now: SimTime, window: f64) -> bool {
        self.usable(now) && now - self.last_used <= window
    }
}

#[derive(Clone, Debug, Default)]
pub struct RouteTable {
    entries: BTreeMap<RouteKey, RouteEntry>,
}

impl RouteTable {
    pub fn get(&self, key: &RouteKey) -> Option<&RouteEntry> {
        self.entries.get(key)
    }

    /// A valid, unexpired entry.
    pub fn lookup(&self, key: &RouteKey, now: SimTime) -> Option<&RouteEntry> {
        self.entries.get(key).filter(|e| e.usable(now))
    }

    /// Install `cand` if it is fresher than what we hold: a higher sequence
    /// number, or the same one with fewer hops. Stale or invalid entries are
    /// replaced by anything at least as fresh. Returns whether it was taken.
    pub fn offer(&mut self, key: RouteKey, cand: RouteEntry, now: SimTime) -> bool {
        debug_assert!(cand.hop_count >= 1);
        let take = match self.entries.get(&key) {
            None => true,
            Some(old) if !old.usable(now) => cand.dest_seq_no >= old.dest_seq_no,
            Some(old) => {
                cand.dest_seq_no > old.dest_seq_no
                    || (cand.dest_seq_no == old.dest_seq_no && cand.hop_count < old.hop_count)
            }
        };
        if take {
            let precursors = match self.entries.get(&key) {
                Some(old) if old.next_hop == cand.next_hop && old.valid => old.precursors.clone(),
                _ => cand.precursors.clone(),
            };
            self.entries.insert(key, RouteEntry { precursors, ..cand });
        }
        take
    }

    /// Extend a usable entry's lifetime to `until`.
    pub fn refresh(&mut self, key: &RouteKey, now: SimTime, until: SimTime) {
        if let Some(e) = self.entries.get_mut(key) {
            if e.usable(now) && e.expires_at < until {
                e.expires_at = until;
            }
        }
        self.touch(key, now);
    }

    /// Mark a usable entry as just used.
    pub fn touch(&mut self, key: &RouteKey, now: SimTime) {
        if let Some(e) = self.entries.get_mut(key) {
            if e.usable(now) {
                e.last_used = now;
            }
        }
    }

    pub fn add_precursor(&mut self, key: &RouteKey, node: NodeId) {
        if let Some(e) = self.entries.get_mut(key) {
            if !e.precursors.contains(&node) {
                e.precursors.push(node);
            }
        }
    }

    pub fn invalidate(&mut self, key: &RouteKey) -> Option<Vec<NodeId>> {
        let e = self.entries.get_mut(key)?;
        if !e.valid {
            return None;
        }
        e.valid = false;
        Some(std::mem::take(&mut e.precursors))
    }

    /// Invalidate every valid entry whose next hop is `via`; returns the
    /// affected keys with their precursor lists.
    pub fn invalidate_via(&mut self, via: NodeId) -> Vec<(RouteKey, Vec<NodeId>)> {
        let mut out = Vec::new();
        for (k, e) in self.entries.iter_mut() {
            if e.valid && e.next_hop == via {
                e.valid = false;
                out.push((*k, std::mem::take(&mut e.precursors)));
            }
        }
        out
    }

    /// Distinct next hops of entries that carried data within `window`.
    pub fn active_next_hops(&self, now: SimTime, window: f64) -> Vec<NodeId> {
        let mut hops: Vec<NodeId> = self
            .entries
            .values()
            .filter(|e| e.active(now, window))
            .map(|e| e.next_hop)
            .collect();
        hops.sort();
        hops.dedup();
        hops
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RouteKey, &RouteEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrite an entry unconditionally (fault-injection tests).
    pub fn force(&mut self, key: RouteKey, entry: RouteEntry) {
        self.entries.insert(key, entry);
    }
}
