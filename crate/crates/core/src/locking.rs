//! Decentralized mutual exclusion over path-projection segments.
//!
//! Each node keeps a [`ClaimTable`]. A claim is broadcast to every alive peer;
//! each peer answers with the claims it owns (and whether they are granted).
//! A node grants its own claim once every peer answered, no known granted
//! claim overlaps it, and it precedes every overlapping outstanding claim
//! under the order (priority desc, projection id asc, claim tick asc).
//! Claims of the same requester never conflict with each other.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::EdgeId;
use crate::kernel::{NodeId, Tick};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub projection_id: u64,
    pub priority: u8,
    pub segments: BTreeSet<EdgeId>,
    pub requester: NodeId,
    pub claim_tick: Tick,
}

impl Claim {
    /// Total precedence order: higher priority first, then lower id, then
    /// earlier claim tick. `Ordering::Less` means `self` goes first.
    pub fn precedence(&self, other: &Claim) -> Ordering {
        other
            .priority
            .cmp(&self.priority)
            .then(self.projection_id.cmp(&other.projection_id))
            .then(self.claim_tick.cmp(&other.claim_tick))
    }

    pub fn conflicts_with(&self, other: &Claim) -> bool {
        self.requester != other.requester && !self.segments.is_disjoint(&other.segments)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LockMsg {
    /// A new claim announced by its requester.
    Request(Claim),
    /// Answer to a request: the responder's own claims and grant flags.
    Reply { for_claim: u64, claims: Vec<(Claim, bool)> },
    /// Segments released from a claim; the claim disappears once empty.
    Release { projection_id: u64, segments: BTreeSet<EdgeId> },
}

#[derive(Debug, Error, PartialEq)]
pub enum LockError {
    #[error("duplicate projection id {0}")]
    Duplicate(u64),
    #[error("claim {0} has no segments")]
    Empty(u64),
    #[error("projection {0} is not locked")]
    NotLocked(u64),
    #[error("unknown projection {0}")]
    Unknown(u64),
    #[error("segments {1:?} are not part of projection {0}")]
    NotOwned(u64, Vec<EdgeId>),
}

#[derive(Debug, Clone, PartialEq)]
struct OwnClaim {
    claim: Claim,
    granted: bool,
    awaiting: BTreeSet<NodeId>,
}

pub type Outgoing = Vec<(NodeId, LockMsg)>;

#[derive(Debug, Clone)]
pub struct ClaimTable {
    me: NodeId,
    peers: BTreeSet<NodeId>,
    own: BTreeMap<u64, OwnClaim>,
    known: BTreeMap<u64, (Claim, bool)>,
}

impl ClaimTable {
    pub fn new(me: NodeId) -> Self {
        ClaimTable { me, peers: BTreeSet::new(), own: BTreeMap::new(), known: BTreeMap::new() }
    }

    pub fn node(&self) -> &NodeId {
        &self.me
    }

    pub fn peers(&self) -> &BTreeSet<NodeId> {
        &self.peers
    }

    /// Own claims not yet granted.
    pub fn outstanding(&self) -> impl Iterator<Item = &Claim> {
        self.own.values().filter(|c| !c.granted).map(|c| &c.claim)
    }

    /// Own granted claims.
    pub fn granted(&self) -> impl Iterator<Item = &Claim> {
        self.own.values().filter(|c| c.granted).map(|c| &c.claim)
    }

    pub fn is_granted(&self, projection_id: u64) -> bool {
        self.own.get(&projection_id).is_some_and(|c| c.granted)
    }

    pub fn own_claim(&self, projection_id: u64) -> Option<&Claim> {
        self.own.get(&projection_id).map(|c| &c.claim)
    }

    /// Remote claims this node has heard of, with the last known grant flag.
    pub fn known(&self) -> impl Iterator<Item = (&Claim, bool)> {
        self.known.values().map(|(c, g)| (c, *g))
    }

    pub fn submit(&mut self, claim: Claim) -> Result<(Outgoing, Vec<u64>), LockError> {
        let id = claim.projection_id;
        if self.own.contains_key(&id) || self.known.contains_key(&id) {
            return Err(LockError::Duplicate(id));
        }
        if claim.segments.is_empty() {
            return Err(LockError::Empty(id));
        }
        let out = self.peers.iter().map(|p| (p.clone(), LockMsg::Request(claim.clone()))).collect();
        self.own.insert(id, OwnClaim { claim, granted: false, awaiting: self.peers.clone() });
        Ok((out, self.resolve()))
    }

    pub fn handle(&mut self, from: &NodeId, msg: LockMsg) -> (Outgoing, Vec<u64>) {
        let mut out = Vec::new();
        match msg {
            LockMsg::Request(claim) => {
                let id = claim.projection_id;
                if !self.own.contains_key(&id) {
                    self.known.insert(id, (claim, false));
                }
                let claims = self.own.values().map(|c| (c.claim.clone(), c.granted)).collect();
                out.push((from.clone(), LockMsg::Reply { for_claim: id, claims }));
            }
            LockMsg::Reply { for_claim, claims } => {
                for (claim, granted) in claims {
                    if claim.requester != self.me {
                        self.known.insert(claim.projection_id, (claim, granted));
                    }
                }
                if let Some(own) = self.own.get_mut(&for_claim) {
                    own.awaiting.remove(from);
                }
            }
            LockMsg::Release { projection_id, segments } => {
                if let Some((claim, _)) = self.known.get_mut(&projection_id) {
                    claim.segments.retain(|s| !segments.contains(s));
                    if claim.segments.is_empty() || segments.is_empty() {
                        self.known.remove(&projection_id);
                    }
                }
            }
        }
        (out, self.resolve())
    }

    pub fn peer_joined(&mut self, peer: NodeId) {
        if peer != self.me {
            self.peers.insert(peer);
        }
    }

    /// Forget a departed peer: its claims vanish and nobody waits for it.
    pub fn peer_left(&mut self, peer: &NodeId) -> Vec<u64> {
        self.peers.remove(peer);
        self.known.retain(|_, (c, _)| &c.requester != peer);
        for own in self.own.values_mut() {
            own.awaiting.remove(peer);
        }
        self.resolve()
    }

    /// Grant every own claim that is now grantable; returns the new grants.
    pub fn resolve(&mut self) -> Vec<u64> {
        let mut newly = Vec::new();
        let ids: Vec<u64> = self.own.keys().copied().collect();
        for id in ids {
            let own = &self.own[&id];
            if own.granted || !own.awaiting.is_empty() {
                continue;
            }
            let blocked = self.known.values().any(|(other, granted)| {
                own.claim.conflicts_with(other)
                    && (*granted || other.precedence(&own.claim) == Ordering::Less)
            });
            if !blocked {
                if let Some(o) = self.own.get_mut(&id) {
                    o.granted = true;
                }
                newly.push(id);
            }
        }
        newly
    }

    /// Release `segments` of a granted claim (all of them empties the claim).
    pub fn clear_segments(&mut self, projection_id: u64, segments: &BTreeSet<EdgeId>) -> Result<Outgoing, LockError> {
        let own = self.own.get_mut(&projection_id).ok_or(LockError::Unknown(projection_id))?;
        if !own.granted {
            return Err(LockError::NotLocked(projection_id));
        }
        let foreign: Vec<EdgeId> = segments.difference(&own.claim.segments).copied().collect();
        if !foreign.is_empty() {
            return Err(LockError::NotOwned(projection_id, foreign));
        }
        if segments.is_empty() {
            return Ok(Vec::new());
        }
        own.claim.segments.retain(|s| !segments.contains(s));
        if own.claim.segments.is_empty() {
            self.own.remove(&projection_id);
        }
        Ok(self.broadcast_release(projection_id, segments.clone()))
    }

    /// Drop a claim entirely, granted or not.
    pub fn withdraw(&mut self, projection_id: u64) -> Result<Outgoing, LockError> {
        self.own.remove(&projection_id).ok_or(LockError::Unknown(projection_id))?;
        Ok(self.broadcast_release(projection_id, BTreeSet::new()))
    }

    fn broadcast_release(&self, projection_id: u64, segments: BTreeSet<EdgeId>) -> Outgoing {
        self.peers
            .iter()
            .map(|p| (p.clone(), LockMsg::Release { projection_id, segments: segments.clone() }))
            .collect()
    }
}

/// Pairs of granted claims (across tables) that share a segment.
pub fn safety_violations<'a>(tables: impl IntoIterator<Item = &'a ClaimTable>) -> Vec<(u64, u64)> {
    let granted: Vec<&Claim> = tables.into_iter().flat_map(|t| t.granted()).collect();
    let mut bad = Vec::new();
    for (i, a) in granted.iter().enumerate() {
        for b in &granted[i + 1..] {
            if !a.segments.is_disjoint(&b.segments) {
                bad.push((a.projection_id, b.projection_id));
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn claim(id: u64, prio: u8, segs: &[u32], node: &str) -> Claim {
        Claim {
            projection_id: id,
            priority: prio,
            segments: segs.iter().map(|s| EdgeId(*s)).collect(),
            requester: node.into(),
            claim_tick: Tick(0),
        }
    }

    /// Deliver messages FIFO until quiet.
    fn pump(tables: &mut BTreeMap<NodeId, ClaimTable>, mut queue: Vec<(NodeId, NodeId, LockMsg)>) -> Vec<u64> {
        let mut grants = Vec::new();
        while !queue.is_empty() {
            let (from, to, msg) = queue.remove(0);
            let t = tables.get_mut(&to).unwrap();
            let (out, g) = t.handle(&from, msg);
            grants.extend(g);
            queue.extend(out.into_iter().map(|(dst, m)| (to.clone(), dst, m)));
        }
        grants
    }

    fn net(names: &[&str]) -> BTreeMap<NodeId, ClaimTable> {
        let mut tables = BTreeMap::new();
        for n in names {
            let mut t = ClaimTable::new((*n).into());
            for p in names {
                t.peer_joined((*p).into());
            }
            tables.insert(NodeId::from(*n), t);
        }
        tables
    }

    fn submit(tables: &mut BTreeMap<NodeId, ClaimTable>, c: Claim) -> (Vec<(NodeId, NodeId, LockMsg)>, Vec<u64>) {
        let node = c.requester.clone();
        let (out, g) = tables.get_mut(&node).unwrap().submit(c).unwrap();
        (out.into_iter().map(|(d, m)| (node.clone(), d, m)).collect(), g)
    }

    #[test]
    fn lone_claim_granted_after_one_round() {
        let mut tables = net(&["a", "b"]);
        let (q, g) = submit(&mut tables, claim(1, 3, &[1], "a"));
        assert!(g.is_empty());
        assert_eq!(pump(&mut tables, q), vec![1]);
    }

    #[test]
    fn disjoint_claims_both_granted() {
        let mut tables = net(&["a", "b"]);
        let (mut q, _) = submit(&mut tables, claim(1, 3, &[1], "a"));
        q.extend(submit(&mut tables, claim(2, 3, &[2], "b")).0);
        let mut g = pump(&mut tables, q);
        g.sort();
        assert_eq!(g, vec![1, 2]);
    }

    #[test]
    fn lower_id_wins_on_equal_priority() {
        let mut tables = net(&["a", "b"]);
        let (mut q, _) = submit(&mut tables, claim(9, 3, &[1], "b"));
        q.extend(submit(&mut tables, claim(5, 3, &[1], "a")).0);
        assert_eq!(pump(&mut tables, q), vec![5]);
        assert!(!tables[&NodeId::from("b")].is_granted(9));
        let out = tables.get_mut(&NodeId::from("a")).unwrap().clear_segments(5, &[EdgeId(1)].into()).unwrap();
        let q = out.into_iter().map(|(d, m)| (NodeId::from("a"), d, m)).collect();
        assert_eq!(pump(&mut tables, q), vec![9]);
    }

    #[test]
    fn higher_priority_wins() {
        let mut tables = net(&["a", "b"]);
        let (mut q, _) = submit(&mut tables, claim(1, 1, &[4], "a"));
        q.extend(submit(&mut tables, claim(2, 5, &[4], "b")).0);
        assert_eq!(pump(&mut tables, q), vec![2]);
    }

    #[test]
    fn granted_claim_blocks_late_high_priority() {
        let mut tables = net(&["a", "b"]);
        let (q, _) = submit(&mut tables, claim(1, 1, &[4], "a"));
        assert_eq!(pump(&mut tables, q), vec![1]);
        let (q, _) = submit(&mut tables, claim(2, 5, &[4], "b"));
        assert!(pump(&mut tables, q).is_empty());
        assert!(safety_violations(tables.values()).is_empty());
    }

    #[test]
    fn clear_errors() {
        let mut t = ClaimTable::new("a".into());
        t.peer_joined("b".into());
        t.submit(claim(1, 1, &[1, 2], "a")).unwrap();
        assert_eq!(t.clear_segments(1, &[EdgeId(1)].into()), Err(LockError::NotLocked(1)));
        t.peer_left(&"b".into());
        t.resolve();
        assert!(t.is_granted(1));
        assert!(t.clear_segments(1, &BTreeSet::new()).unwrap().is_empty());
        assert!(matches!(t.clear_segments(1, &[EdgeId(7)].into()), Err(LockError::NotOwned(1, _))));
        t.clear_segments(1, &[EdgeId(1), EdgeId(2)].into()).unwrap();
        assert_eq!(t.granted().count(), 0);
        assert_eq!(t.submit(claim(3, 1, &[], "a")).unwrap_err(), LockError::Empty(3));
    }

    #[test]
    fn duplicate_rejected() {
        let mut t = ClaimTable::new("a".into());
        t.submit(claim(1, 1, &[1], "a")).unwrap();
        assert_eq!(t.submit(claim(1, 1, &[2], "a")).unwrap_err(), LockError::Duplicate(1));
    }

    #[test]
    fn departed_peer_unblocks() {
        let mut tables = net(&["a", "b"]);
        let (q, _) = submit(&mut tables, claim(1, 1, &[4], "b"));
        pump(&mut tables, q);
        let (_q, _) = submit(&mut tables, claim(2, 1, &[4], "a"));
        // b leaves before answering; its granted claim goes with it.
        let g = tables.get_mut(&NodeId::from("a")).unwrap().peer_left(&"b".into());
        assert_eq!(g, vec![2]);
    }
}
