//! Prefix tree of candidate sets.
//!
//! Every distinct candidate user set is stored once, as the root-to-node
//! path of ascending user ids. Nodes that terminate a set referenced by at
//! least one estimation carry a [`PathPayload`]; the remaining nodes are
//! interior elements of longer paths. A per-user occurrence chain indexes
//! every node holding a given user, and each node caches the smallest
//! estimation value linked anywhere in its subtree.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rustc_hash::FxHashMap;

use crate::influence::EdgeStore;
use crate::sieve::{sieve_bar, EstimationId, Estimations};
use crate::types::{intersect_sorted, QueryId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    fn index(self) -> usize {
        self.0 as usize
    }
}

/// Data of a candidate set stored at the terminal node of its path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPayload {
    /// `f(S)` in raw units.
    pub influence: f64,
    /// Marginal gain of the in-flight target user, tagged with the action
    /// sequence number it was computed for.
    pub marg_cache: Option<(u64, f64)>,
    /// `Q_S`, ascending.
    pub related: Vec<QueryId>,
    pub estimations: Vec<EstimationId>,
}

impl PathPayload {
    pub fn new(influence: f64, related: Vec<QueryId>) -> Self {
        PathPayload {
            influence,
            marg_cache: None,
            related,
            estimations: Vec::new(),
        }
    }

    /// Cached marginal gain, if it was computed during action `seq`.
    pub fn cached_gain(&self, seq: u64) -> Option<f64> {
        self.marg_cache.and_then(|(s, g)| (s == seq).then_some(g))
    }
}

#[derive(Debug, Clone)]
struct Node {
    user: UserId,
    parent: Option<NodeId>,
    children: BTreeMap<UserId, NodeId>,
    prev_occurrence: Option<NodeId>,
    next_occurrence: Option<NodeId>,
    payload: Option<PathPayload>,
    e_min: f64,
    depth: usize,
    alive: bool,
}

impl Node {
    fn new(user: UserId, parent: Option<NodeId>, depth: usize) -> Self {
        Node {
            user,
            parent,
            children: BTreeMap::new(),
            prev_occurrence: None,
            next_occurrence: None,
            payload: None,
            e_min: f64::INFINITY,
            depth,
            alive: true,
        }
    }
}

/// Which subtree pruning conditions the marginal DFS applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pruning {
    /// Skip the subtree under a node holding the target user.
    pub first: bool,
    /// Skip super-paths of a path sharing no subscription with the target.
    pub second: bool,
    /// Skip a subtree whose smallest estimation cannot admit the target.
    pub third: bool,
}

impl Pruning {
    pub const NONE: Pruning = Pruning {
        first: false,
        second: false,
        third: false,
    };
}

impl Default for Pruning {
    fn default() -> Self {
        // The third condition can reject users a deeper candidate set would
        // accept, so it stays opt-in.
        Pruning {
            first: true,
            second: true,
            third: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PruneCounts {
    pub first: u64,
    pub second: u64,
    pub third: u64,
}

/// Related-subscription lookup for users already present in the tree.
pub trait RelatedLookup {
    fn related(&self, user: UserId) -> &[QueryId];
}

/// Input of one marginal-gain sweep.
#[derive(Debug, Clone, Copy)]
pub struct MarginalQuery<'a> {
    pub target: UserId,
    /// `Q_{u_r}`, ascending and nonempty.
    pub related: &'a [QueryId],
    pub k: usize,
    pub seq: u64,
    pub pruning: Pruning,
}

/// A payload-bearing path whose marginal gain was computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub node: NodeId,
    pub gain: f64,
}

#[derive(Debug, Clone)]
pub struct PrefixTree {
    nodes: Vec<Node>,
    free: Vec<NodeId>,
    user_index: FxHashMap<UserId, NodeId>,
    dirty: Vec<NodeId>,
    marginal_evaluations: u64,
}

struct Sweep<'a, R> {
    query: MarginalQuery<'a>,
    lookup: &'a R,
    edges: &'a EdgeStore,
    estimations: &'a Estimations,
    target_edges: Vec<(UserId, f64)>,
    target_influence: f64,
    cover: Vec<f64>,
    visits: Vec<Visit>,
    prunes: PruneCounts,
    evaluations: u64,
}

impl PrefixTree {
    /// A tree holding only the empty path, related to `all_queries`.
    pub fn new(all_queries: Vec<QueryId>) -> Self {
        let mut root = Node::new(UserId(u64::MAX), None, 0);
        root.payload = Some(PathPayload::new(0.0, all_queries));
        PrefixTree {
            nodes: vec![root],
            free: Vec::new(),
            user_index: FxHashMap::default(),
            dirty: Vec::new(),
            marginal_evaluations: 0,
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    /// Marginal-gain evaluations performed by [`PrefixTree::dfs_marginals`].
    pub fn marginal_evaluations(&self) -> u64 {
        self.marginal_evaluations
    }

    fn node(&self, id: NodeId) -> &Node {
        let node = &self.nodes[id.index()];
        debug_assert!(node.alive, "access to erased node {id:?}");
        node
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id.index()]
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.nodes.get(id.index()).is_some_and(|n| n.alive)
    }

    pub fn user(&self, id: NodeId) -> Option<UserId> {
        (id != NodeId::ROOT).then(|| self.node(id).user)
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.node(id).parent
    }

    pub fn depth(&self, id: NodeId) -> usize {
        self.node(id).depth
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = (UserId, NodeId)> + '_ {
        self.node(id).children.iter().map(|(&u, &c)| (u, c))
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.node(id).children.is_empty()
    }

    pub fn e_min(&self, id: NodeId) -> f64 {
        self.node(id).e_min
    }

    pub fn payload(&self, id: NodeId) -> Option<&PathPayload> {
        self.node(id).payload.as_ref()
    }

    pub fn payload_mut(&mut self, id: NodeId) -> Option<&mut PathPayload> {
        self.node_mut(id).payload.as_mut()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    /// Ascending user ids of the path ending at `id`.
    pub fn path_of(&self, mut id: NodeId) -> Vec<UserId> {
        let mut users = Vec::with_capacity(self.node(id).depth);
        while id != NodeId::ROOT {
            let node = self.node(id);
            users.push(node.user);
            id = node.parent.expect("non-root node has a parent");
        }
        users.reverse();
        users
    }

    /// Payload-bearing nodes in depth-first ascending order.
    pub fn payload_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![NodeId::ROOT];
        while let Some(id) = stack.pop() {
            let node = self.node(id);
            if node.payload.is_some() {
                out.push(id);
            }
            stack.extend(node.children.values().rev().copied());
        }
        out
    }

    /// Nodes holding `user`, following the occurrence chain.
    pub fn occurrences(&self, user: UserId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cursor = self.user_index.get(&user).copied();
        while let Some(id) = cursor {
            out.push(id);
            cursor = self.node(id).next_occurrence;
        }
        out
    }

    pub fn indexed_users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.user_index.keys().copied()
    }

    /// Node of the ascending path `users` below `start`, creating the
    /// missing suffix as a new branch.
    pub fn find_path(&mut self, start: NodeId, users: &[UserId]) -> NodeId {
        debug_assert!(users.windows(2).all(|w| w[0] < w[1]), "path must be ascending");
        let mut current = start;
        for (pos, &user) in users.iter().enumerate() {
            if let Some(&child) = self.node(current).children.get(&user) {
                current = child;
                continue;
            }
            for &rest in &users[pos..] {
                current = self.insert_child(current, rest);
            }
            return current;
        }
        current
    }

    fn insert_child(&mut self, parent: NodeId, user: UserId) -> NodeId {
        let depth = self.node(parent).depth + 1;
        let node = Node::new(user, Some(parent), depth);
        let id = match self.free.pop() {
            Some(id) => {
                self.nodes[id.index()] = node;
                id
            }
            None => {
                self.nodes.push(node);
                NodeId(self.nodes.len() as u32 - 1)
            }
        };
        self.node_mut(parent).children.insert(user, id);
        if let Some(head) = self.user_index.insert(user, id) {
            self.node_mut(id).next_occurrence = Some(head);
            self.node_mut(head).prev_occurrence = Some(id);
        }
        id
    }

    fn erase_node(&mut self, id: NodeId) {
        let (user, parent, prev, next) = {
            let node = self.node(id);
            debug_assert!(node.children.is_empty() && node.payload.is_none());
            (node.user, node.parent, node.prev_occurrence, node.next_occurrence)
        };
        let parent = parent.expect("root is never erased");
        self.node_mut(parent).children.remove(&user);
        match prev {
            Some(p) => self.node_mut(p).next_occurrence = next,
            None => match next {
                Some(n) => {
                    self.user_index.insert(user, n);
                }
                None => {
                    self.user_index.remove(&user);
                }
            },
        }
        if let Some(n) = next {
            self.node_mut(n).prev_occurrence = prev;
        }
        let node = self.node_mut(id);
        node.alive = false;
        node.prev_occurrence = None;
        node.next_occurrence = None;
        self.free.push(id);
        self.dirty.push(parent);
    }

    /// Gives `id` a payload unless it already has one. Returns whether a new
    /// payload was created.
    pub fn ensure_payload(&mut self, id: NodeId, influence: f64, related: Vec<QueryId>) -> bool {
        let node = self.node_mut(id);
        if node.payload.is_some() {
            return false;
        }
        node.payload = Some(PathPayload::new(influence, related));
        true
    }

    pub fn link_estimation(&mut self, id: NodeId, estimation: EstimationId) {
        self.node_mut(id)
            .payload
            .as_mut()
            .expect("estimations link to payload-bearing nodes")
            .estimations
            .push(estimation);
        self.dirty.push(id);
    }

    pub fn unlink_estimation(&mut self, id: NodeId, estimation: EstimationId) {
        let payload = self
            .node_mut(id)
            .payload
            .as_mut()
            .expect("estimation linked to a payload-bearing node");
        let pos = payload
            .estimations
            .iter()
            .position(|&e| e == estimation)
            .expect("estimation linked to this path");
        payload.estimations.swap_remove(pos);
        self.dirty.push(id);
    }

    /// Drops payloads left without estimations and erases dead leaves
    /// upward, stopping at a payload-bearing or branching node or the root.
    pub fn clear(&mut self, candidates: &[NodeId]) -> usize {
        let mut erased = 0;
        for &id in candidates {
            if id == NodeId::ROOT || !self.is_alive(id) {
                continue;
            }
            let node = self.node_mut(id);
            if node.payload.as_ref().is_some_and(|p| p.estimations.is_empty()) {
                node.payload = None;
                self.dirty.push(id);
            }
            let mut cursor = id;
            while cursor != NodeId::ROOT {
                let node = self.node(cursor);
                if node.payload.is_some() || !node.children.is_empty() {
                    break;
                }
                let parent = node.parent.expect("non-root node has a parent");
                self.erase_node(cursor);
                erased += 1;
                cursor = parent;
            }
        }
        erased
    }

    fn own_minimum(&self, id: NodeId, estimations: &Estimations) -> f64 {
        self.node(id).payload.as_ref().map_or(f64::INFINITY, |p| {
            p.estimations
                .iter()
                .map(|&e| estimations.get(e).value)
                .fold(f64::INFINITY, f64::min)
        })
    }

    fn compute_e_min(&self, id: NodeId, estimations: &Estimations) -> f64 {
        let node = self.node(id);
        node.children
            .values()
            .map(|&c| self.node(c).e_min)
            .fold(self.own_minimum(id, estimations), f64::min)
    }

    /// Repairs the subtree minima along every path dirtied since the last
    /// repair.
    pub fn repair_e_min(&mut self, estimations: &Estimations) {
        let dirty = std::mem::take(&mut self.dirty);
        for id in dirty {
            let mut cursor = Some(id);
            while let Some(c) = cursor {
                if !self.is_alive(c) {
                    break;
                }
                let value = self.compute_e_min(c, estimations);
                let node = self.node_mut(c);
                if node.e_min == value && c != id {
                    break;
                }
                node.e_min = value;
                cursor = node.parent;
            }
        }
    }

    /// Recomputes every subtree minimum bottom-up.
    pub fn recompute_all_e_min(&mut self, estimations: &Estimations) {
        self.dirty.clear();
        let mut order = Vec::new();
        let mut stack = vec![NodeId::ROOT];
        while let Some(id) = stack.pop() {
            order.push(id);
            stack.extend(self.node(id).children.values().copied());
        }
        for &id in order.iter().rev() {
            let value = self.compute_e_min(id, estimations);
            self.node_mut(id).e_min = value;
        }
    }

    /// Multiplies every path influence by `d`.
    pub fn scale_influences(&mut self, d: f64) {
        for node in self.nodes.iter_mut().filter(|n| n.alive) {
            if let Some(payload) = node.payload.as_mut() {
                payload.influence *= d;
            }
        }
    }

    /// Keeps path influences exact after `u_r → v` rose from `previous` to
    /// `weight`: every path containing `u_r` gains
    /// `max(0, weight − max(previous, coverage of v by the other members))`.
    pub fn apply_edge_increase(&mut self, u_r: UserId, v: UserId, previous: f64, weight: f64, edges: &EdgeStore) {
        for start in self.occurrences(u_r) {
            let mut above = previous;
            let mut cursor = self.node(start).parent;
            while let Some(c) = cursor {
                if c == NodeId::ROOT {
                    break;
                }
                let node = self.node(c);
                above = above.max(edges.weight(node.user, v));
                cursor = node.parent;
            }
            let mut stack = vec![(start, above)];
            while let Some((id, cover)) = stack.pop() {
                let node = self.node(id);
                let cover = if id == start { cover } else { cover.max(edges.weight(node.user, v)) };
                let children: Vec<NodeId> = node.children.values().copied().collect();
                if let Some(payload) = self.node_mut(id).payload.as_mut() {
                    payload.influence += (weight - cover).max(0.0);
                }
                stack.extend(children.into_iter().map(|c| (c, cover)));
            }
        }
    }

    /// Computes `Δ(u_r|S)` once for every surviving candidate set `S` that
    /// holds an estimation able to admit `u_r`, caching it in the payload.
    pub fn dfs_marginals<R: RelatedLookup>(
        &mut self,
        query: MarginalQuery<'_>,
        edges: &EdgeStore,
        estimations: &Estimations,
        lookup: &R,
    ) -> (Vec<Visit>, PruneCounts) {
        let target_edges: Vec<(UserId, f64)> = edges
            .influence_set(query.target)
            .map(|set| set.iter().collect())
            .unwrap_or_default();
        let mut sweep = Sweep {
            query,
            lookup,
            edges,
            estimations,
            target_influence: edges.influence(query.target),
            cover: vec![0.0; target_edges.len()],
            target_edges,
            visits: Vec::new(),
            prunes: PruneCounts::default(),
            evaluations: 0,
        };
        self.sweep_node(&mut sweep, NodeId::ROOT, query.related, false);
        self.marginal_evaluations += sweep.evaluations;
        for visit in &sweep.visits {
            if let Some(payload) = self.node_mut(visit.node).payload.as_mut() {
                payload.marg_cache = Some((query.seq, visit.gain));
            }
        }
        (sweep.visits, sweep.prunes)
    }

    fn sweep_node<R: RelatedLookup>(
        &self,
        sweep: &mut Sweep<'_, R>,
        id: NodeId,
        related: &[QueryId],
        holds_target: bool,
    ) {
        let node = self.node(id);
        let k = sweep.query.k;
        if let Some(payload) = &node.payload {
            if sweep.query.pruning.third && !holds_target && node.depth < k {
                let bar = sieve_bar(node.e_min, payload.influence, node.depth, k);
                if sweep.target_influence < bar {
                    sweep.prunes.third += 1;
                    return;
                }
            }
            let eligible = !holds_target
                && node.depth < k
                && payload
                    .estimations
                    .iter()
                    .any(|&e| sweep.query.related.binary_search(&sweep.estimations.get(e).owner).is_ok());
            if eligible {
                let gain: f64 = sweep
                    .target_edges
                    .iter()
                    .zip(&sweep.cover)
                    .map(|(&(_, w), &c)| (w - c).max(0.0))
                    .sum();
                sweep.evaluations += 1;
                sweep.visits.push(Visit { node: id, gain });
            }
        }
        if node.depth >= k {
            return;
        }
        for (&user, &child) in &node.children {
            let child_holds = holds_target || user == sweep.query.target;
            if user == sweep.query.target && sweep.query.pruning.first {
                sweep.prunes.first += 1;
                continue;
            }
            let narrowed = intersect_sorted(related, sweep.lookup.related(user));
            if narrowed.is_empty() && sweep.query.pruning.second {
                sweep.prunes.second += 1;
                continue;
            }
            let mut undo = Vec::new();
            if let Some(set) = sweep.edges.influence_set(user) {
                for (i, &(v, _)) in sweep.target_edges.iter().enumerate() {
                    let w = set.weight(v);
                    if w > sweep.cover[i] {
                        undo.push((i, sweep.cover[i]));
                        sweep.cover[i] = w;
                    }
                }
            }
            self.sweep_node(sweep, child, &narrowed, child_holds);
            for (i, old) in undo {
                sweep.cover[i] = old;
            }
        }
    }

    /// One line per payload, `S=… f=… Q=… E=…`, sorted by `S`. Influence and
    /// estimation values are multiplied by `scale` and printed with 9
    /// significant digits; `name` maps internal queries to printed ids.
    pub fn dump(&self, estimations: &Estimations, scale: f64, name: impl Fn(QueryId) -> Vec<String>) -> String {
        let mut rows: Vec<(Vec<UserId>, String)> = self
            .payload_nodes()
            .into_iter()
            .map(|id| {
                let payload = self.payload(id).expect("payload node");
                let users = self.path_of(id);
                let mut q: Vec<String> = payload.related.iter().flat_map(|&q| name(q)).collect();
                q.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
                let mut e: Vec<f64> = payload
                    .estimations
                    .iter()
                    .map(|&x| estimations.get(x).value * scale)
                    .collect();
                e.sort_by(f64::total_cmp);
                let mut line = String::new();
                let _ = write!(
                    line,
                    "S={} f={} Q={} E={}",
                    join(users.iter().map(UserId::to_string)),
                    crate::io::format_sig9(payload.influence * scale),
                    q.join(","),
                    join(e.into_iter().map(crate::io::format_sig9)),
                );
                (users, line)
            })
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = String::new();
        for (_, line) in rows {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Structural invariants: ascending paths, payload iff estimations,
    /// leaves carry payloads, back-links, occurrence chains, subtree minima,
    /// `Q_S = ∩ Q_u`.
    pub fn audit<R: RelatedLookup>(&self, estimations: &Estimations, lookup: &R) -> Result<(), String> {
        let mut seen_estimations = 0;
        let mut by_user: FxHashMap<UserId, Vec<NodeId>> = FxHashMap::default();
        let mut stack = vec![NodeId::ROOT];
        while let Some(id) = stack.pop() {
            let node = self.node(id);
            for (&user, &child) in &node.children {
                let c = self.node(child);
                if c.user != user || c.parent != Some(id) || c.depth != node.depth + 1 {
                    return Err(format!("broken parent/child link at {child:?}"));
                }
                if id != NodeId::ROOT && user <= node.user {
                    return Err(format!("path order violated at {child:?}"));
                }
                stack.push(child);
            }
            if id != NodeId::ROOT {
                by_user.entry(node.user).or_default().push(id);
                if node.children.is_empty() && node.payload.is_none() {
                    return Err(format!("leaf {id:?} without payload"));
                }
            }
            if let Some(payload) = &node.payload {
                if id != NodeId::ROOT && payload.estimations.is_empty() {
                    return Err(format!("payload at {id:?} without estimations"));
                }
                for &e in &payload.estimations {
                    if estimations.get(e).path != id {
                        return Err(format!("estimation {e:?} does not link back to {id:?}"));
                    }
                    seen_estimations += 1;
                }
                if id != NodeId::ROOT {
                    let path = self.path_of(id);
                    let mut expected = lookup.related(path[0]).to_vec();
                    for &u in &path[1..] {
                        expected = intersect_sorted(&expected, lookup.related(u));
                    }
                    if expected != payload.related {
                        return Err(format!("Q_S mismatch at {path:?}"));
                    }
                }
            }
            let want = self.compute_e_min(id, estimations);
            if want != node.e_min {
                return Err(format!("stale subtree minimum at {id:?}: {} vs {want}", node.e_min));
            }
        }
        if seen_estimations != estimations.len() {
            return Err(format!(
                "{} estimations linked, {} alive",
                seen_estimations,
                estimations.len()
            ));
        }
        if by_user.len() != self.user_index.len() {
            return Err("user index holds users absent from the tree".into());
        }
        for (user, mut nodes) in by_user {
            let mut chain = self.occurrences(user);
            nodes.sort();
            chain.sort();
            if nodes != chain {
                return Err(format!("occurrence chain of {user} is inconsistent"));
            }
        }
        Ok(())
    }
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(",")
}
