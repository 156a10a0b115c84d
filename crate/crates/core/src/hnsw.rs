//! Hierarchical navigable small world graph.
//!
//! Topology (ids, levels, adjacency with edge lengths) lives in memory.
//! Payloads are never owned by the index: construction and search read them
//! through a [`PayloadSource`], normally backed by a [`TieredVectorStore`].

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{Embedding, Metric};
use crate::error::{Error, Result};
use crate::store::TieredVectorStore;
use crate::VectorId;

/// Highest level a node can be assigned.
pub const MAX_LEVEL: usize = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Max neighbors per node on levels >= 1; level 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            metric: Metric::Cosine,
            seed: 42,
        }
    }
}

impl HnswParams {
    fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::invalid("M must be at least 2"));
        }
        if self.ef_construction == 0 {
            return Err(Error::invalid("ef_construction must be positive"));
        }
        Ok(())
    }

    /// Level normalization factor, `1 / ln(M)`.
    pub fn level_mult(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }

    pub fn max_neighbors(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub k: usize,
    pub ef: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams { k: 10, ef: 64 }
    }
}

impl SearchParams {
    pub fn new(k: usize, ef: usize) -> Result<Self> {
        let p = SearchParams { k, ef };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.ef < self.k {
            return Err(Error::invalid(format!(
                "ef ({}) must be >= k ({})",
                self.ef, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: VectorId,
    pub distance: f32,
}

/// A distance-evaluated node. Ordered by distance, ties broken by the smaller id.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub dist: f32,
    pub id: VectorId,
    pub(crate) slot: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

impl From<Candidate> for SearchHit {
    fn from(c: Candidate) -> Self {
        SearchHit {
            id: c.id,
            distance: c.dist,
        }
    }
}

/// Bounded max-heap of the best `ef` candidates found so far.
pub(crate) struct ResultSet {
    heap: BinaryHeap<Candidate>,
    ef: usize,
}

impl ResultSet {
    pub(crate) fn new(ef: usize) -> Self {
        ResultSet {
            heap: BinaryHeap::with_capacity(ef + 1),
            ef,
        }
    }

    pub(crate) fn furthest(&self) -> Option<&Candidate> {
        self.heap.peek()
    }

    /// Whether `c` is closer than the current furthest, or there is room.
    pub(crate) fn admits(&self, c: &Candidate) -> bool {
        self.heap.len() < self.ef || self.heap.peek().is_some_and(|f| c < f)
    }

    pub(crate) fn push(&mut self, c: Candidate) {
        self.heap.push(c);
        if self.heap.len() > self.ef {
            self.heap.pop();
        }
    }

    pub(crate) fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

/// Dense visited-set over node slots.
pub(crate) struct Visited {
    bits: Vec<u64>,
    count: usize,
}

impl Visited {
    pub(crate) fn new(n: usize) -> Self {
        Visited {
            bits: vec![0; n.div_ceil(64)],
            count: 0,
        }
    }

    /// Returns `true` if `slot` was not yet marked.
    pub(crate) fn insert(&mut self, slot: u32) -> bool {
        let (w, b) = (slot as usize / 64, slot % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        if fresh {
            self.bits[w] |= 1 << b;
            self.count += 1;
        }
        fresh
    }

    pub(crate) fn contains(&self, slot: u32) -> bool {
        self.bits[slot as usize / 64] & (1 << (slot % 64)) != 0
    }

    pub(crate) fn len(&self) -> usize {
        self.count
    }
}

/// Supplies payloads to construction and baseline search.
pub trait PayloadSource {
    /// Payload of `id`, encountered while searching `level`.
    fn payload(&mut self, id: VectorId, level: usize) -> Result<Embedding>;
}

/// Reads cached payloads and fetches each miss in its own transaction.
pub struct OnDemand<'a> {
    pub store: &'a TieredVectorStore,
}

impl PayloadSource for OnDemand<'_> {
    fn payload(&mut self, id: VectorId, _level: usize) -> Result<Embedding> {
        if let Some(p) = self.store.get_resident(id) {
            return Ok(p);
        }
        self.store
            .get_batch(&[id])?
            .payloads
            .remove(&id)
            .ok_or(Error::MissingPayload(id))
    }
}

impl PayloadSource for HashMap<VectorId, Embedding> {
    fn payload(&mut self, id: VectorId, _level: usize) -> Result<Embedding> {
        self.get(&id).cloned().ok_or(Error::MissingPayload(id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Link {
    pub slot: u32,
    pub dist: f32,
}

/// One node's topology, as exchanged with snapshots and hand-built graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeLinks {
    pub id: VectorId,
    pub level: usize,
    /// `neighbors[l]` holds `(neighbor id, edge length)` pairs at level `l`.
    pub neighbors: Vec<Vec<(VectorId, f32)>>,
}

/// Draws from `u` in (0, 1] map to `floor(-ln(u) * level_mult)`.
pub fn level_for_draw(u: f64, level_mult: f64) -> usize {
    let u = u.clamp(f64::MIN_POSITIVE, 1.0);
    ((-u.ln() * level_mult).floor() as usize).min(MAX_LEVEL)
}

pub struct HnswIndex {
    dimension: usize,
    params: HnswParams,
    ids: Vec<VectorId>,
    slots: HashMap<VectorId, u32>,
    /// `links[slot][level]`
    links: Vec<Vec<Vec<Link>>>,
    entry: Option<u32>,
    max_level: usize,
    rng: ChaCha8Rng,
}

impl HnswIndex {
    pub fn new(dimension: usize, params: HnswParams) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        params.validate()?;
        Ok(HnswIndex {
            dimension,
            params,
            ids: Vec::new(),
            slots: HashMap::new(),
            links: Vec::new(),
            entry: None,
            max_level: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
        })
    }

    /// Rebuilds an index from explicit topology, checking every structural
    /// invariant. `rng_word_pos` restores the level generator's position.
    pub fn from_nodes(
        dimension: usize,
        params: HnswParams,
        nodes: Vec<NodeLinks>,
        entry: Option<VectorId>,
        rng_word_pos: u128,
    ) -> Result<Self> {
        let mut index = HnswIndex::new(dimension, params)?;
        for (slot, n) in nodes.iter().enumerate() {
            if n.neighbors.len() != n.level + 1 {
                return Err(Error::Format(format!(
                    "node {} has level {} but {} neighbor lists",
                    n.id,
                    n.level,
                    n.neighbors.len()
                )));
            }
            if n.level > MAX_LEVEL {
                return Err(Error::Format(format!("node {} level too high", n.id)));
            }
            if index.slots.insert(n.id, slot as u32).is_some() {
                return Err(Error::DuplicateId(n.id));
            }
            index.ids.push(n.id);
        }
        for n in &nodes {
            let mut per_level = Vec::with_capacity(n.level + 1);
            for (level, list) in n.neighbors.iter().enumerate() {
                if list.len() > params.max_neighbors(level) {
                    return Err(Error::Format(format!(
                        "node {} has {} neighbors at level {level}",
                        n.id,
                        list.len()
                    )));
                }
                let mut links = Vec::with_capacity(list.len());
                for &(nb, dist) in list {
                    let slot = *index.slots.get(&nb).ok_or(Error::UnknownId(nb))?;
                    if nodes[slot as usize].level < level {
                        return Err(Error::Format(format!(
                            "node {} links to {nb} at level {level} above its level",
                            n.id
                        )));
                    }
                    links.push(Link { slot, dist });
                }
                per_level.push(links);
            }
            index.links.push(per_level);
        }
        match entry {
            None if !nodes.is_empty() => {
                return Err(Error::Format("non-empty index without entry point".into()))
            }
            None => {}
            Some(e) => {
                let slot = *index.slots.get(&e).ok_or(Error::UnknownId(e))?;
                let top = nodes.iter().map(|n| n.level).max().unwrap_or(0);
                if nodes[slot as usize].level != top {
                    return Err(Error::Format("entry point is not on the top level".into()));
                }
                index.entry = Some(slot);
                index.max_level = top;
            }
        }
        index.rng.set_word_pos(rng_word_pos);
        Ok(index)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn metric(&self) -> Metric {
        self.params.metric
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn entry_point(&self) -> Option<VectorId> {
        self.entry.map(|s| self.ids[s as usize])
    }

    pub fn contains(&self, id: VectorId) -> bool {
        self.slots.contains_key(&id)
    }

    pub(crate) fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> &[VectorId] {
        &self.ids
    }

    pub fn level_of(&self, id: VectorId) -> Option<usize> {
        let slot = *self.slots.get(&id)?;
        Some(self.links[slot as usize].len() - 1)
    }

    pub fn neighbors(&self, id: VectorId, level: usize) -> Option<Vec<VectorId>> {
        let slot = *self.slots.get(&id)?;
        let links = self.links[slot as usize].get(level)?;
        Some(links.iter().map(|l| self.ids[l.slot as usize]).collect())
    }

    /// Node counts per level (`hist[l]` = nodes whose top level is `l`).
    pub fn level_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.max_level + 1];
        for l in &self.links {
            hist[l.len() - 1] += 1;
        }
        hist
    }

    pub fn nodes(&self) -> Vec<NodeLinks> {
        self.links
            .iter()
            .enumerate()
            .map(|(slot, levels)| NodeLinks {
                id: self.ids[slot],
                level: levels.len() - 1,
                neighbors: levels
                    .iter()
                    .map(|ls| {
                        ls.iter()
                            .map(|l| (self.ids[l.slot as usize], l.dist))
                            .collect()
                    })
                    .collect(),
            })
            .collect()
    }

    pub(crate) fn slot(&self, id: VectorId) -> Result<u32> {
        self.slots.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    pub(crate) fn id_of(&self, slot: u32) -> VectorId {
        self.ids[slot as usize]
    }

    pub(crate) fn links(&self, slot: u32, level: usize) -> &[Link] {
        self.links[slot as usize]
            .get(level)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub(crate) fn check_query(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: q.len(),
            });
        }
        self.params.metric.check(q)
    }

    pub(crate) fn evaluate(&self, q: &[f32], slot: u32, payload: &[f32]) -> Result<Candidate> {
        Ok(Candidate {
            dist: self.params.metric.distance(q, payload)?,
            id: self.ids[slot as usize],
            slot,
        })
    }

    fn draw_level(&mut self) -> usize {
        let u = 1.0 - self.rng.gen::<f64>();
        level_for_draw(u, self.params.level_mult())
    }

    /// Inserts `vec` under `id`: writes it through to tier 3, then links it
    /// on every level up to its drawn level.
    pub fn insert(
        &mut self,
        id: VectorId,
        vec: Embedding,
        store: &TieredVectorStore,
    ) -> Result<()> {
        if vec.dim() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: vec.dim(),
            });
        }
        self.params.metric.check(&vec)?;
        if self.slots.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        store.write_through(&[(id, vec.clone())])?;
        self.link_new(id, &vec, &mut OnDemand { store })
    }

    /// Links a node whose payload is already persisted.
    pub(crate) fn link_new<S: PayloadSource>(
        &mut self,
        id: VectorId,
        vec: &[f32],
        source: &mut S,
    ) -> Result<()> {
        let level = self.draw_level();
        let slot = self.ids.len() as u32;

        let Some(entry) = self.entry else {
            self.push_node(id, level);
            self.entry = Some(slot);
            self.max_level = level;
            return Ok(());
        };

        let mut eps = vec![entry];
        for lc in (level + 1..=self.max_level).rev() {
            let w = self.search_layer_slots(vec, &eps, 1, lc, source)?;
            eps = vec![w[0].slot];
        }
        let mut chosen: Vec<(usize, Vec<Candidate>)> = Vec::new();
        for lc in (0..=level.min(self.max_level)).rev() {
            let w = self.search_layer_slots(vec, &eps, self.params.ef_construction, lc, source)?;
            chosen.push((lc, w.iter().take(self.params.m).copied().collect()));
            eps = w.iter().map(|c| c.slot).collect();
        }

        self.push_node(id, level);
        for (lc, neighbors) in chosen {
            self.links[slot as usize][lc] = neighbors
                .iter()
                .map(|c| Link {
                    slot: c.slot,
                    dist: c.dist,
                })
                .collect();
            let cap = self.params.max_neighbors(lc);
            for c in &neighbors {
                let list = &mut self.links[c.slot as usize][lc];
                list.push(Link { slot, dist: c.dist });
                if list.len() > cap {
                    let ids = &self.ids;
                    list.sort_by(|a, b| {
                        a.dist
                            .total_cmp(&b.dist)
                            .then(ids[a.slot as usize].cmp(&ids[b.slot as usize]))
                    });
                    list.truncate(cap);
                }
            }
        }
        if level > self.max_level {
            self.entry = Some(slot);
            self.max_level = level;
        }
        Ok(())
    }

    fn push_node(&mut self, id: VectorId, level: usize) {
        let slot = self.ids.len() as u32;
        self.ids.push(id);
        self.slots.insert(id, slot);
        self.links.push(vec![Vec::new(); level + 1]);
    }

    /// Canonical layer search: every visited neighbor is loaded through
    /// `source` and evaluated immediately. Returns at most `ef` candidates,
    /// nearest first.
    pub fn search_layer_baseline<S: PayloadSource>(
        &self,
        q: &[f32],
        ep: &[VectorId],
        ef: usize,
        level: usize,
        source: &mut S,
    ) -> Result<Vec<Candidate>> {
        self.check_query(q)?;
        let slots = ep
            .iter()
            .map(|id| self.slot(*id))
            .collect::<Result<Vec<_>>>()?;
        self.search_layer_slots(q, &slots, ef.max(1), level, source)
    }

    fn search_layer_slots<S: PayloadSource>(
        &self,
        q: &[f32],
        ep: &[u32],
        ef: usize,
        level: usize,
        source: &mut S,
    ) -> Result<Vec<Candidate>> {
        let mut visited = Visited::new(self.ids.len());
        let mut candidates = BinaryHeap::new();
        let mut results = ResultSet::new(ef);
        for &slot in ep {
            if !visited.insert(slot) {
                continue;
            }
            let p = source.payload(self.id_of(slot), level)?;
            let c = self.evaluate(q, slot, &p)?;
            candidates.push(Reverse(c));
            if results.admits(&c) {
                results.push(c);
            }
        }
        while let Some(Reverse(c)) = candidates.pop() {
            let f = results.furthest().copied().expect("non-empty");
            if c > f {
                break;
            }
            for link in self.links(c.slot, level) {
                if !visited.insert(link.slot) {
                    continue;
                }
                let p = source.payload(self.id_of(link.slot), level)?;
                let e = self.evaluate(q, link.slot, &p)?;
                if results.admits(&e) {
                    candidates.push(Reverse(e));
                    results.push(e);
                }
            }
        }
        Ok(results.into_sorted())
    }

    /// Greedy descent with `ef = 1` on the upper levels, then a level-0
    /// search with `params.ef`. An empty index yields no hits.
    pub fn search<S: PayloadSource>(
        &self,
        q: &[f32],
        params: SearchParams,
        source: &mut S,
    ) -> Result<Vec<SearchHit>> {
        params.validate()?;
        self.check_query(q)?;
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        let mut ep = entry;
        for lc in (1..=self.max_level).rev() {
            ep = self.search_layer_slots(q, &[ep], 1, lc, source)?[0].slot;
        }
        let w = self.search_layer_slots(q, &[ep], params.ef, 0, source)?;
        Ok(w.into_iter().take(params.k).map(SearchHit::from).collect())
    }
}
