//! Area assignment and the per-area bus sets of the decomposition.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::case::{BusId, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct AreaId(pub u32);

impl fmt::Display for AreaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("all buses carry the same area tag")]
    SingleArea,
    #[error("cannot split {buses} buses into {k} areas")]
    KTooLarge { k: usize, buses: usize },
    #[error("need at least two areas, got {0}")]
    KTooSmall(usize),
    #[error("bus {0} has no area")]
    UnassignedBus(BusId),
    #[error("area {0} has no buses")]
    EmptyArea(AreaId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub area_of: BTreeMap<BusId, AreaId>,
    pub areas: Vec<AreaId>,
}

impl Partition {
    /// Areas are taken from the map values, in ascending order.
    pub fn new(area_of: BTreeMap<BusId, AreaId>) -> Self {
        let areas: BTreeSet<AreaId> = area_of.values().copied().collect();
        Self { area_of, areas: areas.into_iter().collect() }
    }

    pub fn buses_of(&self, area: AreaId) -> Vec<BusId> {
        self.area_of.iter().filter(|(_, &a)| a == area).map(|(&b, _)| b).collect()
    }

    pub fn validate(&self, net: &Network) -> Result<(), PartitionError> {
        for b in &net.buses {
            if !self.area_of.contains_key(&b.id) {
                return Err(PartitionError::UnassignedBus(b.id));
            }
        }
        for &a in &self.areas {
            if !self.area_of.values().any(|&x| x == a) {
                return Err(PartitionError::EmptyArea(a));
            }
        }
        Ok(())
    }
}

/// Uses the case file's own area column.
pub fn partition_from_areas(net: &Network) -> Result<Partition, PartitionError> {
    let part = Partition::new(net.buses.iter().map(|b| (b.id, AreaId(b.area_tag))).collect());
    if part.areas.len() < 2 {
        return Err(PartitionError::SingleArea);
    }
    Ok(part)
}

/// Deterministic greedy split into `k` areas.
///
/// The first root is the `seed % n`-th bus by id; each further root is the
/// bus farthest (in hops) from the roots so far, lowest id on ties. Areas then
/// take turns claiming their lowest-id unassigned neighbour until every bus
/// is placed.
pub fn partition_fallback(net: &Network, k: usize, seed: u64) -> Result<Partition, PartitionError> {
    let mut ids: Vec<BusId> = net.buses.iter().map(|b| b.id).collect();
    ids.sort();
    let n = ids.len();
    if k < 2 {
        return Err(PartitionError::KTooSmall(k));
    }
    if k > n {
        return Err(PartitionError::KTooLarge { k, buses: n });
    }
    let pos: BTreeMap<BusId, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for br in net.branches.iter().filter(|b| b.in_service) {
        let (u, w) = (pos[&br.from], pos[&br.to]);
        adj[u].insert(w);
        adj[w].insert(u);
    }

    let mut roots = vec![(seed % n as u64) as usize];
    while roots.len() < k {
        let mut dist = vec![usize::MAX; n];
        let mut queue: VecDeque<usize> = roots.iter().copied().collect();
        for &r in &roots {
            dist[r] = 0;
        }
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        // Positions are id-sorted, so the first maximum is the lowest id.
        let next = (0..n).filter(|v| !roots.contains(v)).max_by(|&a, &b| dist[a].cmp(&dist[b]).then(b.cmp(&a)));
        roots.push(next.expect("k <= n leaves a free bus"));
    }

    let mut owner = vec![usize::MAX; n];
    let mut members: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); k];
    for (a, &r) in roots.iter().enumerate() {
        owner[r] = a;
        members[a].insert(r);
    }
    let mut left = n - k;
    while left > 0 {
        let mut progressed = false;
        for a in 0..k {
            let claim = members[a].iter().flat_map(|&u| adj[u].iter().copied()).filter(|&w| owner[w] == usize::MAX).min();
            if let Some(w) = claim {
                owner[w] = a;
                members[a].insert(w);
                left -= 1;
                progressed = true;
                if left == 0 {
                    break;
                }
            }
        }
        assert!(progressed, "network is connected");
    }

    Ok(Partition::new(ids.iter().enumerate().map(|(v, &id)| (id, AreaId(owner[v] as u32 + 1))).collect()))
}

/// A shared bus seen from one bordering area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct SharedPair {
    pub bus: BusId,
    pub owner: AreaId,
    /// The area for which `bus` is a boundary bus.
    pub boundary_of: AreaId,
}

/// Global index of consensus entries, identical for all areas.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SharedIndex {
    /// All tie-line endpoints, ascending.
    pub buses: Vec<BusId>,
    /// One entry per (shared bus, bordering area), ordered by bus then area.
    pub pairs: Vec<SharedPair>,
}

impl SharedIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaTopology {
    pub area: AreaId,
    pub internal: Vec<BusId>,
    /// Branch indices with exactly one end in this area.
    pub tie_lines: Vec<usize>,
    pub shared_internal: Vec<BusId>,
    pub shared_boundary: Vec<BusId>,
    /// Kept buses: internal, boundary and the reference bus, ascending.
    pub alpha: Vec<BusId>,
    /// Every other bus, ascending.
    pub beta: Vec<BusId>,
    /// Branch indices with at least one end in this area.
    pub local_lines: Vec<usize>,
    pub reference_bus: BusId,
    pub shared: SharedIndex,
}

impl AreaTopology {
    pub fn is_internal(&self, bus: BusId) -> bool {
        self.internal.binary_search(&bus).is_ok()
    }

    pub fn is_boundary(&self, bus: BusId) -> bool {
        self.shared_boundary.binary_search(&bus).is_ok()
    }

    /// True when the reference bus sits in `alpha` only because it is the
    /// reference. It then absorbs the imbalance of the reduced system.
    pub fn reference_is_slack(&self) -> bool {
        !self.is_internal(self.reference_bus) && !self.is_boundary(self.reference_bus)
    }
}

pub fn build_area_topology(
    net: &Network,
    part: &Partition,
    reference: BusId,
) -> Result<Vec<AreaTopology>, PartitionError> {
    part.validate(net)?;
    let area = |b: BusId| part.area_of[&b];

    let mut pairs = BTreeSet::new();
    for br in net.branches.iter().filter(|b| b.in_service) {
        let (af, at) = (area(br.from), area(br.to));
        if af != at {
            pairs.insert(SharedPair { bus: br.from, owner: af, boundary_of: at });
            pairs.insert(SharedPair { bus: br.to, owner: at, boundary_of: af });
        }
    }
    let buses: BTreeSet<BusId> = pairs.iter().map(|p| p.bus).collect();
    let shared = SharedIndex { buses: buses.into_iter().collect(), pairs: pairs.into_iter().collect() };
    let all: Vec<BusId> = part.area_of.keys().copied().collect();

    let mut out = Vec::with_capacity(part.areas.len());
    for &a in &part.areas {
        let internal = part.buses_of(a);
        let mut tie_lines = Vec::new();
        let mut local_lines = Vec::new();
        let mut rs = BTreeSet::new();
        let mut rb = BTreeSet::new();
        for (k, br) in net.branches.iter().enumerate().filter(|(_, b)| b.in_service) {
            let (inf, intl) = (area(br.from) == a, area(br.to) == a);
            if inf || intl {
                local_lines.push(k);
            }
            if inf != intl {
                tie_lines.push(k);
                let (inside, outside) = if inf { (br.from, br.to) } else { (br.to, br.from) };
                rs.insert(inside);
                rb.insert(outside);
            }
        }
        let mut alpha: BTreeSet<BusId> = internal.iter().copied().collect();
        alpha.extend(rb.iter().copied());
        alpha.insert(reference);
        let beta = all.iter().copied().filter(|b| !alpha.contains(b)).collect();
        out.push(AreaTopology {
            area: a,
            internal,
            tie_lines,
            shared_internal: rs.into_iter().collect(),
            shared_boundary: rb.into_iter().collect(),
            alpha: alpha.into_iter().collect(),
            beta,
            local_lines,
            reference_bus: reference,
            shared: shared.clone(),
        });
    }
    Ok(out)
}
