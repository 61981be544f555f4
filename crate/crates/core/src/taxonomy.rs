//! CWE hierarchy: nodes, ChildOf edges and hierarchical distances.
//!
//! The hierarchical distance between two CWEs is the hop count of the
//! shortest path between them when ChildOf edges are taken as undirected.
//! Category nodes are organisational groupings; by default paths may start
//! or end at one but never pass through one.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CweId;

const BUNDLED: &str = include_str!("../data/cwe_taxonomy.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Abstraction {
    Pillar,
    Class,
    Base,
    Variant,
    Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CweNode {
    pub id: CweId,
    pub description: String,
    pub abstraction: Abstraction,
}

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("cannot read taxonomy {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed taxonomy: {0}")]
    Malformed(String),
    #[error("node {0} declared twice")]
    DuplicateNode(CweId),
    #[error("edge {child} -> {parent} references an undeclared node")]
    DanglingEdge { child: CweId, parent: CweId },
    #[error("ChildOf cycle through {0}")]
    CycleDetected(CweId),
    #[error("{0} is not in the taxonomy")]
    UnknownId(CweId),
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    nodes: Vec<CweNode>,
    child_of: Vec<(CweId, CweId)>,
}

/// Immutable, validated (acyclic, no dangling edges) CWE graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CweTaxonomy {
    nodes: BTreeMap<CweId, CweNode>,
    child_of: BTreeSet<(CweId, CweId)>,
    neighbours: BTreeMap<CweId, Vec<CweId>>,
}

/// Shortest-path hop count, or `Unreachable` across disconnected components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Distance {
    Hops(u32),
    Unreachable,
}

impl Distance {
    pub fn hops(self) -> Option<u32> {
        match self {
            Distance::Hops(h) => Some(h),
            Distance::Unreachable => None,
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distance::Hops(h) => write!(f, "{h}"),
            Distance::Unreachable => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceOptions {
    /// Allow shortest paths to pass through Category nodes.
    pub include_categories: bool,
}

impl CweTaxonomy {
    pub fn new(
        nodes: impl IntoIterator<Item = CweNode>,
        child_of: impl IntoIterator<Item = (CweId, CweId)>,
    ) -> Result<Self, TaxonomyError> {
        let mut map = BTreeMap::new();
        for n in nodes {
            if n.id.0 == 0 {
                return Err(TaxonomyError::Malformed("CWE id 0".into()));
            }
            if n.description.trim().is_empty() {
                return Err(TaxonomyError::Malformed(format!("{} has no description", n.id)));
            }
            let id = n.id;
            if map.insert(id, n).is_some() {
                return Err(TaxonomyError::DuplicateNode(id));
            }
        }

        let edges: BTreeSet<(CweId, CweId)> = child_of.into_iter().collect();
        let mut neighbours: BTreeMap<CweId, Vec<CweId>> =
            map.keys().map(|&k| (k, Vec::new())).collect();
        for &(child, parent) in &edges {
            if !map.contains_key(&child) || !map.contains_key(&parent) {
                return Err(TaxonomyError::DanglingEdge { child, parent });
            }
            if child == parent {
                return Err(TaxonomyError::CycleDetected(child));
            }
            neighbours.get_mut(&child).unwrap().push(parent);
            neighbours.get_mut(&parent).unwrap().push(child);
        }
        for adj in neighbours.values_mut() {
            adj.sort();
            adj.dedup();
        }

        check_acyclic(&map, &edges)?;
        Ok(Self {
            nodes: map,
            child_of: edges,
            neighbours,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile =
            serde_json::from_str(text).map_err(|e| TaxonomyError::Malformed(e.to_string()))?;
        Self::new(file.nodes, file.child_of)
    }

    /// The hand-extracted MITRE ChildOf subgraph covering the nine default
    /// CWEs and their ancestors.
    pub fn bundled() -> Self {
        Self::from_json_str(BUNDLED).expect("bundled taxonomy is valid")
    }

    pub fn to_json_string(&self) -> String {
        let file = TaxonomyFile {
            nodes: self.nodes.values().cloned().collect(),
            child_of: self.child_of.iter().copied().collect(),
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    pub fn node(&self, id: CweId) -> Option<&CweNode> {
        self.nodes.get(&id)
    }

    pub fn description(&self, id: CweId) -> Option<&str> {
        self.nodes.get(&id).map(|n| n.description.as_str())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &CweNode> {
        self.nodes.values()
    }

    pub fn child_of(&self) -> impl Iterator<Item = (CweId, CweId)> + '_ {
        self.child_of.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn distance(&self, a: CweId, b: CweId) -> Result<Distance, TaxonomyError> {
        self.distance_with(a, b, DistanceOptions::default())
    }

    pub fn distance_with(
        &self,
        a: CweId,
        b: CweId,
        opts: DistanceOptions,
    ) -> Result<Distance, TaxonomyError> {
        for id in [a, b] {
            if !self.nodes.contains_key(&id) {
                return Err(TaxonomyError::UnknownId(id));
            }
        }
        Ok(self.bfs(a, opts).get(&b).copied().map_or(Distance::Unreachable, Distance::Hops))
    }

    /// Hop counts from `source` to every node reachable from it.
    fn bfs(&self, source: CweId, opts: DistanceOptions) -> BTreeMap<CweId, u32> {
        let passable = |id: &CweId| {
            opts.include_categories || self.nodes[id].abstraction != Abstraction::Category
        };
        let mut dist = BTreeMap::from([(source, 0u32)]);
        let mut queue = VecDeque::from([source]);
        while let Some(cur) = queue.pop_front() {
            let d = dist[&cur];
            if cur != source && !passable(&cur) {
                continue;
            }
            for &n in &self.neighbours[&cur] {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(n) {
                    e.insert(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn distance_matrix(&self, labels: &[CweId]) -> Result<DistanceMatrix, TaxonomyError> {
        self.distance_matrix_with(labels, DistanceOptions::default())
    }

    pub fn distance_matrix_with(
        &self,
        labels: &[CweId],
        opts: DistanceOptions,
    ) -> Result<DistanceMatrix, TaxonomyError> {
        if let Some(&missing) = labels.iter().find(|id| !self.nodes.contains_key(id)) {
            return Err(TaxonomyError::UnknownId(missing));
        }
        let cells = labels
            .iter()
            .map(|&a| {
                let reach = self.bfs(a, opts);
                labels
                    .iter()
                    .map(|b| reach.get(b).copied().map_or(Distance::Unreachable, Distance::Hops))
                    .collect()
            })
            .collect();
        Ok(DistanceMatrix {
            labels: labels.to_vec(),
            cells,
        })
    }
}

fn check_acyclic(
    nodes: &BTreeMap<CweId, CweNode>,
    edges: &BTreeSet<(CweId, CweId)>,
) -> Result<(), TaxonomyError> {
    // Kahn's algorithm over child -> parent edges.
    let mut indegree: BTreeMap<CweId, usize> = nodes.keys().map(|&k| (k, 0)).collect();
    let mut parents: BTreeMap<CweId, Vec<CweId>> = BTreeMap::new();
    for &(c, p) in edges {
        *indegree.get_mut(&p).unwrap() += 1;
        parents.entry(c).or_default().push(p);
    }
    let mut ready: Vec<CweId> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&k, _)| k)
        .collect();
    let mut seen = 0;
    while let Some(n) = ready.pop() {
        seen += 1;
        for p in parents.get(&n).into_iter().flatten() {
            let d = indegree.get_mut(p).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(*p);
            }
        }
    }
    if seen == nodes.len() {
        Ok(())
    } else {
        let stuck = indegree.iter().find(|(_, &d)| d > 0).map(|(&k, _)| k).unwrap();
        Err(TaxonomyError::CycleDetected(stuck))
    }
}

pub fn load_taxonomy(path: &Path) -> Result<CweTaxonomy, TaxonomyError> {
    let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    CweTaxonomy::from_json_str(&text)
}

/// Pairwise distances over an ordered list of CWEs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    pub labels: Vec<CweId>,
    pub cells: Vec<Vec<Distance>>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> Distance {
        self.cells[i][j]
    }

    /// Symmetric CSV: a header row of ids, then one row per id. Unreachable
    /// pairs are written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cwe");
        for l in &self.labels {
            out.push_str(&format!(",{}", l.0));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.cells) {
            out.push_str(&l.0.to_string());
            for d in row {
                out.push_str(&format!(",{d}"));
            }
            out.push('\n');
        }
        out
    }
}
