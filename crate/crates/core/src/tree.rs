//! Cache tree topology and per-object request demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ph::PhaseDist;

pub type CacheId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheNode {
    pub id: CacheId,
    /// `None` means the parent is the origin server.
    pub parent: Option<CacheId>,
    pub capacity: f64,
    /// Reciprocal of the mean delay to download from the parent.
    pub fetch_rate: f64,
}

/// Rooted tree of caches. Cache ids are dense, `0..n_caches`.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheTree {
    nodes: Vec<CacheNode>,
    children: Vec<Vec<CacheId>>,
    leaves: Vec<CacheId>,
    leaf_index: Vec<Option<usize>>,
    /// For each cache, the caches from it up to the root (inclusive).
    paths: Vec<Vec<CacheId>>,
    root: CacheId,
}

impl CacheTree {
    pub fn new(mut nodes: Vec<CacheNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::param("a cache tree needs at least one cache"));
        }
        nodes.sort_by_key(|n| n.id);
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::param(format!("cache ids must be 0..{n}, missing {i}")));
            }
            if !(node.capacity >= 1.0) || !node.capacity.is_finite() {
                return Err(Error::param(format!("cache {i}: capacity must be >= 1")));
            }
            if !(node.fetch_rate > 0.0) || node.fetch_rate.is_nan() {
                return Err(Error::param(format!("cache {i}: fetch rate must be positive")));
            }
            if let Some(p) = node.parent {
                if p >= n || p == i {
                    return Err(Error::param(format!("cache {i}: invalid parent {p}")));
                }
            }
        }
        let roots: Vec<_> = nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
        if roots.len() != 1 {
            return Err(Error::param(format!(
                "exactly one cache must have the server as parent, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); n];
        for node in &nodes {
            if let Some(p) = node.parent {
                children[p].push(node.id);
            }
        }
        let mut paths = Vec::with_capacity(n);
        for i in 0..n {
            let mut path = vec![i];
            let mut cur = i;
            while let Some(p) = nodes[cur].parent {
                if path.len() > n {
                    return Err(Error::param("parent links contain a cycle"));
                }
                path.push(p);
                cur = p;
            }
            paths.push(path);
        }
        let leaves: Vec<CacheId> = (0..n).filter(|&i| children[i].is_empty()).collect();
        let mut leaf_index = vec![None; n];
        for (j, &l) in leaves.iter().enumerate() {
            leaf_index[l] = Some(j);
        }
        Ok(Self {
            nodes,
            children,
            leaves,
            leaf_index,
            paths,
            root,
        })
    }

    pub fn single(capacity: f64, fetch_rate: f64) -> Result<Self> {
        Self::new(vec![CacheNode {
            id: 0,
            parent: None,
            capacity,
            fetch_rate,
        }])
    }

    /// Root with `n_caches - 1` leaf children; `n_caches == 1` is a single cache.
    pub fn two_level(n_caches: usize, capacity: f64, fetch_rate: f64) -> Result<Self> {
        if n_caches == 0 {
            return Err(Error::param("need at least one cache"));
        }
        let nodes = (0..n_caches)
            .map(|id| CacheNode {
                id,
                parent: if id == 0 { None } else { Some(0) },
                capacity,
                fetch_rate,
            })
            .collect();
        Self::new(nodes)
    }

    /// Root with two leaves.
    pub fn binary(capacity: f64, fetch_rate: f64) -> Result<Self> {
        Self::two_level(3, capacity, fetch_rate)
    }

    pub fn with_fetch_rate(&self, fetch_rate: f64) -> Result<Self> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| CacheNode {
                fetch_rate,
                ..n.clone()
            })
            .collect();
        Self::new(nodes)
    }

    pub fn n_caches(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn nodes(&self) -> &[CacheNode] {
        &self.nodes
    }

    pub fn node(&self, id: CacheId) -> &CacheNode {
        &self.nodes[id]
    }

    pub fn parent(&self, id: CacheId) -> Option<CacheId> {
        self.nodes[id].parent
    }

    pub fn children(&self, id: CacheId) -> &[CacheId] {
        &self.children[id]
    }

    pub fn root(&self) -> CacheId {
        self.root
    }

    /// Leaf cache ids; position in this slice is the leaf index used by demands.
    pub fn leaves(&self) -> &[CacheId] {
        &self.leaves
    }

    pub fn leaf_index(&self, id: CacheId) -> Option<usize> {
        self.leaf_index[id]
    }

    pub fn path_to_root(&self, id: CacheId) -> &[CacheId] {
        &self.paths[id]
    }

    pub fn capacity(&self, id: CacheId) -> f64 {
        self.nodes[id].capacity
    }

    pub fn fetch_rate(&self, id: CacheId) -> f64 {
        self.nodes[id].fetch_rate
    }

    /// Leaf indices in the subtree of `id`.
    pub fn leaves_below(&self, id: CacheId) -> Vec<usize> {
        self.leaves
            .iter()
            .enumerate()
            .filter(|(_, &l)| self.paths[l].contains(&id))
            .map(|(j, _)| j)
            .collect()
    }

    /// Longest shortest path between two caches, counting edges.
    pub fn diameter(&self) -> usize {
        let n = self.n_caches();
        let mut best = 0;
        for a in 0..n {
            for b in a + 1..n {
                let pa = &self.paths[a];
                let pb = &self.paths[b];
                let common = pa.iter().position(|c| pb.contains(c)).expect("same root");
                let lca = pa[common];
                let db = pb.iter().position(|&c| c == lca).unwrap();
                best = best.max(common + db);
            }
        }
        best
    }
}

/// Request processes of one object, one optional stream per leaf index.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectDemand {
    pub object: usize,
    streams: Vec<Option<PhaseDist>>,
}

impl ObjectDemand {
    pub fn new(object: usize, streams: Vec<Option<PhaseDist>>) -> Result<Self> {
        if streams.iter().all(|s| s.is_none()) {
            return Err(Error::param(format!("object {object} has no request stream")));
        }
        Ok(Self { object, streams })
    }

    /// Poisson requests with the given per-leaf rates; zero means no stream.
    pub fn poisson(object: usize, rates: &[f64]) -> Result<Self> {
        let streams = rates
            .iter()
            .map(|&r| {
                if r == 0.0 {
                    Ok(None)
                } else {
                    PhaseDist::exponential(r).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(object, streams)
    }

    pub fn n_leaves(&self) -> usize {
        self.streams.len()
    }

    pub fn stream(&self, leaf: usize) -> Option<&PhaseDist> {
        self.streams.get(leaf).and_then(|s| s.as_ref())
    }

    pub fn rate(&self, leaf: usize) -> f64 {
        self.stream(leaf).map_or(0.0, PhaseDist::rate)
    }

    pub fn rates(&self) -> Vec<f64> {
        (0..self.streams.len()).map(|j| self.rate(j)).collect()
    }

    pub fn total_rate(&self) -> f64 {
        self.rates().iter().sum()
    }

    pub fn all_exponential(&self) -> bool {
        self.streams.iter().flatten().all(PhaseDist::is_exponential)
    }

    pub fn validate_for(&self, tree: &CacheTree) -> Result<()> {
        if self.streams.len() != tree.n_leaves() {
            return Err(Error::param(format!(
                "object {} has {} streams but the tree has {} leaves",
                self.object,
                self.streams.len(),
                tree.n_leaves()
            )));
        }
        Ok(())
    }
}
