//! Pipeline topology: nodes, edges, and structural validation.
//!
//! Topologies are rooted trees (linear chains being the common case): every
//! node has at most one parent, there is exactly one source, and at least
//! one sink. DAGs and cycles are rejected.

use thiserror::Error;

/// Identifies a node within one pipeline. Dense `0..N-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Role of a node in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Feeds the pipeline from an unbounded external input buffer.
    Source,
    /// Ordinary compute node.
    Plain,
    /// Opens composite inputs into element streams bracketed by region signals.
    Enumerate,
    /// Closes regions; consumes region signals without forwarding them.
    Aggregate,
    /// Terminal node with an unbounded external output buffer.
    Sink,
}

impl std::fmt::Display for NodeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NodeKind::Source => "source",
            NodeKind::Plain => "plain",
            NodeKind::Enumerate => "enumerate",
            NodeKind::Aggregate => "aggregate",
            NodeKind::Sink => "sink",
        };
        f.write_str(s)
    }
}

/// Static description of one node.
///
/// `max_data_out` and `max_signals_out` bound what the node may emit per
/// consumed input (data item or signal); the scheduler reserves downstream
/// space against these bounds before firing.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub max_data_out: u32,
    pub max_signals_out: u32,
}

impl NodeSpec {
    pub fn new(id: u32, name: impl Into<String>, kind: NodeKind) -> Self {
        NodeSpec {
            id: NodeId(id),
            name: name.into(),
            kind,
            max_data_out: match kind {
                NodeKind::Sink => 0,
                _ => 1,
            },
            max_signals_out: 0,
        }
    }

    pub fn with_max_data_out(mut self, n: u32) -> Self {
        self.max_data_out = n;
        self
    }

    pub fn with_max_signals_out(mut self, n: u32) -> Self {
        self.max_signals_out = n;
        self
    }
}

/// A directed edge from parent to child.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("topology has no nodes")]
    Empty,
    #[error("edge endpoint {0} is not a declared node")]
    InvalidEdge(u32),
    #[error("node {0} has more than one parent")]
    MultipleParents(NodeId),
    #[error("cycle detected through node {0}")]
    CycleDetected(NodeId),
    #[error("no source node (every node has a parent)")]
    NoSource,
    #[error("multiple source nodes: {0} and {1}")]
    MultipleSources(NodeId, NodeId),
    #[error("node {0} declared as {1} but {2}")]
    KindMismatch(NodeId, NodeKind, &'static str),
}

/// Validated tree- or chain-shaped pipeline layout.
///
/// Edges get dense ids in declaration order; per-node adjacency is
/// precomputed so the scheduler can walk the structure without search.
#[derive(Debug, Clone)]
pub struct Topology {
    specs: Vec<NodeSpec>,
    edges: Vec<Edge>,
    /// Outgoing edge ids per node, in declaration order.
    out_edges: Vec<Vec<usize>>,
    /// Incoming edge id per node (at most one).
    in_edge: Vec<Option<usize>>,
    /// Distance from the source.
    depth: Vec<u32>,
    source: NodeId,
    sinks: Vec<NodeId>,
}

impl Topology {
    /// Validates the node/edge lists and builds the adjacency structure.
    pub fn build(specs: Vec<NodeSpec>, edges: Vec<(u32, u32)>) -> Result<Self, TopologyError> {
        if specs.is_empty() {
            return Err(TopologyError::Empty);
        }
        let n = specs.len();
        for (i, s) in specs.iter().enumerate() {
            assert_eq!(s.id.index(), i, "node ids must be dense and in order");
        }

        let mut out_edges = vec![Vec::new(); n];
        let mut in_edge = vec![None; n];
        let mut edge_list = Vec::with_capacity(edges.len());
        for (eid, (from, to)) in edges.iter().copied().enumerate() {
            if from as usize >= n {
                return Err(TopologyError::InvalidEdge(from));
            }
            if to as usize >= n {
                return Err(TopologyError::InvalidEdge(to));
            }
            if in_edge[to as usize].is_some() {
                return Err(TopologyError::MultipleParents(NodeId(to)));
            }
            in_edge[to as usize] = Some(eid);
            out_edges[from as usize].push(eid);
            edge_list.push(Edge {
                from: NodeId(from),
                to: NodeId(to),
            });
        }

        // With at most one parent each, a cycle is a parent chain that never
        // terminates; walk up from every node.
        for start in 0..n {
            let mut hops = 0usize;
            let mut cur = start;
            while let Some(eid) = in_edge[cur] {
                cur = edge_list[eid].from.index();
                hops += 1;
                if hops > n {
                    return Err(TopologyError::CycleDetected(NodeId(start as u32)));
                }
            }
        }

        let mut sources = (0..n).filter(|&i| in_edge[i].is_none());
        let source = match sources.next() {
            Some(s) => NodeId(s as u32),
            None => return Err(TopologyError::NoSource),
        };
        if let Some(other) = sources.next() {
            return Err(TopologyError::MultipleSources(source, NodeId(other as u32)));
        }

        let mut depth = vec![0u32; n];
        for i in 0..n {
            let mut d = 0;
            let mut cur = i;
            while let Some(eid) = in_edge[cur] {
                cur = edge_list[eid].from.index();
                d += 1;
            }
            depth[i] = d;
        }

        let sinks: Vec<NodeId> = (0..n)
            .filter(|&i| out_edges[i].is_empty())
            .map(|i| NodeId(i as u32))
            .collect();

        let topo = Topology {
            specs,
            edges: edge_list,
            out_edges,
            in_edge,
            depth,
            source,
            sinks,
        };
        topo.check_kinds()?;
        Ok(topo)
    }

    fn check_kinds(&self) -> Result<(), TopologyError> {
        for s in &self.specs {
            let i = s.id.index();
            let is_source = self.in_edge[i].is_none();
            let is_sink = self.out_edges[i].is_empty();
            match s.kind {
                NodeKind::Source if !is_source => {
                    return Err(TopologyError::KindMismatch(s.id, s.kind, "has a parent"))
                }
                NodeKind::Sink if !is_sink => {
                    return Err(TopologyError::KindMismatch(s.id, s.kind, "has children"))
                }
                NodeKind::Plain | NodeKind::Enumerate | NodeKind::Aggregate if is_source => {
                    return Err(TopologyError::KindMismatch(s.id, s.kind, "is the source"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, node: NodeId) -> &NodeSpec {
        &self.specs[node.index()]
    }

    pub fn specs(&self) -> &[NodeSpec] {
        &self.specs
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.specs.len() as u32).map(NodeId)
    }

    /// Looks a node up by its name.
    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.specs.iter().find(|s| s.name == name).map(|s| s.id)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, eid: usize) -> Edge {
        self.edges[eid]
    }

    pub fn out_edge_ids(&self, node: NodeId) -> &[usize] {
        &self.out_edges[node.index()]
    }

    pub fn in_edge_id(&self, node: NodeId) -> Option<usize> {
        self.in_edge[node.index()]
    }

    pub fn depth(&self, node: NodeId) -> u32 {
        self.depth[node.index()]
    }

    pub fn source(&self) -> NodeId {
        self.source
    }

    pub fn sinks(&self) -> &[NodeId] {
        &self.sinks
    }

    /// Convenience constructor for a linear chain with the given kinds.
    pub fn chain(specs: Vec<NodeSpec>) -> Result<Self, TopologyError> {
        let edges = (1..specs.len() as u32).map(|i| (i - 1, i)).collect();
        Topology::build(specs, edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(id: u32, name: &str) -> NodeSpec {
        NodeSpec::new(id, name, NodeKind::Plain)
    }

    #[test]
    fn three_node_chain() {
        let topo = Topology::build(
            vec![
                NodeSpec::new(0, "src", NodeKind::Source),
                plain(1, "mid"),
                NodeSpec::new(2, "snk", NodeKind::Sink),
            ],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        assert_eq!(topo.source(), NodeId(0));
        assert_eq!(topo.sinks(), &[NodeId(2)]);
        assert_eq!(topo.depth(NodeId(2)), 2);
        assert_eq!(topo.in_edge_id(NodeId(1)), Some(0));
    }

    #[test]
    fn single_node_pipeline() {
        let topo =
            Topology::build(vec![NodeSpec::new(0, "only", NodeKind::Source)], vec![]).unwrap();
        assert_eq!(topo.source(), NodeId(0));
        assert_eq!(topo.sinks(), &[NodeId(0)]);
    }

    #[test]
    fn cycle_is_rejected() {
        let err = Topology::build(
            vec![plain(0, "a"), plain(1, "b")],
            vec![(0, 1), (1, 0)],
        )
        .unwrap_err();
        assert!(matches!(err, TopologyError::CycleDetected(_)));
    }

    #[test]
    fn second_parent_is_rejected() {
        let err = Topology::build(
            vec![
                NodeSpec::new(0, "s", NodeKind::Source),
                plain(1, "a"),
                plain(2, "b"),
            ],
            vec![(0, 1), (0, 2), (2, 1)],
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::MultipleParents(NodeId(1)));
    }

    #[test]
    fn disconnected_root_is_rejected() {
        let err = Topology::build(
            vec![
                NodeSpec::new(0, "s", NodeKind::Source),
                NodeSpec::new(1, "t", NodeKind::Source),
            ],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, TopologyError::MultipleSources(_, _)));
    }

    #[test]
    fn tree_fanout() {
        let topo = Topology::build(
            vec![
                NodeSpec::new(0, "src", NodeKind::Source),
                plain(1, "split"),
                NodeSpec::new(2, "l", NodeKind::Sink),
                NodeSpec::new(3, "r", NodeKind::Sink),
            ],
            vec![(0, 1), (1, 2), (1, 3)],
        )
        .unwrap();
        assert_eq!(topo.out_edge_ids(NodeId(1)).len(), 2);
        assert_eq!(topo.sinks().len(), 2);
    }
}
