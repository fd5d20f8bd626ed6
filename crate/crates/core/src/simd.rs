//! SIMD ensemble accounting: lane occupancy and the lock-step cost model.
//!
//! Every firing dispatches at most one ensemble of up to `width` items. On
//! lock-step hardware idle lanes cost as much as busy ones, so each firing
//! is charged `fixed + per_lane * width` regardless of how full the
//! ensemble was; that constant charge is what makes low occupancy expensive.
//! Signal handler invocations are charged the fixed cost only, and items
//! emitted with a dense context copy pay an extra per-item tag cost. The
//! three charges accumulate separately so each piece stays checkable.

use crate::topology::{NodeId, Topology};

/// Lane width and cost parameters for one pipeline instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimdConfig {
    /// Number of lock-step lanes.
    pub width: u32,
    /// Cost charged once per firing.
    pub fixed_cost_per_firing: f64,
    /// Cost charged per lane per firing (idle lanes included).
    pub per_lane_step_cost: f64,
    /// Extra cost per item emitted with a dense context copy.
    pub tag_cost_per_item: f64,
}

pub const DEFAULT_SIMD_WIDTH: u32 = 128;

impl Default for SimdConfig {
    fn default() -> Self {
        SimdConfig {
            width: DEFAULT_SIMD_WIDTH,
            fixed_cost_per_firing: 10.0,
            per_lane_step_cost: 1.0,
            tag_cost_per_item: 1.0,
        }
    }
}

impl SimdConfig {
    pub fn with_width(width: u32) -> Self {
        SimdConfig {
            width,
            ..Default::default()
        }
    }

    /// Cost of dispatching one ensemble firing.
    pub fn firing_cost(&self) -> f64 {
        self.fixed_cost_per_firing + self.per_lane_step_cost * self.width as f64
    }
}

/// Occupancy and cost counters for one node.
#[derive(Debug, Clone)]
pub struct NodeStats {
    /// All firings, including signal-only firings with an empty ensemble.
    pub firings: u64,
    /// Firings whose ensemble filled every lane.
    pub full_firings: u64,
    /// Sum of ensemble sizes over all firings.
    pub lanes_used: u64,
    /// `histogram[k]` counts firings with ensemble size `k`.
    pub histogram: Vec<u64>,
    /// Accumulated ensemble dispatch cost.
    pub ensemble_cost: f64,
    /// Accumulated signal-handler cost.
    pub handler_cost: f64,
    /// Accumulated dense-context tag cost.
    pub tag_cost: f64,
}

impl NodeStats {
    fn new(width: u32) -> Self {
        NodeStats {
            firings: 0,
            full_firings: 0,
            lanes_used: 0,
            histogram: vec![0; width as usize + 1],
            ensemble_cost: 0.0,
            handler_cost: 0.0,
            tag_cost: 0.0,
        }
    }

    /// Firings that dispatched a non-empty ensemble.
    pub fn nonempty_firings(&self) -> u64 {
        self.firings - self.histogram[0]
    }

    /// Mean lane fullness over non-empty ensembles, in `[0, 1]`.
    /// Signal-only firings dispatch no ensemble and are excluded.
    pub fn avg_occupancy(&self, width: u32) -> f64 {
        let n = self.nonempty_firings();
        if n == 0 {
            return 0.0;
        }
        self.lanes_used as f64 / (n as f64 * width as f64)
    }

    /// Fraction of non-empty ensembles that filled every lane.
    pub fn full_firing_rate(&self) -> f64 {
        let n = self.nonempty_firings();
        if n == 0 {
            return 0.0;
        }
        self.full_firings as f64 / n as f64
    }

    pub fn total_cost(&self) -> f64 {
        self.ensemble_cost + self.handler_cost + self.tag_cost
    }
}

/// Per-node firing statistics and the accumulated simulated cost.
#[derive(Debug, Clone)]
pub struct OccupancyStats {
    width: u32,
    nodes: Vec<NodeStats>,
}

impl OccupancyStats {
    pub fn new(node_count: usize, width: u32) -> Self {
        OccupancyStats {
            width,
            nodes: (0..node_count).map(|_| NodeStats::new(width)).collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn node(&self, id: NodeId) -> &NodeStats {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[NodeStats] {
        &self.nodes
    }

    /// Records one firing that dispatched an ensemble of `ensemble_size`
    /// items (possibly zero). Charges the full lock-step firing cost.
    pub fn record_firing(&mut self, node: NodeId, ensemble_size: u32, cfg: &SimdConfig) {
        assert!(ensemble_size <= self.width, "ensemble exceeds SIMD width");
        let s = &mut self.nodes[node.index()];
        s.firings += 1;
        if ensemble_size == self.width {
            s.full_firings += 1;
        }
        s.lanes_used += ensemble_size as u64;
        s.histogram[ensemble_size as usize] += 1;
        s.ensemble_cost += cfg.firing_cost();
    }

    /// Records one signal-handler invocation (fixed cost only).
    pub fn record_handler(&mut self, node: NodeId, cfg: &SimdConfig) {
        self.nodes[node.index()].handler_cost += cfg.fixed_cost_per_firing;
    }

    /// Records `count` items emitted with a dense context copy.
    pub fn record_tagged(&mut self, node: NodeId, count: u64, cfg: &SimdConfig) {
        self.nodes[node.index()].tag_cost += count as f64 * cfg.tag_cost_per_item;
    }

    pub fn total_firings(&self) -> u64 {
        self.nodes.iter().map(|s| s.firings).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.nodes.iter().map(|s| s.total_cost()).sum()
    }

    /// One CSV row per node: `node,firings,full_firings,avg_occupancy,total_cost`.
    pub fn to_csv(&self, topo: &Topology) -> String {
        let mut out = String::from("node,firings,full_firings,avg_occupancy,total_cost\n");
        for id in topo.node_ids() {
            let s = self.node(id);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                topo.spec(id).name,
                s.firings,
                s.full_firings,
                s.avg_occupancy(self.width),
                s.total_cost()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimdConfig {
        SimdConfig::default()
    }

    #[test]
    fn full_ensemble_counts_as_full() {
        let mut stats = OccupancyStats::new(1, 128);
        stats.record_firing(NodeId(0), 128, &cfg());
        let s = stats.node(NodeId(0));
        assert_eq!(s.full_firings, 1);
        assert_eq!(s.avg_occupancy(128), 1.0);
    }

    #[test]
    fn signal_only_firing_uses_no_lanes() {
        let mut stats = OccupancyStats::new(1, 128);
        stats.record_firing(NodeId(0), 0, &cfg());
        let s = stats.node(NodeId(0));
        assert_eq!(s.firings, 1);
        assert_eq!(s.lanes_used, 0);
        assert_eq!(s.nonempty_firings(), 0);
        assert_eq!(s.avg_occupancy(128), 0.0);
    }

    /// Region of 129 at width 128 splits into ensembles of 128 and 1, so the
    /// average fullness is 129/256.
    #[test]
    fn split_region_occupancy() {
        let mut stats = OccupancyStats::new(1, 128);
        stats.record_firing(NodeId(0), 128, &cfg());
        stats.record_firing(NodeId(0), 1, &cfg());
        let s = stats.node(NodeId(0));
        assert_eq!(s.avg_occupancy(128), 129.0 / 256.0);
    }

    #[test]
    fn ensemble_cost_is_firing_count_times_firing_cost() {
        let c = cfg();
        let mut stats = OccupancyStats::new(2, 128);
        stats.record_firing(NodeId(0), 5, &c);
        stats.record_firing(NodeId(0), 0, &c);
        stats.record_firing(NodeId(1), 128, &c);
        for (i, s) in stats.nodes().iter().enumerate() {
            assert_eq!(
                s.ensemble_cost,
                s.firings as f64 * c.firing_cost(),
                "node {i}"
            );
        }
        stats.record_handler(NodeId(1), &c);
        assert_eq!(stats.node(NodeId(1)).handler_cost, c.fixed_cost_per_firing);
        stats.record_tagged(NodeId(0), 3, &c);
        assert_eq!(stats.node(NodeId(0)).tag_cost, 3.0 * c.tag_cost_per_item);
    }
}
