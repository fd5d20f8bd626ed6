//! Two-phase firing scheduler and the pipeline runtime it drives.
//!
//! A firing runs a data phase (consume at most one SIMD ensemble, bounded by
//! width, credit, and reserved downstream space) followed by a signal phase
//! (deliver credit-zero signals until none remain or credit arrives). The
//! scheduler repeatedly selects a fireable node until no node has pending
//! input. Selection order affects interleaving across nodes but never the
//! per-edge consumption order.
//!
//! Enumerating nodes open one parent at a time and advance one element
//! ensemble per firing, suspending mid-region whenever downstream space runs
//! out and resuming at the saved element offset.

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::credit::{Link, ProtocolError};
use crate::queue::{Signal, SignalKind};
use crate::region::{
    CompositeRef, Enumerator, HookCtx, NodeHooks, ParentArena, RegionContext, RegionError,
};
use crate::simd::{OccupancyStats, SimdConfig};
use crate::topology::{NodeId, NodeKind, Topology};

/// What a node does when it fires.
pub enum NodeBehavior<T> {
    /// Moves staged external input downstream, one ensemble per firing.
    Source,
    /// User hooks on a `Plain` or `Aggregate` node.
    Hooks(Box<dyn NodeHooks<T>>),
    /// Enumeration of composite inputs. With `emit_signals` unset the node
    /// acts as the dense-context adapter: it expands parents into elements
    /// that each carry their own context copy, and emits no region signals.
    Enumerate {
        hooks: Box<dyn Enumerator<T>>,
        emit_signals: bool,
    },
    /// Collects items into an unbounded output buffer.
    Sink,
}

impl<T> NodeBehavior<T> {
    pub fn hooks(h: impl NodeHooks<T> + 'static) -> Self {
        NodeBehavior::Hooks(Box::new(h))
    }

    pub fn enumerate(h: impl Enumerator<T> + 'static) -> Self {
        NodeBehavior::Enumerate {
            hooks: Box::new(h),
            emit_signals: true,
        }
    }

    pub fn enumerate_tagged(h: impl Enumerator<T> + 'static) -> Self {
        NodeBehavior::Enumerate {
            hooks: Box::new(h),
            emit_signals: false,
        }
    }

    fn kind_matches(&self, kind: NodeKind) -> bool {
        matches!(
            (self, kind),
            (NodeBehavior::Source, NodeKind::Source)
                | (NodeBehavior::Hooks(_), NodeKind::Plain)
                | (NodeBehavior::Hooks(_), NodeKind::Aggregate)
                | (NodeBehavior::Enumerate { .. }, NodeKind::Enumerate)
                | (NodeBehavior::Sink, NodeKind::Sink)
        )
    }
}

/// One scheduled execution of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiringRecord {
    /// Monotone firing index across the whole run.
    pub sequence: u64,
    pub node: NodeId,
    /// Size of the SIMD ensemble dispatched this firing. For enumerating
    /// nodes this counts elements, not the consumed parent.
    pub ensemble_size: u32,
    /// Data items dequeued from the input queue.
    pub items_consumed: u32,
    pub signals_consumed: u32,
    pub items_emitted: u32,
    pub signals_emitted: u32,
}

impl FiringRecord {
    fn did_work(&self) -> bool {
        self.ensemble_size > 0
            || self.items_consumed > 0
            || self.signals_consumed > 0
            || self.items_emitted > 0
            || self.signals_emitted > 0
    }
}

/// Node selection strategy for [`Pipeline::run_to_completion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Fire the most-downstream fireable node (ties broken by lower id).
    /// Drains queues toward the sinks, freeing space for upstream firings.
    DeepestFirst,
    /// Uniform-random choice among fireable nodes; for fuzzing.
    Random { seed: u64 },
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("node {node} exceeded its reserved output budget on edge {edge}")]
    OutputOverflow { node: NodeId, edge: usize },
    #[error("node {node} pushed to nonexistent output {output}")]
    NoSuchOutput { node: NodeId, output: usize },
    #[error("node {node} emitted a signal outside its data phase or budget")]
    SignalBudgetExceeded { node: NodeId },
    #[error("fire() called on non-fireable node {0}")]
    NotFireable(NodeId),
    #[error("no fireable node although {0} node(s) have pending input")]
    ProgressStall(usize),
    #[error("{0} consecutive firings made no progress")]
    Livelock(usize),
    #[error("region signal reached enumerating node {0}; nested enumeration is unsupported")]
    NestedEnumeration(NodeId),
}

/// Passive tap on pipeline events; every callback defaults to a no-op.
///
/// Emission and consumption callbacks fire in protocol order per edge, so an
/// observer can reconstruct the exact per-edge streams. `ensemble` reports
/// each dispatched SIMD ensemble before the node's `run` hook sees it.
#[allow(unused_variables)]
pub trait Observer<T>: Send {
    fn emit_data(&mut self, edge: usize, item: &T) {}
    fn consume_data(&mut self, node: NodeId, edge: usize, item: &T) {}
    fn emit_signal(&mut self, edge: usize, signal: &Signal) {}
    fn consume_signal(&mut self, node: NodeId, edge: usize, signal: &Signal) {}
    fn ensemble(&mut self, node: NodeId, items: &[T]) {}
}

type ObserverSlot<T> = Option<Box<dyn Observer<T>>>;

/// Queue sizing and instrumentation knobs for one pipeline instance.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub simd: SimdConfig,
    /// Data queue capacity per edge; defaults to `8 * width`.
    pub data_queue_capacity: Option<usize>,
    /// Signal queue capacity per edge; defaults to `2 * width`.
    pub signal_queue_capacity: Option<usize>,
    /// Keep a [`FiringRecord`] per firing.
    pub record_trace: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            simd: SimdConfig::default(),
            data_queue_capacity: None,
            signal_queue_capacity: None,
            record_trace: false,
        }
    }
}

impl PipelineConfig {
    pub fn with_simd(simd: SimdConfig) -> Self {
        PipelineConfig {
            simd,
            ..Default::default()
        }
    }

    pub fn data_capacity(&self) -> usize {
        self.data_queue_capacity
            .unwrap_or(8 * self.simd.width as usize)
    }

    pub fn signal_capacity(&self) -> usize {
        self.signal_queue_capacity
            .unwrap_or(2 * self.simd.width as usize)
    }
}

/// Progress of an in-flight enumeration region.
#[derive(Debug, Clone, Copy)]
struct EnumProgress {
    parent: CompositeRef,
    count: u64,
    next: u64,
}

/// Aggregate results of one completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub firings: u64,
    pub stats: OccupancyStats,
    pub trace: Option<Vec<FiringRecord>>,
}

/// A single-threaded pipeline instance.
///
/// Usage: build, stage the source input, run to completion, read the sink
/// outputs and stats. Instances may be moved between threads but are never
/// shared; independent instances can run in parallel.
pub struct Pipeline<T> {
    topo: Topology,
    cfg: PipelineConfig,
    behaviors: Vec<NodeBehavior<T>>,
    links: Vec<Link<T>>,
    regions: Vec<RegionContext>,
    enum_state: Vec<Option<EnumProgress>>,
    arena: ParentArena<T>,
    stage: VecDeque<T>,
    sink_out: Vec<Vec<T>>,
    stats: OccupancyStats,
    trace: Vec<FiringRecord>,
    observer: ObserverSlot<T>,
    /// Node ids sorted deepest-first for the default policy.
    fire_order: Vec<NodeId>,
    sequence: u64,
    scratch: Vec<T>,
    elem_scratch: Vec<T>,
}

impl<T: Send + 'static> Pipeline<T> {
    pub fn build(
        topo: Topology,
        behaviors: Vec<NodeBehavior<T>>,
        cfg: PipelineConfig,
    ) -> Result<Self, RuntimeError> {
        if behaviors.len() != topo.len() {
            return Err(RuntimeError::Config(format!(
                "{} behaviors for {} nodes",
                behaviors.len(),
                topo.len()
            )));
        }
        if cfg.simd.width == 0 {
            return Err(RuntimeError::Config("SIMD width must be >= 1".into()));
        }
        let data_cap = cfg.data_capacity();
        let sig_cap = cfg.signal_capacity();
        for (spec, behavior) in topo.specs().iter().zip(&behaviors) {
            if !behavior.kind_matches(spec.kind) {
                return Err(RuntimeError::Config(format!(
                    "node {} is declared {} but was given an incompatible behavior",
                    spec.name, spec.kind
                )));
            }
            // Minimum admissible capacities: one input's worst-case output
            // must fit, else the node can never fire.
            if !topo.out_edge_ids(spec.id).is_empty() {
                if (spec.max_data_out as usize) > data_cap {
                    return Err(RuntimeError::Config(format!(
                        "data capacity {} below node {}'s per-input bound {}",
                        data_cap, spec.name, spec.max_data_out
                    )));
                }
                if (spec.max_signals_out as usize) > sig_cap {
                    return Err(RuntimeError::Config(format!(
                        "signal capacity {} below node {}'s per-input bound {}",
                        sig_cap, spec.name, spec.max_signals_out
                    )));
                }
            }
            if spec.kind == NodeKind::Enumerate {
                let outs = topo.out_edge_ids(spec.id);
                if outs.len() != 1 {
                    return Err(RuntimeError::Config(format!(
                        "enumerating node {} must have exactly one child",
                        spec.name
                    )));
                }
                // Element ensembles are dispatched at full width; the output
                // queue must hold one full ensemble's worst case.
                let need = cfg.simd.width as usize * spec.max_data_out.max(1) as usize;
                if data_cap < need {
                    return Err(RuntimeError::Config(format!(
                        "data capacity {} below node {}'s full-ensemble reservation {}",
                        data_cap, spec.name, need
                    )));
                }
                let signals = matches!(
                    behavior,
                    NodeBehavior::Enumerate {
                        emit_signals: true,
                        ..
                    }
                );
                if signals && sig_cap < 2 {
                    return Err(RuntimeError::Config(format!(
                        "signal capacity {} cannot hold node {}'s region brackets",
                        sig_cap, spec.name
                    )));
                }
            }
        }

        let n = topo.len();
        let links = topo
            .edges()
            .iter()
            .map(|_| Link::new(data_cap, sig_cap))
            .collect();
        let mut fire_order: Vec<NodeId> = topo.node_ids().collect();
        fire_order.sort_by_key(|&id| (std::cmp::Reverse(topo.depth(id)), id.0));
        let stats = OccupancyStats::new(n, cfg.simd.width);
        Ok(Pipeline {
            topo,
            behaviors,
            links,
            regions: vec![RegionContext::default(); n],
            enum_state: vec![None; n],
            arena: ParentArena::new(),
            stage: VecDeque::new(),
            sink_out: (0..n).map(|_| Vec::new()).collect(),
            stats,
            trace: Vec::new(),
            observer: None,
            fire_order,
            sequence: 0,
            scratch: Vec::new(),
            elem_scratch: Vec::new(),
            cfg,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &OccupancyStats {
        &self.stats
    }

    pub fn link(&self, edge: usize) -> &Link<T> {
        &self.links[edge]
    }

    pub fn arena(&self) -> &ParentArena<T> {
        &self.arena
    }

    pub fn set_observer(&mut self, observer: Box<dyn Observer<T>>) {
        self.observer = Some(observer);
    }

    /// Appends items to the source node's external input buffer.
    pub fn stage_input(&mut self, items: impl IntoIterator<Item = T>) {
        self.stage.extend(items);
    }

    pub fn staged_len(&self) -> usize {
        self.stage.len()
    }

    /// Items collected at a sink (or at a childless source).
    pub fn sink_output(&self, node: NodeId) -> &[T] {
        &self.sink_out[node.index()]
    }

    pub fn take_sink_output(&mut self, node: NodeId) -> Vec<T> {
        std::mem::take(&mut self.sink_out[node.index()])
    }

    pub fn take_trace(&mut self) -> Vec<FiringRecord> {
        std::mem::take(&mut self.trace)
    }

    fn has_pending(&self, node: NodeId) -> bool {
        let i = node.index();
        if self.enum_state[i].is_some() {
            return true;
        }
        match self.behaviors[i] {
            NodeBehavior::Source => !self.stage.is_empty(),
            _ => match self.topo.in_edge_id(node) {
                Some(e) => self.links[e].has_pending(),
                None => false,
            },
        }
    }

    /// True if the node forwards region signals to its children.
    fn forwards_region_signals(&self, node: NodeId) -> bool {
        let spec = self.topo.spec(node);
        !matches!(spec.kind, NodeKind::Aggregate | NodeKind::Sink)
            && !self.topo.out_edge_ids(node).is_empty()
    }

    /// Space on every output edge for `inputs` consumed inputs' worst case.
    fn output_space_for(&self, node: NodeId, inputs: u64) -> bool {
        let spec = self.topo.spec(node);
        self.topo.out_edge_ids(node).iter().all(|&e| {
            let link = &self.links[e];
            link.data_free() as u64 >= inputs * spec.max_data_out as u64
                && link.signal_free() as u64 >= inputs * spec.max_signals_out as u64
        })
    }

    /// Space to consume one specific signal: hook pushes plus a forwarding
    /// slot when the signal is a region bracket this node re-emits.
    fn signal_space_for(&self, node: NodeId, kind: SignalKind) -> bool {
        let spec = self.topo.spec(node);
        let forward = kind.is_region() && self.forwards_region_signals(node);
        self.topo.out_edge_ids(node).iter().all(|&e| {
            let link = &self.links[e];
            link.data_free() as u64 >= spec.max_data_out as u64
                && (!forward || link.signal_free() >= 1)
        })
    }

    /// A deliverable head signal: current credit zero and head credit zero.
    /// Performs the rule-2b transfer as part of the decision procedure.
    fn head_deliverable(&mut self, edge: usize) -> Option<SignalKind> {
        let link = &mut self.links[edge];
        let _ = link.admissible_data_count(); // transfer attempt
        if link.receiver().current_credit() != 0 {
            return None;
        }
        match link.signals().head() {
            Some(s) if s.credit == 0 => Some(s.kind),
            _ => None,
        }
    }

    /// Fireability per the two-phase rules: pending input, plus reserved
    /// space to consume at least one data item or one deliverable signal.
    pub fn is_fireable(&mut self, node: NodeId) -> bool {
        if !self.has_pending(node) {
            return false;
        }
        let i = node.index();
        match &self.behaviors[i] {
            NodeBehavior::Source => match self.topo.out_edge_ids(node).first() {
                Some(&e) => self.links[e].data_free() >= 1,
                None => true,
            },
            NodeBehavior::Sink => {
                let e = self.topo.in_edge_id(node).expect("sink has an input");
                if self.links[e].admissible_data_count() >= 1 {
                    return true;
                }
                self.head_deliverable(e).is_some()
            }
            NodeBehavior::Hooks(_) => {
                let e = self.topo.in_edge_id(node).expect("compute node input");
                if self.links[e].admissible_data_count() >= 1 && self.output_space_for(node, 1) {
                    return true;
                }
                match self.head_deliverable(e) {
                    Some(kind) => self.signal_space_for(node, kind),
                    None => false,
                }
            }
            NodeBehavior::Enumerate { emit_signals, .. } => {
                let signals = *emit_signals;
                let spec = self.topo.spec(node);
                let out = self.topo.out_edge_ids(node)[0];
                let mdo = spec.max_data_out.max(1) as u64;
                let width = self.cfg.simd.width as u64;
                if let Some(prog) = self.enum_state[i] {
                    // Resume: one full-width (or region-final) element
                    // ensemble, plus the closing bracket's slot.
                    let remaining = prog.count - prog.next;
                    let chunk = remaining.min(width);
                    return self.links[out].data_free() as u64 >= chunk * mdo
                        && (!signals || self.links[out].signal_free() >= 1);
                }
                let e = self.topo.in_edge_id(node).expect("enumerate node input");
                let can_open = self.links[e].admissible_data_count() >= 1
                    && self.links[out].data_free() as u64 >= width * mdo
                    && (!signals || self.links[out].signal_free() >= 2);
                if can_open {
                    return true;
                }
                self.head_deliverable(e).is_some()
            }
        }
    }

    /// Fires one node through its data phase then signal phase.
    pub fn fire_node(&mut self, node: NodeId) -> Result<FiringRecord, RuntimeError> {
        if !self.is_fireable(node) {
            return Err(RuntimeError::NotFireable(node));
        }
        let mut rec = FiringRecord {
            sequence: self.sequence,
            node,
            ensemble_size: 0,
            items_consumed: 0,
            signals_consumed: 0,
            items_emitted: 0,
            signals_emitted: 0,
        };
        self.sequence += 1;

        let i = node.index();
        // The behavior is taken out for the duration of the firing so hook
        // calls can coexist with mutable access to the rest of the state.
        let mut behavior = std::mem::replace(&mut self.behaviors[i], NodeBehavior::Sink);
        let result = match &mut behavior {
            NodeBehavior::Source => self.fire_source(node, &mut rec),
            NodeBehavior::Sink => self.fire_sink(node, &mut rec),
            NodeBehavior::Hooks(hooks) => self.fire_hooks(node, hooks.as_mut(), &mut rec),
            NodeBehavior::Enumerate {
                hooks,
                emit_signals,
            } => self.fire_enumerate(node, hooks.as_mut(), *emit_signals, &mut rec),
        };
        self.behaviors[i] = behavior;
        result?;

        self.stats
            .record_firing(node, rec.ensemble_size, &self.cfg.simd);
        if self.cfg.record_trace {
            self.trace.push(rec);
        }
        Ok(rec)
    }

    fn fire_source(&mut self, node: NodeId, rec: &mut FiringRecord) -> Result<(), RuntimeError> {
        let width = self.cfg.simd.width as usize;
        let out = self.topo.out_edge_ids(node).first().copied();
        let space = match out {
            Some(e) => self.links[e].data_free(),
            None => usize::MAX,
        };
        let k = width.min(self.stage.len()).min(space);
        self.scratch.clear();
        for _ in 0..k {
            self.scratch.push(self.stage.pop_front().expect("staged"));
        }
        if let Some(obs) = self.observer.as_mut() {
            obs.ensemble(node, &self.scratch);
        }
        let mut scratch = std::mem::take(&mut self.scratch);
        for item in scratch.drain(..) {
            match out {
                Some(e) => {
                    if let Some(obs) = self.observer.as_mut() {
                        obs.emit_data(e, &item);
                    }
                    self.links[e].emit_data(item)?;
                    rec.items_emitted += 1;
                }
                None => self.sink_out[node.index()].push(item),
            }
        }
        self.scratch = scratch;
        rec.ensemble_size = k as u32;
        rec.items_consumed = k as u32;
        Ok(())
    }

    fn fire_sink(&mut self, node: NodeId, rec: &mut FiringRecord) -> Result<(), RuntimeError> {
        let e = self.topo.in_edge_id(node).expect("sink input");
        let width = self.cfg.simd.width as u64;
        let k = self.links[e].admissible_data_count().min(width);
        if k > 0 {
            self.scratch.clear();
            let mut scratch = std::mem::take(&mut self.scratch);
            self.links[e].consume_data(k, &mut scratch)?;
            if let Some(obs) = self.observer.as_mut() {
                for item in &scratch {
                    obs.consume_data(node, e, item);
                }
                obs.ensemble(node, &scratch);
            }
            self.sink_out[node.index()].extend(scratch.drain(..));
            self.scratch = scratch;
            rec.ensemble_size = k as u32;
            rec.items_consumed = k as u32;
        }
        // Signal phase: sinks track regions and drop user signals.
        while self.links[e].receiver().current_credit() == 0 {
            let Some(signal) = self.links[e].next_consumable_signal() else {
                break;
            };
            if let Some(obs) = self.observer.as_mut() {
                obs.consume_signal(node, e, &signal);
            }
            match signal.kind {
                SignalKind::RegionBegin => {
                    let p = signal.payload.expect("region payload");
                    self.regions[node.index()].open(node.0, p)?;
                }
                SignalKind::RegionEnd => {
                    let p = signal.payload.expect("region payload");
                    self.regions[node.index()].close(node.0, p)?;
                }
                SignalKind::UserDefined(_) => {}
            }
            self.stats.record_handler(node, &self.cfg.simd);
            rec.signals_consumed += 1;
        }
        Ok(())
    }

    fn fire_hooks(
        &mut self,
        node: NodeId,
        hooks: &mut dyn NodeHooks<T>,
        rec: &mut FiringRecord,
    ) -> Result<(), RuntimeError> {
        let e = self.topo.in_edge_id(node).expect("compute node input");
        let spec = self.topo.spec(node).clone();
        let width = self.cfg.simd.width as u64;

        // Data phase: one ensemble bounded by width, credit, and the space
        // reserved for this many inputs' worst-case emission.
        let space_cap = self
            .topo
            .out_edge_ids(node)
            .iter()
            .map(|&oe| {
                let link = &self.links[oe];
                let by_data = if spec.max_data_out > 0 {
                    link.data_free() as u64 / spec.max_data_out as u64
                } else {
                    u64::MAX
                };
                let by_sig = if spec.max_signals_out > 0 {
                    link.signal_free() as u64 / spec.max_signals_out as u64
                } else {
                    u64::MAX
                };
                by_data.min(by_sig)
            })
            .min()
            .unwrap_or(u64::MAX);
        let k = self.links[e]
            .admissible_data_count()
            .min(width)
            .min(space_cap);
        if k > 0 {
            self.scratch.clear();
            let mut scratch = std::mem::take(&mut self.scratch);
            self.links[e].consume_data(k, &mut scratch)?;
            if let Some(obs) = self.observer.as_mut() {
                for item in &scratch {
                    obs.consume_data(node, e, item);
                }
                obs.ensemble(node, &scratch);
            }
            let (items, signals) =
                self.with_ctx(node, k * spec.max_data_out as u64, k * spec.max_signals_out as u64, |hooks_ctx| {
                    hooks.run(&scratch, hooks_ctx)
                })?;
            rec.items_emitted += items;
            rec.signals_emitted += signals;
            scratch.clear();
            self.scratch = scratch;
            rec.ensemble_size = k as u32;
            rec.items_consumed = k as u32;
        }

        // Signal phase: deliver credit-zero signals while space allows.
        loop {
            if self.links[e].receiver().current_credit() != 0 {
                break;
            }
            let Some(kind) = self.head_deliverable(e) else {
                break;
            };
            if !self.signal_space_for(node, kind) {
                break;
            }
            let signal = self.links[e]
                .next_consumable_signal()
                .expect("deliverable head");
            if let Some(obs) = self.observer.as_mut() {
                obs.consume_signal(node, e, &signal);
            }
            self.dispatch_signal(node, &spec, hooks, signal, rec)?;
            self.stats.record_handler(node, &self.cfg.simd);
            rec.signals_consumed += 1;
        }
        Ok(())
    }

    fn dispatch_signal(
        &mut self,
        node: NodeId,
        spec: &crate::topology::NodeSpec,
        hooks: &mut dyn NodeHooks<T>,
        signal: Signal,
        rec: &mut FiringRecord,
    ) -> Result<(), RuntimeError> {
        let forward = self.forwards_region_signals(node);
        match signal.kind {
            SignalKind::RegionBegin => {
                let p = signal.payload.expect("region payload");
                self.regions[node.index()].open(node.0, p)?;
                if forward {
                    rec.signals_emitted += self.forward_region(node, SignalKind::RegionBegin, p)?;
                }
                let (items, _) = self.with_ctx(node, spec.max_data_out as u64, 0, |ctx| {
                    hooks.begin(p, ctx)
                })?;
                rec.items_emitted += items;
            }
            SignalKind::RegionEnd => {
                let p = signal.payload.expect("region payload");
                let (items, _) = self.with_ctx(node, spec.max_data_out as u64, 0, |ctx| {
                    hooks.end(p, ctx)
                })?;
                rec.items_emitted += items;
                if forward {
                    rec.signals_emitted += self.forward_region(node, SignalKind::RegionEnd, p)?;
                }
                self.regions[node.index()].close(node.0, p)?;
            }
            SignalKind::UserDefined(tag) => {
                let (items, _) = self.with_ctx(node, spec.max_data_out as u64, 0, |ctx| {
                    hooks.on_signal(tag, ctx)
                })?;
                rec.items_emitted += items;
            }
        }
        Ok(())
    }

    fn forward_region(
        &mut self,
        node: NodeId,
        kind: SignalKind,
        parent: CompositeRef,
    ) -> Result<u32, RuntimeError> {
        let mut emitted = 0;
        for oi in 0..self.topo.out_edge_ids(node).len() {
            let e = self.topo.out_edge_ids(node)[oi];
            self.links[e].emit_signal(kind, Some(parent))?;
            if let Some(obs) = self.observer.as_mut() {
                let sig = self.links[e].signals().iter().last().expect("just queued");
                let sig = sig.clone();
                obs.emit_signal(e, &sig);
            }
            emitted += 1;
        }
        Ok(emitted)
    }

    fn fire_enumerate(
        &mut self,
        node: NodeId,
        hooks: &mut dyn Enumerator<T>,
        emit_signals: bool,
        rec: &mut FiringRecord,
    ) -> Result<(), RuntimeError> {
        let i = node.index();
        let e = self.topo.in_edge_id(node).expect("enumerate node input");
        let out = self.topo.out_edge_ids(node)[0];
        let spec = self.topo.spec(node).clone();
        let width = self.cfg.simd.width as u64;
        let mdo = spec.max_data_out.max(1) as u64;

        if self.enum_state[i].is_none() {
            let can_open = self.links[e].admissible_data_count() >= 1
                && self.links[out].data_free() as u64 >= width * mdo
                && (!emit_signals || self.links[out].signal_free() >= 2);
            if can_open {
                self.scratch.clear();
                let mut scratch = std::mem::take(&mut self.scratch);
                self.links[e].consume_data(1, &mut scratch)?;
                let parent_item = scratch.pop().expect("one parent");
                self.scratch = scratch;
                if let Some(obs) = self.observer.as_mut() {
                    obs.consume_data(node, e, &parent_item);
                }
                rec.items_consumed = 1;
                let parent = self.arena.insert(parent_item);
                let count = hooks.find_count(self.arena.get(parent));
                if emit_signals {
                    self.links[out].emit_signal(SignalKind::RegionBegin, Some(parent))?;
                    if let Some(obs) = self.observer.as_mut() {
                        let sig = self.links[out].signals().iter().last().unwrap().clone();
                        obs.emit_signal(out, &sig);
                    }
                    rec.signals_emitted += 1;
                }
                self.regions[i].open(node.0, parent)?;
                self.with_ctx(node, 0, 0, |ctx| hooks.begin(parent, ctx))?;
                self.enum_state[i] = Some(EnumProgress {
                    parent,
                    count,
                    next: 0,
                });
            }
        }

        if let Some(prog) = self.enum_state[i] {
            let remaining = prog.count - prog.next;
            if remaining > 0 {
                let space = self.links[out].data_free() as u64 / mdo;
                let m = remaining.min(width).min(space);
                if m > 0 {
                    self.elem_scratch.clear();
                    let mut elems = std::mem::take(&mut self.elem_scratch);
                    for idx in prog.next..prog.next + m {
                        elems.push(hooks.element(self.arena.get(prog.parent), idx));
                    }
                    if let Some(obs) = self.observer.as_mut() {
                        obs.ensemble(node, &elems);
                    }
                    let (items, signals) =
                        self.with_ctx(node, m * spec.max_data_out as u64, 0, |ctx| {
                            hooks.run(&elems, ctx)
                        })?;
                    rec.items_emitted += items;
                    rec.signals_emitted += signals;
                    elems.clear();
                    self.elem_scratch = elems;
                    rec.ensemble_size = m as u32;
                    self.enum_state[i].as_mut().unwrap().next += m;
                }
            }
            let prog = self.enum_state[i].unwrap();
            if prog.next == prog.count {
                let parent = prog.parent;
                let (items, _) = self.with_ctx(node, 0, 0, |ctx| hooks.end(parent, ctx))?;
                rec.items_emitted += items;
                if emit_signals {
                    self.links[out].emit_signal(SignalKind::RegionEnd, Some(parent))?;
                    if let Some(obs) = self.observer.as_mut() {
                        let sig = self.links[out].signals().iter().last().unwrap().clone();
                        obs.emit_signal(out, &sig);
                    }
                    rec.signals_emitted += 1;
                }
                self.regions[i].close(node.0, parent)?;
                self.enum_state[i] = None;
            }
        }

        if !rec.did_work() {
            // Input signal phase, reachable only between regions. Region
            // signals here would mean nested enumeration.
            while self.links[e].receiver().current_credit() == 0 {
                let Some(kind) = self.head_deliverable(e) else {
                    break;
                };
                if kind.is_region() {
                    return Err(RuntimeError::NestedEnumeration(node));
                }
                let signal = self.links[e].next_consumable_signal().expect("deliverable");
                if let Some(obs) = self.observer.as_mut() {
                    obs.consume_signal(node, e, &signal);
                }
                self.stats.record_handler(node, &self.cfg.simd);
                rec.signals_consumed += 1;
            }
        }
        Ok(())
    }

    /// Builds a hook context over the node's output edges, runs `f`, and
    /// returns the (items, signals) emitted. Budget faults surface here.
    fn with_ctx<R>(
        &mut self,
        node: NodeId,
        data_budget_per_edge: u64,
        signal_budget_per_edge: u64,
        f: impl FnOnce(&mut dyn HookCtx<T>) -> R,
    ) -> Result<(u32, u32), RuntimeError> {
        let out_edges = self.topo.out_edge_ids(node);
        let mut ctx = Ctx {
            node,
            out_edges,
            links: &mut self.links,
            arena: &self.arena,
            current_parent: self.regions[node.index()]
                .current()
                .or(self.enum_state[node.index()].map(|p| p.parent)),
            stats: &mut self.stats,
            simd: &self.cfg.simd,
            observer: &mut self.observer,
            data_budget: vec![data_budget_per_edge; out_edges.len()],
            signal_budget: vec![signal_budget_per_edge; out_edges.len()],
            emitted_items: 0,
            emitted_signals: 0,
            fault: None,
        };
        f(&mut ctx);
        let emitted = (ctx.emitted_items, ctx.emitted_signals);
        match ctx.fault.take() {
            Some(err) => Err(err),
            None => Ok(emitted),
        }
    }

    /// Runs the scheduler loop until no node has pending data or signals.
    pub fn run_to_completion(
        &mut self,
        policy: SelectionPolicy,
    ) -> Result<RunSummary, RuntimeError> {
        let mut rng = match policy {
            SelectionPolicy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            SelectionPolicy::DeepestFirst => None,
        };
        let mut firings = 0u64;
        let mut idle_streak = 0usize;
        let order = self.fire_order.clone();
        let mut candidates: Vec<NodeId> = Vec::new();
        loop {
            let selected = match rng.as_mut() {
                None => {
                    let mut pick = None;
                    for &id in &order {
                        if self.is_fireable(id) {
                            pick = Some(id);
                            break;
                        }
                    }
                    pick
                }
                Some(rng) => {
                    candidates.clear();
                    for i in 0..self.topo.len() as u32 {
                        let id = NodeId(i);
                        if self.is_fireable(id) {
                            candidates.push(id);
                        }
                    }
                    if candidates.is_empty() {
                        None
                    } else {
                        Some(candidates[rng.gen_range(0..candidates.len())])
                    }
                }
            };
            let Some(node) = selected else {
                // Progress property: pending input implies a fireable node.
                let pending = self
                    .topo
                    .node_ids()
                    .filter(|&id| self.has_pending(id))
                    .count();
                if pending > 0 {
                    return Err(RuntimeError::ProgressStall(pending));
                }
                break;
            };
            let rec = self.fire_node(node)?;
            firings += 1;
            if rec.did_work() {
                idle_streak = 0;
            } else {
                idle_streak += 1;
                if idle_streak > self.topo.len() {
                    return Err(RuntimeError::Livelock(idle_streak));
                }
            }
        }
        self.assert_drained();
        Ok(RunSummary {
            firings,
            stats: self.stats.clone(),
            trace: if self.cfg.record_trace {
                Some(std::mem::take(&mut self.trace))
            } else {
                None
            },
        })
    }

    /// End-of-run bookkeeping: every queue drained, every region closed,
    /// every item that entered a queue also left it.
    fn assert_drained(&self) {
        for (eid, link) in self.links.iter().enumerate() {
            assert!(
                !link.has_pending(),
                "edge {eid} not drained at termination"
            );
            assert_eq!(
                link.data().total_enqueued(),
                link.data().total_dequeued(),
                "conservation violated on edge {eid}"
            );
        }
        for (i, st) in self.enum_state.iter().enumerate() {
            assert!(st.is_none(), "node {i} left a region open");
        }
        for (i, r) in self.regions.iter().enumerate() {
            assert!(
                r.current().is_none(),
                "node {i} terminated inside a region"
            );
            assert_eq!(r.opened(), r.closed(), "node {i} region count mismatch");
        }
    }

    /// CSV rendering of a trace: one row per firing.
    pub fn trace_to_csv(topo: &Topology, trace: &[FiringRecord]) -> String {
        let mut out = String::from(
            "sequence,node,ensemble_size,items_consumed,signals_consumed,items_emitted,signals_emitted\n",
        );
        for r in trace {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.sequence,
                topo.spec(r.node).name,
                r.ensemble_size,
                r.items_consumed,
                r.signals_consumed,
                r.items_emitted,
                r.signals_emitted
            ));
        }
        out
    }
}

/// Hook-visible slice of the pipeline during one firing.
struct Ctx<'a, T> {
    node: NodeId,
    out_edges: &'a [usize],
    links: &'a mut Vec<Link<T>>,
    arena: &'a ParentArena<T>,
    current_parent: Option<CompositeRef>,
    stats: &'a mut OccupancyStats,
    simd: &'a SimdConfig,
    observer: &'a mut ObserverSlot<T>,
    data_budget: Vec<u64>,
    signal_budget: Vec<u64>,
    emitted_items: u32,
    emitted_signals: u32,
    fault: Option<RuntimeError>,
}

impl<T> Ctx<'_, T> {
    fn push_inner(&mut self, output: usize, item: T, tagged: bool) {
        if self.fault.is_some() {
            return;
        }
        let Some(&edge) = self.out_edges.get(output) else {
            self.fault = Some(RuntimeError::NoSuchOutput {
                node: self.node,
                output,
            });
            return;
        };
        if self.data_budget[output] == 0 {
            self.fault = Some(RuntimeError::OutputOverflow {
                node: self.node,
                edge,
            });
            return;
        }
        self.data_budget[output] -= 1;
        if let Some(obs) = self.observer.as_mut() {
            obs.emit_data(edge, &item);
        }
        if let Err(err) = self.links[edge].emit_data(item) {
            self.fault = Some(err.into());
            return;
        }
        if tagged {
            self.stats.record_tagged(self.node, 1, self.simd);
        }
        self.emitted_items += 1;
    }
}

impl<T> HookCtx<T> for Ctx<'_, T> {
    fn push(&mut self, item: T) {
        self.push_inner(0, item, false);
    }

    fn push_to(&mut self, output: usize, item: T) {
        self.push_inner(output, item, false);
    }

    fn push_tagged(&mut self, item: T) {
        self.push_inner(0, item, true);
    }

    fn emit_signal(&mut self, tag: u32) {
        self.emit_signal_to(0, tag);
    }

    fn emit_signal_to(&mut self, output: usize, tag: u32) {
        if self.fault.is_some() {
            return;
        }
        let Some(&edge) = self.out_edges.get(output) else {
            self.fault = Some(RuntimeError::NoSuchOutput {
                node: self.node,
                output,
            });
            return;
        };
        if self.signal_budget[output] == 0 {
            self.fault = Some(RuntimeError::SignalBudgetExceeded { node: self.node });
            return;
        }
        self.signal_budget[output] -= 1;
        if let Err(err) = self.links[edge].emit_signal(SignalKind::UserDefined(tag), None) {
            self.fault = Some(err.into());
            return;
        }
        if let Some(obs) = self.observer.as_mut() {
            let sig = self.links[edge].signals().iter().last().unwrap().clone();
            obs.emit_signal(edge, &sig);
        }
        self.emitted_signals += 1;
    }

    fn parent(&self) -> Option<CompositeRef> {
        self.current_parent
    }

    fn parent_item(&self, r: CompositeRef) -> &T {
        self.arena.get(r)
    }

    fn output_count(&self) -> usize {
        self.out_edges.len()
    }
}
