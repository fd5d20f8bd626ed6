//! Region-scoped state: parent handles, per-node region context, and the
//! developer-facing hook traits for enumeration and aggregation.
//!
//! A composite (parent) object is opened into a stream of elements bracketed
//! by `RegionBegin`/`RegionEnd` signals. Nodes inside the region resolve the
//! current parent through [`CompositeRef`] handles; the runtime never looks
//! inside parent objects.

use thiserror::Error;

/// Stable handle to a parent object for the duration of a run.
///
/// Handles index the run's parent arena and are identical for every element
/// of an ensemble, so hooks may resolve them once per ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompositeRef(pub u32);

impl CompositeRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for CompositeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Append-only store of parent objects consumed by enumerating nodes.
#[derive(Debug, Default)]
pub struct ParentArena<T> {
    items: Vec<T>,
}

impl<T> ParentArena<T> {
    pub fn new() -> Self {
        ParentArena { items: Vec::new() }
    }

    pub fn insert(&mut self, item: T) -> CompositeRef {
        let id = self.items.len() as u32;
        self.items.push(item);
        CompositeRef(id)
    }

    pub fn get(&self, r: CompositeRef) -> &T {
        &self.items[r.index()]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegionError {
    #[error("region end for {parent} at node {node} with no open region")]
    UnmatchedEnd { node: u32, parent: CompositeRef },
    #[error("region begin for {parent} at node {node} while {open} is still open")]
    NestedBegin {
        node: u32,
        parent: CompositeRef,
        open: CompositeRef,
    },
    #[error("getParent called at node {node} with no open region")]
    NoOpenRegion { node: u32 },
}

/// Per-node region state: which parent's region is currently open.
///
/// Begin/End must alternate strictly; single-level enumeration only.
#[derive(Debug, Default, Clone)]
pub struct RegionContext {
    current: Option<CompositeRef>,
    /// Regions opened and closed at this node, kept for end-of-run checks.
    opened: u64,
    closed: u64,
}

impl RegionContext {
    pub fn current(&self) -> Option<CompositeRef> {
        self.current
    }

    pub fn open(&mut self, node: u32, parent: CompositeRef) -> Result<(), RegionError> {
        if let Some(open) = self.current {
            return Err(RegionError::NestedBegin { node, parent, open });
        }
        self.current = Some(parent);
        self.opened += 1;
        Ok(())
    }

    pub fn close(&mut self, node: u32, parent: CompositeRef) -> Result<(), RegionError> {
        match self.current {
            Some(open) if open == parent => {
                self.current = None;
                self.closed += 1;
                Ok(())
            }
            _ => Err(RegionError::UnmatchedEnd { node, parent }),
        }
    }

    pub fn opened(&self) -> u64 {
        self.opened
    }

    pub fn closed(&self) -> u64 {
        self.closed
    }
}

/// User hooks for plain and aggregating nodes.
///
/// `run` receives one SIMD ensemble per call; the runtime guarantees that an
/// ensemble never mixes items from two regions, so `ctx.parent()` is uniform
/// across the slice. `begin`/`end` run in the signal phase, once per parent.
pub trait NodeHooks<T>: Send {
    fn run(&mut self, ensemble: &[T], ctx: &mut dyn HookCtx<T>);

    fn begin(&mut self, _parent: CompositeRef, _ctx: &mut dyn HookCtx<T>) {}

    fn end(&mut self, _parent: CompositeRef, _ctx: &mut dyn HookCtx<T>) {}

    /// Called for user-defined signals; region signals are handled by the
    /// runtime and surface through `begin`/`end`.
    fn on_signal(&mut self, _tag: u32, _ctx: &mut dyn HookCtx<T>) {}
}

/// User hooks for enumerating nodes.
///
/// `find_count` is called once per consumed parent; `element` materializes
/// the item for one element index (commonly just the index itself — element
/// extraction stays with the application). `run` then processes element
/// ensembles exactly like a plain node's `run`.
pub trait Enumerator<T>: Send {
    fn find_count(&mut self, parent: &T) -> u64;

    fn element(&mut self, parent: &T, index: u64) -> T;

    fn run(&mut self, ensemble: &[T], ctx: &mut dyn HookCtx<T>);

    fn begin(&mut self, _parent: CompositeRef, _ctx: &mut dyn HookCtx<T>) {}

    fn end(&mut self, _parent: CompositeRef, _ctx: &mut dyn HookCtx<T>) {}
}

/// What hooks may do while a node is firing.
///
/// Implemented by the scheduler; a trait keeps hook signatures free of the
/// pipeline's internal lifetimes.
pub trait HookCtx<T> {
    /// Emits an item on the node's first output edge.
    fn push(&mut self, item: T);

    /// Emits an item on the given output edge (tree topologies).
    fn push_to(&mut self, output: usize, item: T);

    /// Emits an item carrying a dense copy of its region context; costed
    /// with the per-item tag penalty.
    fn push_tagged(&mut self, item: T);

    /// Emits a user-defined signal on the node's first output edge.
    fn emit_signal(&mut self, tag: u32);

    /// Emits a user-defined signal on the given output edge.
    fn emit_signal_to(&mut self, output: usize, tag: u32);

    /// Handle of the currently open region's parent.
    fn parent(&self) -> Option<CompositeRef>;

    /// Resolves a parent handle to the stored parent object.
    fn parent_item(&self, r: CompositeRef) -> &T;

    fn output_count(&self) -> usize;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arena_handles_are_stable() {
        let mut arena = ParentArena::new();
        let a = arena.insert("alpha");
        let b = arena.insert("beta");
        assert_eq!(*arena.get(a), "alpha");
        assert_eq!(*arena.get(b), "beta");
        assert_ne!(a, b);
    }

    #[test]
    fn region_context_alternates() {
        let mut ctx = RegionContext::default();
        let p = CompositeRef(0);
        let q = CompositeRef(1);
        ctx.open(0, p).unwrap();
        assert_eq!(ctx.current(), Some(p));
        assert!(matches!(
            ctx.open(0, q),
            Err(RegionError::NestedBegin { .. })
        ));
        ctx.close(0, p).unwrap();
        assert_eq!(ctx.current(), None);
        assert!(matches!(
            ctx.close(0, q),
            Err(RegionError::UnmatchedEnd { .. })
        ));
    }

    #[test]
    fn close_requires_matching_parent() {
        let mut ctx = RegionContext::default();
        ctx.open(3, CompositeRef(7)).unwrap();
        let err = ctx.close(3, CompositeRef(8)).unwrap_err();
        assert!(matches!(err, RegionError::UnmatchedEnd { node: 3, .. }));
    }
}
