//! Block-granular token prefix cache.
//!
//! Every node of the tree holds exactly one block of `block_size` tokens and
//! is keyed under its parent by those tokens, so a root-to-node path spells a
//! block-aligned token prefix. Trailing partial blocks are never cached.
//! Requests pin the path they use; unpinned leaves are evicted least recently
//! used first, with insertion order breaking ties.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("block_size must be positive")]
    ZeroBlockSize,
    #[error("release of a path that is not pinned")]
    NotPinned,
    #[error("reuse rate is undefined when no tokens were processed")]
    UndefinedReuseRate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub reused_tokens: u64,
    pub computed_tokens: u64,
    pub evicted_tokens: u64,
}

impl CacheStats {
    pub fn reuse_rate(&self) -> Result<f64, CacheError> {
        reuse_rate(self.reused_tokens, self.computed_tokens)
    }
}

/// `reused / (reused + computed)`.
pub fn reuse_rate(reused: u64, computed: u64) -> Result<f64, CacheError> {
    let total = reused + computed;
    if total == 0 {
        return Err(CacheError::UndefinedReuseRate);
    }
    Ok(reused as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct NodeId {
    index: u32,
    generation: u32,
}

#[derive(Debug)]
struct Node {
    generation: u32,
    parent: Option<NodeId>,
    block: Box<[TokenId]>,
    children: HashMap<Box<[TokenId]>, NodeId>,
    refcount: u32,
    last_access: u64,
    inserted: u64,
    /// Key in the evictable set while this node is an unpinned leaf.
    evict_key: Option<(u64, u64, NodeId)>,
}

/// Pins held by one request, returned by [`CacheTree::match_prefix`] and
/// extended by [`CacheTree::insert`].
#[derive(Debug, Clone, PartialEq, Eq)]
#[must_use = "pinned paths must be released"]
pub struct CacheLease {
    path: Vec<NodeId>,
    matched_len: usize,
}

impl CacheLease {
    /// Block-aligned number of prompt tokens found in the cache.
    pub fn matched_len(&self) -> usize {
        self.matched_len
    }

    pub fn pinned_blocks(&self) -> usize {
        self.path.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertOutcome {
    pub newly_cached: usize,
    pub evicted: usize,
    /// Blocks that could not be cached because every candidate was pinned.
    pub truncated: bool,
}

#[derive(Debug)]
pub struct CacheTree {
    block_size: usize,
    capacity_tokens: usize,
    occupied_tokens: usize,
    slots: Vec<Option<Node>>,
    generations: Vec<u32>,
    free: Vec<u32>,
    evictable: BTreeSet<(u64, u64, NodeId)>,
    clock: u64,
    stats: CacheStats,
}

const ROOT: NodeId = NodeId {
    index: 0,
    generation: 0,
};

impl CacheTree {
    pub fn new(block_size: usize, capacity_tokens: usize) -> Result<Self, CacheError> {
        if block_size == 0 {
            return Err(CacheError::ZeroBlockSize);
        }
        let root = Node {
            generation: 0,
            parent: None,
            block: Box::new([]),
            children: HashMap::new(),
            refcount: 0,
            last_access: 0,
            inserted: 0,
            evict_key: None,
        };
        Ok(Self {
            block_size,
            capacity_tokens,
            occupied_tokens: 0,
            slots: vec![Some(root)],
            generations: vec![0],
            free: Vec::new(),
            evictable: BTreeSet::new(),
            clock: 0,
            stats: CacheStats::default(),
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn capacity_tokens(&self) -> usize {
        self.capacity_tokens
    }

    pub fn occupied_tokens(&self) -> usize {
        self.occupied_tokens
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Number of cached blocks (root excluded).
    pub fn cached_blocks(&self) -> usize {
        self.slots.iter().flatten().count() - 1
    }

    fn node(&self, id: NodeId) -> Option<&Node> {
        self.slots
            .get(id.index as usize)
            .and_then(|s| s.as_ref())
            .filter(|n| n.generation == id.generation)
    }

    fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.slots
            .get_mut(id.index as usize)
            .and_then(|s| s.as_mut())
            .filter(|n| n.generation == id.generation)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Re-files `id` in the evictable set after its pin count, children or
    /// access time changed.
    fn refresh(&mut self, id: NodeId) {
        if id == ROOT {
            return;
        }
        let Some(node) = self.node_mut(id) else { return };
        let old = node.evict_key.take();
        let key = (node.refcount == 0 && node.children.is_empty()).then_some((node.last_access, node.inserted, id));
        node.evict_key = key;
        if let Some(k) = old {
            self.evictable.remove(&k);
        }
        if let Some(k) = key {
            self.evictable.insert(k);
        }
    }

    /// Longest cached block-aligned prefix of `tokens`. Pins the matched
    /// path, refreshes its access time and counts the request's reused and
    /// computed tokens.
    pub fn match_prefix(&mut self, tokens: &[TokenId]) -> CacheLease {
        let now = self.tick();
        let mut path = Vec::new();
        let mut cur = ROOT;
        for block in tokens.chunks_exact(self.block_size) {
            let Some(&child) = self.node(cur).and_then(|n| n.children.get(block)) else { break };
            path.push(child);
            cur = child;
        }
        for &id in &path {
            let node = self.node_mut(id).expect("path nodes are live");
            node.refcount += 1;
            node.last_access = now;
            self.refresh(id);
        }
        let matched_len = path.len() * self.block_size;
        self.stats.reused_tokens += matched_len as u64;
        self.stats.computed_tokens += (tokens.len() - matched_len) as u64;
        CacheLease { path, matched_len }
    }

    /// Caches the full blocks of `tokens` beyond the lease's path, evicting
    /// unpinned leaves as needed. New blocks join the lease. If nothing more
    /// can be evicted the remaining blocks are dropped.
    pub fn insert(&mut self, lease: &mut CacheLease, tokens: &[TokenId]) -> InsertOutcome {
        let now = self.tick();
        let mut outcome = InsertOutcome {
            newly_cached: 0,
            evicted: 0,
            truncated: false,
        };
        let mut cur = lease.path.last().copied().unwrap_or(ROOT);
        for block in tokens.chunks_exact(self.block_size).skip(lease.path.len()) {
            let existing = self.node(cur).and_then(|n| n.children.get(block)).copied();
            let id = match existing {
                Some(id) => id,
                None => {
                    while self.occupied_tokens + self.block_size > self.capacity_tokens {
                        match self.evict_one() {
                            Some(n) => outcome.evicted += n,
                            None => break,
                        }
                    }
                    if self.occupied_tokens + self.block_size > self.capacity_tokens {
                        outcome.truncated = true;
                        break;
                    }
                    outcome.newly_cached += self.block_size;
                    self.create_child(cur, block, now)
                }
            };
            let node = self.node_mut(id).expect("live node");
            node.refcount += 1;
            node.last_access = now;
            lease.path.push(id);
            self.refresh(cur);
            self.refresh(id);
            cur = id;
        }
        outcome
    }

    fn create_child(&mut self, parent: NodeId, block: &[TokenId], now: u64) -> NodeId {
        let index = match self.free.pop() {
            Some(i) => i,
            None => {
                self.slots.push(None);
                self.generations.push(0);
                (self.slots.len() - 1) as u32
            }
        };
        let generation = self.generations[index as usize];
        let id = NodeId { index, generation };
        self.slots[index as usize] = Some(Node {
            generation,
            parent: Some(parent),
            block: block.into(),
            children: HashMap::new(),
            refcount: 0,
            last_access: now,
            inserted: now,
            evict_key: None,
        });
        self.node_mut(parent)
            .expect("parent is live")
            .children
            .insert(block.into(), id);
        self.occupied_tokens += self.block_size;
        id
    }

    /// Removes the least recently used unpinned leaf; returns tokens freed.
    fn evict_one(&mut self) -> Option<usize> {
        let key = *self.evictable.iter().next()?;
        self.evictable.remove(&key);
        let id = key.2;
        let node = self.slots[id.index as usize].take().expect("evictable node is live");
        self.generations[id.index as usize] = node.generation.wrapping_add(1);
        self.free.push(id.index);
        let parent = node.parent.expect("root is never evictable");
        if let Some(p) = self.node_mut(parent) {
            p.children.remove(&node.block);
        }
        self.refresh(parent);
        self.occupied_tokens -= self.block_size;
        self.stats.evicted_tokens += self.block_size as u64;
        Some(self.block_size)
    }

    /// Unpins every block held by the lease.
    pub fn release(&mut self, lease: CacheLease) -> Result<(), CacheError> {
        for &id in &lease.path {
            match self.node(id) {
                Some(n) if n.refcount > 0 => {}
                _ => return Err(CacheError::NotPinned),
            }
        }
        for &id in &lease.path {
            self.node_mut(id).expect("checked above").refcount -= 1;
            self.refresh(id);
        }
        Ok(())
    }

    /// Sum of refcounts over all blocks; zero when no request holds a pin.
    pub fn total_pins(&self) -> u64 {
        self.slots.iter().flatten().map(|n| n.refcount as u64).sum()
    }

    /// Checks structural invariants; used by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let blocks = self.cached_blocks();
        if blocks * self.block_size != self.occupied_tokens {
            return Err(format!(
                "occupied {} != {} blocks x {}",
                self.occupied_tokens, blocks, self.block_size
            ));
        }
        if self.occupied_tokens > self.capacity_tokens {
            return Err(format!("occupied {} > capacity {}", self.occupied_tokens, self.capacity_tokens));
        }
        for (index, slot) in self.slots.iter().enumerate().skip(1) {
            let Some(node) = slot else { continue };
            let id = NodeId {
                index: index as u32,
                generation: node.generation,
            };
            if node.block.len() != self.block_size {
                return Err("partial block cached".into());
            }
            let parent = node.parent.and_then(|p| self.node(p)).ok_or("dangling parent")?;
            if parent.children.get(&node.block) != Some(&id) {
                return Err("node missing from parent's children".into());
            }
            if parent.parent.is_some() && parent.refcount < node.refcount {
                return Err("child pinned more than its parent".into());
            }
            let evictable = node.refcount == 0 && node.children.is_empty();
            if evictable != node.evict_key.is_some_and(|k| self.evictable.contains(&k)) {
                return Err("evictable set out of sync".into());
            }
        }
        Ok(())
    }
}
