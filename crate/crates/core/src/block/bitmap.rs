use std::collections::BTreeMap;

use super::WriteId;

/// Blocks pending transfer to the peer, kept in first-dirtied order so
/// resync walks them oldest-first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirtyBitmap {
    next_stamp: u64,
    by_block: BTreeMap<u32, (u64, Option<WriteId>)>,
    order: BTreeMap<u64, u32>,
}

impl DirtyBitmap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `block` dirty, remembering the latest local write that touched
    /// it. An already-dirty block keeps its position.
    pub fn mark(&mut self, block: u32, write: Option<WriteId>) {
        if let Some(entry) = self.by_block.get_mut(&block) {
            if write.is_some() {
                entry.1 = write;
            }
            return;
        }
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        self.by_block.insert(block, (stamp, write));
        self.order.insert(stamp, block);
    }

    /// Clears `block` only if its latest recorded write is `write`; a newer
    /// write to the same block keeps it dirty.
    pub fn clear_if(&mut self, block: u32, write: Option<WriteId>) -> bool {
        match self.by_block.get(&block) {
            Some(&(_, latest)) if write.is_none() || latest.is_none() || latest == write => {
                self.remove(block);
                true
            }
            _ => false,
        }
    }

    pub fn remove(&mut self, block: u32) -> bool {
        match self.by_block.remove(&block) {
            Some((stamp, _)) => {
                self.order.remove(&stamp);
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, block: u32) -> bool {
        self.by_block.contains_key(&block)
    }

    pub fn latest_write(&self, block: u32) -> Option<WriteId> {
        self.by_block.get(&block).and_then(|e| e.1)
    }

    pub fn len(&self) -> usize {
        self.by_block.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_block.is_empty()
    }

    pub fn clear(&mut self) {
        self.by_block.clear();
        self.order.clear();
    }

    /// Oldest-first.
    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.order.values().copied()
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.iter().collect()
    }

    /// Appends `other`'s blocks that are not already present, in `other`'s
    /// order.
    pub fn absorb(&mut self, other: &DirtyBitmap) {
        for b in other.iter() {
            self.mark(b, other.latest_write(b));
        }
    }
}

/// Bounded LRU set of recently written extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityLog {
    capacity: u32,
    clock: u64,
    by_extent: BTreeMap<u32, u64>,
    lru: BTreeMap<u64, u32>,
    pub hits: u64,
    pub misses: u64,
}

impl ActivityLog {
    pub fn new(capacity: u32) -> Self {
        ActivityLog { capacity, clock: 0, by_extent: BTreeMap::new(), lru: BTreeMap::new(), hits: 0, misses: 0 }
    }

    /// Records a write to `extent`. Returns the evicted extent when the log
    /// was full.
    pub fn touch(&mut self, extent: u32) -> Option<u32> {
        let stamp = self.clock;
        self.clock += 1;
        if let Some(old) = self.by_extent.insert(extent, stamp) {
            self.lru.remove(&old);
            self.lru.insert(stamp, extent);
            self.hits += 1;
            return None;
        }
        self.misses += 1;
        self.lru.insert(stamp, extent);
        if self.by_extent.len() as u32 > self.capacity {
            let (&oldest, &victim) = self.lru.iter().next().expect("nonempty");
            self.lru.remove(&oldest);
            self.by_extent.remove(&victim);
            return Some(victim);
        }
        None
    }

    pub fn len(&self) -> usize {
        self.by_extent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_extent.is_empty()
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn contains(&self, extent: u32) -> bool {
        self.by_extent.contains_key(&extent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dirty_keeps_first_position_and_latest_write() {
        let mut d = DirtyBitmap::new();
        d.mark(5, Some(WriteId(1)));
        d.mark(3, Some(WriteId(2)));
        d.mark(5, Some(WriteId(3)));
        assert_eq!(d.to_vec(), vec![5, 3]);
        assert!(!d.clear_if(5, Some(WriteId(1))));
        assert!(d.clear_if(5, Some(WriteId(3))));
        assert_eq!(d.to_vec(), vec![3]);
    }

    #[test]
    fn absorb_is_union() {
        let mut a = DirtyBitmap::new();
        a.mark(1, None);
        a.mark(2, None);
        let mut b = DirtyBitmap::new();
        b.mark(2, None);
        b.mark(9, None);
        a.absorb(&b);
        assert_eq!(a.to_vec(), vec![1, 2, 9]);
    }

    #[test]
    fn al_evicts_least_recent() {
        let mut al = ActivityLog::new(2);
        assert_eq!(al.touch(1), None);
        assert_eq!(al.touch(2), None);
        assert_eq!(al.touch(1), None);
        assert_eq!(al.touch(3), Some(2));
        assert!(al.contains(1) && al.contains(3));
    }

    proptest! {
        #[test]
        fn al_never_exceeds_capacity(cap in 7u32..300, extents in proptest::collection::vec(0u32..1000, 0..2000)) {
            let mut al = ActivityLog::new(cap);
            for e in extents {
                al.touch(e);
                prop_assert!(al.len() as u32 <= cap);
            }
        }

        #[test]
        fn dirty_order_matches_first_mark(blocks in proptest::collection::vec(0u32..64, 0..200)) {
            let mut d = DirtyBitmap::new();
            let mut expected: Vec<u32> = Vec::new();
            for b in blocks {
                d.mark(b, None);
                if !expected.contains(&b) {
                    expected.push(b);
                }
            }
            prop_assert_eq!(d.to_vec(), expected);
        }
    }
}
