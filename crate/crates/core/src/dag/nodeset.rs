use super::LayerId;

/// Fixed-capacity bitset over the nodes of one model.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct NodeSet {
    words: Vec<u64>,
    capacity: usize,
}

impl NodeSet {
    pub fn new(capacity: usize) -> NodeSet {
        NodeSet {
            words: vec![0; capacity.div_ceil(64)],
            capacity,
        }
    }

    pub fn full(capacity: usize) -> NodeSet {
        let mut s = NodeSet::new(capacity);
        for i in 0..capacity {
            s.insert(LayerId(i as u32));
        }
        s
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert(&mut self, id: LayerId) {
        let i = id.idx();
        assert!(i < self.capacity, "{id} out of range");
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn remove(&mut self, id: LayerId) {
        let i = id.idx();
        if i < self.capacity {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn contains(&self, id: LayerId) -> bool {
        let i = id.idx();
        i < self.capacity && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    pub fn union_with(&mut self, other: &NodeSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn intersect_with(&mut self, other: &NodeSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
    }

    pub fn difference_with(&mut self, other: &NodeSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !b;
        }
    }

    /// `|self ∩ other|` without allocating.
    pub fn intersection_len(&self, other: &NodeSet) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// Members in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(LayerId((wi * 64 + bit) as u32))
            })
        })
    }

    pub fn first(&self) -> Option<LayerId> {
        self.iter().next()
    }
}

impl std::fmt::Debug for NodeSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.iter().map(|i| i.0)).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_ops_across_word_boundary() {
        let mut a = NodeSet::new(130);
        for i in [0, 63, 64, 129] {
            a.insert(LayerId(i));
        }
        assert_eq!(a.len(), 4);
        assert_eq!(a.iter().map(|i| i.0).collect::<Vec<_>>(), vec![0, 63, 64, 129]);
        let mut b = NodeSet::new(130);
        b.insert(LayerId(64));
        b.insert(LayerId(5));
        assert_eq!(a.intersection_len(&b), 1);
        let mut c = a.clone();
        c.difference_with(&b);
        assert!(!c.contains(LayerId(64)));
        c.intersect_with(&b);
        assert!(c.is_empty());
        assert_eq!(NodeSet::full(130).len(), 130);
    }
}
