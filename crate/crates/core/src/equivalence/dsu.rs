//! Disjoint-set union with path compression and union by rank.

/// Union-find over `0..len`. Amortized near-constant find/union.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub fn new(len: usize) -> Self {
        DisjointSet {
            parent: (0..len).collect(),
            rank: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Representative of `x`'s set, compressing the path walked.
    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`; returns false when already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    /// Groups indices by representative. Groups are ordered by their smallest
    /// member and members ascend within each group, so the output does not
    /// depend on union order.
    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut by_root: std::collections::HashMap<usize, Vec<usize>> =
            std::collections::HashMap::new();
        for i in 0..n {
            let root = self.find(i);
            by_root.entry(root).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = by_root.into_values().collect();
        for group in &mut groups {
            group.sort_unstable();
        }
        groups.sort_unstable_by_key(|g| g[0]);
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singletons_before_any_union() {
        let mut dsu = DisjointSet::new(3);
        assert_eq!(dsu.groups(), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn chain_union_is_transitive() {
        let mut dsu = DisjointSet::new(4);
        assert!(dsu.union(0, 1));
        assert!(dsu.union(1, 2));
        assert!(!dsu.union(0, 2));
        assert_eq!(dsu.find(0), dsu.find(2));
        assert_eq!(dsu.groups(), vec![vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn groups_canonical_regardless_of_union_order() {
        let mut a = DisjointSet::new(5);
        a.union(3, 1);
        a.union(4, 0);
        let mut b = DisjointSet::new(5);
        b.union(0, 4);
        b.union(1, 3);
        assert_eq!(a.groups(), b.groups());
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn groups_partition_all_indices(
                n in 1usize..20,
                edges in prop::collection::vec((0usize..20, 0usize..20), 0..30),
            ) {
                let mut dsu = DisjointSet::new(n);
                for (a, b) in edges {
                    dsu.union(a % n, b % n);
                }
                let groups = dsu.groups();
                let mut seen: Vec<usize> = groups.concat();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            }

            #[test]
            fn union_order_invariance(
                n in 2usize..12,
                edges in prop::collection::vec((0usize..12, 0usize..12), 0..20),
            ) {
                let edges: Vec<(usize, usize)> =
                    edges.into_iter().map(|(a, b)| (a % n, b % n)).collect();
                let mut forward = DisjointSet::new(n);
                for &(a, b) in &edges {
                    forward.union(a, b);
                }
                let mut backward = DisjointSet::new(n);
                for &(a, b) in edges.iter().rev() {
                    backward.union(b, a);
                }
                prop_assert_eq!(forward.groups(), backward.groups());
            }
        }
    }
}
