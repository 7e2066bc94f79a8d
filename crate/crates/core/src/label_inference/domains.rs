use std::collections::BTreeMap;

use super::LabelAssignment;

struct DisjointSets {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of the graph linking clusters that co-occur in a
/// retained task. Components are sorted, and listed by their smallest cluster.
pub fn infer_domains(assignment: &LabelAssignment) -> Vec<Vec<usize>> {
    let used = assignment.used_clusters();
    let index: BTreeMap<usize, usize> = used.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut sets = DisjointSets::new(used.len());
    for clusters in assignment.tasks.iter().filter_map(|t| t.clusters.as_ref()) {
        for pair in clusters.windows(2) {
            sets.union(index[&pair[0]], index[&pair[1]]);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in used.iter().enumerate() {
        groups.entry(sets.find(i)).or_default().push(c);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}
