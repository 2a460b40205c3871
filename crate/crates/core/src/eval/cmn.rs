//! Common-neighbours heuristic: pairs are scored by the Jaccard index of
//! their neighbourhoods in the previous snapshot.

use crate::autodiff::Matrix;
use crate::graph::GraphSnapshot;

/// Share of each categorical spread uniformly over all non-source nodes, so
/// targets with no shared neighbours keep a finite log-probability.
pub const CMN_SMOOTHING: f64 = 0.01;

/// `V x V` Jaccard indices on `prev`; 0 when both neighbourhoods are empty.
pub fn cmn_scores(prev: &GraphSnapshot) -> Matrix {
    let adj = prev.adjacency();
    let v = prev.num_nodes();
    let mut marks = vec![false; v];
    let mut out = Matrix::zeros(v, v);
    for i in 0..v {
        adj[i].iter().for_each(|&n| marks[n] = true);
        for j in i..v {
            let shared = adj[j].iter().filter(|&&n| marks[n]).count();
            let union = adj[i].len() + adj[j].len() - shared;
            let s = if union == 0 { 0.0 } else { shared as f64 / union as f64 };
            out.set(i, j, s);
            out.set(j, i, s);
        }
        adj[i].iter().for_each(|&n| marks[n] = false);
    }
    out
}

/// Row-stochastic `p(c | w)` from Jaccard scores over targets `c != w`,
/// mixed with a uniform distribution; an all-zero row is uniform.
pub fn cmn_distribution(prev: &GraphSnapshot) -> Matrix {
    let scores = cmn_scores(prev);
    let v = prev.num_nodes();
    let uniform = 1.0 / (v - 1) as f64;
    let mut out = Matrix::zeros(v, v);
    for w in 0..v {
        let total: f64 = (0..v).filter(|&c| c != w).map(|c| scores.get(w, c)).sum();
        for c in (0..v).filter(|&c| c != w) {
            let p = if total > 0.0 {
                (1.0 - CMN_SMOOTHING) * scores.get(w, c) / total + CMN_SMOOTHING * uniform
            } else {
                uniform
            };
            out.set(w, c, p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::UndirectedEdge;
    use proptest::prelude::*;

    fn snap(v: usize, edges: &[(usize, usize)]) -> GraphSnapshot {
        GraphSnapshot::new(0, 0, v, edges.iter().map(|&(a, b)| UndirectedEdge::new(a, b).unwrap())).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        // 0: {1,2}; 4: {2,3}; 5: {1,2}; 6: {}
        let g = snap(7, &[(0, 1), (0, 2), (4, 2), (4, 3), (5, 1), (5, 2)]);
        let s = cmn_scores(&g);
        assert_eq!(s.get(0, 5), 1.0);
        assert!((s.get(0, 4) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.get(1, 3), 0.0);
        assert_eq!(s.get(6, 0), 0.0);
        assert_eq!(s.get(6, 6), 0.0);
    }

    #[test]
    fn distribution_rows_are_categoricals() {
        let g = snap(6, &[(0, 1), (0, 2), (3, 2), (3, 1)]);
        let p = cmn_distribution(&g);
        for w in 0..6 {
            assert_eq!(p.get(w, w), 0.0);
            assert!((p.row(w).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.row(w).iter().enumerate().all(|(c, &x)| c == w || x > 0.0));
        }
        // Node 5 is isolated: uniform fallback.
        assert!((p.get(5, 0) - 0.2).abs() < 1e-15);
        // Node 0 shares {1,2} with node 3 only.
        assert!((p.get(0, 3) - (0.99 + 0.01 * 0.2)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn scores_are_symmetric(edges in prop::collection::btree_set((0usize..9, 0usize..9), 0..30)) {
            let list: Vec<(usize, usize)> = edges.into_iter().filter(|(a, b)| a < b).collect();
            let s = cmn_scores(&snap(9, &list));
            for i in 0..9 {
                for j in 0..9 {
                    prop_assert_eq!(s.get(i, j), s.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&s.get(i, j)));
                }
            }
        }
    }
}
