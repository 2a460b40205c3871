use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityEntry {
    pub community: usize,
    /// Averaged node distribution, indexed by node.
    pub node_probs: Vec<f64>,
    /// Most probable nodes, highest first.
    pub top_nodes: Vec<usize>,
    /// Fraction of top nodes carrying each partition label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityReport {
    pub fraction: f64,
    pub communities: Vec<CommunityEntry>,
    /// Hard community of every node.
    pub assignment: Vec<usize>,
}

pub fn top_count(fraction: f64, num_nodes: usize) -> usize {
    // The epsilon keeps e.g. 0.1 * 360 = 36.000000000000004 from rounding up.
    ((fraction * num_nodes as f64 - 1e-9).ceil() as usize).clamp(1, num_nodes)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Builds the report from averaged distributions: `node_dist` is `K x V`
/// (node distribution per community) and `mixtures` is `V x K` (community
/// mixture per node).
pub fn community_report_from_averages(
    node_dist: &Matrix,
    mixtures: &Matrix,
    fraction: f64,
    partition: Option<&BTreeMap<usize, String>>,
) -> Result<CommunityReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("top fraction {fraction} outside (0, 1]")));
    }
    let (k, v) = node_dist.shape();
    if mixtures.shape() != (v, k) {
        return Err(Error::shape(format!("mixtures {:?} for node distributions {:?}", mixtures.shape(), (k, v))));
    }
    let n_top = top_count(fraction, v);
    let communities = (0..k)
        .map(|c| {
            let probs = node_dist.row(c).to_vec();
            let mut order: Vec<usize> = (0..v).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            order.truncate(n_top);
            let overlap = partition.map(|labels| {
                let mut counts: BTreeMap<String, f64> = BTreeMap::new();
                for n in &order {
                    if let Some(l) = labels.get(n) {
                        *counts.entry(l.clone()).or_default() += 1.0 / n_top as f64;
                    }
                }
                counts
            });
            CommunityEntry {
                community: c,
                node_probs: probs,
                top_nodes: order,
                overlap,
            }
        })
        .collect();
    let assignment = (0..v).map(|n| argmax(mixtures.row(n))).collect();
    Ok(CommunityReport {
        fraction,
        communities,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_counts() {
        assert_eq!(top_count(0.10, 360), 36);
        assert_eq!(top_count(0.10, 60), 6);
        assert_eq!(top_count(0.10, 61), 7);
        assert_eq!(top_count(0.01, 5), 1);
    }

    #[test]
    fn single_community_assigns_everything_to_it() {
        let node = Matrix::row_vector(vec![0.1, 0.5, 0.4]);
        let mix = Matrix::filled(3, 1, 1.0);
        let r = community_report_from_averages(&node, &mix, 0.5, None).unwrap();
        assert_eq!(r.assignment, vec![0, 0, 0]);
        assert_eq!(r.communities[0].top_nodes, vec![1, 2]);
        assert!(r.communities[0].overlap.is_none());
    }

    #[test]
    fn overlaps_per_label() {
        let node = Matrix::from_rows(&[vec![0.4, 0.3, 0.2, 0.1], vec![0.1, 0.1, 0.3, 0.5]]);
        let mix = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8], vec![0.5, 0.5]]);
        let labels: BTreeMap<usize, String> = [(0, "a"), (1, "a"), (2, "b")].into_iter().map(|(n, l)| (n, l.to_string())).collect();
        let r = community_report_from_averages(&node, &mix, 0.5, Some(&labels)).unwrap();
        assert_eq!(r.assignment, vec![0, 0, 1, 0]);
        assert_eq!(r.communities[0].overlap.as_ref().unwrap()["a"], 1.0);
        // Node 3 is unlabelled, so the overlaps of community 1 sum below 1.
        let o = r.communities[1].overlap.as_ref().unwrap();
        assert_eq!(o.values().sum::<f64>(), 0.5);
        assert!(community_report_from_averages(&node, &mix, 0.0, None).is_err());
    }
}
