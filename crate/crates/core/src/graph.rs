//! Multi-subject dynamic graph corpora: data model, directory I/O, temporal
//! splits and neighbourhood queries.
//!
//! A corpus holds `S` subjects, each observed as `T` undirected snapshots
//! over one shared node set of size `V`. On disk it is a directory:
//!
//! ```text
//! manifest.json            {format_version, S, T, V, labels?, node_names?, partition?}
//! edges/subject_<s>.csv    header `t,u,v`, one row per undirected edge
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An undirected edge stored with `u < v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UndirectedEdge {
    u: NodeId,
    v: NodeId,
}

impl UndirectedEdge {
    /// Builds the canonical edge between `a` and `b`; fails on a self-edge.
    pub fn new(a: usize, b: usize) -> Result<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(Self { u: NodeId(a), v: NodeId(b) }),
            std::cmp::Ordering::Greater => Ok(Self { u: NodeId(b), v: NodeId(a) }),
            std::cmp::Ordering::Equal => Err(Error::invalid(format!("self-edge on node {a}"))),
        }
    }

    pub fn u(&self) -> NodeId {
        self.u
    }

    pub fn v(&self) -> NodeId {
        self.v
    }
}

/// An ordered (source, target) pair consumed by the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DirectedSample {
    pub w: NodeId,
    pub c: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSnapshot {
    pub subject: usize,
    pub time: usize,
    num_nodes: usize,
    edges: BTreeSet<UndirectedEdge>,
}

impl GraphSnapshot {
    /// Builds a snapshot, rejecting out-of-range endpoints and duplicates.
    pub fn new(
        subject: usize,
        time: usize,
        num_nodes: usize,
        edges: impl IntoIterator<Item = UndirectedEdge>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for e in edges {
            if e.v.0 >= num_nodes {
                return Err(Error::invalid(format!(
                    "node index {} out of range for V={num_nodes} (subject {subject}, t={time})",
                    e.v.0
                )));
            }
            if !set.insert(e) {
                return Err(Error::invalid(format!(
                    "duplicate edge ({}, {}) in subject {subject}, t={time}",
                    e.u, e.v
                )));
            }
        }
        Ok(Self {
            subject,
            time,
            num_nodes,
            edges: set,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl ExactSizeIterator<Item = &UndirectedEdge> + '_ {
        self.edges.iter()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        UndirectedEdge::new(a, b).is_ok_and(|e| self.edges.contains(&e))
    }

    /// Both orientations of every edge, sorted by `(w, c)`.
    pub fn directed_expansion(&self) -> Vec<DirectedSample> {
        let mut out: Vec<DirectedSample> = self
            .edges
            .iter()
            .flat_map(|e| {
                [
                    DirectedSample { w: e.u, c: e.v },
                    DirectedSample { w: e.v, c: e.u },
                ]
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn neighbors(&self, n: NodeId) -> Result<BTreeSet<NodeId>> {
        if n.0 >= self.num_nodes {
            return Err(Error::invalid(format!(
                "node index {} out of range for V={}",
                n.0, self.num_nodes
            )));
        }
        Ok(self
            .edges
            .iter()
            .filter_map(|e| {
                if e.u == n {
                    Some(e.v)
                } else if e.v == n {
                    Some(e.u)
                } else {
                    None
                }
            })
            .collect())
    }

    /// Sorted neighbour lists for every node.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            adj[e.u.0].push(e.v.0);
            adj[e.v.0].push(e.u.0);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraphCorpus {
    num_subjects: usize,
    num_snapshots: usize,
    num_nodes: usize,
    /// Row-major `S x T` grid.
    snapshots: Vec<GraphSnapshot>,
    pub labels: Option<Vec<String>>,
    pub node_names: Option<Vec<String>>,
    pub partition: Option<BTreeMap<usize, String>>,
}

impl DynamicGraphCorpus {
    /// Assembles a corpus from a complete `S x T` grid given in row-major
    /// (subject-major) order.
    pub fn new(
        num_subjects: usize,
        num_snapshots: usize,
        num_nodes: usize,
        snapshots: Vec<GraphSnapshot>,
    ) -> Result<Self> {
        if num_subjects == 0 || num_snapshots == 0 || num_nodes == 0 {
            return Err(Error::invalid("S, T and V must all be positive"));
        }
        if snapshots.len() != num_subjects * num_snapshots {
            return Err(Error::invalid(format!(
                "expected {} snapshots for S={num_subjects}, T={num_snapshots}, got {}",
                num_subjects * num_snapshots,
                snapshots.len()
            )));
        }
        for (i, snap) in snapshots.iter().enumerate() {
            let (s, t) = (i / num_snapshots, i % num_snapshots);
            if snap.subject != s || snap.time != t {
                return Err(Error::invalid(format!(
                    "snapshot grid out of order at position ({s}, {t})"
                )));
            }
            if snap.num_nodes != num_nodes {
                return Err(Error::invalid(format!(
                    "snapshot ({s}, {t}) has V={} but corpus has V={num_nodes}",
                    snap.num_nodes
                )));
            }
        }
        Ok(Self {
            num_subjects,
            num_snapshots,
            num_nodes,
            snapshots,
            labels: None,
            node_names: None,
            partition: None,
        })
    }

    pub fn num_subjects(&self) -> usize {
        self.num_subjects
    }

    pub fn num_snapshots(&self) -> usize {
        self.num_snapshots
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn snapshot(&self, subject: usize, time: usize) -> &GraphSnapshot {
        &self.snapshots[subject * self.num_snapshots + time]
    }

    pub fn subject_snapshots(&self, subject: usize) -> &[GraphSnapshot] {
        let start = subject * self.num_snapshots;
        &self.snapshots[start..start + self.num_snapshots]
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &GraphSnapshot> + '_ {
        self.snapshots.iter()
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.num_subjects {
            return Err(Error::invalid(format!(
                "{} labels for {} subjects",
                labels.len(),
                self.num_subjects
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_partition(mut self, partition: BTreeMap<usize, String>) -> Result<Self> {
        if let Some(&bad) = partition.keys().find(|&&n| n >= self.num_nodes) {
            return Err(Error::invalid(format!("partition names node {bad} >= V")));
        }
        self.partition = Some(partition);
        Ok(self)
    }

    pub fn with_node_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_nodes {
            return Err(Error::invalid(format!(
                "{} node names for V={}",
                names.len(),
                self.num_nodes
            )));
        }
        self.node_names = Some(names);
        Ok(self)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "V")]
    v: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partition: Option<BTreeMap<String, String>>,
}

fn edge_file(dir: &Path, subject: usize) -> std::path::PathBuf {
    dir.join("edges").join(format!("subject_{subject}.csv"))
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<DynamicGraphCorpus> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let (num_s, num_t, num_v) = (manifest.s, manifest.t, manifest.v);
    if num_s == 0 || num_t == 0 || num_v == 0 {
        return Err(Error::parse(&manifest_path, "S, T and V must all be positive"));
    }

    let mut snapshots = Vec::with_capacity(num_s * num_t);
    for s in 0..num_s {
        let path = edge_file(dir, s);
        let mut per_t: Vec<Vec<UndirectedEdge>> = vec![Vec::new(); num_t];
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)
            .map_err(|e| Error::parse(&path, e))?;
        let header = reader.headers().map_err(|e| Error::parse(&path, e))?;
        if header.iter().map(str::trim).collect::<Vec<_>>() != ["t", "u", "v"] {
            return Err(Error::parse(&path, "header must be `t,u,v`"));
        }
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::parse(&path, e))?;
            let field = |i: usize| -> Result<usize> {
                row.get(i)
                    .and_then(|x| x.trim().parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::parse(&path, format!("row {}: expected three integers", line + 2))
                    })
            };
            let (t, u, v) = (field(0)?, field(1)?, field(2)?);
            if t >= num_t {
                return Err(Error::parse(
                    &path,
                    format!("row {}: snapshot {t} out of range for T={num_t}", line + 2),
                ));
            }
            if u >= num_v || v >= num_v {
                return Err(Error::parse(
                    &path,
                    format!("row {}: node index out of range for V={num_v}", line + 2),
                ));
            }
            let edge = UndirectedEdge::new(u, v)
                .map_err(|e| Error::parse(&path, format!("row {}: {e}", line + 2)))?;
            per_t[t].push(edge);
        }
        for (t, edges) in per_t.into_iter().enumerate() {
            let snap = GraphSnapshot::new(s, t, num_v, edges)
                .map_err(|e| Error::parse(&path, e))?;
            snapshots.push(snap);
        }
    }

    let mut corpus = DynamicGraphCorpus::new(num_s, num_t, num_v, snapshots)?;
    if let Some(labels) = manifest.labels {
        corpus = corpus
            .with_labels(labels)
            .map_err(|e| Error::parse(&manifest_path, e))?;
    }
    if let Some(names) = manifest.node_names {
        corpus = corpus
            .with_node_names(names)
            .map_err(|e| Error::parse(&manifest_path, e))?;
    }
    if let Some(partition) = manifest.partition {
        let mut parsed = BTreeMap::new();
        for (k, v) in partition {
            let n: usize = k.parse().map_err(|_| {
                Error::parse(&manifest_path, format!("partition key `{k}` is not a node index"))
            })?;
            parsed.insert(n, v);
        }
        corpus = corpus
            .with_partition(parsed)
            .map_err(|e| Error::parse(&manifest_path, e))?;
    }
    Ok(corpus)
}

pub fn write_corpus(corpus: &DynamicGraphCorpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let edges_dir = dir.join("edges");
    fs::create_dir_all(&edges_dir).map_err(|e| Error::io(&edges_dir, e))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        s: corpus.num_subjects,
        t: corpus.num_snapshots,
        v: corpus.num_nodes,
        labels: corpus.labels.clone(),
        node_names: corpus.node_names.clone(),
        partition: corpus
            .partition
            .as_ref()
            .map(|p| p.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    for s in 0..corpus.num_subjects {
        let path = edge_file(dir, s);
        let mut buf = String::from("t,u,v\n");
        for snap in corpus.subject_snapshots(s) {
            for e in snap.edges() {
                buf.push_str(&format!("{},{},{}\n", snap.time, e.u, e.v));
            }
        }
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Contiguous train / validation / test snapshot ranges along time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl TemporalSplit {
    pub fn num_snapshots(&self) -> usize {
        self.test.end
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Splits `T` snapshots as `floor(f_train T)` / `floor(f_val T)` / remainder,
/// each range holding at least one snapshot.
pub fn split_temporal(num_snapshots: usize, fractions: (f64, f64)) -> Result<TemporalSplit> {
    let (f_train, f_val) = fractions;
    if !(f_train > 0.0 && f_val > 0.0 && f_train + f_val < 1.0) {
        return Err(Error::invalid(format!(
            "split fractions ({f_train}, {f_val}) must be positive and sum to less than 1"
        )));
    }
    if num_snapshots < 3 {
        return Err(Error::invalid(format!(
            "T={num_snapshots} is too small for a train/val/test split"
        )));
    }
    // The small epsilon absorbs representation error such as 0.7 * 10 = 6.999...
    let count = |f: f64| ((f * num_snapshots as f64 + 1e-9).floor() as usize).max(1);
    let n_val = count(f_val);
    // Train gives up snapshots first so the test range is never empty.
    let n_train = count(f_train).min(num_snapshots.saturating_sub(n_val + 1));
    if n_train == 0 || n_train + n_val >= num_snapshots {
        return Err(Error::invalid(format!(
            "T={num_snapshots} leaves no test snapshot at fractions ({f_train}, {f_val})"
        )));
    }
    Ok(TemporalSplit {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..num_snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(edges: &[(usize, usize)], v: usize) -> GraphSnapshot {
        GraphSnapshot::new(
            0,
            0,
            v,
            edges.iter().map(|&(a, b)| UndirectedEdge::new(a, b).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn edges_are_canonical() {
        let e = UndirectedEdge::new(5, 2).unwrap();
        assert_eq!((e.u(), e.v()), (NodeId(2), NodeId(5)));
        assert!(UndirectedEdge::new(3, 3).is_err());
    }

    #[test]
    fn snapshot_rejects_duplicates_and_out_of_range() {
        let dup = [UndirectedEdge::new(0, 1).unwrap(), UndirectedEdge::new(1, 0).unwrap()];
        assert!(GraphSnapshot::new(0, 0, 3, dup).is_err());
        assert!(GraphSnapshot::new(0, 0, 3, [UndirectedEdge::new(0, 3).unwrap()]).is_err());
    }

    #[test]
    fn split_counts() {
        assert_eq!(split_temporal(16, (0.8, 0.1)).unwrap().counts(), (12, 1, 3));
        assert_eq!(split_temporal(10, (0.8, 0.1)).unwrap().counts(), (8, 1, 1));
        assert!(split_temporal(2, (0.8, 0.1)).is_err());
        assert_eq!(split_temporal(3, (0.8, 0.1)).unwrap().counts(), (1, 1, 1));
        assert!(split_temporal(16, (0.9, 0.1)).is_err());
    }

    #[test]
    fn directed_expansion_examples() {
        let s = snap(&[(0, 1)], 3);
        let pairs: Vec<_> = s.directed_expansion().iter().map(|d| (d.w.0, d.c.0)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);

        assert!(snap(&[], 3).directed_expansion().is_empty());

        let s = snap(&[(1, 2), (0, 1)], 3);
        let pairs: Vec<_> = s.directed_expansion().iter().map(|d| (d.w.0, d.c.0)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn neighbor_examples() {
        let s = snap(&[(0, 1), (0, 2)], 4);
        let ids = |set: BTreeSet<NodeId>| set.into_iter().map(|n| n.0).collect::<Vec<_>>();
        assert_eq!(ids(s.neighbors(NodeId(0)).unwrap()), vec![1, 2]);
        assert!(s.neighbors(NodeId(3)).unwrap().is_empty());
        assert!(s.neighbors(NodeId(4)).is_err());

        let path = snap(&[(0, 1), (1, 2)], 3);
        assert_eq!(ids(path.neighbors(NodeId(1)).unwrap()), vec![0, 2]);
    }
}
