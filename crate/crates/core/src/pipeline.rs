//! Timeseries to dynamic graphs: non-overlapping windows, Pearson
//! correlation per window, and a fixed-size top-percentile edge set.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::graph::{DynamicGraphCorpus, GraphSnapshot, UndirectedEdge};

pub const REPORT_FILE: &str = "pipeline_report.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window: usize,
    pub threshold_pct: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: 30,
            threshold_pct: 5.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::invalid(format!("window length must be at least 2, got {}", self.window)));
        }
        if !(self.threshold_pct > 0.0 && self.threshold_pct < 100.0) {
            return Err(Error::invalid(format!(
                "threshold percentile must lie in (0, 100), got {}",
                self.threshold_pct
            )));
        }
        Ok(())
    }
}

/// One subject's `timepoints x V` signal matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeseriesMatrix {
    pub subject: usize,
    pub data: Matrix,
}

impl TimeseriesMatrix {
    pub fn new(subject: usize, data: Matrix) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::invalid(format!("subject {subject}: timeseries contains non-finite values")));
        }
        if data.cols() < 2 {
            return Err(Error::invalid(format!("subject {subject}: need at least 2 regions")));
        }
        Ok(Self { subject, data })
    }

    pub fn num_timepoints(&self) -> usize {
        self.data.rows()
    }

    pub fn num_nodes(&self) -> usize {
        self.data.cols()
    }
}

pub fn window_count(timepoints: usize, window: usize) -> Result<usize> {
    if window == 0 || timepoints < window {
        return Err(Error::invalid(format!("{timepoints} timepoints cannot fill a window of {window}")));
    }
    Ok(timepoints / window)
}

/// Correlation matrix of the columns of `window`, plus the indices of
/// constant columns, whose off-diagonal correlations are set to 0.
pub fn pearson(window: &Matrix) -> (Matrix, Vec<usize>) {
    let (n, v) = window.shape();
    let mut z = window.clone();
    let mut constant = Vec::new();
    for j in 0..v {
        let col: Vec<f64> = (0..n).map(|i| window.get(i, j)).collect();
        let is_constant = col.iter().all(|&x| x == col[0]);
        let mean = col.iter().sum::<f64>() / n as f64;
        let norm = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
        for (i, x) in col.iter().enumerate() {
            z.set(i, j, if is_constant { 0.0 } else { (x - mean) / norm });
        }
        if is_constant {
            constant.push(j);
        }
    }
    let mut corr = z.t_matmul(&z);
    for i in 0..v {
        corr.set(i, i, 1.0);
        for j in 0..i {
            let r = corr.get(i, j).clamp(-1.0, 1.0);
            corr.set(i, j, r);
            corr.set(j, i, r);
        }
    }
    (corr, constant)
}

/// `floor(V (V - 1) / 2 * pct / 100)`.
pub fn edge_budget(num_nodes: usize, pct: f64) -> usize {
    let pairs = (num_nodes * (num_nodes - 1) / 2) as f64;
    // The epsilon keeps exact products such as 64620 * 0.05 from flooring down.
    (pairs * pct / 100.0 + 1e-9).floor() as usize
}

/// The `m` largest strictly-lower-triangle entries; ties go to the smaller
/// `(row, col)`.
pub fn threshold_top_pct(corr: &Matrix, pct: f64) -> Result<Vec<UndirectedEdge>> {
    let v = corr.rows();
    if corr.cols() != v {
        return Err(Error::shape(format!("correlation matrix {:?} is not square", corr.shape())));
    }
    let m = edge_budget(v, pct);
    if m == 0 {
        return Err(Error::invalid(format!("{pct}% of the {v}-node lower triangle selects no edges")));
    }
    let mut entries: Vec<(f64, usize, usize)> = (1..v).flat_map(|i| (0..i).map(move |j| (corr.get(i, j), i, j))).collect();
    entries.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    entries[..m].iter().map(|&(_, i, j)| UndirectedEdge::new(i, j)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroVarianceWarning {
    pub subject: usize,
    pub window: usize,
    pub columns: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    #[serde(rename = "W")]
    pub window: usize,
    #[serde(rename = "epsilon")]
    pub threshold_pct: f64,
    pub m: usize,
    #[serde(rename = "T")]
    pub num_snapshots: usize,
    #[serde(rename = "S")]
    pub num_subjects: usize,
    #[serde(rename = "V")]
    pub num_nodes: usize,
    pub zero_variance_warnings: usize,
    pub zero_variance: Vec<ZeroVarianceWarning>,
}

impl PipelineReport {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(REPORT_FILE);
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Builds one snapshot per window. Every subject is truncated to the
/// smallest window count across subjects.
pub fn build_corpus(inputs: &[TimeseriesMatrix], cfg: &PipelineConfig) -> Result<(DynamicGraphCorpus, PipelineReport)> {
    cfg.validate()?;
    let first = inputs.first().ok_or_else(|| Error::invalid("no subjects"))?;
    let v = first.num_nodes();
    for (s, ts) in inputs.iter().enumerate() {
        if ts.subject != s {
            return Err(Error::invalid(format!("subjects must be numbered 0..S in order; found {} at {s}", ts.subject)));
        }
        if ts.num_nodes() != v {
            return Err(Error::invalid(format!("subject {s} has V={} but subject 0 has V={v}", ts.num_nodes())));
        }
    }
    let m = edge_budget(v, cfg.threshold_pct);
    if m == 0 {
        return Err(Error::invalid(format!("{}% of a {v}-node graph selects no edges", cfg.threshold_pct)));
    }
    let t = inputs
        .iter()
        .map(|ts| window_count(ts.num_timepoints(), cfg.window).map_err(|e| Error::invalid(format!("subject {}: {e}", ts.subject))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .expect("non-empty");

    let jobs: Vec<(usize, usize)> = (0..inputs.len()).flat_map(|s| (0..t).map(move |w| (s, w))).collect();
    let results = jobs
        .into_par_iter()
        .map(|(s, w)| {
            let rows = cfg.window;
            let data = &inputs[s].data;
            let window = Matrix::from_fn(rows, v, |i, j| data.get(w * rows + i, j));
            let (corr, constant) = pearson(&window);
            let edges = threshold_top_pct(&corr, cfg.threshold_pct)?;
            Ok((GraphSnapshot::new(s, w, v, edges)?, constant))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut snapshots = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (snap, constant) in results {
        if !constant.is_empty() {
            warnings.push(ZeroVarianceWarning {
                subject: snap.subject,
                window: snap.time,
                columns: constant,
            });
        }
        snapshots.push(snap);
    }
    let report = PipelineReport {
        window: cfg.window,
        threshold_pct: cfg.threshold_pct,
        m,
        num_snapshots: t,
        num_subjects: inputs.len(),
        num_nodes: v,
        zero_variance_warnings: warnings.iter().map(|w| w.columns.len()).sum(),
        zero_variance: warnings,
    };
    Ok((DynamicGraphCorpus::new(inputs.len(), t, v, snapshots)?, report))
}

/// Reads one timepoint per line; `#` lines are comments.
pub fn read_timeseries(path: impl AsRef<Path>, subject: usize) -> Result<TimeseriesMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, format!("{other:?}")),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let row = record
            .iter()
            .map(|x| x.parse::<f64>().map_err(|e| Error::parse(path, format!("record {}: `{x}`: {e}", line + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(path, format!("record {} has {} values, expected {}", line + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, "no timepoints"));
    }
    TimeseriesMatrix::new(subject, Matrix::from_rows(&rows)).map_err(|e| Error::parse(path, e))
}

/// Subject files `subject_<s>.csv` for `s = 0, 1, ...`, looked up in
/// `dir/timeseries` and then `dir`.
pub fn timeseries_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::invalid(format!("input directory {} does not exist", dir.display())));
    }
    let nested = dir.join("timeseries");
    let base = if nested.join("subject_0.csv").is_file() { nested } else { dir.to_path_buf() };
    let files: Vec<PathBuf> = (0..).map(|s| base.join(format!("subject_{s}.csv"))).take_while(|p| p.is_file()).collect();
    if files.is_empty() {
        return Err(Error::invalid(format!("no subject_0.csv under {}", dir.display())));
    }
    Ok(files)
}

pub fn load_timeseries_dir(dir: impl AsRef<Path>) -> Result<Vec<TimeseriesMatrix>> {
    timeseries_files(dir)?
        .par_iter()
        .enumerate()
        .map(|(s, p)| read_timeseries(p, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_series(t: usize, v: usize, seed: u64) -> Matrix {
        let mut rng = derive_rng(seed, &[]);
        Matrix::from_fn(t, v, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(490, 30).unwrap(), 16);
        assert_eq!(window_count(60, 30).unwrap(), 2);
        assert_eq!(window_count(59, 30).unwrap(), 1);
        assert!(window_count(29, 30).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = Matrix::from_rows(&[vec![1.0, -1.0, 1.0, 1.0], vec![2.0, -2.0, 2.0, 1.0], vec![3.0, -3.0, 4.0, 1.0]]);
        let (c, constant) = pearson(&x);
        assert!((c.get(0, 1) + 1.0).abs() < 1e-15);
        // Direct formula for (1,2,3) vs (1,2,4).
        let (xs, ys) = ([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]);
        let (mx, my) = (2.0, 7.0 / 3.0);
        let cov: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>().sqrt();
        let sy: f64 = ys.iter().map(|b| (b - my) * (b - my)).sum::<f64>().sqrt();
        assert!((c.get(0, 2) - cov / (sx * sy)).abs() < 1e-15);
        assert!((c.get(0, 2) - 0.981_980).abs() < 1e-6);
        assert_eq!(constant, vec![3]);
        assert_eq!(c.get(3, 3), 1.0);
        assert_eq!(c.get(0, 3), 0.0);
        let (same, _) = pearson(&Matrix::from_rows(&[vec![1.0, 1.0], vec![5.0, 5.0], vec![2.0, 2.0]]));
        assert!((same.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn budget_and_threshold_examples() {
        assert_eq!(edge_budget(360, 5.0), 3231);
        let flat = Matrix::filled(4, 4, 0.5);
        let edges = threshold_top_pct(&flat, 50.0).unwrap();
        let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.u().0, e.v().0)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);

        let c = Matrix::from_rows(&[vec![1.0, 0.2, 0.7], vec![0.2, 1.0, -0.4], vec![0.7, -0.4, 1.0]]);
        let e = threshold_top_pct(&c, 34.0).unwrap();
        assert_eq!(e, vec![UndirectedEdge::new(0, 2).unwrap()]);
        assert!(threshold_top_pct(&c, 10.0).is_err());
    }

    #[test]
    fn full_scale_snapshot_has_exact_edge_count() {
        let ts = vec![
            TimeseriesMatrix::new(0, random_series(490, 360, 1)).unwrap(),
            TimeseriesMatrix::new(1, random_series(520, 360, 2)).unwrap(),
        ];
        let (corpus, report) = build_corpus(&ts, &PipelineConfig::default()).unwrap();
        assert_eq!(corpus.num_snapshots(), 16);
        assert_eq!(report.m, 3231);
        assert!(corpus.snapshots().all(|s| s.num_edges() == 3231));
        let (again, _) = build_corpus(&ts, &PipelineConfig::default()).unwrap();
        assert_eq!(corpus, again);
    }

    #[test]
    fn input_validation() {
        let a = TimeseriesMatrix::new(0, random_series(60, 5, 3)).unwrap();
        let b = TimeseriesMatrix::new(1, random_series(60, 6, 4)).unwrap();
        assert!(build_corpus(&[a.clone(), b], &PipelineConfig::default()).is_err());
        let bad = PipelineConfig { window: 1, threshold_pct: 5.0 };
        assert!(build_corpus(&[a.clone()], &bad).is_err());
        let short = TimeseriesMatrix::new(0, random_series(10, 5, 5)).unwrap();
        assert!(build_corpus(&[short], &PipelineConfig::default()).is_err());
        assert!(TimeseriesMatrix::new(0, Matrix::filled(3, 3, f64::NAN)).is_err());
    }

    #[test]
    fn constant_regions_are_reported() {
        let mut data = random_series(60, 8, 6);
        for i in 0..60 {
            data.set(i, 2, 7.5);
        }
        let ts = TimeseriesMatrix::new(0, data).unwrap();
        let cfg = PipelineConfig { window: 30, threshold_pct: 20.0 };
        let (_, report) = build_corpus(&[ts], &cfg).unwrap();
        assert_eq!(report.zero_variance_warnings, 2);
        assert_eq!(report.zero_variance[1].columns, vec![2]);
    }

    #[test]
    fn reads_csv_with_comment_header() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("timeseries");
        fs::create_dir(&sub).unwrap();
        fs::write(sub.join("subject_0.csv"), "# r0,r1,r2\n1,2,3\n4,5,6.5\n").unwrap();
        fs::write(sub.join("subject_1.csv"), "0,0,1\n1,2,3\n").unwrap();
        let all = load_timeseries_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].data, Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.5]]));
        assert_eq!(all[1].subject, 1);

        fs::write(sub.join("subject_0.csv"), "1,2,3\n4,5\n").unwrap();
        assert!(load_timeseries_dir(dir.path()).is_err());
        assert!(load_timeseries_dir(dir.path().join("missing")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn pearson_is_a_correlation_matrix(seed in 0u64..10_000) {
            let (c, _) = pearson(&random_series(12, 7, seed));
            for i in 0..7 {
                prop_assert!((c.get(i, i) - 1.0).abs() <= 1e-12);
                for j in 0..7 {
                    prop_assert!((c.get(i, j) - c.get(j, i)).abs() <= 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&c.get(i, j)));
                }
            }
        }

        #[test]
        fn thresholds_nest(seed in 0u64..10_000, lo in 5.0f64..40.0, extra in 1.0f64..50.0) {
            let (c, _) = pearson(&random_series(10, 9, seed));
            let small = threshold_top_pct(&c, lo).unwrap();
            let large = threshold_top_pct(&c, lo + extra).unwrap();
            prop_assert!(small.iter().all(|e| large.contains(e)));
        }

        #[test]
        fn relabeling_nodes_relabels_edges(seed in 0u64..10_000) {
            let v = 8;
            let data = random_series(40, v, seed);
            let mut perm: Vec<usize> = (0..v).collect();
            let mut rng = derive_rng(seed, &[1]);
            for i in (1..v).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // Column j of the permuted data is column perm[j] of the original.
            let permuted = Matrix::from_fn(40, v, |i, j| data.get(i, perm[j]));
            let cfg = PipelineConfig { window: 20, threshold_pct: 25.0 };
            let (a, _) = build_corpus(&[TimeseriesMatrix::new(0, data).unwrap()], &cfg).unwrap();
            let (b, _) = build_corpus(&[TimeseriesMatrix::new(0, permuted).unwrap()], &cfg).unwrap();
            for t in 0..2 {
                let mapped: std::collections::BTreeSet<UndirectedEdge> = b.snapshot(0, t).edges()
                    .map(|e| UndirectedEdge::new(perm[e.u().0], perm[e.v().0]).unwrap())
                    .collect();
                let original: std::collections::BTreeSet<UndirectedEdge> = a.snapshot(0, t).edges().copied().collect();
                prop_assert_eq!(mapped, original);
            }
        }
    }
}
