//! Held-out metrics, the common-neighbours baseline, community analysis and
//! embedding export.

mod cmn;
mod community;
mod metrics;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cmn::{cmn_distribution, cmn_scores, CMN_SMOOTHING};
pub use community::{community_report_from_averages, top_count, CommunityEntry, CommunityReport, DEFAULT_TOP_FRACTION};
pub use metrics::{auroc, average_precision, nmi};

use crate::autodiff::{softmax_slice, Matrix};
use crate::error::{Error, Result};
use crate::generative::GenerativeParams;
use crate::graph::{DirectedSample, DynamicGraphCorpus, GraphSnapshot, TemporalSplit};
use crate::inference::posterior_means;
use crate::model::Model;
use crate::rng::{derive_rng, Rng, STREAM_EVAL};
use crate::trainer::TrainingConfig;

pub const DEGREE_DRAWS: usize = 10;
const DEGREE_TAG: u64 = 1;
const NEGATIVE_TAG: u64 = 2;

/// `V x V` matrix of `p(c | w)`: community mixtures of every node times the
/// node distributions of every community.
pub fn predictive_matrix(phi: &Matrix, psi: &Matrix, params: &GenerativeParams) -> Result<Matrix> {
    let softmax_rows = |m: Matrix| {
        let mut m = m;
        let cols = m.cols();
        for r in 0..m.rows() {
            let s = softmax_slice(m.row(r));
            m.row_mut(r)[..cols].copy_from_slice(&s);
        }
        m
    };
    let logits = |mlp: &crate::generative::Mlp, x: &Matrix| -> Result<Matrix> {
        let rows = (0..x.rows()).map(|r| mlp.forward(x.row(r))).collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_rows(&rows))
    };
    let mix = softmax_rows(logits(&params.theta_z, phi)?);
    let nodes = softmax_rows(logits(&params.theta_c, psi)?);
    if mix.cols() != nodes.rows() {
        return Err(Error::shape(format!("{} mixture weights for {} communities", mix.cols(), nodes.rows())));
    }
    Ok(mix.matmul(&nodes))
}

/// Predictive matrices for every subject over a snapshot range.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub range: Range<usize>,
    matrices: Vec<Vec<Matrix>>,
}

impl Predictions {
    pub fn new(range: Range<usize>, matrices: Vec<Vec<Matrix>>) -> Result<Self> {
        if matrices.iter().any(|m| m.len() != range.len()) {
            return Err(Error::shape("one predictive matrix per snapshot in range is required"));
        }
        Ok(Self { range, matrices })
    }

    pub fn get(&self, subject: usize, time: usize) -> &Matrix {
        &self.matrices[subject][time - self.range.start]
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.matrices.len())
            .flat_map(|s| self.range.clone().map(move |t| (s, t)))
            .collect()
    }
}

fn check_range(corpus: &DynamicGraphCorpus, range: &Range<usize>) -> Result<()> {
    if range.is_empty() || range.end > corpus.num_snapshots() {
        return Err(Error::invalid(format!(
            "snapshot range {range:?} is empty or exceeds T={}",
            corpus.num_snapshots()
        )));
    }
    Ok(())
}

/// Model predictions from noise-free posterior rollouts.
pub fn model_predictions(model: &Model, corpus: &DynamicGraphCorpus, range: Range<usize>) -> Result<Predictions> {
    model.check_corpus(corpus)?;
    check_range(corpus, &range)?;
    let params = model.generative_params()?;
    let matrices = (0..corpus.num_subjects())
        .into_par_iter()
        .map(|s| {
            let m = posterior_means(&model.store, &model.shape, s, range.end)?;
            range
                .clone()
                .map(|t| predictive_matrix(&m.phi[t], &m.psi[t], &params))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Predictions::new(range, matrices)
}

/// Common-neighbours predictions, each from the previous snapshot.
pub fn cmn_predictions(corpus: &DynamicGraphCorpus, range: Range<usize>) -> Result<Predictions> {
    check_range(corpus, &range)?;
    if range.start == 0 {
        return Err(Error::invalid("the common-neighbours baseline needs a previous snapshot; t = 0 cannot be scored"));
    }
    let matrices = (0..corpus.num_subjects())
        .into_par_iter()
        .map(|s| range.clone().map(|t| cmn_distribution(corpus.snapshot(s, t - 1))).collect())
        .collect();
    Predictions::new(range, matrices)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMetrics {
    pub subject: usize,
    pub time: usize,
    pub num_edges: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree_mse: Option<f64>,
}

/// Sum of `-ln p(c | w)` over a snapshot's directed samples.
pub fn snapshot_nll_sum(samples: &[DirectedSample], p: &Matrix) -> f64 {
    samples.iter().map(|d| -p.get(d.w.0, d.c.0).ln()).sum()
}

/// Mean negative log-likelihood per directed sample, with per-snapshot means.
pub fn nll(corpus: &DynamicGraphCorpus, preds: &Predictions) -> Result<(f64, Vec<SnapshotMetrics>)> {
    let rows: Vec<(usize, usize, usize, f64)> = preds
        .pairs()
        .into_par_iter()
        .map(|(s, t)| {
            let samples = corpus.snapshot(s, t).directed_expansion();
            (s, t, samples.len(), snapshot_nll_sum(&samples, preds.get(s, t)))
        })
        .collect();
    let count: usize = rows.iter().map(|r| r.2).sum();
    if count == 0 {
        return Err(Error::invalid(format!("no edges in snapshots {:?}", preds.range)));
    }
    let total: f64 = rows.iter().map(|r| r.3).sum();
    let per = rows
        .iter()
        .map(|&(subject, time, n, sum)| SnapshotMetrics {
            subject,
            time,
            num_edges: n / 2,
            nll: (n > 0).then(|| sum / n as f64),
            degree_mse: None,
        })
        .collect();
    Ok((total / count as f64, per))
}

pub fn mean_nll(model: &Model, corpus: &DynamicGraphCorpus, range: Range<usize>) -> Result<f64> {
    Ok(nll(corpus, &model_predictions(model, corpus, range)?)?.0)
}

fn sample_row(cumulative: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

/// Degree reconstruction error of one snapshot: sources are kept, targets
/// are redrawn from `p`, and degrees over both endpoints are normalized by
/// twice the sample count. Averaged over `draws` reconstructions.
pub fn snapshot_degree_mse(samples: &[DirectedSample], p: &Matrix, draws: usize, rng: &mut Rng) -> f64 {
    let v = p.rows();
    let norm = 2.0 * samples.len() as f64;
    let mut actual = vec![0.0; v];
    let mut sources = vec![0.0; v];
    for d in samples {
        actual[d.w.0] += 1.0;
        actual[d.c.0] += 1.0;
        sources[d.w.0] += 1.0;
    }
    let cumulative: Vec<Vec<f64>> = (0..v)
        .map(|w| {
            p.row(w)
                .iter()
                .scan(0.0, |acc, &x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for _ in 0..draws {
        let mut recon = sources.clone();
        for d in samples {
            recon[sample_row(&cumulative[d.w.0], rng)] += 1.0;
        }
        total += recon
            .iter()
            .zip(&actual)
            .map(|(r, a)| ((r - a) / norm).powi(2))
            .sum::<f64>()
            / v as f64;
    }
    total / draws as f64
}

pub fn degree_mse(corpus: &DynamicGraphCorpus, preds: &Predictions, seed: u64) -> Result<(f64, Vec<f64>)> {
    let per: Vec<Option<f64>> = preds
        .pairs()
        .into_par_iter()
        .map(|(s, t)| {
            let samples = corpus.snapshot(s, t).directed_expansion();
            if samples.is_empty() {
                return None;
            }
            let mut rng = derive_rng(seed, &[STREAM_EVAL, DEGREE_TAG, s as u64, t as u64]);
            Some(snapshot_degree_mse(&samples, preds.get(s, t), DEGREE_DRAWS, &mut rng))
        })
        .collect();
    let scored: Vec<f64> = per.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::invalid(format!("no edges in snapshots {:?}", preds.range)));
    }
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok((mean, per.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()))
}

/// `count` distinct non-adjacent pairs `(u, v)` with `u < v`, uniformly
/// without replacement.
pub fn sample_negatives(snapshot: &GraphSnapshot, count: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    let v = snapshot.num_nodes();
    let candidates: Vec<(usize, usize)> = (0..v)
        .flat_map(|a| (a + 1..v).map(move |b| (a, b)))
        .filter(|&(a, b)| !snapshot.contains(a, b))
        .collect();
    if candidates.len() < count {
        return Err(Error::invalid(format!(
            "snapshot (subject {}, t={}) has {} non-edges, cannot draw {count} negatives",
            snapshot.subject,
            snapshot.time,
            candidates.len()
        )));
    }
    let mut picked: Vec<(usize, usize)> = rand::seq::index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub auroc: f64,
    pub ap: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Pools every snapshot's observed edges against an equal number of sampled
/// non-edges. Negatives depend only on `seed` and the snapshot, so different
/// scorers see the same pairs.
pub fn link_prediction_with<F>(corpus: &DynamicGraphCorpus, range: Range<usize>, seed: u64, score: F) -> Result<LinkResult>
where
    F: Fn(usize, usize, usize, usize) -> f64 + Sync,
{
    check_range(corpus, &range)?;
    let pairs: Vec<(usize, usize)> = (0..corpus.num_subjects())
        .flat_map(|s| range.clone().map(move |t| (s, t)))
        .collect();
    let scored = pairs
        .into_par_iter()
        .map(|(s, t)| {
            let snap = corpus.snapshot(s, t);
            let mut rng = derive_rng(seed, &[STREAM_EVAL, NEGATIVE_TAG, s as u64, t as u64]);
            let negatives = sample_negatives(snap, snap.num_edges(), &mut rng)?;
            let pos: Vec<f64> = snap.edges().map(|e| score(s, t, e.u().0, e.v().0)).collect();
            let neg: Vec<f64> = negatives.iter().map(|&(a, b)| score(s, t, a, b)).collect();
            Ok((pos, neg))
        })
        .collect::<Result<Vec<_>>>()?;
    let (pos, neg): (Vec<f64>, Vec<f64>) = scored.into_iter().fold((vec![], vec![]), |(mut p, mut n), (a, b)| {
        p.extend(a);
        n.extend(b);
        (p, n)
    });
    Ok(LinkResult {
        auroc: auroc(&pos, &neg)?,
        ap: average_precision(&pos, &neg)?,
        positives: pos.len(),
        negatives: neg.len(),
    })
}

/// Symmetrized model score `(p(v | u) + p(u | v)) / 2`.
pub fn link_prediction(corpus: &DynamicGraphCorpus, preds: &Predictions, seed: u64) -> Result<LinkResult> {
    link_prediction_with(corpus, preds.range.clone(), seed, |s, t, u, v| {
        let p = preds.get(s, t);
        0.5 * (p.get(u, v) + p.get(v, u))
    })
}

/// Raw Jaccard score on the previous snapshot.
pub fn cmn_link_prediction(corpus: &DynamicGraphCorpus, range: Range<usize>, seed: u64) -> Result<LinkResult> {
    if range.start == 0 {
        return Err(Error::invalid("the common-neighbours baseline cannot score t = 0"));
    }
    let scores: Vec<Vec<Matrix>> = (0..corpus.num_subjects())
        .into_par_iter()
        .map(|s| range.clone().map(|t| cmn_scores(corpus.snapshot(s, t - 1))).collect())
        .collect();
    let start = range.start;
    link_prediction_with(corpus, range, seed, |s, t, u, v| scores[s][t - start].get(u, v))
}

/// Averages node distributions and community mixtures over all subjects
/// and the training snapshots, then ranks nodes per community.
pub fn community_report(model: &Model, corpus: &DynamicGraphCorpus, fraction: f64) -> Result<CommunityReport> {
    model.check_corpus(corpus)?;
    let params = model.generative_params()?;
    let (v, k) = (model.shape.num_nodes, model.shape.num_communities);
    let train = model.split.train.clone();
    let per_subject = (0..corpus.num_subjects())
        .into_par_iter()
        .map(|s| {
            let m = posterior_means(&model.store, &model.shape, s, train.end)?;
            let mut node_dist = Matrix::zeros(k, v);
            let mut mixtures = Matrix::zeros(v, k);
            for t in train.clone() {
                for c in 0..k {
                    let p = crate::generative::node_probs(m.psi[t].row(c), &params)?;
                    node_dist.row_mut(c).iter_mut().zip(p).for_each(|(a, b)| *a += b);
                }
                for n in 0..v {
                    let p = crate::generative::community_probs(m.phi[t].row(n), &params)?;
                    mixtures.row_mut(n).iter_mut().zip(p).for_each(|(a, b)| *a += b);
                }
            }
            Ok((node_dist, mixtures))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut node_dist = Matrix::zeros(k, v);
    let mut mixtures = Matrix::zeros(v, k);
    for (nd, mx) in &per_subject {
        node_dist.add_assign(nd);
        mixtures.add_assign(mx);
    }
    let count = (corpus.num_subjects() * train.len()) as f64;
    let node_dist = node_dist.map(|x| x / count);
    let mixtures = mixtures.map(|x| x / count);
    community_report_from_averages(&node_dist, &mixtures, fraction, corpus.partition.as_ref())
}

/// NMI between a hard assignment and the corpus partition, when every node
/// is labelled.
pub fn partition_nmi(assignment: &[usize], corpus: &DynamicGraphCorpus) -> Result<Option<f64>> {
    let Some(partition) = corpus.partition.as_ref() else {
        return Ok(None);
    };
    if partition.len() != corpus.num_nodes() {
        return Ok(None);
    }
    let ids: BTreeMap<&String, usize> = partition.values().collect::<std::collections::BTreeSet<_>>().into_iter().zip(0..).collect();
    let truth: Vec<usize> = (0..corpus.num_nodes()).map(|n| ids[&partition[&n]]).collect();
    nmi(assignment, &truth).map(Some)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tasks {
    pub recon: bool,
    pub link: bool,
    pub communities: bool,
}

impl Tasks {
    pub fn all() -> Self {
        Self {
            recon: true,
            link: true,
            communities: true,
        }
    }

    /// Parses a comma-separated subset of `recon,link,communities`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tasks = Self::default();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "recon" => tasks.recon = true,
                "link" => tasks.link = true,
                "communities" => tasks.communities = true,
                other => return Err(Error::invalid(format!("unknown task `{other}` (expected recon, link, communities)"))),
            }
        }
        if tasks == Self::default() {
            return Err(Error::invalid("no evaluation tasks selected"));
        }
        Ok(tasks)
    }

    fn names(&self) -> Vec<String> {
        [("recon", self.recon), ("link", self.link), ("communities", self.communities)]
            .into_iter()
            .filter(|x| x.1)
            .map(|x| x.0.to_string())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub split: TemporalSplit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkResult>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_snapshot: Vec<SnapshotMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub communities: Option<CommunityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainingConfig>,
}

impl EvalReport {
    fn new(model: &str, seed: u64, tasks: &Tasks, split: TemporalSplit) -> Self {
        Self {
            model: model.to_string(),
            seed,
            tasks: tasks.names(),
            split,
            nll: None,
            degree_mse: None,
            auroc: None,
            ap: None,
            link: None,
            per_snapshot: Vec::new(),
            communities: None,
            nmi: None,
            config: None,
        }
    }

    fn fill_recon(&mut self, corpus: &DynamicGraphCorpus, preds: &Predictions, seed: u64) -> Result<()> {
        let (mean, mut per) = nll(corpus, preds)?;
        let (mse, per_mse) = degree_mse(corpus, preds, seed)?;
        for (row, m) in per.iter_mut().zip(per_mse) {
            row.degree_mse = m.is_finite().then_some(m);
        }
        self.nll = Some(mean);
        self.degree_mse = Some(mse);
        self.per_snapshot = per;
        Ok(())
    }

    fn fill_link(&mut self, link: LinkResult) {
        self.auroc = Some(link.auroc);
        self.ap = Some(link.ap);
        self.link = Some(link);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Runs the selected tasks on the model's test snapshots.
pub fn evaluate(model: &Model, corpus: &DynamicGraphCorpus, tasks: &Tasks, seed: u64) -> Result<EvalReport> {
    model.check_corpus(corpus)?;
    let mut report = EvalReport::new("dbgdgm", seed, tasks, model.split.clone());
    report.config = Some(model.config.clone());
    if tasks.recon || tasks.link {
        let preds = model_predictions(model, corpus, model.split.test.clone())?;
        if tasks.recon {
            report.fill_recon(corpus, &preds, seed)?;
        }
        if tasks.link {
            report.fill_link(link_prediction(corpus, &preds, seed)?);
        }
    }
    if tasks.communities {
        let c = community_report(model, corpus, DEFAULT_TOP_FRACTION)?;
        report.nmi = partition_nmi(&c.assignment, corpus)?;
        report.communities = Some(c);
    }
    Ok(report)
}

/// Common-neighbours baseline on the test snapshots of `split`.
pub fn evaluate_cmn(corpus: &DynamicGraphCorpus, split: &TemporalSplit, tasks: &Tasks, seed: u64) -> Result<EvalReport> {
    if split.num_snapshots() != corpus.num_snapshots() {
        return Err(Error::invalid("split does not match the corpus"));
    }
    let mut report = EvalReport::new("cmn", seed, tasks, split.clone());
    if tasks.recon {
        let preds = cmn_predictions(corpus, split.test.clone())?;
        report.fill_recon(corpus, &preds, seed)?;
    }
    if tasks.link {
        report.fill_link(cmn_link_prediction(corpus, split.test.clone(), seed)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub subject: usize,
    pub label: String,
    pub features: Vec<f64>,
}

/// Per subject: community means (`K * H_psi`) then node means
/// (`V * H_phi`), each averaged over the training snapshots.
pub fn export_embeddings(model: &Model, corpus: &DynamicGraphCorpus) -> Result<Vec<EmbeddingRow>> {
    model.check_corpus(corpus)?;
    let train = model.split.train.clone();
    (0..corpus.num_subjects())
        .into_par_iter()
        .map(|s| {
            let m = posterior_means(&model.store, &model.shape, s, train.end)?;
            let average = |mats: &[Matrix]| {
                let mut acc = Matrix::zeros(mats[0].rows(), mats[0].cols());
                mats.iter().for_each(|x| acc.add_assign(x));
                acc.map(|x| x / mats.len() as f64).into_vec()
            };
            let mut features = average(&m.psi[train.clone()]);
            features.extend(average(&m.phi[train.clone()]));
            let label = corpus.labels.as_ref().map(|l| l[s].clone()).unwrap_or_default();
            Ok(EmbeddingRow { subject: s, label, features })
        })
        .collect()
}

pub fn write_embeddings(rows: &[EmbeddingRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let width = rows.first().map_or(0, |r| r.features.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let header = ["subject".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..width).map(|i| format!("feature_{i}")));
    w.write_record(header).map_err(|e| Error::parse(path, e))?;
    for r in rows {
        let record = [r.subject.to_string(), r.label.clone()]
            .into_iter()
            .chain(r.features.iter().map(|x| format!("{x:?}")));
        w.write_record(record).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        let subject = record[0].parse().map_err(|e| Error::parse(path, e))?;
        let features = record
            .iter()
            .skip(2)
            .map(|x| x.parse::<f64>().map_err(|e| Error::parse(path, e)))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            subject,
            label: record[1].to_string(),
            features,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
