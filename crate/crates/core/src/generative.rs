//! The generative process: Gaussian priors over graph, node and community
//! embeddings, edge generation through community mixtures, the joint
//! log-density, and an ancestral sampler.
//!
//! Everything here is plain (untraced) arithmetic so it doubles as an
//! independent reference for the traced objective used in training.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_slice, Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{DirectedSample, DynamicGraphCorpus, GraphSnapshot, NodeId, UndirectedEdge};
use crate::rng::{derive_rng, Rng, STREAM_SYNTH};

pub const THETA_Z: &str = "theta_z";
pub const THETA_C: &str = "theta_c";

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub h_alpha: usize,
    pub h_phi: usize,
    pub h_psi: usize,
}

impl EmbeddingDims {
    pub fn uniform(h: usize) -> Self {
        Self {
            h_alpha: h,
            h_phi: h,
            h_psi: h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_alpha == 0 || self.h_phi == 0 || self.h_psi == 0 {
            return Err(Error::invalid("embedding dimensions must be at least 1"));
        }
        Ok(())
    }

    pub fn is_uniform(&self) -> bool {
        self.h_alpha == self.h_phi && self.h_phi == self.h_psi
    }
}

/// Standard deviations of the node and community random walks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorHyper {
    pub sigma_phi: f64,
    pub sigma_psi: f64,
}

impl PriorHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_phi > 0.0 && self.sigma_psi > 0.0) {
            return Err(Error::invalid(format!(
                "prior standard deviations must be positive, got ({}, {})",
                self.sigma_phi, self.sigma_psi
            )));
        }
        Ok(())
    }
}

/// Untraced multilayer perceptron: affine layers with `tanh` in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<(Matrix, Matrix)>,
}

impl Mlp {
    pub fn new(layers: Vec<(Matrix, Matrix)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (l, (w, b)) in layers.iter().enumerate() {
            if b.shape() != (1, w.cols()) {
                return Err(Error::shape(format!("layer {l}: bias {:?} for weight {:?}", b.shape(), w.shape())));
            }
            if l > 0 && layers[l - 1].0.cols() != w.rows() {
                return Err(Error::shape(format!("layer {l} input width {}", w.rows())));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|p| (Matrix::zeros(p[0], p[1]), Matrix::zeros(1, p[1])))
                .collect(),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let depth = crate::autodiff::nn::mlp_depth(store, prefix);
        let layers = (0..depth)
            .map(|l| {
                Ok((
                    store.require(&format!("{prefix}.{l}.weight"))?.clone(),
                    store.require(&format!("{prefix}.{l}.bias"))?.clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").0.cols()
    }

    pub fn layers(&self) -> &[(Matrix, Matrix)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(Matrix, Matrix)] {
        &mut self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "MLP expects input width {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut h = x.to_vec();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let mut out = b.as_slice().to_vec();
            for (i, &xi) in h.iter().enumerate() {
                for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                    *o += xi * wij;
                }
            }
            if l + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = out;
        }
        Ok(h)
    }
}

/// `theta_z` maps a node embedding to community logits; `theta_c` maps a
/// community embedding to node logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeParams {
    pub theta_z: Mlp,
    pub theta_c: Mlp,
}

impl GenerativeParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            theta_z: Mlp::from_store(store, THETA_Z)?,
            theta_c: Mlp::from_store(store, THETA_C)?,
        })
    }

    pub fn zeros(dims: EmbeddingDims, num_communities: usize, num_nodes: usize) -> Self {
        Self {
            theta_z: Mlp::zeros(&[dims.h_phi, num_communities]),
            theta_c: Mlp::zeros(&[dims.h_psi, num_nodes]),
        }
    }

    pub fn num_communities(&self) -> usize {
        self.theta_z.out_dim()
    }

    pub fn num_nodes(&self) -> usize {
        self.theta_c.out_dim()
    }
}

/// Prior community mixture of a source node, `softmax(theta_z(phi_w))`.
pub fn community_probs(phi_w: &[f64], params: &GenerativeParams) -> Result<Vec<f64>> {
    Ok(softmax_slice(&params.theta_z.forward(phi_w)?))
}

/// Node distribution of a community, `softmax(theta_c(psi_k))`.
pub fn node_probs(psi_k: &[f64], params: &GenerativeParams) -> Result<Vec<f64>> {
    Ok(softmax_slice(&params.theta_c.forward(psi_k)?))
}

/// `p(c | w) = sum_k node_probs(psi_k)[c] * community_probs(phi_w)[k]`.
pub fn edge_marginal(phi_w: &[f64], psi_all: &Matrix, params: &GenerativeParams) -> Result<Vec<f64>> {
    let mix = community_probs(phi_w, params)?;
    if psi_all.rows() != mix.len() {
        return Err(Error::shape(format!(
            "{} community embeddings for K={}",
            psi_all.rows(),
            mix.len()
        )));
    }
    let mut out = vec![0.0; params.num_nodes()];
    for (k, &weight) in mix.iter().enumerate() {
        let probs = node_probs(psi_all.row(k), params)?;
        for (o, p) in out.iter_mut().zip(probs) {
            *o += weight * p;
        }
    }
    Ok(out)
}

pub fn sample_alpha(num_subjects: usize, dims: EmbeddingDims, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(num_subjects, dims.h_alpha, |_, _| StandardNormal.sample(rng))
}

/// One random-walk step `Normal(prev, sigma I)`.
pub fn transition(prev: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    prev.iter()
        .map(|&m| {
            let e: f64 = StandardNormal.sample(rng);
            m + sigma * e
        })
        .collect()
}

/// Sum of independent `Normal(mean_i, sigma)` log-densities.
pub fn log_normal(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    x.iter()
        .zip(mean)
        .map(|(&xi, &mi)| {
            let d = (xi - mi) / sigma;
            -0.5 * d * d - sigma.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// Offsets added to the graph embedding to form the `t = 0` state of each
/// node and community. Zero offsets give the unmodified random walks.
#[derive(Clone, Debug, PartialEq)]
pub struct InitOffsets {
    pub node: Matrix,
    pub community: Matrix,
}

/// Sampled or posterior latent trajectories. `phi[s][t]` is `V x H` and
/// `psi[s][t]` is `K x H` for snapshot `t`; `z[s][t]` aligns with that
/// snapshot's directed samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub alpha: Matrix,
    pub phi: Vec<Vec<Matrix>>,
    pub psi: Vec<Vec<Matrix>>,
    pub z: Vec<Vec<Vec<usize>>>,
    pub offsets: Option<InitOffsets>,
}

impl LatentState {
    fn initial(&self, s: usize, num: usize, offsets: Option<&Matrix>) -> Matrix {
        let a = self.alpha.row(s);
        Matrix::from_fn(num, a.len(), |i, j| a[j] + offsets.map_or(0.0, |o| o.get(i, j)))
    }

    /// `t = 0` node states of subject `s`.
    pub fn initial_phi(&self, s: usize, num_nodes: usize) -> Matrix {
        self.initial(s, num_nodes, self.offsets.as_ref().map(|o| &o.node))
    }

    pub fn initial_psi(&self, s: usize, num_communities: usize) -> Matrix {
        self.initial(s, num_communities, self.offsets.as_ref().map(|o| &o.community))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_subjects: usize,
    pub num_snapshots: usize,
    pub num_nodes: usize,
    pub num_communities: usize,
    pub edges_per_snapshot: usize,
    pub dims: EmbeddingDims,
    pub hyper: PriorHyper,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects == 0 || self.num_snapshots == 0 {
            return Err(Error::invalid("need at least one subject and one snapshot"));
        }
        if self.num_nodes < 2 || self.num_communities < 2 {
            return Err(Error::invalid("need V >= 2 and K >= 2"));
        }
        if self.edges_per_snapshot == 0 {
            return Err(Error::invalid("need at least one edge per snapshot"));
        }
        self.dims.validate()?;
        if !self.dims.is_uniform() {
            return Err(Error::invalid(
                "the generative random walks start at alpha, so H_alpha = H_phi = H_psi is required",
            ));
        }
        self.hyper.validate()
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub corpus: DynamicGraphCorpus,
    pub latents: LatentState,
    /// Generated directed samples per `[s][t]`, aligned with `latents.z`.
    pub samples: Vec<Vec<Vec<DirectedSample>>>,
}

const SELF_EDGE_ATTEMPTS: usize = 100;

fn categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

type SubjectDraw = (Vec<f64>, Vec<Matrix>, Vec<Matrix>, Vec<Vec<usize>>, Vec<Vec<DirectedSample>>);

fn sample_subject(
    cfg: &SamplerConfig,
    params: &GenerativeParams,
    offsets: Option<&InitOffsets>,
    seed: u64,
    s: usize,
) -> Result<SubjectDraw> {
    let (v, k, h) = (cfg.num_nodes, cfg.num_communities, cfg.dims.h_alpha);
    let mut rng = derive_rng(seed, &[STREAM_SYNTH, s as u64]);
    let alpha: Vec<f64> = (0..h).map(|_| StandardNormal.sample(&mut rng)).collect();
    let init = |num: usize, off: Option<&Matrix>| {
        Matrix::from_fn(num, h, |i, j| alpha[j] + off.map_or(0.0, |o| o.get(i, j)))
    };
    let mut phi_prev = init(v, offsets.map(|o| &o.node));
    let mut psi_prev = init(k, offsets.map(|o| &o.community));

    let (mut phis, mut psis, mut zs, mut all_samples) = (vec![], vec![], vec![], vec![]);
    for t in 0..cfg.num_snapshots {
        let mut rng = derive_rng(seed, &[STREAM_SYNTH, s as u64, t as u64 + 1]);
        let mut psi = Matrix::zeros(k, h);
        for kk in 0..k {
            let row = transition(psi_prev.row(kk), cfg.hyper.sigma_psi, &mut rng);
            psi.row_mut(kk).copy_from_slice(&row);
        }
        let mut phi = Matrix::zeros(v, h);
        for n in 0..v {
            let row = transition(phi_prev.row(n), cfg.hyper.sigma_phi, &mut rng);
            phi.row_mut(n).copy_from_slice(&row);
        }
        let node_dists = (0..k)
            .map(|kk| node_probs(psi.row(kk), params))
            .collect::<Result<Vec<_>>>()?;

        let mut z_t = Vec::with_capacity(cfg.edges_per_snapshot);
        let mut samples_t = Vec::with_capacity(cfg.edges_per_snapshot);
        for _ in 0..cfg.edges_per_snapshot {
            let w = rng.random_range(0..v);
            let z = categorical(&community_probs(phi.row(w), params)?, &mut rng);
            let dist = &node_dists[z];
            let mut c = categorical(dist, &mut rng);
            let mut attempts = 1;
            while c == w && attempts < SELF_EDGE_ATTEMPTS {
                c = categorical(dist, &mut rng);
                attempts += 1;
            }
            if c == w {
                c = (0..v)
                    .filter(|&n| n != w)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("V >= 2");
            }
            z_t.push(z);
            samples_t.push(DirectedSample {
                w: NodeId(w),
                c: NodeId(c),
            });
        }
        phis.push(phi.clone());
        psis.push(psi.clone());
        zs.push(z_t);
        all_samples.push(samples_t);
        phi_prev = phi;
        psi_prev = psi;
    }
    Ok((alpha, phis, psis, zs, all_samples))
}

/// Draws a corpus by ancestral sampling. Sources are uniform over nodes, a
/// target equal to its source is redrawn, and repeated pairs collapse in the
/// undirected edge sets while `samples` keeps every generated pair.
pub fn ancestral_sample(
    cfg: &SamplerConfig,
    params: &GenerativeParams,
    offsets: Option<&InitOffsets>,
    seed: u64,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let (v, k, h) = (cfg.num_nodes, cfg.num_communities, cfg.dims.h_alpha);
    if params.num_communities() != k || params.num_nodes() != v {
        return Err(Error::shape(format!(
            "parameters are for K={}, V={} but config has K={k}, V={v}",
            params.num_communities(),
            params.num_nodes()
        )));
    }
    if params.theta_z.in_dim() != h || params.theta_c.in_dim() != h {
        return Err(Error::shape("MLP input widths must equal the embedding dimension"));
    }
    if let Some(o) = offsets {
        if o.node.shape() != (v, h) || o.community.shape() != (k, h) {
            return Err(Error::shape("initial offsets must be V x H and K x H"));
        }
    }

    let draws = (0..cfg.num_subjects)
        .into_par_iter()
        .map(|s| sample_subject(cfg, params, offsets, seed, s))
        .collect::<Result<Vec<_>>>()?;

    let mut alpha = Matrix::zeros(cfg.num_subjects, h);
    let mut snapshots = Vec::with_capacity(cfg.num_subjects * cfg.num_snapshots);
    let (mut phi, mut psi, mut z, mut samples) = (vec![], vec![], vec![], vec![]);
    for (s, (a, phis, psis, zs, smp)) in draws.into_iter().enumerate() {
        alpha.row_mut(s).copy_from_slice(&a);
        for (t, list) in smp.iter().enumerate() {
            let mut edges: Vec<UndirectedEdge> = list
                .iter()
                .map(|d| UndirectedEdge::new(d.w.0, d.c.0))
                .collect::<Result<_>>()?;
            edges.sort_unstable();
            edges.dedup();
            snapshots.push(GraphSnapshot::new(s, t, v, edges)?);
        }
        phi.push(phis);
        psi.push(psis);
        z.push(zs);
        samples.push(smp);
    }
    let corpus = DynamicGraphCorpus::new(cfg.num_subjects, cfg.num_snapshots, v, snapshots)?;
    Ok(SampleOutput {
        corpus,
        latents: LatentState {
            alpha,
            phi,
            psi,
            z,
            offsets: offsets.cloned(),
        },
        samples,
    })
}

/// Per-factor log-densities; their sum is the joint log-probability.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointTerms {
    pub alpha: f64,
    pub phi: f64,
    pub psi: f64,
    pub z: f64,
    pub c: f64,
}

impl JointTerms {
    pub fn total(&self) -> f64 {
        self.alpha + self.phi + self.psi + self.z + self.c
    }
}

/// Joint log-density of directed samples and latents, factor by factor.
pub fn joint_terms(
    samples: &[Vec<Vec<DirectedSample>>],
    latents: &LatentState,
    params: &GenerativeParams,
    hyper: &PriorHyper,
) -> Result<JointTerms> {
    hyper.validate()?;
    let num_s = latents.alpha.rows();
    let h = latents.alpha.cols();
    let (v, k) = (params.num_nodes(), params.num_communities());
    if samples.len() != num_s || latents.phi.len() != num_s || latents.psi.len() != num_s || latents.z.len() != num_s {
        return Err(Error::shape("latents and samples disagree on the subject count"));
    }
    let mut terms = JointTerms::default();
    for s in 0..num_s {
        terms.alpha += log_normal(latents.alpha.row(s), &vec![0.0; h], 1.0);
        let mut phi_prev = latents.initial_phi(s, v);
        let mut psi_prev = latents.initial_psi(s, k);
        let num_t = samples[s].len();
        if latents.phi[s].len() != num_t || latents.psi[s].len() != num_t || latents.z[s].len() != num_t {
            return Err(Error::shape(format!("subject {s}: latent trajectories must cover {num_t} snapshots")));
        }
        for t in 0..num_t {
            let (phi, psi) = (&latents.phi[s][t], &latents.psi[s][t]);
            if phi.shape() != (v, h) || psi.shape() != (k, h) {
                return Err(Error::shape(format!(
                    "subject {s}, t={t}: phi {:?}, psi {:?}, expected ({v}, {h}) and ({k}, {h})",
                    phi.shape(),
                    psi.shape()
                )));
            }
            for n in 0..v {
                terms.phi += log_normal(phi.row(n), phi_prev.row(n), hyper.sigma_phi);
            }
            for kk in 0..k {
                terms.psi += log_normal(psi.row(kk), psi_prev.row(kk), hyper.sigma_psi);
            }
            let zs = &latents.z[s][t];
            if zs.len() != samples[s][t].len() {
                return Err(Error::shape(format!(
                    "subject {s}, t={t}: {} assignments for {} samples",
                    zs.len(),
                    samples[s][t].len()
                )));
            }
            for (d, &zi) in samples[s][t].iter().zip(zs) {
                if zi >= k || d.w.0 >= v || d.c.0 >= v {
                    return Err(Error::invalid(format!("subject {s}, t={t}: index out of range")));
                }
                terms.z += community_probs(phi.row(d.w.0), params)?[zi].ln();
                terms.c += node_probs(psi.row(zi), params)?[d.c.0].ln();
            }
            phi_prev = phi.clone();
            psi_prev = psi.clone();
        }
    }
    Ok(terms)
}

/// Joint log-probability of `corpus` (as directed expansions) and `latents`.
pub fn joint_log_prob(
    corpus: &DynamicGraphCorpus,
    latents: &LatentState,
    params: &GenerativeParams,
    hyper: &PriorHyper,
) -> Result<f64> {
    let samples: Vec<Vec<Vec<DirectedSample>>> = (0..corpus.num_subjects())
        .map(|s| {
            corpus
                .subject_snapshots(s)
                .iter()
                .map(GraphSnapshot::directed_expansion)
                .collect()
        })
        .collect();
    Ok(joint_terms(&samples, latents, params, hyper)?.total())
}

/// Planted block structure for synthetic corpora.
///
/// Node `n` belongs to block `n K / V`. Node and community `t = 0` states
/// are offset by `separation` along the coordinate of their block, `theta_z`
/// reads that coordinate back as community logits, and `theta_c` puts the
/// block coordinate onto the logits of the block's nodes. Per-node logit
/// biases drawn from `Normal(0, popularity_sd)` vary degrees within a block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedBlocks {
    pub separation: f64,
    pub popularity_sd: f64,
}

impl Default for PlantedBlocks {
    fn default() -> Self {
        Self {
            separation: 8.0,
            popularity_sd: 1.0,
        }
    }
}

pub fn block_of(node: usize, num_nodes: usize, num_communities: usize) -> usize {
    node * num_communities / num_nodes
}

impl PlantedBlocks {
    pub fn build(
        &self,
        num_nodes: usize,
        num_communities: usize,
        h: usize,
        seed: u64,
    ) -> Result<(GenerativeParams, InitOffsets)> {
        if num_communities > num_nodes {
            return Err(Error::invalid(format!(
                "cannot plant K={num_communities} blocks on V={num_nodes} nodes"
            )));
        }
        if h < num_communities {
            return Err(Error::invalid(format!(
                "planted blocks need embedding dimension >= K (got H={h}, K={num_communities})"
            )));
        }
        let (v, k) = (num_nodes, num_communities);
        let block = |n: usize| block_of(n, v, k);
        let mut rng = derive_rng(seed, &[STREAM_SYNTH, u64::MAX]);

        let wz = Matrix::from_fn(h, k, |i, j| if i == j { 1.0 } else { 0.0 });
        let wc = Matrix::from_fn(h, v, |i, n| if i < k && block(n) == i { 1.0 } else { 0.0 });
        let bc = Matrix::from_fn(1, v, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            self.popularity_sd * e
        });
        let params = GenerativeParams {
            theta_z: Mlp::new(vec![(wz, Matrix::zeros(1, k))])?,
            theta_c: Mlp::new(vec![(wc, bc)])?,
        };
        let offsets = InitOffsets {
            node: Matrix::from_fn(v, h, |n, j| if j == block(n) { self.separation } else { 0.0 }),
            community: Matrix::from_fn(k, h, |kk, j| if j == kk { self.separation } else { 0.0 }),
        };
        Ok((params, offsets))
    }
}

/// A planted-block corpus with its generating parameters. The corpus
/// partition labels every node `block_<b>`.
#[derive(Clone, Debug)]
pub struct PlantedSample {
    pub output: SampleOutput,
    pub params: GenerativeParams,
    pub blocks: Vec<usize>,
}

pub fn sample_planted(cfg: &SamplerConfig, planted: &PlantedBlocks, seed: u64) -> Result<PlantedSample> {
    cfg.validate()?;
    let (v, k) = (cfg.num_nodes, cfg.num_communities);
    let (params, offsets) = planted.build(v, k, cfg.dims.h_alpha, seed)?;
    let mut output = ancestral_sample(cfg, &params, Some(&offsets), seed)?;
    let blocks: Vec<usize> = (0..v).map(|n| block_of(n, v, k)).collect();
    let partition = blocks.iter().enumerate().map(|(n, b)| (n, format!("block_{b}"))).collect();
    output.corpus = output.corpus.with_partition(partition)?;
    Ok(PlantedSample { output, params, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(h: usize, k: usize, v: usize, seed: u64) -> GenerativeParams {
        let mut rng = derive_rng(seed, &[]);
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5));
        GenerativeParams {
            theta_z: Mlp::new(vec![(m(h, k), m(1, k))]).unwrap(),
            theta_c: Mlp::new(vec![(m(h, v), m(1, v))]).unwrap(),
        }
    }

    fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn sample_alpha_moments_and_determinism() {
        let dims = EmbeddingDims::uniform(10);
        let a = sample_alpha(10_000, dims, &mut derive_rng(1, &[]));
        let n = a.len() as f64;
        let mean = a.sum() / n;
        let var = a.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.03, "var {var}");
        assert_eq!(a, sample_alpha(10_000, dims, &mut derive_rng(1, &[])));
    }

    #[test]
    fn transition_noise_scale() {
        let prev = vec![0.5, -1.0];
        let out = transition(&prev, 1e-12, &mut derive_rng(2, &[]));
        assert!(out.iter().zip(&prev).all(|(a, b)| (a - b).abs() < 1e-5));

        let mut rng = derive_rng(3, &[]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| transition(&[0.0], 0.01, &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 0.01).abs() <= 0.001, "sd {sd}");
    }

    #[test]
    fn community_probs_examples() {
        let zero = GenerativeParams::zeros(EmbeddingDims::uniform(4), 3, 7);
        let p = community_probs(&[0.3, 1.0, -2.0, 5.0], &zero).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        // Hand-evaluated affine + softmax.
        let w = Matrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.5, 2.0, 0.0]]);
        let b = Matrix::row_vector(vec![0.1, -0.2, 0.3]);
        let params = GenerativeParams {
            theta_z: Mlp::new(vec![(w, b)]).unwrap(),
            theta_c: Mlp::zeros(&[2, 4]),
        };
        let x = [2.0, -1.0];
        let logits = [2.0 - 0.5 + 0.1, -2.0 - 0.2, -2.0 + 0.3];
        let denom: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let p = community_probs(&x, &params).unwrap();
        for k in 0..3 {
            assert!((p[k] - logits[k].exp() / denom).abs() < 1e-15);
        }
        assert!(community_probs(&[1.0], &params).is_err());
    }

    #[test]
    fn node_probs_uniform_anchor() {
        let zero = GenerativeParams::zeros(EmbeddingDims::uniform(3), 2, 360);
        let p = node_probs(&[1.0, 2.0, 3.0], &zero).unwrap();
        assert!((-p[17].ln() - 360f64.ln()).abs() < 1e-12);
        assert!((-p[17].ln() - 5.8861).abs() < 1e-4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_marginal_single_community_is_node_probs() {
        let params = random_params(3, 1, 6, 4);
        let mut rng = derive_rng(5, &[]);
        let phi = random_vec(3, &mut rng);
        let psi = Matrix::row_vector(random_vec(3, &mut rng));
        let m = edge_marginal(&phi, &psi, &params).unwrap();
        assert_eq!(m, node_probs(psi.row(0), &params).unwrap());
    }

    #[test]
    fn edge_marginal_matches_double_loop() {
        let (h, k, v) = (4, 3, 5);
        let params = random_params(h, k, v, 6);
        let mut rng = derive_rng(7, &[]);
        let phi = random_vec(h, &mut rng);
        let psi = Matrix::from_fn(k, h, |_, _| rng.random_range(-2.0..2.0));
        // Brute force from raw logits.
        let zl = params.theta_z.forward(&phi).unwrap();
        let zmax = zl.iter().cloned().fold(f64::MIN, f64::max);
        let zden: f64 = zl.iter().map(|l| (l - zmax).exp()).sum();
        let mut expected = vec![0.0; v];
        for c in 0..v {
            for kk in 0..k {
                let cl = params.theta_c.forward(psi.row(kk)).unwrap();
                let cmax = cl.iter().cloned().fold(f64::MIN, f64::max);
                let cden: f64 = cl.iter().map(|l| (l - cmax).exp()).sum();
                expected[c] += (cl[c] - cmax).exp() / cden * (zl[kk] - zmax).exp() / zden;
            }
        }
        let m = edge_marginal(&phi, &psi, &params).unwrap();
        for c in 0..v {
            assert!((m[c] - expected[c]).abs() < 1e-12);
        }
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn small_cfg() -> SamplerConfig {
        SamplerConfig {
            num_subjects: 2,
            num_snapshots: 3,
            num_nodes: 30,
            num_communities: 3,
            edges_per_snapshot: 40,
            dims: EmbeddingDims::uniform(4),
            hyper: PriorHyper {
                sigma_phi: 0.01,
                sigma_psi: 0.01,
            },
        }
    }

    #[test]
    fn ancestral_sample_is_deterministic_and_well_formed() {
        let cfg = small_cfg();
        let params = random_params(4, 3, 30, 8);
        let a = ancestral_sample(&cfg, &params, None, 11).unwrap();
        let b = ancestral_sample(&cfg, &params, None, 11).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.latents, b.latents);
        for s in 0..2 {
            for t in 0..3 {
                assert_eq!(a.samples[s][t].len(), 40);
                assert!(a.latents.z[s][t].iter().all(|&z| z < 3));
                assert!(a.corpus.snapshot(s, t).num_edges() <= 40);
                assert!(a.samples[s][t].iter().all(|d| d.w != d.c));
            }
        }
        let c = ancestral_sample(&cfg, &params, None, 12).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn planted_blocks_give_within_block_edges() {
        let cfg = small_cfg();
        let (params, offsets) = PlantedBlocks::default().build(30, 3, 4, 9).unwrap();
        // Each community concentrates at least 99% of its mass on its block.
        let out = ancestral_sample(&cfg, &params, Some(&offsets), 13).unwrap();
        for s in 0..2 {
            for t in 0..3 {
                let psi = &out.latents.psi[s][t];
                for k in 0..3 {
                    let p = node_probs(psi.row(k), &params).unwrap();
                    let mass: f64 = (0..30).filter(|&n| block_of(n, 30, 3) == k).map(|n| p[n]).sum();
                    assert!(mass >= 0.99, "community {k} mass {mass}");
                }
            }
        }
        let mut within = 0;
        let mut total = 0;
        for subject in &out.samples {
            for snap in subject {
                for d in snap {
                    total += 1;
                    within += usize::from(block_of(d.w.0, 30, 3) == block_of(d.c.0, 30, 3));
                }
            }
        }
        assert!(within as f64 >= 0.95 * total as f64, "{within}/{total}");
    }

    #[test]
    fn vanishing_noise_freezes_trajectories() {
        let mut cfg = small_cfg();
        cfg.hyper = PriorHyper {
            sigma_phi: 1e-12,
            sigma_psi: 1e-12,
        };
        let params = random_params(4, 3, 30, 10);
        let out = ancestral_sample(&cfg, &params, None, 14).unwrap();
        for s in 0..2 {
            let a = out.latents.alpha.row(s);
            for t in 0..3 {
                for m in [&out.latents.phi[s][t], &out.latents.psi[s][t]] {
                    for r in 0..m.rows() {
                        assert!(m.row(r).iter().zip(a).all(|(x, y)| (x - y).abs() < 1e-6));
                    }
                }
            }
        }
    }

    fn one_edge_case() -> (DynamicGraphCorpus, LatentState) {
        let snap = GraphSnapshot::new(0, 0, 4, [UndirectedEdge::new(1, 3).unwrap()]).unwrap();
        let corpus = DynamicGraphCorpus::new(1, 1, 4, vec![snap]).unwrap();
        let latents = LatentState {
            alpha: Matrix::row_vector(vec![0.5, -1.0]),
            phi: vec![vec![Matrix::from_fn(4, 2, |i, j| 0.5 + 0.01 * (i + j) as f64 - 1.5 * j as f64)]],
            psi: vec![vec![Matrix::row_vector(vec![0.48, -1.02])]],
            z: vec![vec![vec![0, 0]]],
            offsets: None,
        };
        (corpus, latents)
    }

    #[test]
    fn joint_log_prob_hand_case() {
        let (corpus, latents) = one_edge_case();
        let hyper = PriorHyper {
            sigma_phi: 0.1,
            sigma_psi: 0.2,
        };
        let params = GenerativeParams::zeros(EmbeddingDims::uniform(2), 1, 4);
        let got = joint_log_prob(&corpus, &latents, &params, &hyper).unwrap();

        let norm = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut expected = norm(0.5, 0.0, 1.0) + norm(-1.0, 0.0, 1.0);
        for i in 0..4 {
            for (j, a) in [0.5, -1.0].into_iter().enumerate() {
                expected += norm(latents.phi[0][0].get(i, j), a, 0.1);
            }
        }
        expected += norm(0.48, 0.5, 0.2) + norm(-1.02, -1.0, 0.2);
        // Two directed samples, each log(1/K) + log(1/V) with K = 1, V = 4.
        expected += 2.0 * (1f64.ln() + (0.25f64).ln());
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn joint_log_prob_penalizes_larger_steps() {
        let (corpus, mut latents) = one_edge_case();
        let hyper = PriorHyper {
            sigma_phi: 0.1,
            sigma_psi: 0.1,
        };
        let params = GenerativeParams::zeros(EmbeddingDims::uniform(2), 1, 4);
        let mut last = f64::INFINITY;
        for step in [0.0, 0.1, 0.3, 1.0] {
            let m = Matrix::from_fn(4, 2, |_, j| [0.5, -1.0][j] + step);
            latents.phi[0][0] = m;
            let samples = vec![vec![corpus.snapshot(0, 0).directed_expansion()]];
            let terms = joint_terms(&samples, &latents, &params, &hyper).unwrap();
            assert!(terms.phi < last);
            last = terms.phi;
        }
    }

    #[test]
    fn joint_log_prob_decomposes_and_ignores_edge_order() {
        let cfg = small_cfg();
        let params = random_params(4, 3, 30, 15);
        let out = ancestral_sample(&cfg, &params, None, 16).unwrap();
        let terms = joint_terms(&out.samples, &out.latents, &params, &cfg.hyper).unwrap();

        // Independent per-factor evaluation.
        let mut c_term = 0.0;
        let mut z_term = 0.0;
        for s in 0..2 {
            for t in 0..3 {
                for (d, &z) in out.samples[s][t].iter().zip(&out.latents.z[s][t]) {
                    let zl = params.theta_z.forward(out.latents.phi[s][t].row(d.w.0)).unwrap();
                    z_term += zl[z] - crate::autodiff::logsumexp_slice(&zl);
                    let cl = params.theta_c.forward(out.latents.psi[s][t].row(z)).unwrap();
                    c_term += cl[d.c.0] - crate::autodiff::logsumexp_slice(&cl);
                }
            }
        }
        assert!((terms.z - z_term).abs() < 1e-9);
        assert!((terms.c - c_term).abs() < 1e-9);

        let mut samples = out.samples.clone();
        let mut latents = out.latents.clone();
        samples[1][2].reverse();
        latents.z[1][2].reverse();
        let permuted = joint_terms(&samples, &latents, &params, &cfg.hyper).unwrap();
        assert!((permuted.total() - terms.total()).abs() < 1e-9 * terms.total().abs());
    }
}
