//! Structured variational posterior.
//!
//! Per-subject Gaussians over the graph embedding, init MLPs that map it to
//! the `t = 0` node and community states, and GRU transitions whose affine
//! heads give the mean and scale of each next state. The community posterior
//! reuses the generative `theta_z` weights.
//!
//! Each node and community also owns a learned identity vector that is
//! concatenated to the graph embedding before the init MLP. Without it every
//! node of a subject would start from the same state and receive the same
//! updates. `identity_dim = 0` drops it and broadcasts a single state.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{gaussian_reparam, gru_cell, register_gru, register_mlp, GruVars, MlpVars};
use crate::autodiff::{softmax_slice, Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::generative::{EmbeddingDims, GenerativeParams, PriorHyper, THETA_C, THETA_Z};
use crate::rng::{derive_rng, Rng, STREAM_INIT};

pub const ALPHA_MU: &str = "alpha.mu";
pub const ALPHA_RAW_SIGMA: &str = "alpha.raw_sigma";
pub const NODE_IDENTITY: &str = "node_identity";
pub const COMMUNITY_IDENTITY: &str = "community_identity";
pub const INIT_PHI: &str = "init_phi";
pub const INIT_PSI: &str = "init_psi";
pub const GRU_PHI: &str = "gru_phi";
pub const GRU_PSI: &str = "gru_psi";

/// Lower bound added to every softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

const ALPHA_RAW_SIGMA_INIT: f64 = -2.0;
const UPDATE_GATE_BIAS_INIT: f64 = -2.0;
/// Scale on the Glorot draw for `theta_z`; small community logits let the
/// assignment terms erase node differences before communities can form.
const THETA_Z_INIT_GAIN: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub num_subjects: usize,
    pub num_nodes: usize,
    pub num_communities: usize,
    pub dims: EmbeddingDims,
    pub identity_dim: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects == 0 {
            return Err(Error::invalid("need at least one subject"));
        }
        if self.num_nodes < 2 {
            return Err(Error::invalid(format!("need V >= 2, got {}", self.num_nodes)));
        }
        if self.num_communities == 0 {
            return Err(Error::invalid("need K >= 1"));
        }
        self.dims.validate()
    }
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn register_heads(store: &mut ParamStore, prefix: &str, h: usize, sigma: f64, rng: &mut Rng) -> Result<()> {
    let mu = format!("{prefix}.mu");
    store.insert(format!("{mu}.0.weight"), Matrix::from_fn(h, h, |i, j| f64::from(u8::from(i == j))))?;
    store.insert(format!("{mu}.0.bias"), Matrix::zeros(1, h))?;
    let sig = format!("{prefix}.sigma");
    register_mlp(store, &sig, &[h, h], rng)?;
    let raw = softplus_inv((sigma - SIGMA_FLOOR).max(1e-6));
    store
        .get_mut(&format!("{sig}.0.bias"))
        .expect("just registered")
        .as_mut_slice()
        .fill(raw);
    Ok(())
}

/// Creates every trainable tensor of the model, generative and variational,
/// in a fixed order from `seed`.
///
/// Mean heads start as the identity and update gates lean closed, so the
/// initial posterior walk is close to persistence. Scale heads start at the
/// prior standard deviations.
pub fn register_params(shape: &ModelShape, hyper: &PriorHyper, seed: u64) -> Result<ParamStore> {
    shape.validate()?;
    hyper.validate()?;
    let EmbeddingDims { h_alpha, h_phi, h_psi } = shape.dims;
    let (s, v, k, d) = (shape.num_subjects, shape.num_nodes, shape.num_communities, shape.identity_dim);
    let mut rng = derive_rng(seed, &[STREAM_INIT]);
    let mut store = ParamStore::new(seed);

    store.insert(ALPHA_MU, Matrix::zeros(s, h_alpha))?;
    store.insert(ALPHA_RAW_SIGMA, Matrix::filled(s, h_alpha, ALPHA_RAW_SIGMA_INIT))?;
    if d > 0 {
        let mut normal = |r, c| Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        store.insert(NODE_IDENTITY, normal(v, d))?;
        store.insert(COMMUNITY_IDENTITY, normal(k, d))?;
    }
    register_mlp(&mut store, INIT_PHI, &[h_alpha + d, h_phi, h_phi], &mut rng)?;
    register_mlp(&mut store, INIT_PSI, &[h_alpha + d, h_psi, h_psi], &mut rng)?;
    for (prefix, h, sigma) in [(GRU_PHI, h_phi, hyper.sigma_phi), (GRU_PSI, h_psi, hyper.sigma_psi)] {
        register_gru(&mut store, prefix, h, &mut rng)?;
        store
            .get_mut(&format!("{prefix}.b_u"))
            .expect("just registered")
            .as_mut_slice()
            .fill(UPDATE_GATE_BIAS_INIT);
        register_heads(&mut store, prefix, h, sigma, &mut rng)?;
    }
    register_mlp(&mut store, THETA_Z, &[h_phi, k], &mut rng)?;
    let wz = store.get_mut(&format!("{THETA_Z}.0.weight")).expect("just registered");
    wz.as_mut_slice().iter_mut().for_each(|x| *x *= THETA_Z_INIT_GAIN);
    register_mlp(&mut store, THETA_C, &[h_psi, v], &mut rng)?;
    Ok(store)
}

/// A traced Gaussian and its reparameterized sample.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub sample: Var,
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub mu: MlpVars,
    pub sigma: MlpVars,
}

impl Heads {
    fn load(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            mu: MlpVars::load(tape, store, &format!("{prefix}.mu"))?,
            sigma: MlpVars::load(tape, store, &format!("{prefix}.sigma"))?,
        })
    }
}

/// All model parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct QVars {
    pub alpha_mu: Var,
    pub alpha_raw_sigma: Var,
    pub node_identity: Option<Var>,
    pub community_identity: Option<Var>,
    pub init_phi: MlpVars,
    pub init_psi: MlpVars,
    pub gru_phi: GruVars,
    pub gru_psi: GruVars,
    pub heads_phi: Heads,
    pub heads_psi: Heads,
    pub theta_z: MlpVars,
    pub theta_c: MlpVars,
}

impl QVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, shape: &ModelShape) -> Result<Self> {
        let identity = |tape: &mut Tape, name| {
            (shape.identity_dim > 0)
                .then(|| tape.param(store, name))
                .transpose()
        };
        Ok(Self {
            alpha_mu: tape.param(store, ALPHA_MU)?,
            alpha_raw_sigma: tape.param(store, ALPHA_RAW_SIGMA)?,
            node_identity: identity(tape, NODE_IDENTITY)?,
            community_identity: identity(tape, COMMUNITY_IDENTITY)?,
            init_phi: MlpVars::load(tape, store, INIT_PHI)?,
            init_psi: MlpVars::load(tape, store, INIT_PSI)?,
            gru_phi: GruVars::load(tape, store, GRU_PHI)?,
            gru_psi: GruVars::load(tape, store, GRU_PSI)?,
            heads_phi: Heads::load(tape, store, GRU_PHI)?,
            heads_psi: Heads::load(tape, store, GRU_PSI)?,
            theta_z: MlpVars::load(tape, store, THETA_Z)?,
            theta_c: MlpVars::load(tape, store, THETA_C)?,
        })
    }
}

fn floored_softplus(tape: &mut Tape, raw: Var) -> Var {
    let sp = tape.softplus(raw);
    tape.add_scalar(sp, SIGMA_FLOOR)
}

/// `q(alpha_s) = Normal(mu_s, softplus(raw_s) + floor)`, sampled with `eps`.
pub fn q_alpha(tape: &mut Tape, vars: &QVars, subject: usize, eps: Matrix) -> Result<Gaussian> {
    let num_subjects = tape.value(vars.alpha_mu).rows();
    if subject >= num_subjects {
        return Err(Error::invalid(format!("subject {subject} out of range for S={num_subjects}")));
    }
    let mu = tape.gather_rows(vars.alpha_mu, &[subject])?;
    let raw = tape.gather_rows(vars.alpha_raw_sigma, &[subject])?;
    let sigma = floored_softplus(tape, raw);
    let sample = gaussian_reparam(tape, mu, sigma, eps)?;
    Ok(Gaussian { sample, mu, sigma })
}

fn init_family(tape: &mut Tape, mlp: &MlpVars, alpha: Var, identity: Option<Var>, n: usize) -> Result<Var> {
    match identity {
        Some(e) => {
            let a = tape.repeat_rows(alpha, n)?;
            let x = tape.concat(a, e)?;
            mlp.forward(tape, x)
        }
        None => {
            let h = mlp.forward(tape, alpha)?;
            tape.repeat_rows(h, n)
        }
    }
}

/// `t = 0` node (`V x H_phi`) and community (`K x H_psi`) states from a
/// `1 x H_alpha` graph embedding.
pub fn init_states(tape: &mut Tape, vars: &QVars, shape: &ModelShape, alpha: Var) -> Result<(Var, Var)> {
    if tape.value(alpha).shape() != (1, shape.dims.h_alpha) {
        return Err(Error::shape(format!(
            "graph embedding {:?}, expected (1, {})",
            tape.value(alpha).shape(),
            shape.dims.h_alpha
        )));
    }
    let phi = init_family(tape, &vars.init_phi, alpha, vars.node_identity, shape.num_nodes)?;
    let psi = init_family(tape, &vars.init_psi, alpha, vars.community_identity, shape.num_communities)?;
    Ok((phi, psi))
}

/// One posterior transition for a batch of rows: the GRU consumes the
/// previous sample, the heads read the new hidden state.
pub fn q_step(
    tape: &mut Tape,
    gru: &GruVars,
    heads: &Heads,
    prev_sample: Var,
    hidden: Var,
    eps: Matrix,
) -> Result<(Gaussian, Var)> {
    let new_hidden = gru_cell(tape, prev_sample, hidden, gru)?;
    let mu = heads.mu.forward(tape, new_hidden)?;
    let raw = heads.sigma.forward(tape, new_hidden)?;
    let sigma = floored_softplus(tape, raw);
    if tape.value(mu).shape() != eps.shape() {
        return Err(Error::shape(format!("noise {:?} for mean {:?}", eps.shape(), tape.value(mu).shape())));
    }
    let sample = gaussian_reparam(tape, mu, sigma, eps)?;
    Ok((Gaussian { sample, mu, sigma }, new_hidden))
}

/// Community-posterior logits `theta_z(phi_w * phi_c)`, row-wise.
pub fn q_z_logits(tape: &mut Tape, theta_z: &MlpVars, phi_w: Var, phi_c: Var) -> Result<Var> {
    let prod = tape.mul(phi_w, phi_c)?;
    theta_z.forward(tape, prod)
}

/// Untraced community posterior for one directed pair.
pub fn q_z_probs(phi_w: &[f64], phi_c: &[f64], params: &GenerativeParams) -> Result<Vec<f64>> {
    if phi_w.len() != phi_c.len() {
        return Err(Error::shape(format!("node embeddings of widths {} and {}", phi_w.len(), phi_c.len())));
    }
    let prod: Vec<f64> = phi_w.iter().zip(phi_c).map(|(a, b)| a * b).collect();
    Ok(softmax_slice(&params.theta_z.forward(&prod)?))
}

/// Standard-normal draws for one subject's rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectNoise {
    pub alpha: Matrix,
    pub phi: Vec<Matrix>,
    pub psi: Vec<Matrix>,
}

impl SubjectNoise {
    pub fn zeros(shape: &ModelShape, num_snapshots: usize) -> Self {
        let d = shape.dims;
        Self {
            alpha: Matrix::zeros(1, d.h_alpha),
            phi: vec![Matrix::zeros(shape.num_nodes, d.h_phi); num_snapshots],
            psi: vec![Matrix::zeros(shape.num_communities, d.h_psi); num_snapshots],
        }
    }

    pub fn draw(shape: &ModelShape, num_snapshots: usize, rng: &mut Rng) -> Self {
        let mut noise = Self::zeros(shape, num_snapshots);
        let all = std::iter::once(&mut noise.alpha)
            .chain(noise.phi.iter_mut())
            .chain(noise.psi.iter_mut());
        for m in all {
            m.as_mut_slice().iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
        }
        noise
    }

    pub fn num_snapshots(&self) -> usize {
        self.phi.len()
    }
}

/// A subject's traced posterior trajectory. `phi[t]` and `psi[t]` belong to
/// snapshot `t`; `phi0` and `psi0` are the `t = 0` states that precede them.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub alpha: Gaussian,
    pub phi0: Var,
    pub psi0: Var,
    pub phi: Vec<Gaussian>,
    pub psi: Vec<Gaussian>,
}

pub fn traced_rollout(
    tape: &mut Tape,
    vars: &QVars,
    shape: &ModelShape,
    subject: usize,
    noise: &SubjectNoise,
) -> Result<Rollout> {
    if noise.psi.len() != noise.phi.len() {
        return Err(Error::shape("node and community noise cover different snapshot counts"));
    }
    let alpha = q_alpha(tape, vars, subject, noise.alpha.clone())?;
    let (phi0, psi0) = init_states(tape, vars, shape, alpha.sample)?;
    let (mut phi, mut psi) = (Vec::new(), Vec::new());
    let (mut phi_prev, mut phi_hidden) = (phi0, phi0);
    let (mut psi_prev, mut psi_hidden) = (psi0, psi0);
    for (eps_phi, eps_psi) in noise.phi.iter().zip(&noise.psi) {
        let (g, h) = q_step(tape, &vars.gru_phi, &vars.heads_phi, phi_prev, phi_hidden, eps_phi.clone())?;
        (phi_prev, phi_hidden) = (g.sample, h);
        phi.push(g);
        let (g, h) = q_step(tape, &vars.gru_psi, &vars.heads_psi, psi_prev, psi_hidden, eps_psi.clone())?;
        (psi_prev, psi_hidden) = (g.sample, h);
        psi.push(g);
    }
    Ok(Rollout {
        alpha,
        phi0,
        psi0,
        phi,
        psi,
    })
}

/// Noise-free posterior trajectory: every step feeds its mean forward.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanTrajectory {
    pub alpha: Vec<f64>,
    pub phi0: Matrix,
    pub psi0: Matrix,
    pub phi: Vec<Matrix>,
    pub psi: Vec<Matrix>,
}

pub fn posterior_means(
    store: &ParamStore,
    shape: &ModelShape,
    subject: usize,
    num_snapshots: usize,
) -> Result<MeanTrajectory> {
    let mut tape = Tape::new();
    let vars = QVars::load(&mut tape, store, shape)?;
    let noise = SubjectNoise::zeros(shape, num_snapshots);
    let r = traced_rollout(&mut tape, &vars, shape, subject, &noise)?;
    let values = |gs: &[Gaussian]| gs.iter().map(|g| tape.value(g.mu).clone()).collect::<Vec<_>>();
    Ok(MeanTrajectory {
        alpha: tape.value(r.alpha.mu).as_slice().to_vec(),
        phi0: tape.value(r.phi0).clone(),
        psi0: tape.value(r.psi0).clone(),
        phi: values(&r.phi),
        psi: values(&r.psi),
    })
}

/// Mean embeddings for snapshots `t_from..=t_to`, continuing the noise-free
/// recursion through every earlier snapshot.
pub fn rollout_posterior_means(
    store: &ParamStore,
    shape: &ModelShape,
    subject: usize,
    t_from: usize,
    t_to: usize,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    if t_from > t_to {
        return Err(Error::invalid(format!("empty snapshot range {t_from}..={t_to}")));
    }
    let mut m = posterior_means(store, shape, subject, t_to + 1)?;
    Ok((m.phi.split_off(t_from), m.psi.split_off(t_from)))
}
