//! Variational objective and the optimization loop.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::gumbel_log_softmax;
use crate::autodiff::{Gradients, Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::mean_nll;
use crate::generative::{EmbeddingDims, PriorHyper};
use crate::graph::{split_temporal, DynamicGraphCorpus, GraphSnapshot};
use crate::inference::{q_z_logits, traced_rollout, ModelShape, QVars, SubjectNoise};
use crate::model::Model;
use crate::rng::{derive_rng, Rng, STREAM_TRAIN};

pub const LOG_FILE: &str = "log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub num_communities: usize,
    pub h_alpha: usize,
    pub h_phi: usize,
    pub h_psi: usize,
    /// Width of the learned per-node and per-community identity vectors;
    /// `None` uses `h_phi`, `Some(0)` disables them.
    pub identity_dim: Option<usize>,
    pub sigma_phi: f64,
    pub sigma_psi: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub tau_max: f64,
    pub tau_min: f64,
    pub tau_rate: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub grad_clip: f64,
    /// Gradient steps during which `kl_z` is left out of the loss.
    pub kl_hold_steps: u64,
    /// Gradient steps after the hold over which the weight on `kl_z` rises
    /// linearly from 0 to 1. Early stopping starts once it reaches 1.
    pub kl_warmup_steps: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_communities: 3,
            h_alpha: 16,
            h_phi: 16,
            h_psi: 16,
            identity_dim: None,
            sigma_phi: 0.01,
            sigma_psi: 0.01,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            max_epochs: 1000,
            patience: 15,
            tau_max: 1.0,
            tau_min: 0.05,
            tau_rate: 3e-4,
            train_fraction: 0.8,
            val_fraction: 0.1,
            grad_clip: 10.0,
            kl_hold_steps: 0,
            kl_warmup_steps: 0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Settings tuned on planted-block corpora with `V = 60`, `K = 3` and
    /// 180 edges per snapshot.
    pub fn planted_benchmark() -> Self {
        Self {
            num_communities: 3,
            h_alpha: 8,
            h_phi: 8,
            h_psi: 8,
            sigma_phi: 0.1,
            sigma_psi: 0.1,
            learning_rate: 3e-3,
            max_epochs: 1500,
            kl_hold_steps: 3000,
            kl_warmup_steps: 3000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_phi", self.sigma_phi),
            ("sigma_psi", self.sigma_psi),
            ("learning_rate", self.learning_rate),
            ("tau_min", self.tau_min),
            ("tau_max", self.tau_max),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.tau_rate >= 0.0) {
            return Err(Error::invalid("weight_decay and tau_rate must be non-negative"));
        }
        if self.tau_min >= self.tau_max {
            return Err(Error::invalid(format!(
                "tau_min ({}) must be below tau_max ({})",
                self.tau_min, self.tau_max
            )));
        }
        if self.num_communities == 0 {
            return Err(Error::invalid("num_communities must be at least 1"));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("max_epochs and patience must be at least 1"));
        }
        self.dims().validate()
    }

    pub fn dims(&self) -> EmbeddingDims {
        EmbeddingDims {
            h_alpha: self.h_alpha,
            h_phi: self.h_phi,
            h_psi: self.h_psi,
        }
    }

    pub fn hyper(&self) -> PriorHyper {
        PriorHyper {
            sigma_phi: self.sigma_phi,
            sigma_psi: self.sigma_psi,
        }
    }

    pub fn fractions(&self) -> (f64, f64) {
        (self.train_fraction, self.val_fraction)
    }

    pub fn shape_for(&self, corpus: &DynamicGraphCorpus) -> ModelShape {
        ModelShape {
            num_subjects: corpus.num_subjects(),
            num_nodes: corpus.num_nodes(),
            num_communities: self.num_communities,
            dims: self.dims(),
            identity_dim: self.identity_dim.unwrap_or(self.h_phi),
        }
    }
}

/// Weight on `kl_z` in the training loss at gradient step `step`.
pub fn kl_z_weight(step: u64, cfg: &TrainingConfig) -> f64 {
    if step < cfg.kl_hold_steps {
        return 0.0;
    }
    let ramp = step - cfg.kl_hold_steps;
    if ramp >= cfg.kl_warmup_steps {
        1.0
    } else {
        ramp as f64 / cfg.kl_warmup_steps as f64
    }
}

/// `max(tau_min, tau_max * exp(-tau_rate * step))`, `step` in gradient steps.
pub fn temperature(step: u64, cfg: &TrainingConfig) -> f64 {
    (cfg.tau_max * (-cfg.tau_rate * step as f64).exp()).max(cfg.tau_min)
}

/// `KL(Normal(mu_q, sigma_q) || Normal(mu_p, sigma_p))` for diagonal Gaussians.
pub fn kl_normal_diag(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(Error::shape("kl_normal_diag arguments differ in length"));
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (sq, sp) = (sigma_q[i], sigma_p[i]);
        if !(sq > 0.0 && sp > 0.0) {
            return Err(Error::invalid(format!("non-positive standard deviation ({sq}, {sp})")));
        }
        let d = mu_q[i] - mu_p[i];
        kl += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

const SIMPLEX_TOLERANCE: f64 = 1e-9;

fn check_simplex(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::invalid(format!("{name} is not a probability vector")));
    }
    Ok(())
}

/// `sum_k q_k ln(q_k / p_k)` with `0 ln 0 = 0`.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape(format!("categoricals of sizes {} and {}", q.len(), p.len())));
    }
    check_simplex(q, "q")?;
    check_simplex(p, "p")?;
    let mut kl = 0.0;
    for (k, (&qk, &pk)) in q.iter().zip(p).enumerate() {
        if qk == 0.0 {
            continue;
        }
        if pk == 0.0 {
            return Err(Error::invalid(format!("p is zero at {k} where q is {qk}")));
        }
        kl += qk * (qk / pk).ln();
    }
    Ok(kl)
}

/// Traced diagonal-Gaussian KL against `Normal(mu_p, sigma_p I)`, summed.
pub fn kl_normal_traced(tape: &mut Tape, mu_q: Var, sigma_q: Var, mu_p: Var, sigma_p: f64) -> Result<Var> {
    let d = tape.sub(mu_q, mu_p)?;
    let d2 = tape.square(d);
    let s2 = tape.square(sigma_q);
    let num = tape.add(s2, d2)?;
    let quad = tape.scale(num, 0.5 / (sigma_p * sigma_p));
    let log_sq = tape.ln(sigma_q);
    let diff = tape.sub(quad, log_sq)?;
    let per_dim = tape.add_scalar(diff, sigma_p.ln() - 0.5);
    Ok(tape.sum(per_dim))
}

/// Traced categorical KL from row-wise log-probabilities, summed over rows.
pub fn kl_categorical_traced(tape: &mut Tape, log_q: Var, log_p: Var) -> Result<Var> {
    let q = tape.exp(log_q);
    let d = tape.sub(log_q, log_p)?;
    let prod = tape.mul(q, d)?;
    Ok(tape.sum(prod))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_alpha: f64,
    pub kl_phi: f64,
    pub kl_psi: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn from_terms(recon: f64, kl_z: f64, kl_alpha: f64, kl_phi: f64, kl_psi: f64) -> Self {
        Self {
            recon,
            kl_z,
            kl_alpha,
            kl_phi,
            kl_psi,
            total: recon - kl_z - kl_alpha - kl_phi - kl_psi,
        }
    }

    pub fn sum(items: impl IntoIterator<Item = Self>) -> Self {
        let mut acc = [0.0; 5];
        for b in items {
            for (a, v) in acc.iter_mut().zip([b.recon, b.kl_z, b.kl_alpha, b.kl_phi, b.kl_psi]) {
                *a += v;
            }
        }
        Self::from_terms(acc[0], acc[1], acc[2], acc[3], acc[4])
    }
}

/// All randomness of one single-sample objective evaluation. Holding it
/// fixed makes the objective a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise {
    pub latent: SubjectNoise,
    /// Per snapshot, `2E x K` uniforms for the relaxed assignments.
    pub gumbel: Vec<Matrix>,
}

impl ElboNoise {
    pub fn draw(shape: &ModelShape, snapshots: &[GraphSnapshot], rng: &mut Rng) -> Self {
        let latent = SubjectNoise::draw(shape, snapshots.len(), rng);
        let gumbel = snapshots
            .iter()
            .map(|s| {
                Matrix::from_fn(2 * s.num_edges(), shape.num_communities, |_, _| {
                    rng.random_range(f64::EPSILON..1.0)
                })
            })
            .collect();
        Self { latent, gumbel }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub recon: Var,
    pub kl_z: Var,
    pub kl_alpha: Var,
    pub kl_phi: Var,
    pub kl_psi: Var,
    pub total: Var,
}

impl ElboVars {
    pub fn breakdown(&self, tape: &Tape) -> ElboBreakdown {
        ElboBreakdown::from_terms(
            tape.scalar(self.recon),
            tape.scalar(self.kl_z),
            tape.scalar(self.kl_alpha),
            tape.scalar(self.kl_phi),
            tape.scalar(self.kl_psi),
        )
    }
}

/// Single-sample lower bound for one subject over `snapshots`.
///
/// Each directed sample contributes `log sum_k y_k p(c | psi_k)` with `y` a
/// relaxed draw from the community posterior, minus the analytic KL between
/// that posterior and the prior mixture of its source. The random walks are
/// scored against the previous sampled state; the first step is scored
/// against the posterior's own `t = 0` state.
#[allow(clippy::too_many_arguments)]
pub fn elbo_traced(
    tape: &mut Tape,
    vars: &QVars,
    shape: &ModelShape,
    hyper: &PriorHyper,
    subject: usize,
    snapshots: &[GraphSnapshot],
    noise: &ElboNoise,
    tau: f64,
) -> Result<ElboVars> {
    if noise.latent.num_snapshots() != snapshots.len() || noise.gumbel.len() != snapshots.len() {
        return Err(Error::shape(format!(
            "noise covers {} snapshots, slice has {}",
            noise.latent.num_snapshots(),
            snapshots.len()
        )));
    }
    let r = traced_rollout(tape, vars, shape, subject, &noise.latent)?;
    let zero_alpha = tape.constant(Matrix::zeros(1, shape.dims.h_alpha));
    let kl_alpha = kl_normal_traced(tape, r.alpha.mu, r.alpha.sigma, zero_alpha, 1.0)?;

    let mut recon = tape.constant(Matrix::zeros(1, 1));
    let mut kl_z = tape.constant(Matrix::zeros(1, 1));
    let mut kl_phi = tape.constant(Matrix::zeros(1, 1));
    let mut kl_psi = tape.constant(Matrix::zeros(1, 1));
    for (t, snap) in snapshots.iter().enumerate() {
        if snap.num_nodes() != shape.num_nodes {
            return Err(Error::shape(format!("snapshot {t} has V={}", snap.num_nodes())));
        }
        let (phi_prev, psi_prev) = match t {
            0 => (r.phi0, r.psi0),
            _ => (r.phi[t - 1].sample, r.psi[t - 1].sample),
        };
        let (phi, psi) = (r.phi[t], r.psi[t]);
        let k = kl_normal_traced(tape, phi.mu, phi.sigma, phi_prev, hyper.sigma_phi)?;
        kl_phi = tape.add(kl_phi, k)?;
        let k = kl_normal_traced(tape, psi.mu, psi.sigma, psi_prev, hyper.sigma_psi)?;
        kl_psi = tape.add(kl_psi, k)?;

        let samples = snap.directed_expansion();
        if samples.is_empty() {
            continue;
        }
        let ws: Vec<usize> = samples.iter().map(|d| d.w.0).collect();
        let cs: Vec<usize> = samples.iter().map(|d| d.c.0).collect();
        let phi_w = tape.gather_rows(phi.sample, &ws)?;
        let phi_c = tape.gather_rows(phi.sample, &cs)?;
        let q_logits = q_z_logits(tape, &vars.theta_z, phi_w, phi_c)?;
        let log_q = tape.log_softmax(q_logits);
        let p_logits = vars.theta_z.forward(tape, phi_w)?;
        let log_p = tape.log_softmax(p_logits);
        let k = kl_categorical_traced(tape, log_q, log_p)?;
        kl_z = tape.add(kl_z, k)?;

        let log_y = gumbel_log_softmax(tape, log_q, tau, &noise.gumbel[t])?;
        let c_logits = vars.theta_c.forward(tape, psi.sample)?;
        let log_c = tape.log_softmax(c_logits);
        let log_c_t = tape.transpose(log_c);
        let log_target = tape.gather_rows(log_c_t, &cs)?;
        let joint = tape.add(log_y, log_target)?;
        let per_sample = tape.logsumexp(joint);
        let s = tape.sum(per_sample);
        recon = tape.add(recon, s)?;
    }
    let mut total = tape.sub(recon, kl_z)?;
    for term in [kl_alpha, kl_phi, kl_psi] {
        total = tape.sub(total, term)?;
    }
    Ok(ElboVars {
        recon,
        kl_z,
        kl_alpha,
        kl_phi,
        kl_psi,
        total,
    })
}

/// Adam moments for every parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    steps: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.zeros_like(),
            v: store.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Bias-corrected Adam update followed by decoupled weight decay.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape("gradients and optimizer state must align with the store"));
    }
    if !grads.is_finite() {
        let name = (0..store.len())
            .find(|&i| !grads.get(i).is_finite())
            .map(|i| store.by_index(i).name.clone())
            .unwrap_or_default();
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    state.steps += 1;
    let c1 = 1.0 - ADAM_BETA1.powf(state.steps as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(state.steps as f64);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (i, (m, v)) in moments.enumerate() {
        let g = grads.get(i).as_slice();
        let p = store.by_index_mut(i).as_mut_slice();
        for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g) {
            *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
            *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
            *pj -= learning_rate * (*mj / c1) / ((*vj / c2).sqrt() + ADAM_EPS);
            *pj -= learning_rate * weight_decay * *pj;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Waiting,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to strictly improve on the
/// best validation score.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, value: f64) -> StopSignal {
        if value < self.best {
            self.best = value;
            self.since_best = 0;
            return StopSignal::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Waiting
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_alpha: f64,
    pub kl_phi: f64,
    pub kl_psi: f64,
    pub elbo: f64,
    pub val_nll: f64,
    pub tau: f64,
}

impl EpochLog {
    pub fn breakdown(&self) -> ElboBreakdown {
        ElboBreakdown {
            recon: self.recon,
            kl_z: self.kl_z,
            kl_alpha: self.kl_alpha,
            kl_phi: self.kl_phi,
            kl_psi: self.kl_psi,
            total: self.elbo,
        }
    }
}

pub fn write_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation NLL.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// One gradient step on one subject; returns that subject's breakdown.
#[allow(clippy::too_many_arguments)]
fn subject_step(
    model: &mut Model,
    adam: &mut AdamState,
    corpus: &DynamicGraphCorpus,
    subject: usize,
    step: u64,
    tau: f64,
) -> Result<ElboBreakdown> {
    let cfg = &model.config;
    let snapshots = &corpus.subject_snapshots(subject)[model.split.train.clone()];
    let mut rng = derive_rng(cfg.seed, &[STREAM_TRAIN, step]);
    let noise = ElboNoise::draw(&model.shape, snapshots, &mut rng);
    let mut tape = Tape::new();
    let vars = QVars::load(&mut tape, &model.store, &model.shape)?;
    let elbo = elbo_traced(&mut tape, &vars, &model.shape, &cfg.hyper(), subject, snapshots, &noise, tau)?;
    let breakdown = elbo.breakdown(&tape);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("objective at step {step}, subject {subject}: {breakdown:?}")));
    }
    let mut objective = elbo.total;
    let beta = kl_z_weight(step, cfg);
    if beta < 1.0 {
        let relief = tape.scale(elbo.kl_z, 1.0 - beta);
        objective = tape.add(objective, relief)?;
    }
    let loss = tape.scale(objective, -1.0);
    let mut grads = tape.backward(loss, &model.store);
    let norm = grads.global_norm();
    if norm > cfg.grad_clip {
        grads.scale(cfg.grad_clip / norm);
    }
    let (lr, wd) = (cfg.learning_rate, cfg.weight_decay);
    optimizer_step(&mut model.store, &grads, adam, lr, wd)
        .map_err(|e| Error::NonFinite(format!("step {step}, subject {subject}: {e}")))?;
    Ok(breakdown)
}

/// Trains on the corpus's training snapshots with one gradient step per
/// subject per epoch, keeping the parameters with the lowest validation NLL.
/// `on_epoch` sees each log row as it is produced.
pub fn train_with(
    corpus: &DynamicGraphCorpus,
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = split_temporal(corpus.num_snapshots(), cfg.fractions())?;
    let mut model = Model::initialize(corpus, cfg, split)?;
    let mut adam = AdamState::new(&model.store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store.clone();
    // Epochs that end inside the `kl_z` warm-up take no part in stopping or
    // checkpoint selection.
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let tau = temperature(step, cfg);
        let mut parts = Vec::with_capacity(corpus.num_subjects());
        for s in 0..corpus.num_subjects() {
            parts.push(subject_step(&mut model, &mut adam, corpus, s, step, temperature(step, cfg))?);
            step += 1;
        }
        let b = ElboBreakdown::sum(parts);
        let val_nll = mean_nll(&model, corpus, model.split.val.clone())?;
        if !val_nll.is_finite() {
            return Err(Error::NonFinite(format!("validation NLL at epoch {epoch}")));
        }
        let row = EpochLog {
            epoch,
            recon: b.recon,
            kl_z: b.kl_z,
            kl_alpha: b.kl_alpha,
            kl_phi: b.kl_phi,
            kl_psi: b.kl_psi,
            elbo: b.total,
            val_nll,
            tau,
        };
        on_epoch(&row);
        log.push(row);
        if step <= cfg.kl_hold_steps + cfg.kl_warmup_steps {
            continue;
        }
        match stopper.update(val_nll) {
            StopSignal::Improved => {
                best_store = model.store.clone();
                best_epoch = epoch;
            }
            StopSignal::Waiting => {}
            StopSignal::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    // A run that ends inside the warm-up never selected a best epoch.
    if best_epoch > 0 {
        model.store = best_store;
    } else {
        best_epoch = log.len();
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        stopped_early,
    })
}

pub fn train(corpus: &DynamicGraphCorpus, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, |_| {})
}
