//! Differentiable building blocks assembled from tape primitives.

use super::{Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Clamp applied to uniform draws before the double logarithm.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Weights of a single-layer gated recurrent unit. Input and hidden widths
/// are both `H`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_u: Var,
    pub u_u: Var,
    pub b_u: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

const GRU_GATES: [&str; 3] = ["r", "u", "h"];

pub fn register_gru(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut Rng) -> Result<()> {
    for gate in GRU_GATES {
        store.insert_glorot(format!("{prefix}.w_{gate}"), hidden, hidden, rng)?;
        store.insert_glorot(format!("{prefix}.u_{gate}"), hidden, hidden, rng)?;
        store.insert(format!("{prefix}.b_{gate}"), Matrix::zeros(1, hidden))?;
    }
    Ok(())
}

impl GruVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| tape.param(store, &format!("{prefix}.{n}"));
        Ok(Self {
            w_r: p("w_r")?,
            u_r: p("u_r")?,
            b_r: p("b_r")?,
            w_u: p("w_u")?,
            u_u: p("u_u")?,
            b_u: p("b_u")?,
            w_h: p("w_h")?,
            u_h: p("u_h")?,
            b_h: p("b_h")?,
        })
    }
}

/// One GRU update over a batch of rows:
///
/// ```text
/// r  = sigmoid(x W_r + h U_r + b_r)
/// u  = sigmoid(x W_u + h U_u + b_u)
/// h~ = tanh(x W_h + (r * h) U_h + b_h)
/// h' = (1 - u) * h + u * h~
/// ```
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, gru: &GruVars) -> Result<Var> {
    if tape.value(x).shape() != tape.value(h).shape() {
        return Err(Error::shape(format!(
            "gru_cell: input {:?} vs hidden {:?}",
            tape.value(x).shape(),
            tape.value(h).shape()
        )));
    }
    let gate = |tape: &mut Tape, w, u, b, hid| -> Result<Var> {
        let xw = tape.affine(x, w, b)?;
        let hu = tape.matmul(hid, u)?;
        tape.add(xw, hu)
    };
    let r_pre = gate(tape, gru.w_r, gru.u_r, gru.b_r, h)?;
    let r = tape.sigmoid(r_pre);
    let u_pre = gate(tape, gru.w_u, gru.u_u, gru.b_u, h)?;
    let u = tape.sigmoid(u_pre);
    let rh = tape.mul(r, h)?;
    let cand_pre = gate(tape, gru.w_h, gru.u_h, gru.b_h, rh)?;
    let cand = tape.tanh(cand_pre);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(u, delta)?;
    tape.add(h, step)
}

/// Affine layers with `tanh` between them (none after the last).
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

pub fn register_mlp(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut Rng) -> Result<()> {
    for (l, pair) in dims.windows(2).enumerate() {
        store.insert_glorot(format!("{prefix}.{l}.weight"), pair[0], pair[1], rng)?;
        store.insert(format!("{prefix}.{l}.bias"), Matrix::zeros(1, pair[1]))?;
    }
    Ok(())
}

/// Number of layers registered under `prefix`.
pub fn mlp_depth(store: &ParamStore, prefix: &str) -> usize {
    (0..)
        .take_while(|l| store.get(&format!("{prefix}.{l}.weight")).is_some())
        .count()
}

impl MlpVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let depth = mlp_depth(store, prefix);
        if depth == 0 {
            return Err(Error::invalid(format!("no layers registered under `{prefix}`")));
        }
        let layers = (0..depth)
            .map(|l| {
                Ok((
                    tape.param(store, &format!("{prefix}.{l}.weight"))?,
                    tape.param(store, &format!("{prefix}.{l}.bias"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if l + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// `mu + sigma * eps` with `eps` held constant, so gradients reach `mu`
/// with coefficient 1 and `sigma` with coefficient `eps`.
pub fn gaussian_reparam(tape: &mut Tape, mu: Var, sigma: Var, eps: Matrix) -> Result<Var> {
    if let Some(bad) = tape.value(sigma).as_slice().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("gaussian_reparam: sigma {bad} is not positive")));
    }
    let eps = tape.constant(eps);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

fn gumbel_perturbed(tape: &mut Tape, logits: Var, tau: f64, uniforms: &Matrix) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} is not positive")));
    }
    if let Some(bad) = uniforms.as_slice().iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::invalid(format!("uniform draw {bad} outside (0, 1)")));
    }
    let gumbel = uniforms.map(|u| {
        let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
        -(-u.ln()).ln()
    });
    let g = tape.constant(gumbel);
    let perturbed = tape.add(logits, g)?;
    Ok(tape.scale(perturbed, 1.0 / tau))
}

/// Relaxed categorical sample `softmax((logits + g) / tau)` with Gumbel
/// noise `g = -ln(-ln u)`, row-wise.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, tau: f64, uniforms: &Matrix) -> Result<Var> {
    let z = gumbel_perturbed(tape, logits, tau, uniforms)?;
    Ok(tape.softmax(z))
}

/// Logarithm of [`gumbel_softmax`], computed without underflow at low
/// temperatures.
pub fn gumbel_log_softmax(tape: &mut Tape, logits: Var, tau: f64, uniforms: &Matrix) -> Result<Var> {
    let z = gumbel_perturbed(tape, logits, tau, uniforms)?;
    Ok(tape.log_softmax(z))
}
