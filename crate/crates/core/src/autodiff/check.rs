use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Compares the tape gradient of the scalar `f` against
/// `(f(p + step) - f(p - step)) / (2 step)` for every parameter entry and
/// returns the largest `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, store: &ParamStore, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        let v = tape.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::shape(format!("grad_check needs a scalar, got {:?}", v.shape())));
        }
        let x = v.as_slice()[0];
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {x}")));
        }
        Ok(x)
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {}", tape.scalar(out))));
    }
    let grads = tape.backward(out, store);

    let mut worst = None;
    let mut max_err = 0.0f64;
    let mut entries = 0;
    let mut probe = store.clone();
    for p in 0..store.len() {
        let base = store.by_index(p).value.clone();
        for i in 0..base.len() {
            let orig = base.as_slice()[i];
            probe.by_index_mut(p).as_mut_slice()[i] = orig + step;
            let up = eval(&probe)?;
            probe.by_index_mut(p).as_mut_slice()[i] = orig - step;
            let down = eval(&probe)?;
            probe.by_index_mut(p).as_mut_slice()[i] = orig;

            let g_fd = (up - down) / (2.0 * step);
            let g_ad = grads.get(p).as_slice()[i];
            let err = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((store.by_index(p).name.clone(), i));
            }
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: max_err,
        worst,
        entries,
    })
}
