//! Central finite-difference check of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the reverse sweep it validates.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// with step `h`. At most `per_param` coordinates of each trainable parameter
/// are probed, biased towards coordinates with a nonzero analytic gradient.
pub fn check_gradients<R, F>(
    store: &mut ParamStore,
    h: f64,
    per_param: usize,
    rng: &mut R,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    R: Rng,
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let ids: Vec<(ParamId, String, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone(), p.value.numel()))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (id, name, numel) in ids {
        let analytic: Vec<f64> = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let coords: Vec<usize> = if numel <= per_param {
            (0..numel).collect()
        } else {
            let mut nonzero: Vec<usize> = (0..numel).filter(|&i| analytic[i] != 0.0).collect();
            nonzero.shuffle(rng);
            nonzero.truncate(per_param / 2 + per_param % 2);
            while nonzero.len() < per_param {
                let i = rng.gen_range(0..numel);
                if !nonzero.contains(&i) {
                    nonzero.push(i);
                }
            }
            nonzero
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: analytic[i],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
