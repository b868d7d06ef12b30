//! Central finite-difference oracle for tape gradients.
//!
//! A probe whose `+h` or `-h` evaluation takes a different non-smooth branch
//! (ReLU sign or pooling argmax, via the tape's kink fingerprint) is
//! discarded and replaced by another sample, since the difference quotient
//! straddles a kink there.

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat offset of the worst probe.
    pub worst: Option<(String, usize)>,
}

/// Gradients smaller than this are compared in absolute terms. At `h = 1e-5`
/// the central quotient of an O(1) loss carries roundoff near `1e-10`, so a
/// smaller floor would measure evaluation noise rather than gradient error.
pub const ABS_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

struct Eval {
    loss: f64,
    kinks: u64,
}

fn evaluate<F>(store: &ParamStore, f: &mut F) -> Result<Eval>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    tape.track_kinks();
    let loss = f(&mut tape)?;
    Ok(Eval {
        loss: tape.value(loss).item(),
        kinks: tape.kink_fingerprint().unwrap_or(0),
    })
}

/// Compares backward gradients with central differences on up to `samples`
/// trainable scalars (at least one per trainable array when possible).
///
/// `f` must rebuild the same scalar loss on every call, reseeding any
/// randomness it uses.
pub fn check_gradients<F, R>(
    store: &mut ParamStore,
    samples: usize,
    h: f64,
    rng: &mut R,
    mut f: F,
) -> Result<GradCheck>
where
    F: FnMut(&mut Tape) -> Result<Var>,
    R: Rng,
{
    let (analytic, base_kinks) = {
        let mut tape = Tape::new(store);
        tape.track_kinks();
        let loss = f(&mut tape)?;
        let fp = tape.kink_fingerprint().unwrap_or(0);
        (tape.backward(loss)?.into_param_grads(), fp)
    };
    let arrays: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable && p.value.numel() > 0)
        .map(|(id, p)| (id, p.value.numel()))
        .collect();
    let total: usize = arrays.iter().map(|a| a.1).sum();
    if total == 0 {
        return Err(Error::EmptyDomain("no trainable parameters to check".into()));
    }

    // Candidate order: one random scalar per array first, then uniform draws
    // over the concatenation (or every scalar when there are few).
    let mut order: Vec<(ParamId, usize)> = arrays
        .iter()
        .map(|&(id, n)| (id, rng.gen_range(0..n)))
        .collect();
    if total <= samples * 2 {
        for &(id, n) in &arrays {
            order.extend((0..n).map(|j| (id, j)));
        }
    } else {
        for _ in 0..samples * 4 {
            let mut k = rng.gen_range(0..total);
            for &(id, n) in &arrays {
                if k < n {
                    order.push((id, k));
                    break;
                }
                k -= n;
            }
        }
    }

    let mut report = GradCheck::default();
    let mut seen = std::collections::HashSet::new();
    for (id, j) in order {
        if report.checked >= samples {
            break;
        }
        if !seen.insert((id, j)) {
            continue;
        }
        let orig = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = orig + h;
        let plus = evaluate(store, &mut f);
        store.value_mut(id).data_mut()[j] = orig - h;
        let minus = evaluate(store, &mut f);
        store.value_mut(id).data_mut()[j] = orig;
        let (plus, minus) = (plus?, minus?);
        if plus.kinks != base_kinks || minus.kinks != base_kinks {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * h);
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((store.get(id).name.clone(), j));
        }
    }
    Ok(report)
}
