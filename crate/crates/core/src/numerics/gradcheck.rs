use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coordinates: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Largest relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

/// Relative error with the `1e-8` floor used throughout.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference scheme used as the gradient oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FiniteDiff {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central(f64),
    /// Ridders' extrapolation of central differences, starting at step `h`
    /// and shrinking by 1.4 per level; the estimate with the smallest
    /// internal error bound is kept.
    Ridders(f64),
}

impl FiniteDiff {
    fn step(self) -> f64 {
        match self {
            FiniteDiff::Central(h) | FiniteDiff::Ridders(h) => h,
        }
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(mut f: F, h: f64) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_LEVELS: usize = 10;

/// Derivative of `f` at 0 by Ridders' method.
pub fn ridders<F: FnMut(f64) -> Result<f64>>(mut f: F, h: f64) -> Result<f64> {
    let shrink2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut hh = h;
    let mut table = [[0.0; RIDDERS_LEVELS]; RIDDERS_LEVELS];
    table[0][0] = (f(hh)? - f(-hh)?) / (2.0 * hh);
    let (mut best, mut err) = (table[0][0], f64::INFINITY);
    for i in 1..RIDDERS_LEVELS {
        hh /= RIDDERS_SHRINK;
        table[0][i] = (f(hh)? - f(-hh)?) / (2.0 * hh);
        let mut fac = shrink2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        // higher order got worse by a safety factor of 2: roundoff has taken over
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}

/// Compares tape gradients of `loss_fn` against central differences with
/// step `h`.
///
/// At most `per_param` coordinates of each parameter are probed; larger
/// parameters are subsampled with a fixed seed. Parameter values are
/// restored before returning and gradients are left zeroed.
pub fn gradient_check<F>(loss_fn: F, store: &mut ParamStore, h: f64, per_param: usize) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    gradient_check_with(loss_fn, store, FiniteDiff::Central(h), per_param)
}

/// [`gradient_check`] with an explicit finite-difference scheme.
pub fn gradient_check_with<F>(
    mut loss_fn: F,
    store: &mut ParamStore,
    scheme: FiniteDiff,
    per_param: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let h = scheme.step();
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                stage: "gradient_check".into(),
            });
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coordinates: 0,
        worst: None,
        per_param: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.get(id).value.len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut param_max = 0.0f64;
        for k in coords {
            let orig = store.get(id).value.data()[k];
            let mut at = |t: f64| {
                store.get_mut(id).value.data_mut()[k] = orig + t;
                eval(store)
            };
            let numeric = match scheme {
                FiniteDiff::Central(h) => central(&mut at, h),
                FiniteDiff::Ridders(h) => ridders(&mut at, h),
            };
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = numeric?;
            let a = analytic[pi][k];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            param_max = param_max.max(err);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((store.get(id).name.clone(), k, a, numeric));
            }
        }
        report.per_param.push((store.get(id).name.clone(), param_max));
    }
    Ok(report)
}
