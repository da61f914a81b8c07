use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates checked per parameter tensor when it is larger than this.
pub const DEFAULT_MAX_COORDS: usize = 256;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares tape gradients of `f` with central differences.
///
/// `f` builds a scalar on the given tape from bound parameter handles; every
/// entry of `params` is bound as a trainable leaf. Error per coordinate is
/// `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let eval = |p: &BTreeMap<String, Tensor>, trainable: bool| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, t) in p {
            vars.insert(name.clone(), tape.param(name, t.clone(), trainable)?);
        }
        let out = f(&mut tape, &vars)?;
        Ok((tape, out))
    };

    let (tape, out) = eval(params, true)?;
    let analytic = tape.backward(out)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut work = params.clone();
    for (name, t) in params {
        let coords: Vec<usize> = if t.len() <= max_coords {
            (0..t.len()).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, t.len(), max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = value_of(&eval(&work, false)?)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = value_of(&eval(&work, false)?)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[name].data()[i];
            let err = (an - fd).abs() / fd.abs().max(1.0);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn value_of((tape, out): &(Tape, Var)) -> Result<f64> {
    let v = tape.try_value(*out)?;
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite value at perturbed point".into()));
    }
    Ok(x)
}
