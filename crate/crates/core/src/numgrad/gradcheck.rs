use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Worst relative disagreement between the tape gradient and central
/// differences, `|a − n| / max(1, |a|, |n|)`, over every trainable value.
///
/// `objective` must be a deterministic function of the parameters; any
/// random draws have to be fixed by the caller.
pub fn finite_diff_check<F>(objective: F, params: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = objective(&mut tape, p)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = objective(&mut tape, params)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("objective evaluated to {v}")));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, entry) in params.iter() {
        if !entry.trainable {
            continue;
        }
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("objective did not bind `{name}`")))?;
        for i in 0..entry.value.len() {
            let x0 = entry.value.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = x0 + step;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = x0 - step;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::Array;

    #[test]
    fn square_at_three() {
        let mut p = ParamStore::new();
        p.insert("x", Array::scalar(3.0)).unwrap();
        let err = finite_diff_check(
            |t, p| {
                let b = t.bind(p);
                let x = b.get("x")?;
                Ok(t.square(x))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_objective_is_exact() {
        let mut p = ParamStore::new();
        p.insert("x", Array::from_vec(vec![1.0, -2.0])).unwrap();
        let err = finite_diff_check(
            |t, p| {
                t.bind(p);
                Ok(t.constant(Array::scalar(4.0)))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut p = ParamStore::new();
        p.insert("x", Array::scalar(-1.0)).unwrap();
        let r = finite_diff_check(
            |t, p| {
                let b = t.bind(p);
                let x = b.get("x")?;
                Ok(t.log(x))
            },
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
