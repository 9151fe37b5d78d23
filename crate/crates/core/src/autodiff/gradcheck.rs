//! Central finite-difference gradient checking.

use super::{Tape, Tensor, VarId};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - central difference| / max(1, |analytic|).
    pub max_rel_err: f64,
    /// True if any forward pass evaluated relu/abs/sqrt at its kink; the
    /// error number is unreliable then and callers should resample.
    pub kink: bool,
}

/// Checks the reverse-mode gradient of a scalar-valued tensor function at
/// `point` against central differences with step `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true)?;
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
    }
    let mut kink = tape.has_kink();
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .ok_or_else(|| Error::Usage("function does not depend on the input".into()))?;

    let eval = |p: &Tensor, kink: &mut bool| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p.clone(), false)?;
        let y = f(&mut t, x)?;
        if t.has_kink() {
            *kink = true;
        }
        Ok(t.value(y).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus, &mut kink)? - eval(&minus, &mut kink)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        kink,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_checks_tightly() {
        let report = grad_check(
            |tape, x| {
                let sq = tape.square(x)?;
                tape.reduce_sum(sq)
            },
            &Tensor::scalar(3.0),
            1e-4,
        )
        .unwrap();
        assert!(!report.kink);
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn relu_at_zero_is_flagged() {
        let report = grad_check(
            |tape, x| {
                let r = tape.relu(x)?;
                tape.reduce_sum(r)
            },
            &Tensor::scalar(0.0),
            1e-4,
        )
        .unwrap();
        assert!(report.kink);
    }

    #[test]
    fn three_layer_relu_net_away_from_kinks() {
        // Fixed small weights; input chosen so no pre-activation lands on 0.
        let report = grad_check(
            |tape, x| {
                let w1 = tape.constant(Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap())?;
                let w2 = tape.constant(Tensor::matrix(3, 2, vec![0.2, 0.7, -0.3, 0.1, 0.5, -0.4]).unwrap())?;
                let w3 = tape.constant(Tensor::matrix(2, 1, vec![0.9, -0.8]).unwrap())?;
                let h1 = tape.matmul(x, w1)?;
                let a1 = tape.relu(h1)?;
                let h2 = tape.matmul(a1, w2)?;
                let a2 = tape.relu(h2)?;
                let out = tape.matmul(a2, w3)?;
                tape.reduce_sum(out)
            },
            &Tensor::matrix(1, 2, vec![0.37, -0.81]).unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(!report.kink);
        assert!(report.max_rel_err <= 1e-4, "err {}", report.max_rel_err);
    }
}
