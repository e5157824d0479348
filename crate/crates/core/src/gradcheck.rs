//! Central finite-difference gradient checking.

/// Outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over the
    /// coordinates that were compared.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// `params` is perturbed in place and restored before returning.
pub fn finite_difference_check(
    params: &mut [f32],
    analytic: &[f32],
    eps: f32,
    mut loss: impl FnMut(&[f32]) -> f64,
) -> f64 {
    finite_difference_check_guarded(params, analytic, eps, |p| (loss(p), 0)).max_rel_error
}

/// Like [`finite_difference_check`], but `loss` also returns a signature of
/// the piecewise-linear regime it evaluated in (for example, a hash of ReLU
/// activation patterns). Coordinates whose `+eps` or `-eps` evaluation lands
/// in a different regime than the unperturbed point are not differentiable
/// at this step size and are skipped.
pub fn finite_difference_check_guarded(
    params: &mut [f32],
    analytic: &[f32],
    eps: f32,
    mut loss: impl FnMut(&[f32]) -> (f64, u64),
) -> GradCheck {
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(params.len(), analytic.len());
    let (_, base_sig) = loss(params);
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let (lp, sp) = loss(params);
        params[i] = orig - eps;
        let (lm, sm) = loss(params);
        params[i] = orig;
        if sp != base_sig || sm != base_sig {
            out.skipped += 1;
            continue;
        }
        // Divide by the perturbation actually applied after f32 rounding.
        let h = (orig + eps) as f64 - (orig - eps) as f64;
        let numeric = (lp - lm) / h;
        out.max_rel_error = out.max_rel_error.max(rel_error(analytic[i] as f64, numeric));
        out.checked += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let mut w = [3.0f32];
        let e = finite_difference_check(&mut w, &[6.0], 1e-3, |p| (p[0] as f64).powi(2));
        assert!(e < 1e-4, "{e}");
        assert_eq!(w[0], 3.0);
    }

    #[test]
    fn sine_within_taylor_bound() {
        // Central difference of sin at 0 errs by about eps^2 / 6.
        let eps = 1e-2f32;
        let mut w = [0.0f32];
        let e = finite_difference_check(&mut w, &[1.0], eps, |p| (p[0] as f64).sin());
        assert!(e <= (eps as f64).powi(2), "{e}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut w = [1.0f32, 2.0];
        let e = finite_difference_check(&mut w, &[2.0, 0.0], 1e-3, |p| {
            p.iter().map(|&v| (v as f64).powi(2)).sum()
        });
        assert!(e > 0.5, "{e}");
    }
}
