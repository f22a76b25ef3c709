use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Probe values are taken to carry this many ulps of rounding error. A
/// coordinate whose analytic and numeric derivatives are both below the
/// resulting difference-quotient resolution counts as an exact match.
const ROUNDOFF_ULPS: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    #[default]
    Central2,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`. Its `O(h⁴)` error
    /// allows a larger `h`, which keeps roundoff below the `1e-8` floor of
    /// [`relative_error`] on coordinates with very small gradients.
    Central4,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub stencil: Stencil,
    /// When a probe lands in a different smooth piece than the base point
    /// (see [`Tape::kink_pattern`]), retry that coordinate with the step
    /// divided by 10, at most this many times.
    pub kink_retries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, stencil: Stencil::Central2, kink_retries: 0 }
    }
}

/// Compares reverse-mode gradients of `f` against two-point central
/// differences with step `h` on every coordinate of `ids`.
///
/// `f` must be deterministic; it is re-run for every probe. Parameter values
/// are restored and gradients are left holding the analytic result.
pub fn gradient_check<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    gradient_check_with(store, ids, GradCheckConfig { step: h, ..GradCheckConfig::default() }, f)
}

/// [`gradient_check`] with a configurable stencil.
pub fn gradient_check_with<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    config: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    store.zero_grad();
    let base_pattern = {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward(loss, store)?;
        tape.kink_pattern()
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for &id in ids {
        let analytic = store.grad(id).data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[k];
            let mut h = config.step;
            let mut retries = 0;
            let (numeric, resolution) = loop {
                let mut same_piece = true;
                let mut scale = 0.0f64;
                let mut probe = |delta: f64| -> Result<f64> {
                    store.value_mut(id)[k] = orig + delta;
                    let tape = Tape::new();
                    let v = f(&tape, store).and_then(|l| l.item());
                    store.value_mut(id)[k] = orig;
                    same_piece &= tape.kink_pattern() == base_pattern;
                    if let Ok(v) = v {
                        scale = scale.max(v.abs());
                    }
                    v
                };
                let (estimate, weight) = match config.stencil {
                    Stencil::Central2 => ((probe(h)? - probe(-h)?) / (2.0 * h), 1.0 / h),
                    Stencil::Central4 => (
                        (-probe(2.0 * h)? + 8.0 * probe(h)? - 8.0 * probe(-h)? + probe(-2.0 * h)?) / (12.0 * h),
                        1.5 / h,
                    ),
                };
                if same_piece || retries >= config.kink_retries {
                    break (estimate, ROUNDOFF_ULPS * f64::EPSILON * scale * weight);
                }
                h /= 10.0;
                retries += 1;
            };
            let err = if a.abs() <= resolution && numeric.abs() <= resolution {
                0.0
            } else {
                relative_error(a, numeric)
            };
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_in_three_variables() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![3], vec![0.3, -1.2, 2.5]).unwrap());
        let r = gradient_check(&mut store, &[w], 1e-5, |tape, s| {
            let x = tape.param(s, w);
            let c = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
            Ok(x.square().mul(c)?.sum().offset(1.0))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 3);
        // analytic gradient left in place
        assert_eq!(store.grad(w).data(), &[0.6, -4.8, 15.0]);
    }

    #[test]
    fn slopes_below_roundoff_resolution_match() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2], vec![0.7, -0.4]).unwrap());
        let r = gradient_check(&mut store, &[w], 1e-5, |tape, s| {
            Ok(tape.param(s, w).sum().scale(1e-13).offset(1e4))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let r = gradient_check(&mut store, &[w], 1e-5, |tape, s| {
            let x = tape.param(s, w);
            Ok(x.scale(0.0).sum().offset(4.0))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn kink_retry_shrinks_step() {
        let mut store = ParamStore::new();
        // relu(w) with w just right of the kink: a step of 1e-2 crosses it
        let w = store.add("w", Tensor::new(vec![1], vec![1e-3]).unwrap());
        fn f<'t>(tape: &'t Tape, s: &ParamStore, w: ParamId) -> Result<Var<'t>> {
            Ok(tape.param(s, w).relu().sum())
        }
        let coarse = GradCheckConfig { step: 1e-2, stencil: Stencil::Central2, kink_retries: 0 };
        let r = gradient_check_with(&mut store, &[w], coarse, |t, s| f(t, s, w)).unwrap();
        assert!(r.max_rel_error > 0.1);
        let retry = GradCheckConfig { kink_retries: 2, ..coarse };
        let r = gradient_check_with(&mut store, &[w], retry, |t, s| f(t, s, w)).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }
}
