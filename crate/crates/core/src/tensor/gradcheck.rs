use super::{Gradients, ParamStore, Result, TensorError};

/// Denominator floor for relative errors, so entries whose true gradient is
/// ~0 are compared on an absolute scale instead of amplifying roundoff.
const DENOM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
}

/// Compares analytic gradients against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every value in `params`.
///
/// `f` returns the loss and its analytic gradients at the given parameters.
/// With `max_per_param = Some(n)`, at most `n` evenly spaced entries of each
/// tensor are probed.
pub fn finite_difference_check<F>(params: &ParamStore, f: F, h: f64, max_per_param: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let (_, analytic) = f(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.require(&name)?.numel();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| TensorError::UnknownParam(format!("no analytic gradient for `{name}`")))?
            .to_vec();
        let indices: Vec<usize> = match max_per_param {
            Some(cap) if cap < n => (0..cap).map(|i| i * n / cap).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in indices {
            let orig = params.require(&name)?.data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let (plus, _) = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let (minus, _) = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad[i], numeric));
            report.entries_checked += 1;
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_param.push((name, worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn sum_of_squares(p: &ParamStore) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let x = g.param("x", p.require("x")?);
        let sq = g.mul(x, x)?;
        let loss = g.sum(sq)?;
        Ok((g.scalar(loss), g.backward(loss)?))
    }

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(vec![5], vec![0.3, -1.2, 2.5, 0.0, 0.7]).unwrap());
        p
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let r = finite_difference_check(&store(), sum_of_squares, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
        assert_eq!(r.entries_checked, 5);
    }

    #[test]
    fn detects_corrupted_gradient() {
        let corrupted = |p: &ParamStore| {
            let (l, mut g) = sum_of_squares(p)?;
            g.get_mut("x").unwrap()[2] *= 1.1;
            Ok((l, g))
        };
        let r = finite_difference_check(&store(), corrupted, 1e-5, None).unwrap();
        assert!(r.max_rel_err > 1e-2);
    }
}
