use super::{no_grad, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / max(1e-12, |analytic| + |numeric|)
    pub max_relative_error: f64,
    /// (input index, flat entry index) of the worst entry
    pub worst: (usize, usize),
    /// (analytic, numeric) derivative at `worst`
    pub worst_values: (f64, f64),
    /// max over entries of |analytic − numeric|
    pub max_abs_error: f64,
    pub entries_checked: usize,
    /// Entries where `f` was non-finite at a perturbed point.
    pub non_finite: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_empty() && self.max_relative_error < tolerance
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at step `eps`.
///
/// `inputs` must be parameter leaves; their values are perturbed in place
/// and restored before returning. Existing gradient buffers are cleared.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    assert!(eps > 0.0, "grad_check step must be positive");
    for t in inputs {
        assert!(t.requires_grad() && t.is_leaf(), "grad_check inputs must be parameters");
        t.zero_grad();
    }
    let y = f(inputs)?;
    y.backward()?;
    drop(y);
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |idx: usize, entry: usize, value: f64| -> Result<f64> {
        inputs[idx].update_data(|d| d[entry] = value);
        no_grad(|| f(inputs)).map(|t| t.item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        max_abs_error: 0.0,
        entries_checked: 0,
        non_finite: Vec::new(),
    };
    for (idx, t) in inputs.iter().enumerate() {
        for entry in 0..t.numel() {
            let original = t.data()[entry];
            let plus = eval(idx, entry, original + eps);
            let minus = eval(idx, entry, original - eps);
            t.update_data(|d| d[entry] = original);
            let (plus, minus) = (plus?, minus?);
            report.entries_checked += 1;
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite.push((idx, entry));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[idx][entry];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (idx, entry);
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::parameter(vec![0.3, -1.2, 2.5, 0.7], &[4]).unwrap();
        let r = grad_check(|v| Ok(v[0].mul(&v[0])?.sum_all()), &[x], 1e-6).unwrap();
        assert!(r.max_relative_error < 1e-9, "{r:?}");
    }

    #[test]
    fn restores_inputs() {
        let x = Tensor::parameter(vec![0.3, -1.2], &[2]).unwrap();
        grad_check(|v| Ok(v[0].exp().sum_all()), std::slice::from_ref(&x), 1e-6).unwrap();
        assert_eq!(x.to_vec(), vec![0.3, -1.2]);
    }

    #[test]
    fn reports_non_finite_entries() {
        let x = Tensor::parameter(vec![1e-7, 2.0], &[2]).unwrap();
        super::super::set_non_finite_policy(super::super::NonFinitePolicy::Propagate);
        let r = grad_check(|v| Ok(v[0].log()?.sum_all()), &[x], 1e-6).unwrap();
        super::super::set_non_finite_policy(super::super::NonFinitePolicy::Reject);
        assert_eq!(r.non_finite, vec![(0, 0)]);
    }
}
