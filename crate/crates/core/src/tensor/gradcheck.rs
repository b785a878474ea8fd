use super::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Outcome of comparing autodiff gradients to central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// [`grad_check`]: max over coordinates of `|analytic - fd| / (|fd| + 1e-8)`.
    /// [`grad_check_params`]: max over parameter tensors of
    /// `‖analytic - fd‖₂ / (‖fd‖₂ + 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

fn eval_scalar(g: &Graph<f64>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("non-finite function value {x}"),
        });
    }
    Ok(x)
}

/// Checks the gradient of a scalar function of `point` built by `f`.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;

    let eval_at = |pt: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = pt.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work = point.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|t| t.data().to_vec());
        for i in 0..point[k].len() {
            let x0 = point[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval_at(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval_at(&work)?;
            work[k].data_mut()[i] = x0;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |d| d[i]);
            report.max_rel_error = report.max_rel_error.max(rel_err(a, fd));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Directional check: the analytic Jacobian-vector product of `f` along
/// `direction` against `(f(x + h*v) - f(x - h*v)) / 2h`. Returns the
/// relative error in the same form as [`grad_check`].
pub fn jvp_check<F>(
    f: F,
    point: &[Tensor<f64>],
    direction: &[Tensor<f64>],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let analytic: f64 = vars
        .iter()
        .zip(direction)
        .map(|(v, d)| {
            grads.wrt(*v).map_or(0.0, |gr| {
                gr.data().iter().zip(d.data()).map(|(a, b)| a * b).sum()
            })
        })
        .sum();
    let shifted = |sign: f64| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = point
            .iter()
            .zip(direction)
            .map(|(p, d)| {
                let data = p
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(x, v)| x + sign * h * v)
                    .collect();
                g.constant(Tensor::new(p.shape(), data).expect("same shape"))
            })
            .collect();
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)
    };
    let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
    Ok(rel_err(analytic, fd))
}

/// Like [`grad_check`] but perturbs every coordinate of every parameter in
/// `store`; `f` builds the scalar loss from the current parameter values.
/// Errors are measured per parameter tensor, so coordinates with vanishing
/// gradients do not amplify finite-difference round-off.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        eval_scalar(&g, out)?;
        g.backward_into(out, &mut analytic)?;
    }
    let eval_at = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, s)?;
        eval_scalar(&g, out)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work = store.clone();
    for id in store.ids() {
        let grad = analytic.get(id).grad.clone().expect("zeroed above");
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..store.value(id).len() {
            let x0 = store.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = x0 + h;
            let fp = eval_at(&work)?;
            work.get_mut(id).value.data_mut()[i] = x0 - h;
            let fm = eval_at(&work)?;
            work.get_mut(id).value.data_mut()[i] = x0;
            let fd = (fp - fm) / (2.0 * h);
            diff += (grad.data()[i] - fd).powi(2);
            norm += fd * fd;
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(diff.sqrt() / (norm.sqrt() + 1e-8));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap();
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            1e-3,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_value_is_a_failure() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let s = g.sum(v[0]);
                let inf = g.constant(Tensor::scalar(f64::INFINITY));
                g.mul(s, inf)
            },
            &[x],
            1e-3,
        );
        assert!(r.is_err());
    }
}
