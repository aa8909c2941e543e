use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_err: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub n_checked: usize,
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// `f` receives the inputs as leaves (in order) and returns the scalar output.
/// Inputs flagged `requires_grad` are checked; if none is flagged, all are.
/// Relative error is `|g_a − g_n| / max(1, |g_a|, |g_n|)`.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], rel_tol: f64, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let check_all = !inputs.iter().any(|t| t.requires_grad);
    let checked: Vec<bool> = inputs.iter().map(|t| check_all || t.requires_grad).collect();

    let mut eval = |vals: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(&checked)
            .map(|(t, &c)| {
                let mut t = t.clone();
                t.requires_grad = c && grads;
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::ShapeMismatch(format!("grad_check needs a scalar output, got {:?}", tape.shape(out))));
        }
        let y = tape.value(out).item();
        if !grads {
            return Ok((y, Vec::new()));
        }
        tape.backward(out)?;
        Ok((y, vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        passed: true,
        max_rel_err: 0.0,
        worst: (0, 0),
        n_checked: 0,
    };
    for (i, t) in inputs.iter().enumerate() {
        if !checked[i] {
            continue;
        }
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + h;
            let (fp, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - h;
            let (fm, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            let gn = (fp - fm) / (2.0 * h);
            let ga = analytic[i].as_ref().map_or(0.0, |g| g[j]);
            let err = (ga - gn).abs() / 1f64.max(ga.abs()).max(gn.abs());
            report.n_checked += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
        }
    }
    report.passed = report.max_rel_err < rel_tol;
    Ok(report)
}
