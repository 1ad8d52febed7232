use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over all parameter coordinates of `|a - b| / max(|a|, |b|, 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub coordinates: usize,
    /// Distance of the nearest non-smooth input from its kink at the
    /// unperturbed point.
    pub kink_margin: f64,
}

/// Compare tape gradients of `build` against central finite differences.
///
/// `build` receives a fresh tape and one parameter [`Var`] per entry of
/// `params` and must return a scalar loss. Every coordinate of every
/// parameter is perturbed by `+-h`.
pub fn grad_check<F>(params: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(params)?;
    let kink_margin = tape.min_kink_margin();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut coordinates = 0;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let original = work[p].data()[i];
            work[p].data_mut()[i] = original + h;
            let (t_plus, _, l_plus) = eval(&work)?;
            work[p].data_mut()[i] = original - h;
            let (t_minus, _, l_minus) = eval(&work)?;
            work[p].data_mut()[i] = original;

            let numeric = (t_plus.value(l_plus).data()[0] - t_minus.value(l_minus).data()[0]) / (2.0 * h);
            let a = analytic[p].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        coordinates,
        kink_margin,
    })
}
