use super::{AutodiffError, Graph, Tensor, Var};

/// Largest componentwise relative error between the reverse-mode gradient of
/// `f` at `point` and central finite differences with step `step`.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let root = f(&mut g, x)?;
    let analytic = g.backward(root)?.tensor(&g, x);

    let eval = |t: Tensor| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let r = f(&mut g, x)?;
        Ok(g.value(r).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
