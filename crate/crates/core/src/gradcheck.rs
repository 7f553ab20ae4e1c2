//! Central finite-difference gradient oracle.
//!
//! Only forward values are used here; the analytic gradients under test come
//! from [`Graph::backward`].

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradReport {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` for each input; 0 when both vanish.
    pub fn relative_errors(&self) -> Vec<f64> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(a.data(), n.data()))
            .collect()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors().into_iter().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares `backward` against central differences of step `h` for a scalar
/// function of `inputs`.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic = vars
        .iter()
        .map(|&v| grads.wrt(v).expect("leaf gradient").clone())
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        numeric.push(grad);
    }
    Ok(GradReport { analytic, numeric })
}
