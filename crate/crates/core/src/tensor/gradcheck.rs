use super::{Graph, Tensor, TensorError, TensorId};

/// Compare reverse-mode gradients of a tensor-to-scalar function against
/// central finite differences, coordinate by coordinate. Returns the max
/// relative error, with max(1, |analytic|, |numeric|) as the denominator.
///
/// `f` must be deterministic; it is re-run on a fresh graph for every
/// perturbed coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::NonPositiveEps { eps });
    }

    let mut graph = Graph::new();
    let xid = graph.leaf(x.clone().with_grad());
    let loss = f(&mut graph, xid)?;
    graph.backward(loss)?;
    let analytic = graph.grad(xid).expect("leaf requires grad").to_vec();

    let eval = |data: Vec<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let id = g.leaf(Tensor::new(x.shape().to_vec(), data)?);
        let loss = f(&mut g, id)?;
        Ok(g.data(loss)[0])
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}
