//! Per-sample loss, parameter gradient, input gradient and the nested
//! input-gradient of the squared parameter-gradient norm.

use serde::{Deserialize, Serialize};

use super::finite_diff::finite_diff;
use super::graph::{AutodiffError, Graph, Result, Var};
use super::params::{ParamLayout, ParamVector};
use crate::tensor::Tensor;

/// A differentiable per-sample loss `ℓ(θ; x, y)`.
pub trait Objective: Sync {
    fn input_shape(&self) -> &[usize];

    fn layout(&self) -> &ParamLayout;

    /// Records the loss on `g`. `params` holds one leaf per layout block.
    fn build_loss(&self, g: &mut Graph, params: &[Var], input: Var, label: usize) -> Result<Var>;

    /// First op of this objective that has no usable second derivative.
    fn second_order_blocker(&self) -> Option<&'static str> {
        None
    }
}

/// How `grad_input_of_sq_param_grad_norm` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NestedMethod {
    /// Second reverse pass over the first pass's recorded gradient.
    #[default]
    Reverse,
    /// Central differences of `‖∇_θ ℓ‖²` over the input, step `h`.
    FiniteDifference { h: f64 },
}

fn check_inputs<O: Objective + ?Sized>(obj: &O, params: &ParamVector, input: &Tensor) -> Result<()> {
    if input.shape() != obj.input_shape() {
        return Err(AutodiffError::Shape {
            op: "input",
            expected: format!("{:?}", obj.input_shape()),
            actual: format!("{:?}", input.shape()),
        });
    }
    if params.layout().as_ref() != obj.layout() {
        return Err(AutodiffError::Shape {
            op: "params",
            expected: format!("{} parameters", obj.layout().len()),
            actual: format!("{} parameters", params.len()),
        });
    }
    Ok(())
}

struct Recorded {
    graph: Graph,
    params: Vec<Var>,
    input: Var,
    loss: Var,
}

fn record<O: Objective + ?Sized>(obj: &O, params: &ParamVector, input: &Tensor, label: usize) -> Result<Recorded> {
    check_inputs(obj, params, input)?;
    let mut graph = Graph::new();
    let input_var = graph.leaf(input.clone());
    let param_vars: Vec<Var> = params.tensors().into_iter().map(|t| graph.leaf(t)).collect();
    let loss = obj.build_loss(&mut graph, &param_vars, input_var, label)?;
    Ok(Recorded {
        graph,
        params: param_vars,
        input: input_var,
        loss,
    })
}

fn gather(graph: &Graph, layout: &std::sync::Arc<ParamLayout>, vars: &[Var]) -> ParamVector {
    let mut out = ParamVector::zeros(layout.clone());
    for (block, v) in layout.blocks().iter().zip(vars) {
        out.data_mut()[block.range()].copy_from_slice(graph.value(*v).data());
    }
    out
}

pub fn per_sample_loss<O: Objective + ?Sized>(obj: &O, params: &ParamVector, input: &Tensor, label: usize) -> Result<f64> {
    let r = record(obj, params, input, label)?;
    Ok(r.graph.value(r.loss).item())
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_param_grad<O: Objective + ?Sized>(
    obj: &O,
    params: &ParamVector,
    input: &Tensor,
    label: usize,
) -> Result<(f64, ParamVector)> {
    let mut r = record(obj, params, input, label)?;
    let grads = r.graph.grad(r.loss, &r.params)?;
    let loss = r.graph.value(r.loss).item();
    Ok((loss, gather(&r.graph, params.layout(), &grads)))
}

pub fn grad_params<O: Objective + ?Sized>(obj: &O, params: &ParamVector, input: &Tensor, label: usize) -> Result<ParamVector> {
    loss_and_param_grad(obj, params, input, label).map(|(_, g)| g)
}

/// `∂ℓ/∂x`, shaped like the input.
pub fn grad_input<O: Objective + ?Sized>(obj: &O, params: &ParamVector, input: &Tensor, label: usize) -> Result<Tensor> {
    let mut r = record(obj, params, input, label)?;
    let gx = r.graph.grad(r.loss, &[r.input])?[0];
    Ok(r.graph.value(gx).clone())
}

fn sq_param_grad_norm<O: Objective + ?Sized>(obj: &O, params: &ParamVector, input: &Tensor, label: usize) -> Result<f64> {
    let g = grad_params(obj, params, input, label)?;
    Ok(g.data().iter().map(|v| v * v).sum())
}

/// `∇_x ‖∇_θ ℓ(x)‖²`.
///
/// The reverse method records `∇_θ ℓ` as tape nodes, forms the squared norm
/// on the same tape and differentiates it with respect to the input.
pub fn grad_input_of_sq_param_grad_norm<O: Objective + ?Sized>(
    obj: &O,
    params: &ParamVector,
    input: &Tensor,
    label: usize,
    method: NestedMethod,
) -> Result<Tensor> {
    match method {
        NestedMethod::Reverse => {
            if let Some(op) = obj.second_order_blocker() {
                return Err(AutodiffError::NotTwiceDifferentiable { op });
            }
            let mut r = record(obj, params, input, label)?;
            let gp = r.graph.grad(r.loss, &r.params)?;
            r.graph.set_layer("grad_norm");
            let mut total: Option<Var> = None;
            for v in gp {
                let sq = r.graph.dot(v, v)?;
                total = Some(match total {
                    None => sq,
                    Some(t) => r.graph.add(t, sq)?,
                });
            }
            let total = total.expect("objective has at least one parameter block");
            let gx = r.graph.grad(total, &[r.input])?[0];
            Ok(r.graph.value(gx).clone())
        }
        NestedMethod::FiniteDifference { h } => {
            check_inputs(obj, params, input)?;
            // Surface errors at the centre point; perturbed points are assumed
            // to stay in the same (finite) regime.
            sq_param_grad_norm(obj, params, input, label)?;
            Ok(finite_diff(
                |x| sq_param_grad_norm(obj, params, x, label).unwrap_or(f64::NAN),
                input,
                h,
            ))
        }
    }
}
