//! Central finite-difference verification of analytic gradients.

use super::{
    Activation, Gradients, Graph, Initializer, Layer, LayerSpec, Mode, ParamId, ParamRole, ParameterStore, Tensor, Var,
};
use crate::error::Result;

/// Central-difference step used by the standard checks.
pub const STEP: f64 = 1e-4;
/// Largest accepted relative error of the standard checks.
pub const TOLERANCE: f64 = 1e-3;

/// A scalar objective over a parameter store together with its analytic
/// gradient.
pub trait Objective {
    fn loss(&self, store: &ParameterStore<f64>) -> Result<f64>;

    fn gradient(&self, store: &ParameterStore<f64>) -> Result<Gradients<f64>>;
}

/// Objective made of a graph forward pass and a loss on its outputs. The
/// loss closure returns the value and its gradient with respect to each
/// output.
pub struct GraphObjective<F, L> {
    pub forward: F,
    pub loss: L,
}

type LossOutput = (f64, Vec<Tensor<f64>>);

impl<F, L> GraphObjective<F, L>
where
    F: for<'a, 'p> Fn(&'a mut Graph<'p, f64>) -> Result<Vec<Var>>,
    L: Fn(&[&Tensor<f64>]) -> LossOutput,
{
    fn run(&self, store: &ParameterStore<f64>, want_grad: bool) -> Result<(f64, Option<Gradients<f64>>)> {
        let mut g = Graph::new(store, Mode::Train);
        let outs = (self.forward)(&mut g)?;
        let values: Vec<&Tensor<f64>> = outs.iter().map(|&v| g.value(v)).collect();
        let (loss, seeds) = (self.loss)(&values);
        if !want_grad {
            return Ok((loss, None));
        }
        let seeds: Vec<(Var, Tensor<f64>)> = outs.into_iter().zip(seeds).collect();
        Ok((loss, Some(g.backward(&seeds)?)))
    }
}

impl<F, L> Objective for GraphObjective<F, L>
where
    F: for<'a, 'p> Fn(&'a mut Graph<'p, f64>) -> Result<Vec<Var>>,
    L: Fn(&[&Tensor<f64>]) -> LossOutput,
{
    fn loss(&self, store: &ParameterStore<f64>) -> Result<f64> {
        Ok(self.run(store, false)?.0)
    }

    fn gradient(&self, store: &ParameterStore<f64>) -> Result<Gradients<f64>> {
        Ok(self.run(store, true)?.1.expect("gradient requested"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the largest relative error, if any was checked.
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Perturbs every scalar of every trainable parameter by `±step` and
/// compares the central difference with the analytic gradient.
pub fn finite_diff_check(
    store: &ParameterStore<f64>,
    objective: &impl Objective,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let analytic = objective.gradient(store)?;
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        checked: 0,
        tol,
        pass: true,
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let zeros = Tensor::zeros(store.value(id).shape());
        let grad = analytic.param(id).unwrap_or(&zeros);
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + step;
            let plus = objective.loss(&work)?;
            work.value_mut(id).data_mut()[i] = orig - step;
            let minus = objective.loss(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(numeric, grad.data()[i]);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(store.get(id).name.clone());
                report.worst_index = i;
            }
        }
    }
    report.pass = report.max_rel_error <= tol;
    Ok(report)
}

/// Wraps an objective and adds `delta` to one analytic gradient entry.
pub struct CorruptedGradient<'o, O> {
    pub inner: &'o O,
    pub param: ParamId,
    pub index: usize,
    pub delta: f64,
}

impl<O: Objective> Objective for CorruptedGradient<'_, O> {
    fn loss(&self, store: &ParameterStore<f64>) -> Result<f64> {
        self.inner.loss(store)
    }

    fn gradient(&self, store: &ParameterStore<f64>) -> Result<Gradients<f64>> {
        let mut g = self.inner.gradient(store)?;
        if let Some(t) = g.param_mut(self.param) {
            t.data_mut()[self.index] += self.delta;
        }
        Ok(g)
    }
}

/// Sum of squares of all outputs weighted by fixed pseudo-random
/// coefficients; a generic smooth loss for layer checks.
pub fn weighted_square_loss(outputs: &[&Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (k, t) in outputs.iter().enumerate() {
        let mut g = Vec::with_capacity(t.len());
        for (i, &v) in t.data().iter().enumerate() {
            let c = 0.5 + 0.5 * ((i * 7 + k * 13) as f64 * 0.61).sin();
            loss += 0.5 * c * v * v;
            g.push(c * v);
        }
        grads.push(Tensor::new(t.shape(), g));
    }
    (loss, grads)
}

/// Deterministic input values kept away from zero and from each other, so
/// ReLU kinks and max-pool ties are not crossed by a perturbation.
pub fn smooth_input(shape: &[usize], phase: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let v = ((i as f64 + phase) * 0.731).sin() * 0.9;
            v + 0.05 * v.signum() + i as f64 * 1e-3
        })
        .collect();
    Tensor::new(shape, data)
}

/// Checks one layer under [`weighted_square_loss`]. Inputs are registered
/// as parameters, so input gradients are verified along with weights.
pub fn check_layer(spec: &LayerSpec, input_shapes: &[Vec<usize>]) -> Result<GradCheckReport> {
    let mut store = ParameterStore::<f64>::new();
    let mut init = Initializer::new(5);
    let inputs: Vec<ParamId> = input_shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("input{i}"), ParamRole::Weight, smooth_input(s, i as f64 * 3.1)))
        .collect();
    let layer = Layer::build(&mut store, &mut init, "probe", spec.clone())?;
    let objective = GraphObjective {
        forward: |g: &mut Graph<'_, f64>| -> Result<Vec<Var>> {
            let xs: Vec<Var> = inputs.iter().map(|&id| g.param(id)).collect();
            Ok(vec![layer.forward(g, &xs)?])
        },
        loss: weighted_square_loss,
    };
    finite_diff_check(&store, &objective, STEP, TOLERANCE)
}

/// One small configuration of every layer kind, with its input shapes.
pub fn layer_cases() -> Vec<(LayerSpec, Vec<Vec<usize>>)> {
    let mut cases = vec![
        (
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                bias: true,
            },
            vec![vec![2, 2, 5, 6]],
        ),
        (
            LayerSpec::Conv1x1 {
                in_channels: 3,
                out_channels: 2,
                bias: true,
            },
            vec![vec![2, 3, 4, 4]],
        ),
        (
            LayerSpec::Conv3d {
                in_channels: 2,
                out_channels: 1,
                kernel: 3,
                bias: true,
            },
            vec![vec![1, 2, 3, 4, 4]],
        ),
        (
            LayerSpec::DepthwiseConv2d {
                channels: 3,
                kernel: 3,
                bias: true,
            },
            vec![vec![2, 3, 5, 4]],
        ),
        (LayerSpec::BatchNorm { channels: 3 }, vec![vec![2, 3, 4, 4]]),
        (LayerSpec::BatchNorm { channels: 2 }, vec![vec![2, 2, 3, 4, 4]]),
        (LayerSpec::MaxPool2x2, vec![vec![2, 2, 4, 6]]),
        (LayerSpec::AvgPool2x2, vec![vec![2, 2, 4, 6]]),
        (LayerSpec::Upsample2x, vec![vec![2, 2, 3, 2]]),
        (LayerSpec::Concat, vec![vec![2, 2, 4, 4], vec![2, 1, 4, 4]]),
        (LayerSpec::HadamardFuse, vec![vec![2, 3, 4, 4], vec![2, 3, 4, 4]]),
        (LayerSpec::HadamardFuse, vec![vec![2, 1, 4, 4], vec![2, 3, 4, 4]]),
    ];
    for return_sequences in [true, false] {
        cases.push((
            LayerSpec::ConvLstm2d {
                in_channels: 2,
                hidden: 2,
                kernel: 3,
                return_sequences,
            },
            vec![vec![2, 2, 3, 4, 4]],
        ));
    }
    for a in [Activation::Sigmoid, Activation::Relu, Activation::Swish, Activation::Tanh] {
        cases.push((LayerSpec::Activation(a), vec![vec![2, 2, 4, 4]]));
    }
    cases
}
