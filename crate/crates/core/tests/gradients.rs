use nds_core::nn::gradcheck::{
    check_layer, finite_diff_check, layer_cases, smooth_input, weighted_square_loss, CorruptedGradient,
    GraphObjective, STEP, TOLERANCE as TOL,
};
use nds_core::nn::{Graph, Initializer, Layer, LayerSpec, Mode, ParamRole, ParameterStore, Tensor, Var};
use nds_core::Result;

#[test]
fn every_layer_kind_passes_gradient_check() {
    for (spec, shapes) in layer_cases() {
        let report = check_layer(&spec, &shapes).unwrap();
        assert!(report.pass, "{spec:?}: {report:?}");
        assert!(report.checked > 0);
    }
}

#[test]
fn layer_cases_cover_every_kind() {
    let mut kinds: Vec<String> = layer_cases()
        .iter()
        .map(|(spec, _)| format!("{spec:?}").split([' ', '(']).next().unwrap().to_string())
        .collect();
    kinds.sort();
    kinds.dedup();
    assert_eq!(kinds.len(), 12, "{kinds:?}");
}

#[test]
fn graph_ops_without_layer_kinds() {
    let mut store = ParameterStore::<f64>::new();
    let a = store.add("a", ParamRole::Weight, smooth_input(&[2, 3, 4, 4], 0.0));
    let b = store.add("b", ParamRole::Weight, smooth_input(&[1, 3, 1, 1], 1.0));
    let objective = GraphObjective {
        forward: |g: &mut Graph<'_, f64>| -> Result<Vec<Var>> {
            let (x, y) = (g.param(a), g.param(b));
            let pooled = g.global_avg_pool(x)?;
            let gate = g.sigmoid(pooled);
            let scaled = g.mul(x, gate)?;
            let shifted = g.add(scaled, y)?;
            let part = g.slice_channels(shifted, 1, 2)?;
            let t0 = g.slice_channels(x, 0, 2)?;
            let st = g.stack_time(&[part, t0])?;
            let sel = g.select_time(st, 0)?;
            Ok(vec![sel, st])
        },
        loss: weighted_square_loss,
    };
    let report = finite_diff_check(&store, &objective, STEP, TOL).unwrap();
    assert!(report.pass, "{report:?}");
}

fn dice_on(outputs: &[&Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) {
    let p = outputs[0];
    let y: Vec<f64> = (0..p.len()).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
    let (inter, sp, sy) = p
        .data()
        .iter()
        .zip(&y)
        .fold((0.0, 0.0, 0.0), |(i, a, b), (&pv, &yv)| (i + pv * yv, a + pv, b + yv));
    let (num, den) = (2.0 * inter + 1.0, sp + sy + 1.0);
    let grad = y.iter().map(|&yv| -(2.0 * yv * den - num) / (den * den)).collect();
    (1.0 - num / den, vec![Tensor::new(p.shape(), grad)])
}

fn conv_sigmoid_dice_store() -> (ParameterStore<f64>, Layer) {
    let mut store = ParameterStore::new();
    let mut init = Initializer::new(9);
    let conv = Layer::build(
        &mut store,
        &mut init,
        "conv",
        LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 1,
            kernel: 3,
            bias: true,
        },
    )
    .unwrap();
    (store, conv)
}

#[test]
fn conv_sigmoid_dice_on_8x8_passes() {
    let (store, conv) = conv_sigmoid_dice_store();
    let x = smooth_input(&[1, 3, 8, 8], 0.3);
    let objective = GraphObjective {
        forward: |g: &mut Graph<'_, f64>| -> Result<Vec<Var>> {
            let xi = g.input(x.clone());
            let z = conv.forward(g, &[xi])?;
            Ok(vec![g.sigmoid(z)])
        },
        loss: dice_on,
    };
    let report = finite_diff_check(&store, &objective, STEP, TOL).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn corrupted_gradient_is_caught_and_named() {
    let (store, conv) = conv_sigmoid_dice_store();
    let x = smooth_input(&[1, 3, 8, 8], 0.3);
    let objective = GraphObjective {
        forward: |g: &mut Graph<'_, f64>| -> Result<Vec<Var>> {
            let xi = g.input(x.clone());
            let z = conv.forward(g, &[xi])?;
            Ok(vec![g.sigmoid(z)])
        },
        loss: dice_on,
    };
    let bias = store.by_name("conv.bias").unwrap();
    let broken = CorruptedGradient {
        inner: &objective,
        param: bias,
        index: 0,
        delta: 0.1,
    };
    let report = finite_diff_check(&store, &broken, STEP, TOL).unwrap();
    assert!(!report.pass);
    assert_eq!(report.worst_param.as_deref(), Some("conv.bias"));
}

fn conv_graph_grads(store: &ParameterStore<f64>, conv: &Layer, x: &Tensor<f64>, seed: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut g = Graph::new(store, Mode::Train);
    let xi = g.input(x.clone());
    let y = conv.forward(&mut g, &[xi]).unwrap();
    let grads = g.backward(&[(y, seed.clone())]).unwrap();
    conv.params().iter().map(|&id| grads.param(id).unwrap().clone()).collect()
}

#[test]
fn bias_gradient_is_spatial_sum_and_backward_is_linear() {
    let (store, conv) = conv_sigmoid_dice_store();
    let x = smooth_input(&[2, 3, 5, 5], 0.0);
    let seed = smooth_input(&[2, 1, 5, 5], 2.0);
    let grads = conv_graph_grads(&store, &conv, &x, &seed);
    let expected: f64 = seed.data().iter().sum();
    assert!((grads[1].data()[0] - expected).abs() < 1e-12);

    let doubled = conv_graph_grads(&store, &conv, &x, &seed.map(|v| 2.0 * v));
    for (a, b) in grads.iter().zip(&doubled) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
    }
    let zero = conv_graph_grads(&store, &conv, &x, &Tensor::zeros(&[2, 1, 5, 5]));
    assert!(zero.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn unreachable_parameters_get_no_gradient() {
    let mut store = ParameterStore::<f64>::new();
    let used = store.add("used", ParamRole::Weight, smooth_input(&[1, 1, 2, 2], 0.0));
    let unused = store.add("unused", ParamRole::Weight, smooth_input(&[1, 1, 2, 2], 1.0));
    let mut g = Graph::new(&store, Mode::Train);
    let u = g.param(used);
    let y = g.sigmoid(u);
    let grads = g.backward(&[(y, Tensor::full(&[1, 1, 2, 2], 1.0))]).unwrap();
    assert!(grads.param(unused).is_none());
    let mut acc = store.clone();
    acc.accumulate(&grads);
    assert!(acc.grad(unused).data().iter().all(|&v| v == 0.0));
    assert!(acc.grad(used).data().iter().all(|&v| v > 0.0));
}

#[test]
fn input_gradient_is_reported() {
    let store = ParameterStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input_with_grad(Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]));
    let y = g.tanh(x);
    let grads = g.backward(&[(y, Tensor::full(&[1, 1, 1, 2], 1.0))]).unwrap();
    let dx = grads.wrt(x).unwrap();
    assert!((dx.data()[0] - 1.0).abs() < 1e-15);
    assert!((dx.data()[1] - (1.0 - 1f64.tanh().powi(2))).abs() < 1e-15);
}
