use nds_core::nn::{init_parameters, Graph, LayerSpec, Mode, ParamRole, Tensor};
use proptest::prelude::*;

fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| (i as f32 * 0.37).cos()).collect())
}

#[test]
fn conv1x1_identity_kernel_is_identity() {
    let spec = LayerSpec::Conv1x1 {
        in_channels: 3,
        out_channels: 3,
        bias: true,
    };
    let (net, mut store) = init_parameters::<f32>(&[spec], 1).unwrap();
    let w = store.by_name("layer0.weight").unwrap();
    let mut eye = vec![0.0; 9];
    for c in 0..3 {
        eye[c * 3 + c] = 1.0;
    }
    *store.value_mut(w) = Tensor::new(&[3, 3, 1, 1], eye);
    let x = ramp(&[2, 3, 4, 5]);
    let mut g = Graph::new(&store, Mode::Infer);
    let xi = g.input(x.clone());
    let y = net.forward(&mut g, xi).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn convlstm_with_zero_parameters_outputs_zero_hidden_maps() {
    let spec = LayerSpec::ConvLstm2d {
        in_channels: 2,
        hidden: 3,
        kernel: 3,
        return_sequences: true,
    };
    let (net, mut store) = init_parameters::<f32>(&[spec], 1).unwrap();
    store.fill_trainable_values(0.0);
    let mut g = Graph::new(&store, Mode::Infer);
    let xi = g.input(ramp(&[1, 2, 4, 6, 6]));
    let y = net.forward(&mut g, xi).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 4, 6, 6]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_infer_with_default_statistics_is_near_identity() {
    let (net, store) = init_parameters::<f64>(&[LayerSpec::BatchNorm { channels: 2 }], 0).unwrap();
    let mut g = Graph::new(&store, Mode::Infer);
    let x = ramp(&[1, 2, 3, 3]).cast::<f64>();
    let xi = g.input(x.clone());
    let y = net.forward(&mut g, xi).unwrap();
    let scale = 1.0 / (1.0 + nds_core::nn::BN_EPS).sqrt();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b * scale).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_records_running_statistics() {
    let (net, mut store) = init_parameters::<f64>(&[LayerSpec::BatchNorm { channels: 1 }], 0).unwrap();
    let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
    let updates = {
        let mut g = Graph::new(&store, Mode::Train);
        let xi = g.input(x);
        let y = net.forward(&mut g, xi).unwrap();
        let out = g.value(y).data().to_vec();
        assert!(out.iter().sum::<f64>().abs() < 1e-12);
        g.running_stat_updates().to_vec()
    };
    assert_eq!(updates.len(), 1);
    assert_eq!(updates[0].batch_mean, vec![4.0]);
    assert_eq!(updates[0].batch_var, vec![5.0]);
    store.apply_running_stats(&updates, 0.9);
    let mean = store.value(store.by_name("layer0.running_mean").unwrap()).data()[0];
    let var = store.value(store.by_name("layer0.running_var").unwrap()).data()[0];
    assert!((mean - 0.4).abs() < 1e-12);
    assert!((var - 1.4).abs() < 1e-12);
}

#[test]
fn infer_forward_is_pure() {
    let specs = [
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 4,
            kernel: 3,
            bias: true,
        },
        LayerSpec::BatchNorm { channels: 4 },
        LayerSpec::Activation(nds_core::nn::Activation::Relu),
        LayerSpec::MaxPool2x2,
        LayerSpec::Upsample2x,
    ];
    let (net, store) = init_parameters::<f32>(&specs, 3).unwrap();
    let run = || {
        let mut g = Graph::new(&store, Mode::Infer);
        let xi = g.input(ramp(&[1, 2, 8, 8]));
        let y = net.forward(&mut g, xi).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let spec = LayerSpec::Conv2d {
        in_channels: 1,
        out_channels: 1,
        kernel: 3,
        bias: true,
    };
    let (net, mut store) = init_parameters::<f32>(&[spec], 3).unwrap();
    assert_eq!(store.set_trainable_prefix("layer0", false), 2);
    let grads = {
        let mut g = Graph::new(&store, Mode::Train);
        let xi = g.input(ramp(&[1, 1, 4, 4]));
        let y = net.forward(&mut g, xi).unwrap();
        g.backward(&[(y, Tensor::full(&[1, 1, 4, 4], 1.0))]).unwrap()
    };
    store.accumulate(&grads);
    for (_, p) in store.iter() {
        assert!(p.grad.data().iter().all(|&v| v == 0.0));
        assert!(p.role != ParamRole::RunningMean);
    }
}

fn layer_for(kind: usize, c: usize) -> LayerSpec {
    match kind {
        0 => LayerSpec::Conv2d {
            in_channels: c,
            out_channels: c + 1,
            kernel: 3,
            bias: true,
        },
        1 => LayerSpec::Conv1x1 {
            in_channels: c,
            out_channels: 2,
            bias: false,
        },
        2 => LayerSpec::DepthwiseConv2d {
            channels: c,
            kernel: 3,
            bias: true,
        },
        3 => LayerSpec::BatchNorm { channels: c },
        4 => LayerSpec::MaxPool2x2,
        5 => LayerSpec::Upsample2x,
        _ => LayerSpec::Activation(nds_core::nn::Activation::Swish),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spatial_dims_change_only_for_pool_and_upsample(kind in 0usize..7, c in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let (h, w) = (2 * h, 2 * w);
        let spec = layer_for(kind, c);
        let (net, store) = init_parameters::<f32>(std::slice::from_ref(&spec), 0).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let xi = g.input(ramp(&[2, c, h, w]));
        let y = net.forward(&mut g, xi).unwrap();
        let s = g.shape(y);
        let (eh, ew) = match spec {
            LayerSpec::MaxPool2x2 => (h / 2, w / 2),
            LayerSpec::Upsample2x => (2 * h, 2 * w),
            _ => (h, w),
        };
        prop_assert_eq!(&s[2..], &[eh, ew]);
    }

    #[test]
    fn convlstm_hidden_dims_constant_over_time(t in 1usize..5, hidden in 1usize..4) {
        let spec = LayerSpec::ConvLstm2d { in_channels: 2, hidden, kernel: 3, return_sequences: true };
        let (net, store) = init_parameters::<f32>(&[spec], 2).unwrap();
        let mut g = Graph::new(&store, Mode::Infer);
        let xi = g.input(ramp(&[1, 2, t, 4, 4]));
        let y = net.forward(&mut g, xi).unwrap();
        prop_assert_eq!(g.shape(y), &[1, hidden, t, 4, 4]);
        let v = g.value(y);
        prop_assert!(v.data().iter().all(|x| x.abs() < 1.0));
    }
}
