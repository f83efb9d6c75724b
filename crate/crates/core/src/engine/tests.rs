use super::*;
use crate::selection::{PolicyTag, UpdateMask};
use std::collections::BTreeSet;

fn dense(weight: Vec<f64>, out: usize, inp: usize, bias: Option<Vec<f64>>) -> Layer<f64> {
    Layer::Dense(Dense {
        weight: Tensor::new(vec![out, inp], weight).unwrap(),
        bias: bias.map(|b| Tensor::new(vec![out], b).unwrap()),
    })
}

fn mask(costs: &[u64], ids: &[usize]) -> UpdateMask {
    UpdateMask::new(
        1,
        PolicyTag::Velocity,
        ids.iter().copied().collect(),
        BTreeSet::new(),
        costs,
    )
    .unwrap()
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(matches!(
        Tensor::<f32>::new(vec![2, 0], vec![]),
        Err(EngineError::InvalidShape(_))
    ));
    assert!(matches!(
        Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]),
        Err(EngineError::DataLength {
            expected: 4,
            actual: 3,
            ..
        })
    ));
    let t = Tensor::<f64>::from_f64(vec![2], &[0.0, 1.0]).unwrap();
    let neg = Tensor::<f64>::from_f64(vec![2], &[-0.0, 1.0]).unwrap();
    assert_eq!(t, neg);
    assert!(!t.bit_eq(&neg));
}

#[test]
fn identity_dense_forward() {
    let model = Model::new(
        vec![3],
        vec![dense(
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
            3,
            3,
            Some(vec![0.; 3]),
        )],
    )
    .unwrap();
    let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let (y, _) = forward(&model, &x, Mode::Train, None).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn relu_and_maxpool_forward() {
    let relu = Model::<f64>::new(vec![3], vec![Layer::Relu]).unwrap();
    let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(
        forward(&relu, &x, Mode::Eval, None).unwrap().0.data(),
        &[0.0, 0.0, 2.0]
    );

    let pool = Model::<f64>::new(
        vec![1, 2, 2],
        vec![Layer::MaxPool2d(Pool2d {
            window: 2,
            stride: 2,
        })],
    )
    .unwrap();
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (y, _) = forward(&pool, &x, Mode::Eval, None).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn forward_shape_mismatch_names_layer() {
    let model = Model::new(vec![3], vec![dense(vec![0.; 6], 2, 3, None)]).unwrap();
    let x = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
    match forward(&model, &x, Mode::Eval, None) {
        Err(EngineError::ShapeMismatch {
            layer,
            expected,
            actual,
        }) => {
            assert_eq!(layer, 0);
            assert_eq!(expected, vec![1, 3]);
            assert_eq!(actual, vec![1, 4]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn chain_validation() {
    let bad = Model::<f64>::new(vec![3], vec![Layer::SoftmaxXent, Layer::Relu]);
    assert!(bad.is_err());
    let bad = Model::new(vec![4], vec![dense(vec![0.; 6], 2, 3, None)]);
    assert!(bad.is_err());
}

#[test]
fn sink_collects_each_neuron() {
    let model = Model::new(
        vec![2],
        vec![dense(vec![1., 0., 0., 2.], 2, 2, None), Layer::Relu],
    )
    .unwrap();
    let mut sink = OutputSink::for_model(&model);
    let x = Tensor::new(vec![2, 2], vec![3.0, -1.0, 4.0, 5.0]).unwrap();
    forward(&model, &x, Mode::Eval, Some(&mut sink)).unwrap();
    assert_eq!(sink.outputs(), &[vec![3.0, 4.0], vec![-2.0, 10.0]]);
}

#[test]
fn single_weight_sgd() {
    let mut model = Model::new(vec![1], vec![dense(vec![1.0], 1, 1, None)]).unwrap();
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let (_, cache) = forward(&model, &x, Mode::Train, None).unwrap();
    let g = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    let bundle = backward(&model, &cache, &g, &mask(&[1], &[0])).unwrap();
    assert_eq!(bundle.layer(0).weight.as_ref().unwrap().data(), &[0.5]);
    sgd_step(&mut model, &bundle, 0.1).unwrap();
    assert_eq!(model.layers()[0].weight().unwrap().data(), &[0.95]);
}

#[test]
fn learning_rate_rules() {
    let mut model = Model::new(vec![1], vec![dense(vec![1.0], 1, 1, Some(vec![0.5]))]).unwrap();
    let before = model.clone();
    let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
    let (_, cache) = forward(&model, &x, Mode::Train, None).unwrap();
    let g = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let bundle = backward(&model, &cache, &g, &mask(&[2], &[0])).unwrap();
    for lr in [-0.1, f64::NAN, f64::INFINITY] {
        assert!(matches!(
            sgd_step(&mut model, &bundle, lr),
            Err(EngineError::InvalidLearningRate(_))
        ));
    }
    sgd_step(&mut model, &bundle, 0.0).unwrap();
    assert!(model.bit_eq(&before));
}

#[test]
fn empty_mask_computes_nothing() {
    let model = Model::new(
        vec![2],
        vec![
            dense(vec![1., 2., 3., 4.], 2, 2, Some(vec![0.1, 0.2])),
            Layer::Relu,
            dense(vec![1., -1.], 1, 2, None),
        ],
    )
    .unwrap();
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let (_, cache) = forward(&model, &x, Mode::Train, None).unwrap();
    let g = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let bundle = backward(
        &model,
        &cache,
        &g,
        &UpdateMask::empty(1, PolicyTag::Velocity),
    )
    .unwrap();
    assert!(bundle.trace().wgrad.is_empty());
    assert!(bundle.trace().igrad.is_empty());
    for p in bundle.layers() {
        for t in p.weight.iter().chain(&p.bias) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn input_gradient_stops_below_lowest_trainable_layer() {
    let model = Model::new(
        vec![2],
        vec![
            dense(vec![1., 2., 3., 4.], 2, 2, None),
            Layer::Relu,
            dense(vec![1., -1.], 1, 2, None),
        ],
    )
    .unwrap();
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let (_, cache) = forward(&model, &x, Mode::Train, None).unwrap();
    let g = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let costs = [2, 2, 2];
    let top = backward(&model, &cache, &g, &mask(&costs, &[2])).unwrap();
    assert!(top.trace().igrad.is_empty());
    let first = backward(&model, &cache, &g, &mask(&costs, &[1])).unwrap();
    let mut igrad = first.trace().igrad.clone();
    igrad.sort();
    assert_eq!(igrad, vec![1, 2]);
    assert!(first
        .layer(2)
        .weight
        .as_ref()
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn unknown_neuron_rejected() {
    let model = Model::new(vec![1], vec![dense(vec![1.0], 1, 1, None)]).unwrap();
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let (_, cache) = forward(&model, &x, Mode::Train, None).unwrap();
    let g = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let m = mask(&[1, 1, 1, 1, 1, 1], &[5]);
    assert!(matches!(
        backward(&model, &cache, &g, &m),
        Err(EngineError::UnknownNeuron { id: 5, count: 1 })
    ));
}

#[test]
fn softmax_xent_uniform_logits() {
    let logits = Tensor::<f64>::zeros(vec![2, 4]);
    let (loss, grad) = softmax_xent(&logits, &[0, 3]).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-15);
    assert_eq!(grad.data()[0], (0.25 - 1.0) / 2.0);
    assert_eq!(grad.data()[1], 0.25 / 2.0);
    assert!(matches!(
        softmax_xent(&logits, &[0, 4]),
        Err(EngineError::LabelOutOfRange { .. })
    ));
    assert_eq!(
        argmax_rows(&Tensor::<f64>::from_f64(vec![1, 3], &[1.0, 1.0, 0.0]).unwrap()),
        vec![0]
    );
}

#[test]
fn batchnorm_running_stats_follow_mask() {
    let mut model = Model::<f64>::new(vec![2, 1, 2], vec![init_batchnorm2d(2).unwrap()]).unwrap();
    let x = Tensor::new(vec![2, 2, 1, 2], vec![1., 3., 0., 2., 5., 7., 4., 6.]).unwrap();
    let (y, cache) = forward(&model, &x, Mode::Train, None).unwrap();
    let g = Tensor::filled(y.shape().to_vec(), 0.1);
    let bundle = backward(&model, &cache, &g, &mask(&[2, 2], &[1])).unwrap();
    sgd_step(&mut model, &bundle, 0.5).unwrap();
    let Layer::BatchNorm2d(bn) = &model.layers()[0] else {
        unreachable!()
    };
    assert_eq!(bn.running_mean.data()[0], 0.0);
    assert_eq!(bn.running_var.data()[0], 1.0);
    // channel 1 sees {0, 2, 4, 6}: mean 3, unbiased variance 20/3
    assert!((bn.running_mean.data()[1] - 0.3).abs() < 1e-12);
    assert!((bn.running_var.data()[1] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
}
