//! Helpers shared by the integration tests: random models and masks,
//! independent oracles, and small run configs.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neuroselect::engine::{
    backward, forward, init_batchnorm2d, init_conv2d, init_dense, softmax_xent, Layer, Mode, Model,
    Pool2d, Tensor,
};
use neuroselect::registry::NeuronTable;
use neuroselect::selection::{NeuronUpdate, PolicyTag, UpdateMask};
use neuroselect::trainer::RunConfig;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn randomize(t: &mut Tensor<f64>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) {
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
}

/// A model for gradient checks, with a batch and labels to score it on.
pub struct Probe {
    pub model: Model<f64>,
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
}

/// Random small MLP or CNN ending in a softmax cross-entropy head, with
/// random (non-zero) biases and BN affine parameters.
pub fn random_probe(rng: &mut ChaCha8Rng) -> Probe {
    let classes = rng.random_range(2..5);
    let batch = rng.random_range(2..5);
    let mut layers = Vec::new();
    let input_shape;
    let mut flat;
    if rng.random_bool(0.4) {
        let d = rng.random_range(2..7);
        input_shape = vec![d];
        flat = d;
        for _ in 0..rng.random_range(0..3) {
            let h = rng.random_range(2..6);
            let bias = rng.random_bool(0.7);
            layers.push(init_dense(rng, flat, h, bias).unwrap());
            layers.push(Layer::Relu);
            flat = h;
        }
    } else {
        let c = rng.random_range(1..3);
        let hw = rng.random_range(4..7);
        input_shape = vec![c, hw, hw];
        let (mut c, mut hw) = (c, hw);
        for _ in 0..rng.random_range(1..3) {
            let k = rng.random_range(1..4).min(hw);
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2).min(k - 1);
            let co = rng.random_range(1..4);
            let bias = rng.random_bool(0.6);
            layers.push(init_conv2d(rng, c, co, k, stride, pad, bias).unwrap());
            hw = (hw + 2 * pad - k) / stride + 1;
            c = co;
            if rng.random_bool(0.4) {
                layers.push(init_batchnorm2d(c).unwrap());
            }
            layers.push(Layer::Relu);
            if hw >= 2 && rng.random_bool(0.5) {
                let pool = Pool2d {
                    window: 2,
                    stride: 2,
                };
                layers.push(if rng.random_bool(0.5) {
                    Layer::MaxPool2d(pool)
                } else {
                    Layer::AvgPool2d(pool)
                });
                hw = (hw - 2) / 2 + 1;
            }
        }
        layers.push(Layer::Flatten);
        flat = c * hw * hw;
        if rng.random_bool(0.5) {
            let h = rng.random_range(2..6);
            layers.push(init_dense(rng, flat, h, true).unwrap());
            layers.push(Layer::Relu);
            flat = h;
        }
    }
    let bias = rng.random_bool(0.8);
    layers.push(init_dense(rng, flat, classes, bias).unwrap());
    layers.push(Layer::SoftmaxXent);
    for layer in &mut layers {
        if let Some(b) = layer.bias_mut() {
            randomize(b, rng, -0.5, 0.5);
        }
        if let Layer::BatchNorm2d(bn) = layer {
            randomize(&mut bn.gamma, rng, 0.5, 1.5);
        }
    }
    let model = Model::new(input_shape.clone(), layers).unwrap();
    let n: usize = input_shape.iter().product::<usize>() * batch;
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new([vec![batch], input_shape].concat(), data).unwrap();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Probe { model, x, labels }
}

/// Each neuron independently trainable, bias-only (if it has a bias) or frozen.
pub fn random_mask<R: Rng>(rng: &mut R, model: &Model<f64>) -> UpdateMask {
    let table = NeuronTable::from_model(model);
    let mut trainable = BTreeSet::new();
    let mut bias_only = BTreeSet::new();
    let p_train = rng.random_range(0.0..1.0);
    for n in table.neurons() {
        let has_bias = model.layers()[n.layer_index].has_bias();
        let r: f64 = rng.random();
        if r < p_train {
            trainable.insert(n.id);
        } else if has_bias && r < p_train + 0.2 {
            bias_only.insert(n.id);
        }
    }
    UpdateMask::new(1, PolicyTag::Velocity, trainable, bias_only, table.costs()).unwrap()
}

pub fn loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (logits, _) = forward(model, x, Mode::Train, None).unwrap();
    softmax_xent(&logits, labels).unwrap().0
}

/// Parameter slots of a model: `(layer, is_bias, flat index, owning channel)`.
pub fn param_slots(model: &Model<f64>) -> Vec<(usize, bool, usize, usize)> {
    let mut out = Vec::new();
    for (l, layer) in model.layers().iter().enumerate() {
        if let Some(w) = layer.weight() {
            let block = layer.weight_block();
            out.extend((0..w.len()).map(|i| (l, false, i, i / block)));
        }
        if let Some(b) = layer.bias() {
            out.extend((0..b.len()).map(|i| (l, true, i, i)));
        }
    }
    out
}

/// Central difference of the loss with respect to one parameter.
pub fn central_difference(probe: &Probe, slot: (usize, bool, usize), h: f64) -> f64 {
    let (l, is_bias, i) = slot;
    let eval = |delta: f64| {
        let mut m = probe.model.clone();
        let layer = m.layer_mut(l);
        let t = if is_bias {
            layer.bias_mut()
        } else {
            layer.weight_mut()
        }
        .unwrap();
        t.data_mut()[i] += delta;
        loss(&m, &probe.x, &probe.labels)
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

/// Longest prefix of `order` (pinned neurons excluded and charged first)
/// that fits in `budget`, found by trying every prefix length.
pub fn brute_force_prefix(
    order: &[usize],
    costs: &[u64],
    budget: u64,
    pinned: &BTreeSet<usize>,
) -> Option<BTreeSet<usize>> {
    let pinned_cost: u64 = pinned.iter().map(|&i| costs[i]).sum();
    if pinned_cost > budget {
        return None;
    }
    let free: Vec<usize> = order
        .iter()
        .copied()
        .filter(|i| !pinned.contains(i))
        .collect();
    let mut best = 0;
    for k in 0..=free.len() {
        let cost: u64 = pinned_cost + free[..k].iter().map(|&i| costs[i]).sum::<u64>();
        if cost <= budget {
            best = k;
        } else {
            break;
        }
    }
    Some(
        pinned
            .iter()
            .copied()
            .chain(free[..best].iter().copied())
            .collect(),
    )
}

/// Small blob-classification fine-tune on a fresh MLP.
pub fn blob_config(policy: &str, budget_fraction: f64, epochs: usize, seed: u64) -> RunConfig {
    let text = format!(
        r#"{{
          "model": {{"fresh": {{"mlp": {{"hidden": [32, 16]}}}}}},
          "finetune_data": {{"blobs": {{"classes": 3, "dims": 6, "samples_per_class": 40,
                                        "separation": 2.0, "seed": 9}}}},
          "policy": "{policy}",
          "budget": {{"fraction": {budget_fraction}}},
          "epochs": {epochs},
          "warmup_epochs": 1,
          "lr_max": 0.1,
          "eval_subset": 16,
          "batch_size": 16,
          "precision": "f64",
          "seeds": {seed}
        }}"#
    );
    RunConfig::from_json(&text).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A tuner for a fresh-model config, writing snapshots to `dir` when given.
pub fn tuner(config: &RunConfig, dir: Option<PathBuf>) -> neuroselect::trainer::Finetuner<f64> {
    use neuroselect::trainer::{build_model, load_splits, Finetuner, ModelSource};
    let source = config.finetune_data.as_ref().expect("finetune data");
    let splits = load_splits(
        source,
        config.val_fraction,
        config.eval_subset,
        config.seeds.data,
    )
    .unwrap();
    let ModelSource::Fresh(spec) = &config.model else {
        panic!("fresh model expected")
    };
    let model = build_model::<f64, _>(
        spec,
        splits.train.sample_shape(),
        splits.train.classes(),
        &mut seeded(config.seeds.weights),
    )
    .unwrap();
    Finetuner::with_snapshot_dir(config, model, splits, dir).unwrap()
}

/// Per-epoch `(phi, delta_phi, v, v / C)` recomputed from snapshot files `e0000.nsel`, `e0001.nsel`, ...
pub fn recompute_velocity(
    dir: &std::path::Path,
    epochs: usize,
    costs: &[u64],
    mu_eq: f64,
) -> Vec<[Vec<f64>; 4]> {
    let load = |e: usize| {
        neuroselect::velocity::read_snapshot(&dir.join(format!("e{e:04}.nsel"))).unwrap()
    };
    let cosine = |a: &[f64], b: &[f64]| {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        match (na == 0.0, nb == 0.0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb),
        }
    };
    let n = costs.len();
    let mut prev = load(0);
    let mut phi_prev = vec![1.0; n];
    let mut v_prev = vec![0.0; n];
    let mut out = Vec::new();
    for e in 1..=epochs {
        let cur = load(e);
        let phi: Vec<f64> = (0..n)
            .map(|i| cosine(cur.vector(i), prev.vector(i)))
            .collect();
        let dphi: Vec<f64> = (0..n).map(|i| phi[i] - phi_prev[i]).collect();
        let v: Vec<f64> = (0..n).map(|i| dphi[i] - mu_eq * v_prev[i]).collect();
        let vt: Vec<f64> = (0..n).map(|i| v[i] / costs[i] as f64).collect();
        phi_prev = phi.clone();
        v_prev = v.clone();
        prev = cur;
        out.push([phi, dphi, v, vt]);
    }
    out
}

/// Parameters (and BN running statistics) the mask leaves frozen that differ bitwise between two models.
pub fn frozen_changes<F: neuroselect::engine::Scalar>(
    before: &Model<F>,
    after: &Model<F>,
    mask: &UpdateMask,
) -> Vec<String> {
    let table = NeuronTable::from_model(before);
    let mut out = Vec::new();
    for (l, (a, b)) in before.layers().iter().zip(after.layers()).enumerate() {
        let block = a.weight_block();
        let state = |channel: usize| mask.update_of(table.layer_range(l).start + channel);
        if let (Some(wa), Some(wb)) = (a.weight(), b.weight()) {
            for (i, (x, y)) in wa.data().iter().zip(wb.data()).enumerate() {
                if state(i / block) != NeuronUpdate::Full
                    && x.as_f64().to_bits() != y.as_f64().to_bits()
                {
                    out.push(format!("layer {l} weight {i}"));
                }
            }
        }
        if let (Some(ba), Some(bb)) = (a.bias(), b.bias()) {
            for (i, (x, y)) in ba.data().iter().zip(bb.data()).enumerate() {
                if state(i) == NeuronUpdate::Frozen && x.as_f64().to_bits() != y.as_f64().to_bits()
                {
                    out.push(format!("layer {l} bias {i}"));
                }
            }
        }
        if let (Layer::BatchNorm2d(na), Layer::BatchNorm2d(nb)) = (a, b) {
            for c in 0..na.gamma.len() {
                let same = na.running_mean.data()[c].as_f64().to_bits()
                    == nb.running_mean.data()[c].as_f64().to_bits()
                    && na.running_var.data()[c].as_f64().to_bits()
                        == nb.running_var.data()[c].as_f64().to_bits();
                if state(c) == NeuronUpdate::Frozen && !same {
                    out.push(format!("layer {l} running stats {c}"));
                }
            }
        }
    }
    out
}

/// Largest relative deviation between masked gradients and finite differences,
/// or an error naming a frozen entry that is not exactly zero.
pub fn check_probe(probe: &Probe, mask: &UpdateMask) -> Result<f64, String> {
    let (logits, cache) = forward(&probe.model, &probe.x, Mode::Train, None).unwrap();
    let (_, grad) = softmax_xent(&logits, &probe.labels).unwrap();
    let bundle = backward(&probe.model, &cache, &grad, mask).unwrap();
    let table = NeuronTable::from_model(&probe.model);
    let mut worst = 0.0f64;
    for (l, is_bias, i, channel) in param_slots(&probe.model) {
        let p = bundle.layer(l);
        let g = if is_bias { &p.bias } else { &p.weight }
            .as_ref()
            .unwrap()
            .data()[i];
        let id = table.layer_range(l).start + channel;
        let live = match mask.update_of(id) {
            NeuronUpdate::Full => true,
            NeuronUpdate::BiasOnly => is_bias,
            NeuronUpdate::Frozen => false,
        };
        if !live {
            if g.to_bits() != 0.0f64.to_bits() {
                return Err(format!(
                    "layer {l} entry {i} (bias {is_bias}) is frozen but has gradient {g}"
                ));
            }
            continue;
        }
        let fd = central_difference(probe, (l, is_bias, i), 1e-5);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    Ok(worst)
}
