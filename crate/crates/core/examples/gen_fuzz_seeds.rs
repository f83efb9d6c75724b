//! Writes the seed corpus for the fuzz targets under `fuzz/corpus/<target>/`.
//!
//! `cargo run -p neuroselect --example gen_fuzz_seeds -- fuzz/corpus`

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neuroselect::engine::{init_batchnorm2d, init_conv2d, init_dense, Layer, Model, Pool2d};
use neuroselect::registry::{encode_checkpoint, Checkpoint, RngState};
use neuroselect::velocity::{encode_snapshot, OutputSnapshot};

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    out
}

fn put(root: &Path, target: &str, name: &str, bytes: &[u8]) {
    let dir = root.join(target);
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "fuzz/corpus".into()),
    );

    let pixels: Vec<u8> = (0..18).map(|i| (i * 14) as u8).collect();
    let images = idx(0x803, &[2, 3, 3], &pixels);
    put(&root, "idx_images", "two_3x3", &images);
    put(&root, "idx_images", "truncated", &images[..20]);
    put(
        &root,
        "idx_images",
        "empty_set",
        &idx(0x803, &[0, 28, 28], &[]),
    );
    put(&root, "idx_labels", "three", &idx(0x801, &[3], &[0, 9, 4]));
    put(&root, "idx_labels", "short", &idx(0x801, &[5], &[1, 2]));
    put(&root, "idx_labels", "image_magic", &images);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cnn = Model::<f32>::new(
        vec![1, 4, 4],
        vec![
            init_conv2d(&mut rng, 1, 2, 3, 1, 1, false).unwrap(),
            init_batchnorm2d(2).unwrap(),
            Layer::Relu,
            Layer::MaxPool2d(Pool2d {
                window: 2,
                stride: 2,
            }),
            Layer::Flatten,
            init_dense(&mut rng, 8, 3, true).unwrap(),
            Layer::SoftmaxXent,
        ],
    )
    .unwrap();
    let ck = Checkpoint {
        model: cnn.clone(),
        epoch: 3,
        rng: RngState::capture(&rng),
    };
    let bytes = encode_checkpoint(&ck);
    put(&root, "checkpoint", "cnn_f32", &bytes);
    put(
        &root,
        "checkpoint",
        "cnn_truncated",
        &bytes[..bytes.len() / 2],
    );
    let ck64 = Checkpoint {
        model: cnn.cast::<f64>(),
        epoch: 0,
        rng: RngState::default(),
    };
    put(&root, "checkpoint", "cnn_f64", &encode_checkpoint(&ck64));

    let snap = OutputSnapshot::from_raw(
        2,
        vec![vec![1.0, -2.0, 0.5], vec![0.0, 0.0, 0.0], vec![3.0]],
    );
    let bytes = encode_snapshot(&snap);
    put(&root, "snapshot", "three_neurons", &bytes);
    put(&root, "snapshot", "truncated", &bytes[..bytes.len() - 3]);

    for (name, text) in [
        ("all_full", "ratio.* = 1\nbias_depth = 0\n"),
        ("mixed", "# first conv at a quarter\nratio.0 = 1/4\nratio.* = 1/8\nbias_depth = 2\nclassifier_always = true\n"),
        ("bad_ratio", "ratio.1 = 1/3\n"),
    ] {
        put(&root, "static_scheme", name, text.as_bytes());
    }

    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        if name.starts_with("sweep") {
            continue;
        }
        put(&root, "run_config", &name, &std::fs::read(&path).unwrap());
    }
    put(
        &root,
        "run_config",
        "blobs_mlp",
        br#"{"model":{"fresh":{"mlp":{"hidden":[8]}}},"finetune_data":{"blobs":{"classes":3,"dims":4,"samples_per_class":10,"separation":2.0,"seed":1}},"policy":"reweighted","budget":{"params":40},"epochs":3,"lr_max":0.1,"seeds":{"weights":1,"data":2,"selection":3}}"#,
    );
}
