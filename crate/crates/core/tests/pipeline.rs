use dcnn_core::data::{generate, read_dataset, write_dataset, DatasetSpec};
use dcnn_core::model::{read_checkpoint, write_checkpoint, Model, ModelSpec, Preset};
use dcnn_core::nnops::{self, ConvKernel, ConvSpec, PoolMode, PoolSpec};
use dcnn_core::train::{evaluate, predict, train, TrainConfig};
use dcnn_core::{DepthMap, Rng, SimilaritySpec, Tensor};
use proptest::prelude::*;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_depth(rng: &mut Rng, h: usize, w: usize) -> DepthMap {
    let values = (0..h * w)
        .map(|_| {
            if rng.bernoulli(0.1) {
                0.0
            } else {
                rng.uniform(0.5, 4.0)
            }
        })
        .collect();
    DepthMap::new(h, w, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn depth_conv_backward_is_the_adjoint_in_x(
        seed in any::<u64>(),
        cin in 1usize..4,
        cout in 1usize..4,
        h in 3usize..9,
        w in 3usize..9,
        dilation in 1usize..3,
    ) {
        let mut rng = Rng::new(seed);
        let spec = ConvSpec { has_bias: false, ..ConvSpec::same(cin, cout, 3, dilation) };
        let kernel = ConvKernel::new(
            Tensor::rand_uniform(&mut rng, &spec.weight_shape(), -1.0, 1.0).unwrap(),
            None,
        );
        let x = Tensor::rand_uniform(&mut rng, &[cin, h, w], -1.0, 1.0).unwrap();
        let depth = random_depth(&mut rng, h, w);
        let sim = SimilaritySpec::default();
        let y = nnops::depth_conv_forward(&spec, &kernel, &x, &depth, &sim).unwrap();
        let gy = Tensor::rand_uniform(&mut rng, y.shape(), -1.0, 1.0).unwrap();
        let grads = nnops::depth_conv_backward(&spec, &kernel, &x, &depth, &sim, &gy).unwrap();
        let (lhs, rhs) = (dot(&y, &gy), dot(&x, &grads.x));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        // The output is linear in w as well.
        let rhs_w = dot(&kernel.weights, &grads.weights);
        prop_assert!((lhs - rhs_w).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn depth_avg_pool_preserves_constants(
        seed in any::<u64>(),
        h in 2usize..10,
        w in 2usize..10,
        value in -5.0f64..5.0,
        alpha in 0.1f64..50.0,
    ) {
        let mut rng = Rng::new(seed);
        let depth = random_depth(&mut rng, h, w);
        let sim = SimilaritySpec::exponential(alpha).unwrap();
        let x = Tensor::fill(&[2, h, w], value).unwrap();
        let spec = PoolSpec::new(3, 1, 1, PoolMode::DepthAvg);
        let y = nnops::depth_avg_pool_forward(&spec, &x, &depth, &sim).unwrap();
        for v in y.data() {
            prop_assert!((v - value).abs() <= 1e-12 * (1.0 + value.abs()));
        }
    }

    #[test]
    fn depth_avg_pool_stays_within_window_range(seed in any::<u64>(), h in 3usize..9, w in 3usize..9) {
        let mut rng = Rng::new(seed);
        let depth = random_depth(&mut rng, h, w);
        let x = Tensor::rand_uniform(&mut rng, &[1, h, w], -1.0, 1.0).unwrap();
        let spec = PoolSpec::new(3, 1, 0, PoolMode::DepthAvg);
        let y = nnops::depth_avg_pool_forward(&spec, &x, &depth, &SimilaritySpec::default()).unwrap();
        let (_, oh, ow) = y.chw().unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let window: Vec<f64> = (0..9).map(|t| x.data()[(oy + t / 3) * w + ox + t % 3]).collect();
                let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = y.data()[oy * ow + ox];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

fn small_dataset(images: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_images: images,
        height: 16,
        width: 16,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let scenes = generate(&small_dataset(3, 9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &scenes).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.depth.mask(), b.depth.mask());
        for (x, y) in a.depth.values().iter().zip(b.depth.values()) {
            assert!(
                (x - y).abs() <= 5e-4,
                "depth is stored in whole millimeters"
            );
        }
        for (x, y) in a.rgb.data().iter().zip(b.rgb.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn train_checkpoint_and_reload_predict_identically() {
    let scenes = generate(&small_dataset(4, 3)).unwrap();
    let spec = ModelSpec::preset(Preset::DcnnMini, 4, SimilaritySpec::default());
    let mut model = Model::build(spec.clone(), (16, 16), &mut Rng::new(1)).unwrap();
    let config = TrainConfig {
        max_iter: 6,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &scenes[..3], &config, None).unwrap();
    assert_eq!(outcome.losses.len(), 6);
    assert!(outcome.losses.iter().all(|r| r.loss.is_finite()));

    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model.named_tensors()).unwrap();
    let mut reloaded = Model::build(spec, (16, 16), &mut Rng::new(99)).unwrap();
    reloaded
        .load_parameters(&read_checkpoint(bytes.as_slice()).unwrap())
        .unwrap();

    let test = &scenes[3];
    assert_eq!(
        predict(&model, test).unwrap(),
        predict(&reloaded, test).unwrap()
    );
    let a = evaluate(&model, &scenes[3..]).unwrap();
    let b = evaluate(&reloaded, &scenes[3..]).unwrap();
    assert_eq!(a.metrics.miou, b.metrics.miou);
}
