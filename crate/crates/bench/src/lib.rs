//! Shared fixtures for the operator benchmarks.

use dcnn_core::nnops::{ConvKernel, ConvSpec};
use dcnn_core::{DepthMap, Rng, Tensor};

/// Random input, kernel and depth for a "same" convolution of `channels`
/// channels over a `side × side` image.
pub struct ConvFixture {
    pub spec: ConvSpec,
    pub kernel: ConvKernel,
    pub input: Tensor,
    pub depth: DepthMap,
}

impl ConvFixture {
    pub fn new(channels: usize, side: usize, kernel: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let spec = ConvSpec::same(channels, channels, kernel, 1);
        let weights =
            Tensor::rand_uniform(&mut rng, &spec.weight_shape(), -0.1, 0.1).expect("valid shape");
        let bias = Tensor::zeros(&[channels]).expect("valid shape");
        let input = Tensor::rand_uniform(&mut rng, &[channels, side, side], -1.0, 1.0)
            .expect("valid shape");
        let depth = DepthMap::new(
            side,
            side,
            (0..side * side).map(|_| rng.uniform(0.5, 4.0)).collect(),
        )
        .expect("positive depths");
        ConvFixture {
            spec,
            kernel: ConvKernel::new(weights, Some(bias)),
            input,
            depth,
        }
    }
}
