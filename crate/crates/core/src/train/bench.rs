use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::{self, ConvKernel, ConvSpec};
use crate::similarity::{DepthMap, SimilaritySpec};
use crate::tensor::{Rng, Tensor};

pub const BENCH_CSV_HEADER: &str = "config,standard_ns,depth_aware_ns,ratio";
pub const MIN_WARMUP: usize = 3;
pub const MIN_REPS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: String,
    pub standard_ns: u128,
    pub depth_aware_ns: u128,
    pub ratio: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.config, self.standard_ns, self.depth_aware_ns, self.ratio
        )
    }
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Times two closures with runs interleaved so drift affects both alike.
/// Reports the median of `reps` timed runs after `warmup` untimed ones.
pub fn bench_pair<A, B>(
    config: &str,
    warmup: usize,
    reps: usize,
    mut standard: A,
    mut depth_aware: B,
) -> Result<BenchRow>
where
    A: FnMut() -> Result<()>,
    B: FnMut() -> Result<()>,
{
    if reps == 0 {
        return Err(Error::arg("repetition count must be positive"));
    }
    if reps < MIN_REPS || warmup < MIN_WARMUP {
        return Err(Error::arg(format!(
            "need at least {MIN_WARMUP} warmup and {MIN_REPS} timed runs, got {warmup} and {reps}"
        )));
    }
    for _ in 0..warmup {
        standard()?;
        depth_aware()?;
    }
    let mut ts = Vec::with_capacity(reps);
    let mut td = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        standard()?;
        ts.push(t.elapsed().as_nanos());
        let t = Instant::now();
        depth_aware()?;
        td.push(t.elapsed().as_nanos());
    }
    let (s, d) = (median(ts), median(td));
    Ok(BenchRow {
        config: config.to_string(),
        standard_ns: s,
        depth_aware_ns: d,
        ratio: d as f64 / s.max(1) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub warmup: usize,
    pub reps: usize,
}

impl BenchConfig {
    pub fn new(channels: usize, size: usize, kernel: usize) -> Self {
        BenchConfig {
            in_channels: channels,
            out_channels: channels,
            height: size,
            width: size,
            kernel,
            warmup: MIN_WARMUP,
            reps: MIN_REPS,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}->{}ch_{}x{}_k{}",
            self.in_channels, self.out_channels, self.height, self.width, self.kernel
        )
    }
}

/// Forward time of a standard versus a depth-aware "same" convolution on
/// random features and a random depth map.
pub fn bench_conv(config: &BenchConfig, rng: &mut Rng) -> Result<BenchRow> {
    let spec = ConvSpec::same(config.in_channels, config.out_channels, config.kernel, 1);
    let (h, w) = (config.height, config.width);
    let x = Tensor::rand_uniform(rng, &[config.in_channels, h, w], -1.0, 1.0)?;
    let kernel = ConvKernel::new(
        Tensor::rand_uniform(rng, &spec.weight_shape(), -0.1, 0.1)?,
        Some(Tensor::zeros(&[config.out_channels])?),
    );
    let depth = DepthMap::new(h, w, (0..h * w).map(|_| rng.uniform(0.5, 4.0)).collect())?;
    let sim = SimilaritySpec::default();
    bench_pair(
        &config.label(),
        config.warmup,
        config.reps,
        || {
            black_box(nnops::conv_forward(&spec, &kernel, black_box(&x))?);
            Ok(())
        },
        || {
            black_box(nnops::depth_conv_forward(
                &spec,
                &kernel,
                black_box(&x),
                &depth,
                &sim,
            )?);
            Ok(())
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_reps_rejected() {
        let err = bench_pair("x", 3, 0, || Ok(()), || Ok(())).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        assert!(bench_pair("x", 2, 20, || Ok(()), || Ok(())).is_err());
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(vec![5, 1, 3]), 3);
        assert_eq!(median(vec![4, 1, 3, 2]), 2);
    }

    #[test]
    fn self_comparison_ratio_near_one() {
        let mut rng = Rng::new(0);
        let spec = ConvSpec::same(8, 8, 3, 1);
        let x = Tensor::rand_uniform(&mut rng, &[8, 32, 32], -1.0, 1.0).unwrap();
        let k = ConvKernel::new(
            Tensor::rand_uniform(&mut rng, &spec.weight_shape(), -1.0, 1.0).unwrap(),
            Some(Tensor::zeros(&[8]).unwrap()),
        );
        let run = || {
            black_box(nnops::conv_forward(&spec, &k, &x)?);
            Ok(())
        };
        let row = bench_pair("self", 5, 41, run, run).unwrap();
        assert!((0.8..=1.25).contains(&row.ratio), "{row:?}");
    }

    #[test]
    fn csv_line_format() {
        let row = BenchRow {
            config: "a".into(),
            standard_ns: 10,
            depth_aware_ns: 15,
            ratio: 1.5,
        };
        assert_eq!(row.csv_line(), "a,10,15,1.5");
    }
}
