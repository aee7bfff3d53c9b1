//! Built-in synthetic datasets and the matching toy baseline networks.
//!
//! Everything here is deterministic per seed: acceptance runs must be
//! network-free and reproduce bit-exactly.

use crate::error::Result;
use crate::model::{Dataset, Layer, Network, Split};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Two interleaved spirals, one per class. Inputs `[n, 2]`.
pub fn spirals(n_per_class: usize, noise: f64, seed: u64, split: Split) -> Dataset {
    let mut rng = Rng::new(seed);
    let n = 2 * n_per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let turns = 1.75 * std::f64::consts::PI;
    for class in 0..2usize {
        let phase = class as f64 * std::f64::consts::PI;
        for _ in 0..n_per_class {
            let t = rng.uniform();
            let theta = t * turns + phase;
            let radius = 0.2 + 0.8 * t;
            data.push(radius * theta.cos() + noise * rng.normal());
            data.push(radius * theta.sin() + noise * rng.normal());
            labels.push(class);
        }
    }
    let inputs = Tensor::new(vec![n, 2], data).expect("spiral shape");
    Dataset::new(inputs, labels, split).expect("spiral dataset")
}

/// 8x8 single-channel images with a Gaussian blob centered in one of four
/// grid quadrants; the quadrant is the class. Inputs `[n, 1, 8, 8]`.
pub fn grid_blobs(n_per_class: usize, noise: f64, seed: u64, split: Split) -> Dataset {
    let mut rng = Rng::new(seed);
    let classes = 4usize;
    let centers = [(2.0, 2.0), (2.0, 5.0), (5.0, 2.0), (5.0, 5.0)];
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let (cy, cx) = centers[class];
        for _ in 0..n_per_class {
            // jitter the blob center so classification is not pixel lookup
            let jy = cy + 0.6 * rng.normal();
            let jx = cx + 0.6 * rng.normal();
            for y in 0..8 {
                for x in 0..8 {
                    let d2 = (y as f64 - jy).powi(2) + (x as f64 - jx).powi(2);
                    let v = (-d2 / (2.0 * 1.3 * 1.3)).exp() + noise * rng.normal();
                    data.push(v);
                }
            }
            labels.push(class);
        }
    }
    let inputs = Tensor::new(vec![n, 1, 8, 8], data).expect("blob shape");
    Dataset::new(inputs, labels, split).expect("blob dataset")
}

fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.normal())
}

/// 2 -> 32 -> 32 -> 32 -> 2 MLP for the spirals task. The two interior
/// 32 x 32 layers (indices 2 and 4) are the tensorization targets.
pub fn mlp_baseline(seed: u64) -> Result<Network> {
    let mut rng = Rng::new(seed);
    let mut dense = |out: usize, inp: usize| -> Layer {
        let w = he_normal(&mut rng, &[out, inp], inp);
        Layer::Dense {
            w,
            b: Some(Tensor::zeros(&[out])),
        }
    };
    Network::new(
        vec![
            dense(32, 2),
            Layer::Relu,
            dense(32, 32),
            Layer::Relu,
            dense(32, 32),
            Layer::Relu,
            dense(2, 32),
        ],
        vec![2],
    )
}

/// Conv stack for the 8x8 blob images: stride-2 convolutions downsample in
/// place of pooling. The two wide convolutions (indices 2 and 4) are the
/// tensorization targets.
pub fn cnn_baseline(seed: u64) -> Result<Network> {
    let mut rng = Rng::new(seed);
    fn conv(rng: &mut Rng, o: usize, c: usize, stride: usize) -> Layer {
        let k = he_normal(rng, &[o, c, 3, 3], c * 9);
        Layer::Conv2d {
            k,
            b: Some(Tensor::zeros(&[o])),
            stride,
            padding: 1,
        }
    }
    let c0 = conv(&mut rng, 8, 1, 1); // [8, 8, 8]
    let c1 = conv(&mut rng, 16, 8, 2); // [16, 4, 4]
    let c2 = conv(&mut rng, 16, 16, 2); // [16, 2, 2]
    let dense_w = he_normal(&mut rng, &[4, 64], 64);
    Network::new(
        vec![
            c0,
            Layer::Relu,
            c1,
            Layer::Relu,
            c2,
            Layer::Relu,
            Layer::Flatten, // [64]
            Layer::Dense {
                w: dense_w,
                b: Some(Tensor::zeros(&[4])),
            },
        ],
        vec![1, 8, 8],
    )
}
