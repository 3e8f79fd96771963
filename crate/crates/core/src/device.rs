//! A simulated physical network that can only be queried forward.
//!
//! Internally this is the same layered model as in silico, driven by the
//! device's true noise family and level. Nothing beyond output vectors ever
//! leaves it: no traces, no noise draws, no gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::batch::{chunked_reduce, forward_rows, BatchNoise};
use crate::error::{shape, Result};
use crate::model::{forward_injected, Params};
use crate::noise::{sample_noise, NoiseModel};
use crate::rng::RngStream;

const FRESH: u64 = 0;
const COUPLED: u64 = 1;

#[derive(Debug)]
pub struct Device {
    params: Params,
    noise: NoiseModel,
    root: RngStream,
    queries: AtomicU64,
}

impl Device {
    pub fn new(params: Params, noise: NoiseModel, seed: u64) -> Result<Self> {
        noise.validate()?;
        Ok(Self {
            params,
            noise,
            root: RngStream::root(seed),
            queries: AtomicU64::new(0),
        })
    }

    pub fn noise_model(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn layer_dims(&self) -> &[usize] {
        self.params.arch().layer_dims()
    }

    /// Total forward invocations so far.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    /// Maps new weights onto the device. The query counter and seed are kept.
    pub fn set_params(&mut self, params: &Params) -> Result<()> {
        if params.arch() != self.params.arch() {
            return Err(shape(
                "device params",
                format!("{:?}", self.params.arch().layer_dims()),
                format!("{:?}", params.arch().layer_dims()),
            ));
        }
        self.params.clone_from(params);
        Ok(())
    }

    pub fn with_params(mut self, params: &Params) -> Result<Self> {
        self.set_params(params)?;
        Ok(self)
    }

    /// One noisy forward pass with a fresh noise realization.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let index = self.queries.fetch_add(1, Ordering::SeqCst);
        self.run(x, self.root.child(FRESH).child(index))
    }

    /// One noisy forward pass whose noise realization is keyed by `tag`.
    ///
    /// Two calls with the same tag see the same noise, which couples the
    /// evaluation of different weights (common random numbers).
    pub fn forward_coupled(&self, x: ArrayView1<f64>, tag: u64) -> Result<Array1<f64>> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.run(x, coupled_stream(self.root, tag))
    }

    /// Row `i` of the result is `forward_coupled(xs.row(i), tags[i])`.
    pub fn forward_batch_coupled(&self, xs: ArrayView2<f64>, tags: &[u64]) -> Result<Array2<f64>> {
        if xs.ncols() != self.params.arch().input_dim() {
            return Err(shape("device input", self.params.arch().input_dim(), xs.ncols()));
        }
        if tags.len() != xs.nrows() {
            return Err(shape("device tags", xs.nrows(), tags.len()));
        }
        self.queries.fetch_add(tags.len() as u64, Ordering::SeqCst);
        let arch = self.params.arch();
        let n = xs.nrows();
        let mut out = Array2::zeros((n, arch.output_dim()));
        if n == 0 {
            return Ok(out);
        }
        let parts = chunked_reduce(
            n,
            |rows| {
                let streams: Vec<RngStream> = tags[rows.clone()].iter().map(|&t| coupled_stream(self.root, t)).collect();
                let noise = BatchNoise::sample(arch, &self.noise, &streams).expect("validated noise model");
                let chunk = xs.slice(ndarray::s![rows.clone(), ..]);
                vec![(rows.start, forward_rows(&self.params, chunk, Some(&noise), 0..chunk.nrows()).output().clone())]
            },
            |mut a, mut b| {
                a.append(&mut b);
                a
            },
        )
        .unwrap_or_default();
        for (start, block) in parts {
            out.slice_mut(ndarray::s![start..start + block.nrows(), ..]).assign(&block);
        }
        Ok(out)
    }

    fn run(&self, x: ArrayView1<f64>, stream: RngStream) -> Result<Array1<f64>> {
        let noise = sample_noise(self.params.arch(), &self.noise, stream)?;
        let mut trace = forward_injected(&self.params, x, &noise)?;
        Ok(trace.activations.pop().expect("trace has an output layer"))
    }
}

/// Stream used by [`Device::forward_coupled`] for `tag` on a device seeded
/// with `seed`.
pub fn coupled_noise_stream(seed: u64, tag: u64) -> RngStream {
    coupled_stream(RngStream::root(seed), tag)
}

fn coupled_stream(root: RngStream, tag: u64) -> RngStream {
    root.child(COUPLED).child(tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_deterministic, forward_noisy, Activation, Architecture};
    use crate::noise::NoiseFamily;
    use crate::stats::Running;
    use ndarray::array;
    use rand::Rng;

    fn random_params(dims: &[usize], seed: u64) -> Params {
        let arch = Architecture::tanh(dims).unwrap();
        let mut p = Params::zeros(&arch);
        let mut rng = RngStream::root(seed).rng();
        for v in p.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn coupled_query_equals_in_silico_forward() {
        let p = random_params(&[3, 4, 2], 1);
        let model = NoiseModel::gaussian(0.3).unwrap();
        let dev = Device::new(p.clone(), model, 17).unwrap();
        let x = array![0.2, -0.1, 0.5];
        let out = dev.forward_coupled(x.view(), 5).unwrap();
        let noise = sample_noise(p.arch(), &model, coupled_noise_stream(17, 5)).unwrap();
        let expect = forward_noisy(&p, x.view(), &noise).unwrap();
        assert_eq!(&out, expect.output());
        assert_eq!(dev.query_count(), 1);
    }

    #[test]
    fn batch_matches_single_queries() {
        let p = random_params(&[3, 5, 2], 2);
        for family in NoiseFamily::ALL {
            let dev = Device::new(p.clone(), NoiseModel::new(family, 0.2).unwrap(), 3).unwrap();
            let xs = Array2::from_shape_fn((300, 3), |(i, j)| ((i + 7 * j) as f64 * 0.13).sin());
            let tags: Vec<u64> = (0..300).map(|i| 1000 + i).collect();
            let batch = dev.forward_batch_coupled(xs.view(), &tags).unwrap();
            for i in [0, 17, 255, 256, 299] {
                let single = dev.forward_coupled(xs.row(i), tags[i]).unwrap();
                for k in 0..2 {
                    assert!((batch[[i, k]] - single[k]).abs() < 1e-12);
                }
            }
            assert_eq!(dev.query_count(), 305);
        }
    }

    #[test]
    fn counter_increments_once_per_call() {
        let p = random_params(&[2, 2], 3);
        let dev = Device::new(p, NoiseModel::gaussian(0.1).unwrap(), 1).unwrap();
        let a = dev.forward(array![1.0, 2.0].view()).unwrap();
        let b = dev.forward(array![1.0, 2.0].view()).unwrap();
        assert_ne!(a, b);
        assert_eq!(dev.query_count(), 2);
    }

    fn identity_device(family: NoiseFamily, level: f64) -> Device {
        let p = Params::single_layer(array![[1.0]], array![0.0], Activation::Identity).unwrap();
        Device::new(p, NoiseModel::new(family, level).unwrap(), 4).unwrap()
    }

    #[test]
    fn uniform_family_variance() {
        // Output = (x + u0) + u1: two independent Uniform(-s, s) injections.
        let s = 0.5;
        let dev = identity_device(NoiseFamily::Uniform, s);
        let x = array![0.0];
        let r: Running = (0..100_000).map(|_| dev.forward(x.view()).unwrap()[0]).collect();
        let per_site = r.variance() / 2.0;
        let expect = s * s / 3.0;
        assert!((per_site / expect - 1.0).abs() < 0.05, "{per_site} vs {expect}");
    }

    #[test]
    fn laplace_family_kurtosis() {
        // Sum of two i.i.d. Laplace(0, b): variance 4b^2 and excess kurtosis 3/2,
        // i.e. a single-site excess kurtosis of 3.
        let b = 0.4;
        let dev = identity_device(NoiseFamily::Laplace, b);
        let x = array![0.0];
        let n = 200_000;
        let ys: Vec<f64> = (0..n).map(|_| dev.forward(x.view()).unwrap()[0]).collect();
        let m2 = ys.iter().map(|y| y * y).sum::<f64>() / n as f64;
        let m4 = ys.iter().map(|y| y.powi(4)).sum::<f64>() / n as f64;
        assert!((m2 / (4.0 * b * b) - 1.0).abs() < 0.03);
        let site_excess = 2.0 * (m4 / (m2 * m2) - 3.0);
        assert!((site_excess - 3.0).abs() < 0.5, "excess kurtosis {site_excess}");
    }

    #[test]
    fn multiplicative_noise_scales_values() {
        let p = Params::single_layer(array![[2.0]], array![0.0], Activation::Identity).unwrap();
        let s = 0.1;
        let dev = Device::new(p, NoiseModel::new(NoiseFamily::GaussianMultiplicative, s).unwrap(), 9).unwrap();
        let x = array![1.0];
        // y = 2 (1 + s g0)(1 + s g1): mean 2, variance 4((1+s^2)^2 - 1).
        let r: Running = (0..100_000).map(|_| dev.forward(x.view()).unwrap()[0]).collect();
        let var = 4.0 * ((1.0 + s * s).powi(2) - 1.0);
        assert!((r.mean() - 2.0).abs() < 4.0 * r.std_error());
        assert!((r.variance() / var - 1.0).abs() < 0.05);
    }

    #[test]
    fn tiny_noise_matches_deterministic_forward() {
        let p = random_params(&[3, 4, 2], 6);
        let s = 1e-9;
        let q = random_params(&[3, 4, 2], 7);
        let mut dev = Device::new(p, NoiseModel::gaussian(s).unwrap(), 1).unwrap();
        dev.set_params(&q).unwrap();
        let x = array![0.3, 0.3, -0.3];
        let y = dev.forward(x.view()).unwrap();
        let det = forward_deterministic(&q, x.view()).unwrap();
        for k in 0..2 {
            assert!((y[k] - det[k]).abs() < 1e3 * s);
        }
    }

    #[test]
    fn setting_same_params_twice_keeps_distribution() {
        let p = random_params(&[2, 3, 1], 8);
        let mut a = Device::new(p.clone(), NoiseModel::gaussian(0.2).unwrap(), 5).unwrap();
        let b = Device::new(p.clone(), NoiseModel::gaussian(0.2).unwrap(), 5).unwrap();
        a.set_params(&p).unwrap();
        a.set_params(&p).unwrap();
        let x = array![0.1, 0.2];
        for _ in 0..5 {
            assert_eq!(a.forward(x.view()).unwrap(), b.forward(x.view()).unwrap());
        }
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let mut dev = Device::new(random_params(&[2, 3, 1], 1), NoiseModel::gaussian(0.2).unwrap(), 5).unwrap();
        assert!(dev.set_params(&random_params(&[2, 4, 1], 1)).is_err());
        assert!(dev.forward(array![1.0].view()).is_err());
    }
}
