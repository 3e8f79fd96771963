//! Per-sample gradients of the squared loss via noisy backpropagation.

use std::ops::{Deref, DerefMut};

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};

use crate::batch::{add_tensors, backprop_rows, check_batch, chunked_reduce, forward_rows, weighted_outer, BatchNoise};
use crate::error::{domain, shape, Result};
use crate::model::{ForwardTrace, Params};
use crate::noise::NoiseModel;
use crate::rng::RngStream;
use crate::tensors::{LayerTensors, Tensors};

/// Gradient of `(y - M_s(x, w, N))^2` with respect to `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Tensors);

impl Deref for Gradient {
    type Target = Tensors;
    fn deref(&self) -> &Tensors {
        &self.0
    }
}

impl DerefMut for Gradient {
    fn deref_mut(&mut self) -> &mut Tensors {
        &mut self.0
    }
}

/// Everything backpropagation produces for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    /// `R^(L) = y - M_s(x, w, N)`.
    pub residual: Array1<f64>,
    /// `R^(1), ..., R^(L)` (index `l-1`).
    pub backprop: Vec<Array1<f64>>,
    /// `dW^(l) = -2 R^(l) (A^(l-1))^T`, `db^(l) = -2 R^(l)`.
    pub gradient: Gradient,
}

/// Backpropagates the residual of a recorded forward pass.
///
/// `sigma'` is evaluated at the stored pre-activations, so the weighing
/// noise of the forward realization is reused exactly.
pub fn backward(trace: &ForwardTrace, target: ArrayView1<f64>, params: &Params) -> Result<GradSample> {
    let depth = params.arch().depth();
    if trace.activations.len() != depth + 1 || trace.pre_activations.len() != depth {
        return Err(shape("backward trace depth", depth, trace.pre_activations.len()));
    }
    for (i, a) in trace.activations.iter().enumerate() {
        if a.len() != params.arch().layer_dims()[i] {
            return Err(shape("backward trace activations", params.arch().layer_dims()[i], a.len()));
        }
    }
    if target.len() != params.arch().output_dim() {
        return Err(shape("backward target", params.arch().output_dim(), target.len()));
    }
    let act = params.arch().activation();
    let residual = &target - trace.output();
    let mut backprop = vec![Array1::zeros(0); depth];
    backprop[depth - 1] = residual.clone();
    for layer in (1..depth).rev() {
        let w_next = &params.layers[layer].weights;
        let mut r = w_next.t().dot(&backprop[layer]);
        r.zip_mut_with(&trace.pre_activations[layer - 1], |v, &z| *v *= act.derivative(z));
        backprop[layer - 1] = r;
    }
    let layers = backprop
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let a_prev = &trace.activations[i];
            let weights = r
                .view()
                .insert_axis(Axis(1))
                .dot(&a_prev.view().insert_axis(Axis(0)))
                * -2.0;
            LayerTensors {
                weights,
                bias: r * -2.0,
            }
        })
        .collect();
    Ok(GradSample {
        residual,
        backprop,
        gradient: Gradient(Tensors { layers }),
    })
}

/// Mean gradient and mean squared loss over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub gradient: Gradient,
    pub loss: f64,
}

/// Averages per-sample gradients, each under a fresh Gaussian draw at level
/// `s0` taken from `stream.child(i)` for row `i`.
pub fn batch_gradient(
    params: &Params,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    s0: f64,
    stream: RngStream,
) -> Result<BatchGradient> {
    check_batch(params, inputs, Some(targets))?;
    let n = inputs.nrows();
    if n == 0 {
        return Err(domain("batch_gradient needs a non-empty batch"));
    }
    let model = NoiseModel::gaussian(s0)?;
    let arch = params.arch();
    let (sum, loss) = chunked_reduce(
        n,
        |rows| {
            let streams: Vec<RngStream> = rows.clone().map(|i| stream.child(i as u64)).collect();
            let noise = BatchNoise::sample(arch, &model, &streams).expect("validated noise model");
            let xs = inputs.slice(ndarray::s![rows.clone(), ..]);
            let ys = targets.slice(ndarray::s![rows, ..]);
            let trace = forward_rows(params, xs, Some(&noise), 0..xs.nrows());
            let rs = backprop_rows(params, &trace, ys);
            let loss: f64 = rs.last().unwrap().iter().map(|r| r * r).sum();
            (weighted_outer(&trace, &rs, None), loss)
        },
        |(a, la), (b, lb)| (add_tensors(a, b), la + lb),
    )
    .expect("non-empty batch");
    let mut gradient = Gradient(sum);
    gradient.scale(-2.0 / n as f64);
    Ok(BatchGradient {
        gradient,
        loss: loss / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_noisy, Activation, Architecture};
    use crate::noise::{sample_noise, NoiseDraw};
    use ndarray::{array, Array2};
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

    fn loss(params: &Params, x: &Array1<f64>, y: &Array1<f64>, noise: &NoiseDraw) -> f64 {
        let t = forward_noisy(params, x.view(), noise).unwrap();
        (y - t.output()).mapv(|v| v * v).sum()
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let p = random_params(&[3, 4, 2], 1);
        let noise = sample_noise(p.arch(), &NoiseModel::gaussian(0.2).unwrap(), RngStream::root(2)).unwrap();
        let x = array![0.1, 0.5, -0.3];
        let t = forward_noisy(&p, x.view(), &noise).unwrap();
        let g = backward(&t, t.output().view(), &p).unwrap();
        assert!(g.gradient.iter().all(|v| v == 0.0));
    }

    #[test]
    fn linear_single_layer_hand_expansion() {
        let p = Params::single_layer(array![[0.5, -1.0]], array![0.25], Activation::Identity).unwrap();
        let x = array![2.0, 3.0];
        let y = array![1.0];
        let t = forward_noisy(&p, x.view(), &NoiseDraw::zeros(p.arch())).unwrap();
        let g = backward(&t, y.view(), &p).unwrap();
        let r = 1.0 - (0.5 * 2.0 - 3.0 + 0.25);
        assert_eq!(g.gradient.layers[0].weights, array![[-2.0 * r * 2.0, -2.0 * r * 3.0]]);
        assert_eq!(g.gradient.layers[0].bias, array![-2.0 * r]);
    }

    #[test]
    fn matches_central_differences_with_fixed_noise() {
        let h = 1e-6;
        for seed in 0..10 {
            let p = random_params(&[3, 4, 2], seed);
            let noise = sample_noise(p.arch(), &NoiseModel::gaussian(0.3).unwrap(), RngStream::root(seed + 100)).unwrap();
            let x = array![0.3, -0.7, 0.2];
            let y = array![0.5, -0.5];
            let t = forward_noisy(&p, x.view(), &noise).unwrap();
            let g = backward(&t, y.view(), &p).unwrap().gradient.to_flat();
            let base = p.to_flat();
            for (i, &gi) in g.iter().enumerate() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let mut v = base.clone();
                v[i] += h;
                plus.set_flat(&v).unwrap();
                v[i] -= 2.0 * h;
                minus.set_flat(&v).unwrap();
                let fd = (loss(&plus, &x, &y, &noise) - loss(&minus, &x, &y, &noise)) / (2.0 * h);
                let rel = (gi - fd).abs() / gi.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "seed {seed} component {i}: {gi} vs {fd}");
            }
        }
    }

    #[test]
    fn bias_gradient_equals_weight_rows_for_all_ones_input() {
        let p = random_params(&[3, 2], 4);
        let x = array![1.0, 1.0, 1.0];
        let t = forward_noisy(&p, x.view(), &NoiseDraw::zeros(p.arch())).unwrap();
        let g = backward(&t, array![0.3, 0.1].view(), &p).unwrap();
        let lt = &g.gradient.layers[0];
        for (row, b) in lt.weights.rows().into_iter().zip(lt.bias.iter()) {
            assert!(row.iter().all(|w| w == b));
        }
    }

    #[test]
    fn single_layer_gradient_is_linear_in_residual() {
        let p = Params::single_layer(array![[0.2, 0.4], [-0.3, 0.1]], array![0.0, 0.0], Activation::Tanh).unwrap();
        let x = array![0.7, -0.2];
        let t = forward_noisy(&p, x.view(), &NoiseDraw::zeros(p.arch())).unwrap();
        let out = t.output().clone();
        let r1 = array![0.3, -0.4];
        let r2 = array![-1.1, 0.25];
        let g = |r: &Array1<f64>| backward(&t, (&out + r).view(), &p).unwrap().gradient;
        let mut sum = g(&r1);
        sum.axpy(1.0, &g(&r2));
        let combined = g(&(&r1 + &r2));
        for (a, b) in sum.iter().zip(combined.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_of_one_equals_single_sample() {
        let p = random_params(&[3, 5, 2], 6);
        let x = array![[0.1, 0.2, 0.3]];
        let y = array![[1.0, 0.0]];
        let stream = RngStream::root(77);
        let bg = batch_gradient(&p, x.view(), y.view(), 0.2, stream).unwrap();
        let noise = sample_noise(p.arch(), &NoiseModel::gaussian(0.2).unwrap(), stream.child(0)).unwrap();
        let t = forward_noisy(&p, x.row(0), &noise).unwrap();
        let single = backward(&t, y.row(0), &p).unwrap();
        for (a, b) in bg.gradient.iter().zip(single.gradient.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!((bg.loss - single.residual.mapv(|r| r * r).sum()).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_mean_of_single_samples_across_chunks() {
        let p = random_params(&[2, 3, 2], 9);
        let n = 600;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((n, 2), |(i, j)| ((i + 5 * j) as f64 * 0.11).cos());
        let stream = RngStream::root(5);
        let bg = batch_gradient(&p, x.view(), y.view(), 0.3, stream).unwrap();
        let model = NoiseModel::gaussian(0.3).unwrap();
        let mut acc = Gradient(p.arch().zero_tensors());
        for i in 0..n {
            let noise = sample_noise(p.arch(), &model, stream.child(i as u64)).unwrap();
            let t = forward_noisy(&p, x.row(i), &noise).unwrap();
            acc.axpy(1.0 / n as f64, &backward(&t, y.row(i), &p).unwrap().gradient);
        }
        for (a, b) in bg.gradient.iter().zip(acc.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn duplicated_batch_has_identical_mean() {
        // Duplicating every row k times with the same per-row streams keeps the mean.
        let p = random_params(&[2, 3, 1], 3);
        let x = array![[0.1, 0.9], [0.4, -0.3]];
        let y = array![[0.5], [-0.2]];
        let stream = RngStream::root(8);
        let base = batch_gradient(&p, x.view(), y.view(), 0.1, stream).unwrap();
        let model = NoiseModel::gaussian(0.1).unwrap();
        let mut acc = Gradient(p.arch().zero_tensors());
        let k = 3;
        for _ in 0..k {
            for i in 0..2 {
                let noise = sample_noise(p.arch(), &model, stream.child(i as u64)).unwrap();
                let t = forward_noisy(&p, x.row(i), &noise).unwrap();
                acc.axpy(1.0 / (2 * k) as f64, &backward(&t, y.row(i), &p).unwrap().gradient);
            }
        }
        for (a, b) in base.gradient.iter().zip(acc.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = random_params(&[2, 1], 1);
        let x = Array2::<f64>::zeros((0, 2));
        let y = Array2::<f64>::zeros((0, 1));
        assert!(batch_gradient(&p, x.view(), y.view(), 0.1, RngStream::root(0)).is_err());
    }
}
