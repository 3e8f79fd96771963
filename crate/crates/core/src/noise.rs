//! Noise families, noise draws and their sampling.
//!
//! A network with `L` weight layers consumes exactly `2L` noise vectors, in
//! the order `(a,0), (w,1), (a,1), (w,2), ..., (a,L-1), (w,L)`: input noise,
//! then for every layer its weighing noise followed (except after the last
//! layer) by its activation noise.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::model::Architecture;
use crate::rng::RngStream;

/// Distribution family of the injected noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    /// `Normal(0, s^2)` added at every injection site.
    GaussianAdditive,
    /// `Uniform(-s, s)` added at every injection site.
    Uniform,
    /// Values are scaled by `1 + s*g` with `g ~ Normal(0, 1)`.
    GaussianMultiplicative,
    /// `Laplace(0, b = s)` added at every injection site.
    Laplace,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 4] = [
        NoiseFamily::GaussianAdditive,
        NoiseFamily::Uniform,
        NoiseFamily::GaussianMultiplicative,
        NoiseFamily::Laplace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::GaussianAdditive => "gaussian_additive",
            NoiseFamily::Uniform => "uniform",
            NoiseFamily::GaussianMultiplicative => "gaussian_multiplicative",
            NoiseFamily::Laplace => "laplace",
        }
    }

    /// Draws one standardized value: the additive perturbation at level `s`
    /// for additive families, the raw `g` for the multiplicative one.
    #[inline]
    pub(crate) fn draw<R: Rng + ?Sized>(self, level: f64, rng: &mut R) -> f64 {
        match self {
            NoiseFamily::GaussianAdditive => level * rng.sample::<f64, _>(StandardNormal),
            NoiseFamily::Uniform => level * (2.0 * rng.random::<f64>() - 1.0),
            NoiseFamily::GaussianMultiplicative => rng.sample::<f64, _>(StandardNormal),
            NoiseFamily::Laplace => {
                let magnitude: f64 = rng.sample(Exp1);
                if rng.random::<bool>() {
                    level * magnitude
                } else {
                    -level * magnitude
                }
            }
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseFamily {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| domain(format!("unknown noise family '{s}'")))
    }
}

/// A noise family together with its level `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    pub level: f64,
}

impl NoiseModel {
    pub fn new(family: NoiseFamily, level: f64) -> Result<Self> {
        let model = Self { family, level };
        model.validate()?;
        Ok(model)
    }

    pub fn gaussian(level: f64) -> Result<Self> {
        Self::new(NoiseFamily::GaussianAdditive, level)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level.is_finite()) {
            return Err(domain(format!(
                "noise level must lie in (0, inf), got {}",
                self.level
            )));
        }
        Ok(())
    }

    pub(crate) fn injection(&self) -> Injection {
        match self.family {
            NoiseFamily::GaussianMultiplicative => Injection::Multiplicative { level: self.level },
            _ => Injection::Additive,
        }
    }
}

/// Whether the stored noise is added or applied as a relative factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Injection {
    Additive,
    /// Each site value `v` becomes `v * (1 + level * g)`.
    Multiplicative { level: f64 },
}

/// Kind of a noise injection site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    /// After the activation (or on the raw input for layer 0).
    Activation,
    /// After weighing, before the activation.
    Weighing,
}

/// One injection site `alpha` with its layer index and dimension `d_{f(alpha)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSite {
    pub kind: SiteKind,
    pub layer: usize,
    pub dim: usize,
}

/// Enumerates the `2L` injection sites of an architecture in draw order.
pub fn noise_sites(arch: &Architecture) -> Vec<NoiseSite> {
    let dims = arch.layer_dims();
    let depth = arch.depth();
    let mut sites = Vec::with_capacity(2 * depth);
    sites.push(NoiseSite {
        kind: SiteKind::Activation,
        layer: 0,
        dim: dims[0],
    });
    for (layer, &dim) in dims.iter().enumerate().skip(1) {
        sites.push(NoiseSite {
            kind: SiteKind::Weighing,
            layer,
            dim,
        });
        if layer < depth {
            sites.push(NoiseSite {
                kind: SiteKind::Activation,
                layer,
                dim,
            });
        }
    }
    sites
}

/// One realization of all noise vectors of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub injection: Injection,
    /// The `2L` vectors in site order.
    pub sites: Vec<Array1<f64>>,
}

impl NoiseDraw {
    /// The all-zero additive draw.
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            injection: Injection::Additive,
            sites: noise_sites(arch)
                .iter()
                .map(|s| Array1::zeros(s.dim))
                .collect(),
        }
    }

    /// Input noise `N^{a,(0)}`.
    pub fn input(&self) -> &Array1<f64> {
        &self.sites[0]
    }

    /// Weighing noise `N^{w,(l)}`, `1 <= l <= L`.
    pub fn weighing(&self, layer: usize) -> &Array1<f64> {
        &self.sites[2 * layer - 1]
    }

    /// Activation noise `N^{a,(l)}`, `0 <= l <= L-1`.
    pub fn activation(&self, layer: usize) -> &Array1<f64> {
        &self.sites[2 * layer]
    }

    pub fn depth(&self) -> usize {
        self.sites.len() / 2
    }

    pub(crate) fn matches(&self, arch: &Architecture) -> bool {
        let sites = noise_sites(arch);
        sites.len() == self.sites.len() && sites.iter().zip(&self.sites).all(|(s, v)| s.dim == v.len())
    }
}

/// Draws every noise vector of `arch` i.i.d. per component from `model`.
///
/// Components are consumed from `stream` in site order, so row `i` of a
/// batched draw fed with the same stream is bitwise identical.
pub fn sample_noise(arch: &Architecture, model: &NoiseModel, stream: RngStream) -> Result<NoiseDraw> {
    model.validate()?;
    let mut rng = stream.rng();
    let sites = noise_sites(arch)
        .iter()
        .map(|site| Array1::from_shape_fn(site.dim, |_| model.family.draw(model.level, &mut rng)))
        .collect();
    Ok(NoiseDraw {
        injection: model.injection(),
        sites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn arch(dims: &[usize]) -> Architecture {
        Architecture::new(dims.to_vec(), Activation::Tanh).unwrap()
    }

    #[test]
    fn site_enumeration_has_two_per_layer() {
        let a = arch(&[3, 4, 2]);
        let sites = noise_sites(&a);
        assert_eq!(sites.len(), 4);
        let dims: Vec<_> = sites.iter().map(|s| s.dim).collect();
        assert_eq!(dims, vec![3, 4, 4, 2]);
        assert_eq!(sites[1].kind, SiteKind::Weighing);
        assert_eq!(sites[3].kind, SiteKind::Weighing);
        assert_eq!(sites[3].layer, 2);
    }

    #[test]
    fn accessors_follow_site_order() {
        let a = arch(&[1, 2, 3]);
        let mut draw = NoiseDraw::zeros(&a);
        for (i, v) in draw.sites.iter_mut().enumerate() {
            v.fill(i as f64);
        }
        assert_eq!(draw.input()[0], 0.0);
        assert_eq!(draw.weighing(1)[0], 1.0);
        assert_eq!(draw.activation(1)[0], 2.0);
        assert_eq!(draw.weighing(2)[0], 3.0);
        assert_eq!(draw.depth(), 2);
    }

    #[test]
    fn non_positive_level_is_rejected() {
        let a = arch(&[2, 2]);
        for family in NoiseFamily::ALL {
            for level in [0.0, -1.0, f64::NAN] {
                let model = NoiseModel { family, level };
                assert!(sample_noise(&a, &model, RngStream::root(1)).is_err());
            }
        }
    }

    #[test]
    fn same_stream_gives_identical_draw() {
        let a = arch(&[5, 3, 2]);
        for family in NoiseFamily::ALL {
            let model = NoiseModel::new(family, 0.4).unwrap();
            let x = sample_noise(&a, &model, RngStream::new(9, 2)).unwrap();
            let y = sample_noise(&a, &model, RngStream::new(9, 2)).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn gaussian_moments_match() {
        // L = 2, s = 1: pool every component across 1e5 draws.
        let a = arch(&[2, 3, 1]);
        let model = NoiseModel::gaussian(1.0).unwrap();
        let root = RngStream::root(11);
        let n = 100_000;
        let per_site = noise_sites(&a).len();
        let mut sums = [0.0; 8];
        let mut sq = [0.0; 8];
        for i in 0..n {
            let draw = sample_noise(&a, &model, root.child(i as u64)).unwrap();
            let flat: Vec<f64> = draw.sites.iter().flat_map(|v| v.iter().copied()).collect();
            assert_eq!(flat.len(), 2 + 3 + 3 + 1);
            for (c, v) in flat.iter().enumerate().take(8) {
                sums[c] += v;
                sq[c] += v * v;
            }
        }
        assert_eq!(per_site, 4);
        let bound = 4.0 / (n as f64).sqrt();
        for c in 0..8 {
            let mean = sums[c] / n as f64;
            let var = sq[c] / n as f64 - mean * mean;
            assert!(mean.abs() < bound, "component {c}: mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "component {c}: var {var}");
        }
    }

    #[test]
    fn family_parsing_round_trips() {
        for f in NoiseFamily::ALL {
            assert_eq!(f.name().parse::<NoiseFamily>().unwrap(), f);
        }
        assert!("cauchy".parse::<NoiseFamily>().is_err());
    }
}
