//! The noisy layered network `M_s`, its parameters and the constraint box.

use std::ops::{Deref, DerefMut};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::noise::{Injection, NoiseDraw};
use crate::tensors::Tensors;

/// Element-wise activation applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer dimensions `[d_0, ..., d_L]` and the activation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    layer_dims: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl Architecture {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(domain(format!(
                "architecture needs at least one weight layer, got dims {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(domain(format!("layer dimensions must be >= 1, got {layer_dims:?}")));
        }
        Ok(Self {
            layer_dims,
            activation,
        })
    }

    pub fn tanh(layer_dims: &[usize]) -> Result<Self> {
        Self::new(layer_dims.to_vec(), Activation::Tanh)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims[self.depth()]
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn zero_tensors(&self) -> Tensors {
        Tensors::zeros(&self.layer_dims)
    }
}

/// Tunable weights `w = (W^(l), b^(l))` of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    arch: Architecture,
    tensors: Tensors,
}

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            tensors: arch.zero_tensors(),
        }
    }

    /// Wraps tensors after checking them against the architecture.
    pub fn from_tensors(arch: &Architecture, tensors: Tensors) -> Result<Self> {
        if tensors.layer_dims() != arch.layer_dims() || tensors.layers.len() != arch.depth() {
            return Err(shape(
                "Params::from_tensors",
                format!("{:?}", arch.layer_dims()),
                format!("{:?}", tensors.layer_dims()),
            ));
        }
        for l in &tensors.layers {
            if l.bias.len() != l.weights.nrows() {
                return Err(shape("Params::from_tensors", l.weights.nrows(), l.bias.len()));
            }
        }
        if !tensors.is_finite() {
            return Err(domain("parameters must be finite"));
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    /// Builds single-layer parameters from `W` and `b`.
    pub fn single_layer(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        let arch = Architecture::new(vec![weights.ncols(), weights.nrows()], activation)?;
        Self::from_tensors(
            &arch,
            Tensors {
                layers: vec![crate::tensors::LayerTensors { weights, bias }],
            },
        )
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &Tensors {
        &self.tensors
    }

    pub fn into_tensors(self) -> Tensors {
        self.tensors
    }

    /// `self + alpha * direction`.
    pub fn offset(&self, alpha: f64, direction: &Tensors) -> Result<Params> {
        self.tensors.check_same_shape(direction, "Params::offset")?;
        let mut out = self.clone();
        out.tensors.axpy(alpha, direction);
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl Deref for Params {
    type Target = Tensors;
    fn deref(&self) -> &Tensors {
        &self.tensors
    }
}

impl DerefMut for Params {
    fn deref_mut(&mut self) -> &mut Tensors {
        &mut self.tensors
    }
}

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// On-disk layout: row-major weight matrices and biases.
#[derive(Serialize, Deserialize)]
struct ParamsDocument {
    format_version: u32,
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Serialize for Params {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsDocument {
            format_version: PARAMS_FORMAT_VERSION,
            layer_dims: self.arch.layer_dims.clone(),
            activation: self.arch.activation,
            weights: self.layers.iter().map(|l| l.weights.iter().copied().collect()).collect(),
            biases: self.layers.iter().map(|l| l.bias.to_vec()).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Params {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = ParamsDocument::deserialize(deserializer)?;
        if doc.format_version != PARAMS_FORMAT_VERSION {
            return Err(D::Error::custom(format!(
                "unsupported params format_version {} (expected {PARAMS_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let arch = Architecture::new(doc.layer_dims, doc.activation).map_err(D::Error::custom)?;
        let dims = arch.layer_dims();
        if doc.weights.len() != arch.depth() || doc.biases.len() != arch.depth() {
            return Err(D::Error::custom("number of weight/bias blocks does not match layer_dims"));
        }
        let mut tensors = arch.zero_tensors();
        for (i, layer) in tensors.layers.iter_mut().enumerate() {
            let (rows, cols) = (dims[i + 1], dims[i]);
            layer.weights = Array2::from_shape_vec((rows, cols), doc.weights[i].clone())
                .map_err(|_| D::Error::custom(format!("layer {} weights must have {} entries", i + 1, rows * cols)))?;
            if doc.biases[i].len() != rows {
                return Err(D::Error::custom(format!("layer {} bias must have {rows} entries", i + 1)));
            }
            layer.bias = Array1::from(doc.biases[i].clone());
        }
        Params::from_tensors(&arch, tensors).map_err(D::Error::custom)
    }
}

/// Box constraint `H` on every weight and bias entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperrectangle {
    pub w_min: f64,
    pub w_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl Hyperrectangle {
    pub fn new(w_min: f64, w_max: f64, b_min: f64, b_max: f64) -> Result<Self> {
        let h = Self {
            w_min,
            w_max,
            b_min,
            b_max,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_min < self.w_max && self.b_min < self.b_max) {
            return Err(domain(format!(
                "hyperrectangle needs w_min < w_max and b_min < b_max, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, params: &Tensors) -> bool {
        params.layers.iter().all(|l| {
            l.weights.iter().all(|&w| (self.w_min..=self.w_max).contains(&w))
                && l.bias.iter().all(|&b| (self.b_min..=self.b_max).contains(&b))
        })
    }
}

/// Euclidean projection onto `H`: a componentwise clamp.
pub fn project(params: &Params, h: &Hyperrectangle) -> Params {
    let mut out = params.clone();
    project_in_place(&mut out, h);
    out
}

pub(crate) fn project_in_place(params: &mut Tensors, h: &Hyperrectangle) {
    for layer in &mut params.layers {
        layer.weights.mapv_inplace(|w| w.clamp(h.w_min, h.w_max));
        layer.bias.mapv_inplace(|b| b.clamp(h.b_min, h.b_max));
    }
}

/// Cached quantities of one noisy forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `A^(0), ..., A^(L)`; the last entry is the network output.
    pub activations: Vec<Array1<f64>>,
    /// `z^(l) = W^(l) A^(l-1) + b^(l) + N^{w,(l)}` for `l = 1..L` (index `l-1`).
    pub pre_activations: Vec<Array1<f64>>,
    pub noise: NoiseDraw,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array1<f64> {
        self.activations.last().expect("trace has at least one layer")
    }
}

fn check_input(params: &Params, x: ArrayView1<f64>) -> Result<()> {
    if x.len() != params.arch.input_dim() {
        return Err(shape("network input", params.arch.input_dim(), x.len()));
    }
    Ok(())
}

/// One pass of `M_s(x, w, N)` under an additive noise draw.
pub fn forward_noisy(params: &Params, x: ArrayView1<f64>, noise: &NoiseDraw) -> Result<ForwardTrace> {
    if noise.injection != Injection::Additive {
        return Err(domain(
            "forward_noisy takes additive noise; multiplicative noise is only injected by the device",
        ));
    }
    forward_injected(params, x, noise)
}

/// Forward pass for either injection mode.
pub(crate) fn forward_injected(params: &Params, x: ArrayView1<f64>, noise: &NoiseDraw) -> Result<ForwardTrace> {
    check_input(params, x)?;
    if !noise.matches(&params.arch) {
        return Err(Error::Shape {
            context: "noise draw",
            expected: format!("sites for dims {:?}", params.arch.layer_dims()),
            actual: format!("{:?}", noise.sites.iter().map(|s| s.len()).collect::<Vec<_>>()),
        });
    }
    let perturb = |value: &mut Array1<f64>, n: &Array1<f64>| match noise.injection {
        Injection::Additive => *value += n,
        Injection::Multiplicative { level } => {
            value.zip_mut_with(n, |v, &g| *v *= 1.0 + level * g);
        }
    };

    let depth = params.arch.depth();
    let act = params.arch.activation;
    let mut activations = Vec::with_capacity(depth + 1);
    let mut pre_activations = Vec::with_capacity(depth);

    let mut a0 = x.to_owned();
    perturb(&mut a0, noise.input());
    activations.push(a0);

    for layer in 1..=depth {
        let lt = &params.layers[layer - 1];
        let mut z = lt.weights.dot(&activations[layer - 1]) + &lt.bias;
        perturb(&mut z, noise.weighing(layer));
        if layer < depth {
            let mut a = z.mapv(|v| act.apply(v));
            perturb(&mut a, noise.activation(layer));
            activations.push(a);
        } else {
            activations.push(z.clone());
        }
        pre_activations.push(z);
    }
    Ok(ForwardTrace {
        activations,
        pre_activations,
        noise: noise.clone(),
    })
}

/// Noise-free output of the network.
pub fn forward_deterministic(params: &Params, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_input(params, x)?;
    let depth = params.arch.depth();
    let act = params.arch.activation;
    let mut a = x.to_owned();
    for layer in 1..=depth {
        let lt = &params.layers[layer - 1];
        let z = lt.weights.dot(&a) + &lt.bias;
        a = if layer < depth { z.mapv(|v| act.apply(v)) } else { z };
    }
    Ok(a)
}
