//! Fixtures shared by the benchmarks.

use gift_core::data::{synthetic_blobs, Dataset};
use gift_core::trainer::{init_params, InitScheme};
use gift_core::{Architecture, Params, RngStream};

/// A tanh network with freshly initialized weights and a matching blob task.
pub fn fixture(dims: &[usize], n: usize) -> (Params, Dataset) {
    let arch = Architecture::tanh(dims).expect("valid dims");
    let params = init_params(&arch, InitScheme::UniformScaled, RngStream::root(1));
    let data = synthetic_blobs(dims[0], *dims.last().unwrap(), n, 1.0, RngStream::root(2)).expect("valid task");
    (params, data)
}
