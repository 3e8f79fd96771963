//! Loads the official MNIST files when they are available locally.
//!
//! The directory comes from `GIFT_DATA_DIR`, falling back to `data/mnist`
//! at the workspace root. Without the files the test reports a skip.

use std::path::PathBuf;

use gift_core::data::{load_idx, load_mnist_subsets, to_dataset, DATA_DIR_ENV, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS};
use gift_core::RngStream;

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join(MNIST_TRAIN_IMAGES).is_file().then_some(dir)
}

#[test]
fn official_files_have_the_published_shape() {
    let Some(dir) = mnist_dir() else {
        eprintln!("skipped: MNIST files not found");
        return;
    };
    let raw = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS)).unwrap();
    assert_eq!((raw.len(), raw.rows, raw.cols), (60_000, 28, 28));
    let train = to_dataset(&raw, 10, "mnist", "train").unwrap();
    assert_eq!((train.len(), train.input_dim(), train.output_dim()), (60_000, 784, 10));
    assert!(train.inputs().iter().all(|&v| (0.0..=1.0).contains(&v)));
    for i in [0, 1, 59_999] {
        assert_eq!(train.target(i).sum(), 1.0);
    }
    // Published label of the first training image.
    assert_eq!(raw.labels[0], 5);

    let (a, t) = load_mnist_subsets(&dir, 1000, 200, RngStream::root(3)).unwrap();
    let (b, _) = load_mnist_subsets(&dir, 1000, 200, RngStream::root(3)).unwrap();
    assert_eq!((a.len(), t.len()), (1000, 200));
    assert_eq!(a.inputs(), b.inputs());
}
