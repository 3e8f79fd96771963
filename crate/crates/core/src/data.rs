//! Datasets: MNIST in IDX format, synthetic tasks, subsets and batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, IdxError, Result};
use crate::rng::RngStream;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the default MNIST directory.
pub const DATA_DIR_ENV: &str = "GIFT_DATA_DIR";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Descriptive metadata carried alongside the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub normalization: String,
    pub split: String,
    /// Targets are one-hot class indicators.
    pub classification: bool,
}

/// Paired inputs (`n x d_0`) and targets (`n x d_L`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>, meta: DatasetMeta) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(domain("dataset must contain at least one example"));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(shape("dataset rows", inputs.nrows(), targets.nrows()));
        }
        if !inputs.iter().chain(targets.iter()).all(|v| v.is_finite()) {
            return Err(domain("dataset values must be finite"));
        }
        if meta.classification {
            for (i, row) in targets.rows().into_iter().enumerate() {
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return Err(domain(format!("target row {i} is not one-hot")));
                }
            }
        }
        Ok(Self { inputs, targets, meta })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    pub fn target(&self, i: usize) -> ArrayView1<'_, f64> {
        self.targets.row(i)
    }

    /// Rows `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize], split: &str) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(domain(format!("index {bad} out of range for {} rows", self.len())));
        }
        let meta = DatasetMeta {
            split: split.to_string(),
            ..self.meta.clone()
        };
        Dataset::new(
            self.inputs.select(Axis(0), indices),
            self.targets.select(Axis(0), indices),
            meta,
        )
    }

    /// A seed-determined subset of `k` distinct rows.
    pub fn subset(&self, k: usize, stream: RngStream, split: &str) -> Result<Dataset> {
        if k == 0 || k > self.len() {
            return Err(domain(format!("subset size {k} must lie in 1..={}", self.len())));
        }
        let mut idx = index::sample(&mut stream.rng(), self.len(), k).into_vec();
        idx.sort_unstable();
        self.select(&idx, split)
    }

    /// Seed-determined disjoint train/test split with `n_test` test rows.
    pub fn split(&self, n_test: usize, stream: RngStream) -> Result<(Dataset, Dataset)> {
        if n_test == 0 || n_test >= self.len() {
            return Err(domain(format!("test size {n_test} must lie in 1..{}", self.len())));
        }
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut stream.rng());
        let (test, train) = perm.split_at(n_test);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select(&train, "train")?, self.select(&test, "test")?))
    }

    /// Mini-batches covering every row exactly once, in a seed-determined
    /// order. The last batch may be short.
    pub fn batches(&self, batch_size: usize, stream: RngStream) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(domain("batch size must be >= 1"));
        }
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut stream.rng());
        Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }
}

/// `k` row indices for a Monte-Carlo sum: distinct when `k <= n`, otherwise
/// i.i.d. with replacement.
pub fn sample_indices(n: usize, k: usize, stream: RngStream) -> Vec<usize> {
    let mut rng = stream.rng();
    if k <= n {
        index::sample(&mut rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Images and labels as stored in a pair of IDX files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawIdx {
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawIdx {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, needed: usize) -> Result<&'a [u8]> {
        if self.offset + needed > self.bytes.len() {
            return Err(Error::Idx {
                path: self.path.to_path_buf(),
                kind: IdxError::Truncated {
                    offset: self.offset,
                    needed,
                    len: self.bytes.len(),
                },
            });
        }
        let out = &self.bytes[self.offset..self.offset + needed];
        self.offset += needed;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32_be()?;
        if found != expected {
            return Err(Error::Idx {
                path: self.path.to_path_buf(),
                kind: IdxError::BadMagic { expected, found },
            });
        }
        Ok(())
    }
}

/// Parses an IDX3 image file: magic `0x00000803`, then count, rows, cols
/// (big-endian u32), then the pixel bytes.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut cur = Cursor { bytes, offset: 0, path };
    cur.magic(IDX_IMAGES_MAGIC)?;
    let count = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let pixels = cur.take(count * rows * cols)?.to_vec();
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX1 label file: magic `0x00000801`, count, then label bytes.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut cur = Cursor { bytes, offset: 0, path };
    cur.magic(IDX_LABELS_MAGIC)?;
    let count = cur.u32_be()? as usize;
    Ok(cur.take(count)?.to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawIdx> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes, images_path)?;
    let labels = parse_idx_labels(&label_bytes, labels_path)?;
    if labels.len() != count {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            kind: IdxError::CountMismatch {
                images: count,
                labels: labels.len(),
            },
        });
    }
    Ok(RawIdx {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Scales pixels by `1/255` and one-hot encodes labels into `classes` slots.
pub fn to_dataset(raw: &RawIdx, classes: usize, name: &str, split: &str) -> Result<Dataset> {
    let n = raw.len();
    let d = raw.rows * raw.cols;
    if let Some((index, &label)) = raw.labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::Idx {
            path: PathBuf::from(name),
            kind: IdxError::LabelOutOfRange { index, label, classes },
        });
    }
    let inputs = Array2::from_shape_fn((n, d), |(i, j)| raw.pixels[i * d + j] as f64 / 255.0);
    let mut targets = Array2::zeros((n, classes));
    for (i, &l) in raw.labels.iter().enumerate() {
        targets[[i, l as usize]] = 1.0;
    }
    Dataset::new(
        inputs,
        targets,
        DatasetMeta {
            name: name.to_string(),
            normalization: "pixels/255".to_string(),
            split: split.to_string(),
            classification: true,
        },
    )
}

/// Resolves the MNIST directory: explicit path, then `GIFT_DATA_DIR`, then
/// `./data/mnist`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from("data/mnist"),
    }
}

/// Seed-selected MNIST training and test subsets.
pub fn load_mnist_subsets(dir: &Path, train_n: usize, test_n: usize, stream: RngStream) -> Result<(Dataset, Dataset)> {
    let train_raw = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
    let train = to_dataset(&train_raw, 10, "mnist", "train")?;
    drop(train_raw);
    let train = if train_n < train.len() {
        train.subset(train_n, stream.child(1), "train")?
    } else {
        train
    };
    let test_raw = load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
    let test = to_dataset(&test_raw, 10, "mnist", "test")?;
    let test = if test_n < test.len() {
        test.subset(test_n, stream.child(2), "test")?
    } else {
        test
    };
    Ok((train, test))
}

/// `x ~ Normal(0, sigma_x^2 I)`, `y = V x` (scalar target).
pub fn synthetic_linear(v: &[f64], sigma_x: f64, n: usize, stream: RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(domain("synthetic_linear needs n >= 1"));
    }
    if !(sigma_x > 0.0) || v.is_empty() {
        return Err(domain("synthetic_linear needs sigma_x > 0 and a non-empty V"));
    }
    let mut rng = stream.rng();
    let inputs = Array2::from_shape_fn((n, v.len()), |_| sigma_x * rng.sample::<f64, _>(StandardNormal));
    let v = Array1::from(v.to_vec());
    let targets = inputs.dot(&v).insert_axis(Axis(1));
    Dataset::new(
        inputs,
        targets,
        DatasetMeta {
            name: "synthetic_linear".to_string(),
            normalization: "none".to_string(),
            split: "all".to_string(),
            classification: false,
        },
    )
}

/// Gaussian-cluster classification: `classes` centres drawn from
/// `Normal(0, I)`, each example is its centre plus `Normal(0, spread^2 I)`,
/// targets are one-hot.
pub fn synthetic_blobs(dim: usize, classes: usize, n: usize, spread: f64, stream: RngStream) -> Result<Dataset> {
    if dim == 0 || classes < 2 || n == 0 || !(spread > 0.0) {
        return Err(domain("synthetic_blobs needs dim >= 1, classes >= 2, n >= 1, spread > 0"));
    }
    let mut rng = stream.rng();
    let centres = Array2::from_shape_fn((classes, dim), |_| rng.sample::<f64, _>(StandardNormal));
    let mut inputs = Array2::zeros((n, dim));
    let mut targets = Array2::zeros((n, classes));
    for i in 0..n {
        let k = rng.random_range(0..classes);
        targets[[i, k]] = 1.0;
        for j in 0..dim {
            inputs[[i, j]] = centres[[k, j]] + spread * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Dataset::new(
        inputs,
        targets,
        DatasetMeta {
            name: "synthetic_blobs".to_string(),
            normalization: "none".to_string(),
            split: "all".to_string(),
            classification: true,
        },
    )
}

const CACHE_MAGIC: &[u8; 8] = b"GIFTDSET";
pub const CACHE_VERSION: u32 = 1;

/// Writes a dataset as a versioned little-endian binary blob.
pub fn write_cache(path: &Path, data: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 8 * (data.inputs.len() + data.targets.len()));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&data.meta)?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for d in [data.len(), data.input_dim(), data.output_dim()] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data.inputs.iter().chain(data.targets.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let err = |m: &str| Error::Cache(format!("{}: {m}", path.display()));
    let mut off = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(off..off + n).ok_or_else(|| err("truncated"))?;
        off += n;
        Ok(s)
    };
    if take(8)? != CACHE_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let meta: DatasetMeta = serde_json::from_slice(take(meta_len)?)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    }
    let [n, din, dout] = dims;
    let mut read_mat = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let raw = take(rows * cols * 8)?;
        let vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), vals).unwrap())
    };
    let inputs = read_mat(n, din)?;
    let targets = read_mat(n, dout)?;
    Dataset::new(inputs, targets, meta)
}

/// Index of the largest entry (first on ties).
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
