//! IDX parsing, MNIST loading, batching and stratified subsets.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};
use rand::seq::SliceRandom;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded contents of an unsigned-byte IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `[N, H, W]`, pixels scaled to `[0, 1]`.
    Images(Tensor),
    Labels(Vec<usize>),
}

fn parse_err(field: &'static str, message: impl Into<String>) -> Error {
    Error::Parse { field, message: message.into() }
}

fn be_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(field, "file ends inside the header"))
}

pub fn load_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0, "magic")?;
    let rank = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(parse_err("magic", format!("unsupported magic 0x{other:08X}"))),
    };
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, "dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(parse_err("dims", format!("zero-sized dimension in {dims:?}")));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err("dims", format!("size of {dims:?} overflows")))?;
    let offset = 4 + 4 * rank;
    let payload = &bytes[offset.min(bytes.len())..];
    if payload.len() < n {
        return Err(parse_err(
            "payload",
            format!("truncated: {dims:?} needs {n} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(parse_err("payload", format!("{} trailing bytes", payload.len() - n)));
    }
    Ok(match magic {
        IDX_IMAGES_MAGIC => {
            let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
            IdxData::Images(Tensor::new(dims, data)?)
        }
        _ => IdxData::Labels(payload.iter().map(|&b| b as usize).collect()),
    })
}

/// Inverse of [`load_idx`] for values that came from byte data.
pub fn to_idx_bytes(data: &IdxData) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match data {
        IdxData::Images(t) => {
            if t.rank() != 3 {
                return Err(Error::dim(format!("images must be [N, H, W], got {:?}", t.shape())));
            }
            out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            for &v in t.data() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!("pixel {v} outside [0, 1]")));
                }
                out.push((v * 255.0).round() as u8);
            }
        }
        IdxData::Labels(l) => {
            out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(l.len() as u32).to_be_bytes());
            for &v in l {
                out.push(u8::try_from(v).map_err(|_| Error::Domain(format!("label {v} > 255")))?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `[N, ...]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rank() < 2 || inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for inputs {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain(format!("label {bad} outside 0..{class_count}")));
        }
        Ok(Self { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }
}

/// Partitions `0..n` into consecutive batches, shuffled first if a stream
/// is given. The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: Option<&RngStream>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(s) = shuffle {
        order.shuffle(&mut s.rng());
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stratified sample of `n` indices without replacement, returned in
/// ascending order. Each class gets its proportional share rounded by the
/// largest-remainder rule, so counts are within one of exact proportion.
pub fn subset_indices(labels: &[usize], class_count: usize, n: usize, stream: &RngStream) -> Result<Vec<usize>> {
    let total = labels.len();
    if n == 0 || n > total {
        return Err(Error::usage(format!("cannot draw {n} of {total} samples")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let exact: Vec<f64> = by_class.iter().map(|c| n as f64 * c.len() as f64 / total as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_count).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = n - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut stream.child("class", c as u64).rng());
        out.extend_from_slice(&members[..quota[c]]);
    }
    out.sort_unstable();
    Ok(out)
}

pub fn subset(data: &LabeledDataset, n: usize, stream: &RngStream) -> Result<LabeledDataset> {
    data.select(&subset_indices(&data.labels, data.class_count, n, stream)?)
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// `$VARNET_DATA_DIR`, or `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("VARNET_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

fn find_file(root: &Path, name: &str) -> Option<PathBuf> {
    [root.join("mnist"), root.to_path_buf()]
        .into_iter()
        .flat_map(|dir| [dir.join(name), dir.join(format!("{name}.gz"))])
        .find(|p| p.is_file())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn load_split(root: &Path, images: &str, labels: &str) -> Result<LabeledDataset> {
    let path = |name: &str| {
        find_file(root, name).ok_or_else(|| {
            Error::Config(format!(
                "MNIST file `{name}` not found under {} (set VARNET_DATA_DIR or run scripts/fetch_mnist.sh)",
                root.display()
            ))
        })
    };
    let IdxData::Images(img) = load_idx(&read_maybe_gz(&path(images)?)?)? else {
        return Err(parse_err("magic", format!("{images} is not an image file")));
    };
    let IdxData::Labels(lab) = load_idx(&read_maybe_gz(&path(labels)?)?)? else {
        return Err(parse_err("magic", format!("{labels} is not a label file")));
    };
    let [n, h, w] = img.shape()[..] else { unreachable!("images are rank 3") };
    LabeledDataset::new(img.reshape(&[n, 1, h, w])?, lab, 10)
}

/// MNIST train and test splits as `[N, 1, 28, 28]` inputs. Files may be
/// plain or gzip-compressed, directly under `root` or in `root/mnist`.
pub fn load_mnist(root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((
        load_split(root, MNIST_FILES[0], MNIST_FILES[1])?,
        load_split(root, MNIST_FILES[2], MNIST_FILES[3])?,
    ))
}
