use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;

/// A named position in the tree of random streams.
///
/// The generator seed is a hash of the master seed and the labelled path,
/// so a stream never depends on how many numbers were drawn elsewhere and
/// parallel tasks reproduce regardless of execution order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<(String, u64)>,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed, path: Vec::new() }
    }

    pub fn child(&self, label: &str, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push((label.to_owned(), index));
        Self { master_seed: self.master_seed, path }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[(String, u64)] {
        &self.path
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"varnet-rng/1");
        h.update(self.master_seed.to_le_bytes());
        for (label, index) in &self.path {
            h.update((label.len() as u64).to_le_bytes());
            h.update(label.as_bytes());
            h.update(index.to_le_bytes());
        }
        h.finalize().into()
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.digest())
    }

    /// A 64-bit value derived from this stream, for seeding child runs.
    pub fn derive_u64(&self) -> u64 {
        let d = self.digest();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// i.i.d. N(0, 1) entries, deterministic per stream.
pub fn sample_standard_normal(shape: &[usize], stream: &RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), standard_normal_vec(&mut stream.rng(), n))
}
