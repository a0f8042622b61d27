use sha2::{Digest, Sha256};

use super::DenseArray;

/// A fixed, ordered collection of named parameter arrays.
///
/// The order of `named_tensors` and `tensors_mut` must agree; optimizer state,
/// checkpoints and fingerprints all rely on it.
pub trait ParamTensors {
    fn named_tensors(&self) -> Vec<(String, &DenseArray)>;

    fn tensors_mut(&mut self) -> Vec<&mut DenseArray>;

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Bytes held by the parameters at compute precision.
    fn param_bytes(&self) -> usize {
        self.num_params() * std::mem::size_of::<f64>()
    }

    /// SHA-256 over names, shapes and exact `f64` bit patterns.
    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            for &e in t.shape() {
                hasher.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamTensors::flatten`]. Panics on a length mismatch.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}
