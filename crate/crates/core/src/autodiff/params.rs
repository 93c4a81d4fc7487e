//! Named learnable parameters with paired gradient accumulators.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;

use super::array::{Array, Real};
use crate::error::Error;

const MAGIC: &[u8; 4] = b"RCPS";
const VERSION: u32 = 1;

struct Entry {
    value: Array,
    grad: Array,
}

/// Map from parameter name to value plus an equally-shaped gradient
/// accumulator. Iteration order is sorted by name, so every walk over
/// the store is deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        let grad = Array::zeros(value.shape().to_vec());
        self.entries
            .insert(name.to_string(), Entry { value, grad });
    }

    /// Insert a matrix initialized uniformly in `[-a, a]` with
    /// `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(&mut self, name: &str, shape: Vec<usize>, rng: &mut impl Rng) {
        let (fan_out, fan_in) = match shape.len() {
            1 => (shape[0], shape[0]),
            _ => (shape[0], shape[1..].iter().product()),
        };
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<Real> = (0..numel)
            .map(|_| rng.random_range(-a..a) as Real)
            .collect();
        self.insert(name, Array::new(shape, data));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, name: &str) -> &Array {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Array {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Array {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Array {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Apply `f(name, value, grad)` to every entry, in name order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Array, &mut Array)) {
        for (name, e) in self.entries.iter_mut() {
            f(name, &mut e.value, &mut e.grad);
        }
    }

    /// Global L2 norm of all gradient accumulators.
    pub fn grad_norm(&self) -> Real {
        self.entries
            .values()
            .flat_map(|e| e.grad.data().iter())
            .map(|&g| g * g)
            .sum::<Real>()
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed
    /// `max_norm`.
    pub fn clip_grads(&mut self, max_norm: Real) {
        let norm = self.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for e in self.entries.values_mut() {
                e.grad.scale_assign(s);
            }
        }
    }

    /// Write to a single binary file: magic, version, entry count,
    /// then per entry the name length, name bytes, rank, dims and
    /// little-endian 64-bit floats.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let shape = e.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in e.value.data() {
                w.write_all(&(v as f64).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut r = io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}",
                path.display(),
                magic
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf) as Real);
            }
            store.insert(&name, Array::new(shape, data));
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, Error> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_grads_resets_exactly() {
        let mut store = ParamStore::new();
        store.insert("w", Array::from_rows(&[vec![1.0, 2.0]]));
        store.grad_mut("w").data_mut()[0] = 3.5;
        store.zero_grads();
        assert_eq!(store.grad("w").data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_shape_matches_value_shape() {
        let mut store = ParamStore::new();
        store.insert("w", Array::zeros(vec![3, 4]));
        assert_eq!(store.grad("w").shape(), store.value("w").shape());
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert_glorot("a.w", vec![3, 2], &mut rng);
        store.insert_glorot("b.bias", vec![5], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, value) in store.iter() {
            assert_eq!(loaded.value(name), value, "mismatch for {name}");
            assert!(loaded.grad(name).data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }
}
