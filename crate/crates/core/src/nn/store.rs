use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result, Scalar};

const MAGIC: &[u8; 4] = b"DNRW";
const FORMAT_VERSION: u32 = 1;
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_NUMEL: u64 = 1 << 31;

/// Named parameter tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Check that this store and `expected` name exactly the same tensors;
    /// reports every missing and unexpected name.
    pub fn validate_names<'a>(
        &self,
        expected: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let want: Vec<&str> = expected.into_iter().collect();
        let missing: Vec<&str> = want
            .iter()
            .copied()
            .filter(|n| !self.tensors.contains_key(*n))
            .collect();
        if let Some(first) = missing.first() {
            return Err(Error::MissingParam(format!(
                "{first} (all missing: {})",
                missing.join(", ")
            )));
        }
        let extra: Vec<&String> = self
            .tensors
            .keys()
            .filter(|n| !want.contains(&n.as_str()))
            .collect();
        if !extra.is_empty() {
            let list: Vec<&str> = extra.iter().map(|s| s.as_str()).collect();
            return Err(Error::UnexpectedParam(list.join(", ")));
        }
        Ok(())
    }

    /// Materialize every tensor on the tape; names accepted by `trainable`
    /// become gradient-requiring leaves, the rest constants.
    pub fn bind(
        &self,
        tape: &mut Tape<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            let var = if trainable(name) {
                tape.leaf_labeled(tensor.clone(), name.clone())
            } else {
                tape.constant_labeled(tensor.clone(), name.clone())
            };
            vars.insert(name.clone(), var);
        }
        BoundParams { vars }
    }
}

/// Tape handles for one bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(k, &v)| (k, v))
    }
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::MalformedWeights {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Serialize to the versioned little-endian float32 weight format.
pub fn save_params(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, FORMAT_VERSION);
    write_u32(&mut out, store.len() as u32);
    for (name, tensor) in store.iter() {
        write_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        write_u32(&mut out, tensor.rank() as u32);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a weight file, validating structure exhaustively.
pub fn load_params(path: &Path) -> Result<ParamStore<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedWeights {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(malformed("bad magic (not a weight file)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.u32("name length")?;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(malformed(format!("tensor {i}: name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| malformed(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(malformed(format!("tensor {name:?}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            numel = numel.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if numel > MAX_NUMEL {
            return Err(malformed(format!("tensor {name:?}: {numel} elements")));
        }
        let n = shape.iter().product::<usize>();
        let bytes = r.take(n * 4, "payload")?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| malformed(format!("tensor {name:?}: {e}")))?;
        store
            .insert(name.clone(), tensor)
            .map_err(|_| malformed(format!("duplicate tensor name {name:?}")))?;
    }
    if r.pos != buf.len() {
        return Err(malformed(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, shape) in [vec![3usize, 4], vec![7], vec![2, 3, 5], vec![]]
            .into_iter()
            .enumerate()
        {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n.max(1)).map(|_| rng.random_range(-2.0..2.0)).collect();
            store
                .insert(format!("t{i}.w"), Tensor::from_vec(&shape, data).unwrap())
                .unwrap();
        }
        store
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dnrw");
        let store = random_store(7);
        save_params(&store, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(store.len(), loaded.len());
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(t.shape(), l.shape());
            for (a, b) in t.data().iter().zip(l.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dnrw");
        save_params(&random_store(1), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(matches!(err, Error::MalformedWeights { .. }), "{err}");
        assert!(err.to_string().contains("w.dnrw"));
    }

    #[test]
    fn truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dnrw");
        save_params(&random_store(2), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_params(&path).unwrap_err(),
            Error::MalformedWeights { .. }
        ));
    }

    #[test]
    fn bad_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dnrw");
        save_params(&random_store(3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn validate_names_reports_both_directions() {
        let store = random_store(4);
        let err = store.validate_names(["t0.w", "nope.w"]).unwrap_err();
        assert!(matches!(err, Error::MissingParam(_)), "{err}");
        let err = store
            .validate_names(store.names().map(|s| s.as_str()).take(2))
            .unwrap_err();
        assert!(matches!(err, Error::UnexpectedParam(_)), "{err}");
    }
}
