//! Named parameter storage, tape binding, and binary checkpoints.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Result, SkError};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape4, Tensor4};

const MAGIC: &[u8; 4] = b"SKFC";
const VERSION: u32 = 1;

/// Ordered, name-addressed collection of trainable tensors. Iteration order
/// is insertion order, which fixes the optimizer update order and the
/// checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor4>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor4) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(SkError::Invalid(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4> {
        self.index
            .get(name)
            .map(|i| &self.tensors[*i])
            .ok_or_else(|| SkError::Invalid(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4> {
        match self.index.get(name) {
            Some(i) => Ok(&mut self.tensors[*i]),
            None => Err(SkError::Invalid(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor4)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter_mut())
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.numel()).sum()
    }

    /// Replace tensor values with those of `other`; the name set and every
    /// shape must match exactly.
    pub fn adopt(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(SkError::Format(format!(
                "checkpoint parameter set differs from model ({} vs {} tensors)",
                other.names.len(),
                self.names.len()
            )));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            if mine.shape != theirs.shape {
                return Err(SkError::Format(format!(
                    "checkpoint shape {} does not match model shape {}",
                    theirs.shape, mine.shape
                )));
            }
            mine.data.copy_from_slice(&theirs.data);
            mine.grad = None;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            for d in [t.shape.n, t.shape.c, t.shape.h, t.shape.w] {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| SkError::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| SkError::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| SkError::io(path.display().to_string(), e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(SkError::Format(format!(
                    "truncated checkpoint: wanted {} bytes at offset {}, file has {}",
                    n,
                    pos,
                    buf.len()
                )));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(SkError::Format("bad checkpoint magic".into()));
        }
        let ver = u32_at(&mut pos)?;
        if ver != VERSION {
            return Err(SkError::Format(format!("unsupported checkpoint version {ver}")));
        }
        let count = u32_at(&mut pos)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = u32_at(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, nlen)?)
                .map_err(|_| SkError::Format("non-utf8 parameter name".into()))?
                .to_string();
            let n = u32_at(&mut pos)? as usize;
            let c = u32_at(&mut pos)? as usize;
            let h = u32_at(&mut pos)? as usize;
            let w = u32_at(&mut pos)? as usize;
            let shape = Shape4::new(n, c, h, w);
            let raw = take(&mut pos, shape.numel() * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor4::new(shape, data))?;
        }
        if pos != buf.len() {
            return Err(SkError::Format(format!(
                "{} trailing bytes after checkpoint payload",
                buf.len() - pos
            )));
        }
        Ok(store)
    }
}

/// Tape bindings for every parameter in a store, addressed by name.
pub struct ParamVars {
    map: HashMap<String, Var>,
}

impl ParamVars {
    /// Wrap an existing name-to-binding map (for callers that push the
    /// leaves themselves).
    pub fn from_map(map: HashMap<String, Var>) -> Self {
        ParamVars { map }
    }

    /// Push every parameter onto the tape as a (trainable) leaf.
    pub fn bind_all(store: &ParamStore, tape: &mut Tape, trainable: bool) -> Self {
        let mut map = HashMap::new();
        for (name, t) in store.iter() {
            map.insert(name.to_string(), tape.leaf(t.clone(), trainable));
        }
        ParamVars { map }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| SkError::Invalid(format!("unbound parameter '{name}'")))
    }

    /// After backward, pull each leaf gradient back into `grads[name]` order
    /// matching the store's insertion order.
    pub fn collect_grads(&self, store: &ParamStore, tape: &Tape) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(store.len());
        for (name, t) in store.iter() {
            let v = self.var(name)?;
            match tape.grad(v) {
                Some(g) => out.push(g.to_vec()),
                None => out.push(vec![0.0; t.shape.numel()]),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SkRng;
    use crate::tensor::Precision;

    fn sample_store() -> ParamStore {
        let mut rng = SkRng::new(9);
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor4::random_normal(Shape4::new(4, 1, 3, 3), &mut rng, 1.0)).unwrap();
        s.insert("a.b", Tensor4::random_normal(Shape4::new(1, 4, 1, 1), &mut rng, 1.0)).unwrap();
        s.insert("head.w", Tensor4::random_normal(Shape4::new(2, 4, 1, 1), &mut rng, 1.0)).unwrap();
        s
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor4::scalar(1.0)).unwrap();
        assert!(s.insert("x", Tensor4::scalar(2.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.skfc");
        let s = sample_store();
        s.save(&path).unwrap();
        let r = ParamStore::load(&path).unwrap();
        assert_eq!(s.len(), r.len());
        for ((n1, t1), (n2, t2)) in s.iter().zip(r.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            for (a, b) in t1.data.iter().zip(t2.data.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.skfc");
        let s = sample_store();
        s.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(ParamStore::load(&path).is_err());

        s.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = ParamStore::load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn adopt_requires_matching_layout() {
        let mut a = sample_store();
        let b = sample_store();
        a.adopt(&b).unwrap();
        let mut other = ParamStore::new();
        other.insert("a.w", Tensor4::zeros(4, 1, 3, 3)).unwrap();
        assert!(a.adopt(&other).is_err());
    }

    #[test]
    fn bind_and_collect_grads() {
        let s = sample_store();
        let mut tape = Tape::new(Precision::F64);
        let vars = ParamVars::bind_all(&s, &mut tape, true);
        let w = vars.var("a.w").unwrap();
        let sum = tape.sum(w);
        tape.backward(sum).unwrap();
        let grads = vars.collect_grads(&s, &tape).unwrap();
        assert_eq!(grads[0], vec![1.0; 36]);
        assert_eq!(grads[1], vec![0.0; 4]);
        assert!(vars.var("nope").is_err());
    }
}
