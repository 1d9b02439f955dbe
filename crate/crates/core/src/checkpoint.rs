//! Binary checkpoints.
//!
//! Layout: the 8 bytes `MTDNNCK1`, a UTF-8 manifest of `name<TAB>d1,d2,...`
//! lines closed by an empty line, then every tensor's values as
//! little-endian `f64` in manifest order. Scalars have an empty dim list.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MTDNNCK1";

/// Name prefixes of entries that are trainer state rather than parameters.
pub const STATE_PREFIXES: [&str; 2] = ["optim.", "trainer."];

pub fn is_state_entry(name: &str) -> bool {
    STATE_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Checkpoint(format!("invalid entry name {name:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Every parameter of `store`, in registration order.
    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let mut ck = Checkpoint::new();
        for (_, p) in store.iter() {
            ck.push(p.name.clone(), p.value.clone())?;
        }
        Ok(ck)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let mut payload_len = 0;
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("{name}\t{}\n", dims.join(",")).as_bytes());
            payload_len += t.len() * 8;
        }
        out.push(b'\n');
        out.reserve(payload_len);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let body = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| bad("missing MTDNNCK1 header".into()))?;
        let end = if body.first() == Some(&b'\n') {
            0
        } else {
            body.windows(2)
                .position(|w| w == b"\n\n")
                .map(|i| i + 1)
                .ok_or_else(|| bad("manifest is not terminated by an empty line".into()))?
        };
        let manifest =
            std::str::from_utf8(&body[..end]).map_err(|_| bad("manifest is not valid UTF-8".into()))?;
        let mut payload = &body[end + 1..];
        let mut ck = Checkpoint::new();
        for line in manifest.lines() {
            let (name, dims) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("malformed manifest line {line:?}")))?;
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension {d:?} for {name}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            let n: usize = shape.iter().product();
            let bytes_needed = n
                .checked_mul(8)
                .filter(|&b| b <= payload.len())
                .ok_or_else(|| bad(format!("payload truncated at {name}")))?;
            let (chunk, rest) = payload.split_at(bytes_needed);
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunks are 8 bytes")))
                .collect();
            ck.push(name, Tensor::new(shape, data)?)?;
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes after the last tensor", payload.len())));
        }
        Ok(ck)
    }

    /// Writes to a sibling temp file and renames it into place, so a crash
    /// never leaves a partial checkpoint under `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        let write = || -> std::io::Result<()> {
            let mut file = fs::File::create(tmp)?;
            file.write_all(&self.to_bytes())?;
            file.sync_all()
        };
        write().map_err(|e| Error::io(tmp, e))?;
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Copies every parameter whose name starts with `prefix` out of the
    /// checkpoint. The parameter sets under `prefix` must match exactly in
    /// names and shapes; otherwise nothing is copied and the error lists
    /// every offending name.
    pub fn restore(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let mut problems = Vec::new();
        let mut wanted = Vec::new();
        for (id, p) in store.iter() {
            if !p.name.starts_with(prefix) {
                continue;
            }
            match self.get(&p.name) {
                None => problems.push(format!("{} (missing)", p.name)),
                Some(t) if t.shape() != p.value.shape() => problems.push(format!(
                    "{} (checkpoint {:?}, model {:?})",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )),
                Some(t) => wanted.push((id, t)),
            }
        }
        for (name, _) in self.entries() {
            if name.starts_with(prefix) && !is_state_entry(name) && store.find(name).is_none() {
                problems.push(format!("{name} (not in model)"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("parameter mismatch: {}", problems.join(", "))));
        }
        for (id, t) in wanted {
            store.get_mut(id).value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.1, f64::MIN_POSITIVE, -0.0]).unwrap())
            .unwrap();
        ck.push("a.b", Tensor::vector(vec![7.0])).unwrap();
        ck.push("s", Tensor::scalar(std::f64::consts::PI)).unwrap();
        ck
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert!(bytes.starts_with(b"MTDNNCK1a.w\t2,3\na.b\t1\ns\t\n\n"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for ((n1, t1), (n2, t2)) in ck.entries().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"MTDNNCK2\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"MTDNNCK1\n").unwrap().is_empty());
    }

    #[test]
    fn restore_lists_every_mismatch() {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros(vec![3, 2])).unwrap();
        store.add("a.z", Tensor::zeros(vec![1])).unwrap();
        let err = sample().restore(&mut store, "a.").unwrap_err().to_string();
        for name in ["a.w", "a.z", "a.b"] {
            assert!(err.contains(name), "{err}");
        }
        assert!(store.value(store.find("a.w").unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn restore_by_prefix() {
        let mut store = ParamStore::new();
        let w = store.add("a.w", Tensor::zeros(vec![2, 3])).unwrap();
        let b = store.add("a.b", Tensor::zeros(vec![1])).unwrap();
        let other = store.add("head.w", Tensor::zeros(vec![5])).unwrap();
        let mut ck = sample();
        ck.push("optim.m.a.w", Tensor::zeros(vec![2, 3])).unwrap();
        ck.restore(&mut store, "a.").unwrap();
        assert_eq!(store.value(w).data()[1], -2.5);
        assert_eq!(store.value(b).data(), [7.0]);
        assert_eq!(store.value(other).data(), [0.0; 5]);
    }

    #[test]
    fn save_is_atomic_rename() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        assert!(!dir.path().join("m.ckpt.tmp").exists());
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }
}
