//! Single-file checkpoint: model config, vocabulary, fingerprint and every
//! parameter tensor keyed by module path. Little-endian throughout.

use std::path::Path;

use medseg_autograd::Mat;

use crate::attribute_prior::Vocab;
use crate::model::{Model, ModelConfig};
use crate::{CoreError, Result};

const MAGIC: &[u8; 8] = b"MSEGCKP1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CoreError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CoreError::Checkpoint("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CoreError::Checkpoint("invalid UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_str(&mut out, &model.config.to_kv());
    put_str(&mut out, &model.vocab.to_tsv());
    put_str(&mut out, &model.fingerprint());
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (name, m) in model.store.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for x in m.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Rebuilds the model. The stored fingerprint must match the one of the
/// model rebuilt from the stored config.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CoreError::Checkpoint("not a checkpoint file".into()));
    }
    let config = ModelConfig::parse(&r.string()?)?;
    let vocab = Vocab::parse(&r.string()?)?;
    let found = r.string()?;
    let mut model = Model::with_vocab(config, vocab, 0)?;
    let expected = model.fingerprint();
    if found != expected {
        return Err(CoreError::Fingerprint { expected, found });
    }
    let n = r.len()?;
    if n != model.store.len() {
        return Err(CoreError::Checkpoint(format!("{n} tensors stored, the model has {}", model.store.len())));
    }
    for _ in 0..n {
        let name = r.string()?;
        let (rows, cols) = (r.len()?, r.len()?);
        let pid = model.store.pid(&name).ok_or_else(|| CoreError::Checkpoint(format!("unknown tensor '{name}'")))?;
        let slot = model.store.get_mut(pid);
        if slot.dim() != (rows, cols) {
            return Err(CoreError::Checkpoint(format!("tensor '{name}' is {rows}x{cols}, expected {:?}", slot.dim())));
        }
        let raw = r.take(rows * cols * 8)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        *slot = Mat::from_shape_vec((rows, cols), values).expect("shape checked");
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(model)).map_err(|e| CoreError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path).map_err(|e| CoreError::io(path, e))?)
}

/// Loads and requires the architecture of `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load(path)?;
    let want = Model::new(expected.clone(), 0)?.fingerprint();
    let found = model.fingerprint();
    if want != found {
        return Err(CoreError::Fingerprint { expected: want, found });
    }
    Ok(model)
}
