//! Named trainable parameters and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"JSLU"            4 bytes
//! version u32                currently 1
//! repeat until EOF, parameters sorted by name:
//!   name_len u32, name bytes (UTF-8)
//!   rank u32, rank x u64 dims
//!   product(dims) x f64 payload
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JSLU";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters; iteration follows registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            grad: Tensor::zeros(value.shape()),
            value: Arc::new(value),
            name,
            trainable: true,
        });
        Ok(id)
    }

    /// Matrix initialised uniform in ±1/sqrt(fan_in).
    pub fn register_matrix<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access to a parameter's values; clones if a tape still
    /// shares the buffer.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect()
    }

    /// Overwrites values from a name map; every registered name must be
    /// present with a matching shape.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let t = named
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = Arc::new(t.clone());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.to_named())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let named = load_tensors(path)?;
        self.load_named(&named)
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = BTreeMap::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let bytes = cur.take(len * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let f = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(f))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.register("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn checkpoint_layout_is_exact() {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &m).unwrap();
        let mut expect = b"JSLU".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(b'w');
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.5f64.to_le_bytes());
        expect.extend((-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(read_tensors(&bytes[..]).unwrap(), m);
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.register_matrix("m", 3, 2, &mut rng).unwrap();
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &s.to_named()).unwrap();
        bytes.pop();
        assert!(read_tensors(&bytes[..]).is_err());
    }

    #[test]
    fn init_bound_respected() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let id = s.register_matrix("m", 16, 8, &mut rng).unwrap();
        assert!(s.value(id).data().iter().all(|v| v.abs() <= 0.25));
    }
}
