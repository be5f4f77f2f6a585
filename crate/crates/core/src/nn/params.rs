use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NnError, Tensor};

pub const PARAM_MAGIC: &[u8; 5] = b"USGW1";

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters with same-shaped gradient slots, kept in insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    seed: Option<u64>,
}

/// FNV-1a, used to give every parameter its own RNG stream.
fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..Self::default()
        }
    }

    /// Seed used at initialization; `None` for stores decoded from bytes.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Adds a parameter drawn from U(-bound, bound) where `bound = sqrt(1 / fan_in)`.
    ///
    /// The draw depends only on the store seed and the parameter name, so
    /// adding or removing other parameters does not shift this one.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<(), NnError> {
        let seed = self
            .seed
            .ok_or_else(|| NnError::State("cannot initialize into a store without a seed".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(name_stream(name));
        let bound = (1.0 / fan_in.max(1) as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::State(format!("duplicate parameter {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param, NnError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, NnError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(NnError::MissingParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Copies values (not gradients) of every parameter whose name starts with `prefix`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, NnError> {
        let mut copied = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other.get(&p.name)?;
            if src.value.shape() != p.value.shape() {
                return Err(NnError::Shape(format!(
                    "{}: {:?} vs {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(PARAM_MAGIC)?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u64).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.shape().len() as u64).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decodes a store written by [`ParamStore::write_to`]; records run to end of input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| NnError::Format("truncated magic".into()))?;
        if &magic != PARAM_MAGIC {
            return Err(NnError::Format("bad parameter magic".into()));
        }
        let mut store = ParamStore::default();
        while !r.is_empty() {
            let name_len = read_u64(&mut r)? as usize;
            if name_len > r.len() {
                return Err(NnError::Format("truncated parameter name".into()));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            r = &r[name_len..];
            let rank = read_u64(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(NnError::Format(format!("{name}: unsupported rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| NnError::Format(format!("{name}: truncated payload")))?;
            let data = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[4 * n..];
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }
}

fn read_u64(r: &mut &[u8]) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| NnError::Format("truncated record header".into()))?;
    Ok(u64::from_le_bytes(b))
}
