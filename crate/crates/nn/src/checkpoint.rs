//! Binary checkpoints: header, model config text, training iteration, RNG
//! state and a named table of parameter values with optimizer velocities.
//! All integers and floats are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::param::Module;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SCNNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub velocity: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form key-value text (model and training configuration).
    pub config: String,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture(config: String, iteration: u64, rng: &ChaCha8Rng, model: &dyn Module) -> Self {
        let mut tensors = Vec::new();
        model.visit_ref(&mut |p| {
            tensors.push(TensorRecord {
                name: p.name.clone(),
                shape: p.shape.clone(),
                value: p.value.clone(),
                velocity: p.velocity.clone(),
            })
        });
        Self { config, iteration, rng: rng.clone(), tensors }
    }

    /// Copies values and velocities into `model`, which must have the same
    /// parameter names and shapes in the same order.
    pub fn restore(&self, model: &mut dyn Module) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        model.visit(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(i) {
                Some(t) if t.name == p.name && t.shape == p.shape => {
                    p.value.copy_from_slice(&t.value);
                    p.velocity.copy_from_slice(&t.velocity);
                    p.zero_grad();
                }
                Some(t) => {
                    err = Some(format!("tensor {i}: checkpoint has {} {:?}, model has {} {:?}", t.name, t.shape, p.name, p.shape))
                }
                None => err = Some(format!("checkpoint lacks tensor {}", p.name)),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if i != self.tensors.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model {i}", self.tensors.len())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.config);
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&self.rng.get_seed());
        b.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut b, &t.name);
            b.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.value.iter().chain(&t.velocity) {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = get_str(&mut r)?;
        let iteration = u64::from_le_bytes(take(&mut r)?);
        let seed: [u8; 32] = take(&mut r)?;
        let stream = u64::from_le_bytes(take(&mut r)?);
        let word_pos = u128::from_le_bytes(take(&mut r)?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let count = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rank = u32::from_le_bytes(take(&mut r)?) as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(take(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::Checkpoint(format!("tensor {name} truncated")));
            }
            let mut floats = |n| (0..n).map(|_| Ok(f32::from_le_bytes(take(&mut r)?))).collect::<Result<Vec<_>>>();
            let value = floats(n)?;
            let velocity = floats(n)?;
            tensors.push(TensorRecord { name, shape, value, velocity });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { config, iteration, rng, tensors })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn read(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read(r, &mut buf)?;
    Ok(buf)
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = u32::from_le_bytes(take(r)?) as usize;
    if n > r.len() {
        return Err(Error::Checkpoint("truncated string".into()));
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frrn::{Frrn, FrrnConfig};
    use rand::RngCore;

    #[test]
    fn round_trip_preserves_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Frrn::new(FrrnConfig::tiny(2), &mut rng).unwrap();
        rng.next_u64();
        let ck = Checkpoint::capture(net.config.to_text(), 17, &rng, &net);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.rng.clone().next_u64(), rng.clone().next_u64());

        let mut other = Frrn::new(FrrnConfig::tiny(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        back.restore(&mut other).unwrap();
        assert_eq!(Checkpoint::capture(String::new(), 0, &rng, &other).tensors, ck.tensors);

        let mut wrong = Frrn::new(FrrnConfig::tiny(3), &mut rng).unwrap();
        assert!(back.restore(&mut wrong).is_err());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
