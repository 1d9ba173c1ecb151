use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Ctx, Scalar, Tensor};
use crate::error::{Error, Result};

/// Leading bytes of a parameter checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MCKP1";

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar = f32> {
    pub value: Tensor<S>,
    pub grad: Vec<S>,
}

/// Named trainable tensors in deterministic (lexicographic) order, each with
/// a gradient accumulator of the same shape.
///
/// The `tag` distinguishes stores that share a tape, so that gradients land
/// in the store that owns the leaf.
#[derive(Debug, Clone)]
pub struct ParameterStore<S: Scalar = f32> {
    tag: String,
    params: BTreeMap<String, Parameter<S>>,
}

/// Parameter tensors of one store as seen by a single forward pass.
#[derive(Debug, Clone)]
pub struct Bound<S: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Bound<S> {
    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Architecture(format!("missing parameter `{name}`")))
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new(tag: impl Into<String>) -> Self {
        ParameterStore {
            tag: tag.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let value = value.detach();
        let grad = vec![S::zero(); value.len()];
        self.params.insert(name, Parameter { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Architecture(format!("missing parameter `{name}`")))
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Architecture(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set", p.value.shape(), value.shape()));
        }
        p.value = value.detach();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Binds every parameter for one forward pass. Under a recording context
    /// each parameter becomes a tagged leaf; otherwise it is a constant.
    pub fn bind(&self, ctx: &Ctx<'_, S>) -> Bound<S> {
        let tensors = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = match ctx.tape() {
                    Some(tape) => tape.param(&self.tag, name, &p.value),
                    None => p.value.clone(),
                };
                (name.clone(), t)
            })
            .collect();
        Bound { tensors }
    }

    /// Constant binding regardless of context.
    pub fn bind_frozen(&self) -> Bound<S> {
        self.bind(&Ctx::inference())
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let mut out = ParameterStore::new(self.tag.clone());
        for (name, p) in &self.params {
            out.params.insert(
                name.clone(),
                Parameter {
                    value: p.value.cast(),
                    grad: vec![T::zero(); p.value.len()],
                },
            );
        }
        out
    }

    /// Copies of the parameters whose names start with `prefix`, with the
    /// prefix stripped.
    pub fn strip_prefix(&self, prefix: &str, tag: &str) -> ParameterStore<S> {
        let mut out = ParameterStore::new(tag);
        for (name, p) in &self.params {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.params.insert(
                    rest.to_string(),
                    Parameter {
                        value: p.value.clone(),
                        grad: vec![S::zero(); p.value.len()],
                    },
                );
            }
        }
        out
    }

    /// Adds all parameters of `other` under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: &ParameterStore<S>) -> Result<()> {
        for (name, p) in &other.params {
            self.insert(format!("{prefix}{name}"), p.value.clone())?;
        }
        Ok(())
    }

    /// Serializes in checkpoint format: magic, then per parameter the name
    /// length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each) and
    /// float32 LE values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, p) in &self.params {
            let shape = p.value.shape();
            w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_of(shape.len(), "rank")?.to_le_bytes())?;
            for d in shape {
                w.write_all(&u32_of(*d, "dimension")?.to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut r: R, tag: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes, tag)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], tag: &str) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "missing MCKP1 magic".into(),
            });
        }
        let mut store = ParameterStore::new(tag);
        while cur.pos < bytes.len() {
            let name_at = cur.pos;
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format {
                    offset: name_at + 4,
                    msg: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = cur.take(count * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store
                .insert(name.clone(), Tensor::raw(shape, values))
                .map_err(|_| Error::Format {
                    offset: name_at,
                    msg: format!("duplicate parameter `{name}`"),
                })?;
        }
        Ok(store)
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
