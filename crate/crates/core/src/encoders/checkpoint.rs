//! `PRPT` parameter files.
//!
//! ```text
//! "PRPT" | version u32 | tag len u32 | tag bytes | tensor count u32
//! per tensor: name len u32 | name | ndim u32 | dims u32 * ndim | f32 * prod(dims)
//! ```
//! All integers and floats little-endian. Values are stored at 32-bit
//! precision, so a write/read cycle rounds parameters to the nearest `f32`
//! and every later cycle is bit-exact.

use std::path::Path;

use robustsim_autodiff::Tensor;

use super::{Architecture, EncoderParams, NamedTensor, PromptTable};
use crate::binio::{put_f32s, put_str, put_u32, Reader};
use crate::error::{contract, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PRPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PROMPT_TAG: &str = "prompts";
const MAX_NDIM: u32 = 8;

/// Tagged list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.tag);
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.tensor.ndim() as u32);
            for &d in t.tensor.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.tensor.data().iter().copied());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected PRPT".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let tag = r.string("architecture tag")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let ndim = r.u32("ndim")?;
            if ndim > MAX_NDIM {
                return r.fail(format!("{name}: {ndim} axes"));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut n = 1usize;
            for _ in 0..ndim {
                let d = r.u32("dimension")? as usize;
                n = n.checked_mul(d).ok_or_else(|| Error::Format {
                    offset: r.offset(),
                    reason: format!("{name}: element count overflows"),
                })?;
                shape.push(d);
            }
            let values = r.f32s(n, &name)?;
            let tensor = Tensor::new(shape, values.into_iter().map(f64::from).collect())?;
            tensors.push(NamedTensor { name, tensor });
        }
        r.finish()?;
        Ok(Self { tag, tensors })
    }

    pub fn from_encoder(params: &EncoderParams) -> Self {
        Self {
            tag: params.arch().tag().to_string(),
            tensors: params.params().to_vec(),
        }
    }

    pub fn from_prompts(table: &PromptTable) -> Self {
        Self {
            tag: PROMPT_TAG.to_string(),
            tensors: vec![NamedTensor {
                name: "table".into(),
                tensor: table.tensor().clone(),
            }],
        }
    }

    pub fn into_encoder(self) -> Result<EncoderParams> {
        let arch: Architecture = self.tag.parse()?;
        EncoderParams::from_tensors(arch, self.tensors)
    }

    pub fn into_prompts(self) -> Result<PromptTable> {
        if self.tag != PROMPT_TAG || self.tensors.len() != 1 {
            return contract(format!("checkpoint tagged {:?} is not a prompt table", self.tag));
        }
        PromptTable::from_tensor(self.tensors.into_iter().next().expect("one").tensor)
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
