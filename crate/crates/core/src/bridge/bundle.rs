//! Condition container for an external image generator.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! neuralign-conditions 1\n
//! count <N>\n
//! image_dim <d>\n
//! prompt_tokens <Q>\n
//! prompt_dim <P>\n
//! pool_dim <K>\n
//! alignment <hex sha-256>\n
//! prior <hex sha-256>\n
//! qformer <hex sha-256>\n
//! end\n
//! N records of:
//!   u32 byte length of the subject id, then its UTF-8 bytes
//!   i64 image id
//!   d f32    image embedding
//!   Q·P f32  prompt embeddings, row-major
//!   K f32    pooled prompt embedding
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::params::write_atomic;

pub const CONDITIONS_MAGIC: &str = "neuralign-conditions 1";

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub subject_id: String,
    pub image_id: i64,
    pub image_embedding: Array1<f32>,
    pub prompt_embeddings: Array2<f32>,
    pub pooled_prompt_embedding: Array1<f32>,
}

/// Bundles plus the fingerprints of the models that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionFile {
    pub image_dim: usize,
    pub prompt_tokens: usize,
    pub prompt_dim: usize,
    pub pool_dim: usize,
    pub alignment_fingerprint: String,
    pub prior_fingerprint: String,
    pub qformer_fingerprint: String,
    pub bundles: Vec<ConditionBundle>,
}

impl ConditionFile {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.bundles.iter().enumerate() {
            if b.image_embedding.len() != self.image_dim
                || b.prompt_embeddings.dim() != (self.prompt_tokens, self.prompt_dim)
                || b.pooled_prompt_embedding.len() != self.pool_dim
            {
                return Err(Error::Shape(format!("bundle {i} does not match the declared shapes")));
            }
            let finite = b.image_embedding.iter().all(|v| v.is_finite())
                && b.prompt_embeddings.iter().all(|v| v.is_finite())
                && b.pooled_prompt_embedding.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Shape(format!("bundle {i} has non-finite values")));
            }
        }
        for fp in [&self.alignment_fingerprint, &self.prior_fingerprint, &self.qformer_fingerprint] {
            if fp.is_empty() || fp.contains(char::is_whitespace) {
                return Err(Error::Format(format!("bad fingerprint {fp:?}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = format!(
            "{CONDITIONS_MAGIC}\ncount {}\nimage_dim {}\nprompt_tokens {}\nprompt_dim {}\npool_dim {}\nalignment {}\nprior {}\nqformer {}\nend\n",
            self.bundles.len(),
            self.image_dim,
            self.prompt_tokens,
            self.prompt_dim,
            self.pool_dim,
            self.alignment_fingerprint,
            self.prior_fingerprint,
            self.qformer_fingerprint
        )
        .into_bytes();
        for b in &self.bundles {
            out.extend((b.subject_id.len() as u32).to_le_bytes());
            out.extend(b.subject_id.as_bytes());
            out.extend(b.image_id.to_le_bytes());
            for v in b
                .image_embedding
                .iter()
                .chain(b.prompt_embeddings.iter())
                .chain(b.pooled_prompt_embedding.iter())
            {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("condition file: {m}"));
        let mut pos = 0usize;
        let mut line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let n = rest.iter().position(|&c| c == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += n + 1;
            std::str::from_utf8(&rest[..n]).map_err(|_| bad("header is not UTF-8"))
        };
        if line()? != CONDITIONS_MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut field = |key: &str| -> Result<String> {
            let l = line()?;
            l.strip_prefix(key)
                .and_then(|v| v.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {key}")))
        };
        let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad number"));
        let count = num(field("count")?)?;
        let image_dim = num(field("image_dim")?)?;
        let prompt_tokens = num(field("prompt_tokens")?)?;
        let prompt_dim = num(field("prompt_dim")?)?;
        let pool_dim = num(field("pool_dim")?)?;
        let alignment_fingerprint = field("alignment")?;
        let prior_fingerprint = field("prior")?;
        let qformer_fingerprint = field("qformer")?;
        if line()? != "end" {
            return Err(bad("expected end"));
        }

        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated payload"))?;
            pos += n;
            Ok(s)
        };
        let mut bundles = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let subject_id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("subject id is not UTF-8"))?;
            let image_id = i64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let mut read = |n: usize| -> Result<Vec<f32>> {
                Ok(take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect())
            };
            let image_embedding = Array1::from(read(image_dim)?);
            let prompt_embeddings = Array2::from_shape_vec((prompt_tokens, prompt_dim), read(prompt_tokens * prompt_dim)?)
                .map_err(|_| bad("prompt shape"))?;
            let pooled_prompt_embedding = Array1::from(read(pool_dim)?);
            bundles.push(ConditionBundle {
                subject_id,
                image_id,
                image_embedding,
                prompt_embeddings,
                pooled_prompt_embedding,
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let f = Self {
            image_dim,
            prompt_tokens,
            prompt_dim,
            pool_dim,
            alignment_fingerprint,
            prior_fingerprint,
            qformer_fingerprint,
            bundles,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::load(path, e))
    }
}
