//! Frozen embedding providers and the batches they produce.
//!
//! Providers are looked up by key: images by `image_ref`, texts by the text
//! itself. Real encoders plug in by exporting their outputs to the table
//! format below; [`HashProvider`] and the synthetic oracle tables keep tests
//! hermetic.
//!
//! Table file (UTF-8):
//!
//! ```text
//! neuralign-embeddings 1
//! kind = image | text | prompt
//! dim = <d>                      image/text tables
//! tokens = <n>                   prompt tables: n × prompt_dim token matrix
//! prompt_dim = <p>               followed by a pool_dim pooled vector
//! pool_dim = <q>
//! end
//! <key>\t<v1> <v2> ...           one row per key; \t \n \\ escaped in keys
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{StimulusRecord, SyntheticDataset};
use crate::error::{Error, Result};
use crate::params::{seeded_rng, write_atomic};

const TABLE_MAGIC: &str = "neuralign-embeddings 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    NeuralVisual,
    NeuralSemantic,
    Image,
    CoarseText,
    FineText,
}

/// `B × d` embeddings tagged with their modality and image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub data: Array2<f64>,
    pub modality: Modality,
    pub ids: Vec<i64>,
}

impl EmbeddingBatch {
    pub fn new(data: Array2<f64>, modality: Modality, ids: Vec<i64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Shape("embedding batch is empty".into()));
        }
        if ids.len() != data.nrows() {
            return Err(Error::Shape(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite {modality:?} embedding")));
        }
        Ok(Self { data, modality, ids })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Frozen map from a key (image reference or text) to a vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn fingerprint(&self) -> String;
    fn embed(&self, key: &str) -> Result<Vec<f64>>;
}

/// Frozen map from a prompt to token embeddings plus a pooled vector.
pub trait PromptProvider: Send + Sync {
    fn tokens(&self) -> usize;
    fn prompt_dim(&self) -> usize;
    fn pool_dim(&self) -> usize;
    fn fingerprint(&self) -> String;
    fn embed_prompt(&self, text: &str) -> Result<(Array2<f64>, Array1<f64>)>;
}

/// Deterministic pseudo-random unit vectors seeded by a hash of the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashProvider {
    pub dim: usize,
    pub salt: String,
}

impl HashProvider {
    pub fn new(dim: usize, salt: impl Into<String>) -> Self {
        Self { dim, salt: salt.into() }
    }
}

impl EmbeddingProvider for HashProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        crate::params::sha256_hex(format!("hash-provider/{}/{}", self.dim, self.salt).as_bytes())
    }

    fn embed(&self, key: &str) -> Result<Vec<f64>> {
        let digest = Sha256::digest(format!("{}\0{key}", self.salt).as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = seeded_rng(seed, 0);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| x / n).collect())
    }
}

fn escape_key(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape_key(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TableKind {
    Image,
    Text,
    Prompt,
}

impl TableKind {
    fn as_str(self) -> &'static str {
        match self {
            TableKind::Image => "image",
            TableKind::Text => "text",
            TableKind::Prompt => "prompt",
        }
    }
}

struct RawTable {
    kind: TableKind,
    header: BTreeMap<String, usize>,
    rows: BTreeMap<String, Vec<f64>>,
}

fn render_table(kind: TableKind, header: &[(&str, usize)], rows: &BTreeMap<String, Vec<f64>>) -> String {
    let mut s = format!("{TABLE_MAGIC}\nkind = {}\n", kind.as_str());
    for (k, v) in header {
        writeln!(s, "{k} = {v}").unwrap();
    }
    s.push_str("end\n");
    for (key, vals) in rows {
        s.push_str(&escape_key(key));
        s.push('\t');
        let parts: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&parts.join(" "));
        s.push('\n');
    }
    s
}

fn parse_table(path: &Path) -> Result<RawTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TABLE_MAGIC) {
        return Err(Error::Format(format!("{} is not an embedding table", path.display())));
    }
    let mut kind = None;
    let mut header = BTreeMap::new();
    for line in lines.by_ref() {
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("bad table header line {line:?}")))?;
        if k == "kind" {
            kind = Some(match v {
                "image" => TableKind::Image,
                "text" => TableKind::Text,
                "prompt" => TableKind::Prompt,
                other => return Err(Error::Format(format!("unknown table kind {other:?}"))),
            });
        } else {
            let n = v
                .parse()
                .map_err(|_| Error::Format(format!("bad table header value {line:?}")))?;
            header.insert(k.to_string(), n);
        }
    }
    let kind = kind.ok_or_else(|| Error::Format("embedding table lacks kind".into()))?;
    let mut rows = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (key, vals) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Format(format!("bad table row in {}", path.display())))?;
        let vals = vals
            .split(' ')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("bad number in {}: {e}", path.display())))?;
        rows.insert(unescape_key(key), vals);
    }
    Ok(RawTable { kind, header, rows })
}

fn header_value(t: &RawTable, key: &str) -> Result<usize> {
    t.header
        .get(key)
        .copied()
        .ok_or_else(|| Error::Format(format!("embedding table lacks {key}")))
}

fn rows_fingerprint(tag: &str, rows: &BTreeMap<String, Vec<f64>>) -> String {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for (k, v) in rows {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Image or text vectors read from a table file.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable {
    pub is_image: bool,
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl VectorTable {
    pub fn new(is_image: bool, dim: usize) -> Self {
        Self {
            is_image,
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f64>) {
        debug_assert_eq!(v.len(), self.dim);
        self.rows.insert(key.into(), v);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let kind = if self.is_image { TableKind::Image } else { TableKind::Text };
        write_atomic(path, render_table(kind, &[("dim", self.dim)], &self.rows).as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = parse_table(path)?;
        let is_image = match raw.kind {
            TableKind::Image => true,
            TableKind::Text => false,
            TableKind::Prompt => {
                return Err(Error::Format(format!("{} holds prompt embeddings", path.display())))
            }
        };
        let dim = header_value(&raw, "dim")?;
        if let Some((k, _)) = raw.rows.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Format(format!("row {k:?} does not have {dim} values")));
        }
        Ok(Self {
            is_image,
            dim,
            rows: raw.rows,
        })
    }
}

impl EmbeddingProvider for VectorTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        rows_fingerprint(if self.is_image { "image" } else { "text" }, &self.rows)
    }

    fn embed(&self, key: &str) -> Result<Vec<f64>> {
        self.rows.get(key).cloned().ok_or_else(|| Error::Provider {
            stimulus: key.to_string(),
            reason: "key not present in embedding table".into(),
        })
    }
}

/// Prompt token and pooled embeddings read from a table file.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    pub tokens: usize,
    pub prompt_dim: usize,
    pub pool_dim: usize,
    /// Row-major token matrix followed by the pooled vector.
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl PromptTable {
    pub fn new(tokens: usize, prompt_dim: usize, pool_dim: usize) -> Self {
        Self {
            tokens,
            prompt_dim,
            pool_dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, tokens: &Array2<f64>, pooled: &Array1<f64>) {
        let mut v: Vec<f64> = tokens.iter().copied().collect();
        v.extend(pooled.iter().copied());
        self.rows.insert(key.into(), v);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = [
            ("tokens", self.tokens),
            ("prompt_dim", self.prompt_dim),
            ("pool_dim", self.pool_dim),
        ];
        write_atomic(path, render_table(TableKind::Prompt, &header, &self.rows).as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = parse_table(path)?;
        if raw.kind != TableKind::Prompt {
            return Err(Error::Format(format!("{} is not a prompt table", path.display())));
        }
        let t = Self {
            tokens: header_value(&raw, "tokens")?,
            prompt_dim: header_value(&raw, "prompt_dim")?,
            pool_dim: header_value(&raw, "pool_dim")?,
            rows: raw.rows,
        };
        let n = t.tokens * t.prompt_dim + t.pool_dim;
        if let Some((k, _)) = t.rows.iter().find(|(_, v)| v.len() != n) {
            return Err(Error::Format(format!("prompt row {k:?} does not have {n} values")));
        }
        Ok(t)
    }
}

impl PromptProvider for PromptTable {
    fn tokens(&self) -> usize {
        self.tokens
    }

    fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    fn pool_dim(&self) -> usize {
        self.pool_dim
    }

    fn fingerprint(&self) -> String {
        rows_fingerprint("prompt", &self.rows)
    }

    fn embed_prompt(&self, text: &str) -> Result<(Array2<f64>, Array1<f64>)> {
        let v = self.rows.get(text).ok_or_else(|| Error::Provider {
            stimulus: text.to_string(),
            reason: "prompt not present in embedding table".into(),
        })?;
        let split = self.tokens * self.prompt_dim;
        let tokens = Array2::from_shape_vec((self.tokens, self.prompt_dim), v[..split].to_vec())
            .expect("validated on load");
        Ok((tokens, Array1::from(v[split..].to_vec())))
    }
}

/// The frozen providers of one run.
#[derive(Clone)]
pub struct Providers {
    pub image: Arc<dyn EmbeddingProvider>,
    pub text: Arc<dyn EmbeddingProvider>,
    pub prompt: Option<Arc<dyn PromptProvider>>,
}

impl Providers {
    pub fn dim(&self) -> usize {
        self.image.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.text.dim() {
            return Err(Error::Config(format!(
                "image provider has dimension {}, text provider {}",
                self.image.dim(),
                self.text.dim()
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut s = format!("{}:{}", self.image.fingerprint(), self.text.fingerprint());
        if let Some(p) = &self.prompt {
            s.push(':');
            s.push_str(&p.fingerprint());
        }
        crate::params::sha256_hex(s.as_bytes())
    }

    /// Loads `image.tsv`, `text.tsv` and, when present, `prompt.tsv`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let image = VectorTable::read(&dir.join("image.tsv"))?;
        let text = VectorTable::read(&dir.join("text.tsv"))?;
        let prompt_path = dir.join("prompt.tsv");
        let prompt: Option<Arc<dyn PromptProvider>> = if prompt_path.exists() {
            Some(Arc::new(PromptTable::read(&prompt_path)?))
        } else {
            None
        };
        let p = Self {
            image: Arc::new(image),
            text: Arc::new(text),
            prompt,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn hashed(dim: usize, salt: &str) -> Self {
        Self {
            image: Arc::new(HashProvider::new(dim, format!("{salt}/image"))),
            text: Arc::new(HashProvider::new(dim, format!("{salt}/text"))),
            prompt: None,
        }
    }
}

/// Provider outputs for every stimulus of a catalog, row `i` ↔ `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEmbeddings {
    pub ids: Vec<i64>,
    pub category_ids: Vec<i64>,
    pub image: Array2<f64>,
    pub coarse: Array2<f64>,
    pub fine: Array2<f64>,
    index: BTreeMap<i64, usize>,
}

fn provider_row(p: &dyn EmbeddingProvider, key: &str, rec: &StimulusRecord, what: &str) -> Result<Vec<f64>> {
    let v = p.embed(key).map_err(|e| match e {
        Error::Provider { reason, .. } => Error::Provider {
            stimulus: format!("image {} ({what})", rec.image_id),
            reason,
        },
        other => other,
    })?;
    if v.len() != p.dim() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Provider {
            stimulus: format!("image {} ({what})", rec.image_id),
            reason: "wrong length or non-finite values".into(),
        });
    }
    Ok(v)
}

impl CatalogEmbeddings {
    pub fn build(catalog: &[StimulusRecord], providers: &Providers) -> Result<Self> {
        providers.validate()?;
        let d = providers.dim();
        let n = catalog.len();
        let mut out = Self {
            ids: Vec::with_capacity(n),
            category_ids: Vec::with_capacity(n),
            image: Array2::zeros((n, d)),
            coarse: Array2::zeros((n, d)),
            fine: Array2::zeros((n, d)),
            index: BTreeMap::new(),
        };
        for (i, rec) in catalog.iter().enumerate() {
            let img = provider_row(providers.image.as_ref(), &rec.image_ref, rec, "image")?;
            let coarse = provider_row(providers.text.as_ref(), &rec.coarse_text, rec, "coarse text")?;
            let fine = provider_row(providers.text.as_ref(), &rec.fine_text, rec, "fine text")?;
            out.image.row_mut(i).assign(&Array1::from(img));
            out.coarse.row_mut(i).assign(&Array1::from(coarse));
            out.fine.row_mut(i).assign(&Array1::from(fine));
            out.ids.push(rec.image_id);
            out.category_ids.push(rec.category_id);
            out.index.insert(rec.image_id, i);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.image.ncols()
    }

    pub fn row_of(&self, image_id: i64) -> Option<usize> {
        self.index.get(&image_id).copied()
    }

    /// Rows for `image_ids`, in order: `(z_v, z_c, z_t)`.
    pub fn gather(&self, image_ids: &[i64]) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let rows = image_ids
            .iter()
            .map(|id| {
                self.row_of(*id)
                    .ok_or_else(|| Error::Protocol(format!("no embedding for image {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = |m: &Array2<f64>| m.select(ndarray::Axis(0), &rows);
        Ok((pick(&self.image), pick(&self.coarse), pick(&self.fine)))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.to_le_bytes());
        }
        for m in [&self.image, &self.coarse, &self.fine] {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Ground-truth provider tables for a synthetic dataset: images map to their
/// latents, coarse texts to category latents, fine texts to fine latents and
/// fused prompts to the oracle token and pooled embeddings.
pub fn oracle_tables(ds: &SyntheticDataset) -> (VectorTable, VectorTable, PromptTable) {
    let o = &ds.oracle;
    let d = o.temporal.nrows();
    let mut image = VectorTable::new(true, d);
    let mut text = VectorTable::new(false, d);
    let (tokens, pdim) = o
        .prompt_tokens
        .values()
        .next()
        .map(|t| t.dim())
        .unwrap_or((0, 0));
    let pool = o.pooled_prompts.values().next().map(|p| p.len()).unwrap_or(0);
    let mut prompt = PromptTable::new(tokens, pdim, pool);
    for rec in ds.train.catalog.iter().chain(ds.test.catalog.iter()) {
        image.insert(rec.image_ref.clone(), o.image_latents[&rec.image_id].to_vec());
        text.insert(rec.coarse_text.clone(), o.category_latents[&rec.category_id].to_vec());
        text.insert(rec.fine_text.clone(), o.fine_latents[&rec.image_id].to_vec());
        prompt.insert(
            rec.fused_prompt(),
            &o.prompt_tokens[&rec.image_id],
            &o.pooled_prompts[&rec.image_id],
        );
    }
    (image, text, prompt)
}

/// Writes [`oracle_tables`] into `dir` in the layout read by
/// [`Providers::from_dir`].
pub fn write_oracle_tables(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    let (image, text, prompt) = oracle_tables(ds);
    image.write(&dir.join("image.tsv"))?;
    text.write(&dir.join("text.tsv"))?;
    prompt.write(&dir.join("prompt.tsv"))
}

pub fn oracle_providers(ds: &SyntheticDataset) -> Providers {
    let (image, text, prompt) = oracle_tables(ds);
    Providers {
        image: Arc::new(image),
        text: Arc::new(text),
        prompt: Some(Arc::new(prompt)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn hash_provider_is_deterministic_unit() {
        let p = HashProvider::new(8, "x");
        let a = p.embed("hello").unwrap();
        assert_eq!(a, p.embed("hello").unwrap());
        assert_ne!(a, p.embed("hello!").unwrap());
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_rejects_nan_and_empty() {
        let bad = Array2::from_elem((1, 2), f64::NAN);
        assert!(EmbeddingBatch::new(bad, Modality::Image, vec![0]).is_err());
        assert!(EmbeddingBatch::new(Array2::zeros((0, 2)), Modality::Image, vec![]).is_err());
    }

    #[test]
    fn tables_round_trip_bit_exactly() {
        let spec = SyntheticSpec {
            n_categories: 2,
            n_test_categories: 1,
            images_per_category: 2,
            channels: 3,
            samples: 10,
            embed_dim: 4,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_oracle_tables(&ds, dir.path()).unwrap();
        let (image, text, prompt) = oracle_tables(&ds);
        assert_eq!(VectorTable::read(&dir.path().join("image.tsv")).unwrap(), image);
        assert_eq!(VectorTable::read(&dir.path().join("text.tsv")).unwrap(), text);
        assert_eq!(PromptTable::read(&dir.path().join("prompt.tsv")).unwrap(), prompt);
        let loaded = Providers::from_dir(dir.path()).unwrap();
        assert_eq!(loaded.fingerprint(), oracle_providers(&ds).fingerprint());
    }

    #[test]
    fn missing_key_names_the_stimulus() {
        let rec = StimulusRecord {
            image_id: 42,
            category_id: 1,
            image_ref: "nowhere.png".into(),
            coarse_text: "c".into(),
            fine_text: "f".into(),
        };
        let providers = Providers {
            image: Arc::new(VectorTable::new(true, 2)),
            text: Arc::new(VectorTable::new(false, 2)),
            prompt: None,
        };
        match CatalogEmbeddings::build(&[rec], &providers) {
            Err(Error::Provider { stimulus, .. }) => assert!(stimulus.contains("42")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
