//! On-disk trial sets.
//!
//! A split directory holds:
//!
//! * `meta.txt`: `key = value` lines with `format`, `split`, `sample_rate_hz`,
//!   `start_ms`, `samples`, `channels` (comma separated) and `subjects`.
//! * `catalog.tsv`: header `image_id  category_id  image_ref  coarse_text
//!   fine_text`, one stimulus per line. Tabs, newlines and backslashes inside
//!   fields are written as `\t`, `\n` and `\\`.
//! * `<subject>.trials`, little-endian: magic `NTRIALS\0`, `u32` version (1),
//!   `u32` n, `u32` C, `u32` T, `i64[n]` category ids, `i64[n]` image ids,
//!   `u32[n]` repetitions, then `f32[n·C·T]` signals in `[n, C, T]` order.
//!
//! A dataset root holds `train/` and `test/` split directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use super::{check_zero_shot, NeuralTrial, Split, StimulusRecord, TrialSet};
use crate::error::{Error, Result};
use crate::params::write_atomic;

const TRIALS_MAGIC: &[u8; 8] = b"NTRIALS\0";
const TRIALS_VERSION: u32 = 1;
const META_FORMAT: &str = "neuralign-trialset 1";
const CATALOG_HEADER: &str = "image_id\tcategory_id\timage_ref\tcoarse_text\tfine_text";

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn write_trialset(ts: &TrialSet, dir: &Path) -> Result<()> {
    ts.validate()?;
    std::fs::create_dir_all(dir)?;
    let subjects = ts.subjects();
    for s in &subjects {
        if s.is_empty() || s.contains(['/', '\\', ',', '\n']) {
            return Err(Error::Format(format!("subject id {s:?} is not usable as a file name")));
        }
    }
    let mut meta = String::new();
    writeln!(meta, "format = {META_FORMAT}").unwrap();
    writeln!(meta, "split = {}", ts.split.as_str()).unwrap();
    writeln!(meta, "sample_rate_hz = {}", ts.sample_rate_hz).unwrap();
    writeln!(meta, "start_ms = {}", ts.start_ms).unwrap();
    writeln!(meta, "samples = {}", ts.samples).unwrap();
    writeln!(meta, "channels = {}", ts.channel_names.join(",")).unwrap();
    writeln!(meta, "subjects = {}", subjects.join(",")).unwrap();
    write_atomic(&dir.join("meta.txt"), meta.as_bytes())?;

    let mut cat = format!("{CATALOG_HEADER}\n");
    for r in &ts.catalog {
        writeln!(
            cat,
            "{}\t{}\t{}\t{}\t{}",
            r.image_id,
            r.category_id,
            escape(&r.image_ref),
            escape(&r.coarse_text),
            escape(&r.fine_text)
        )
        .unwrap();
    }
    write_atomic(&dir.join("catalog.tsv"), cat.as_bytes())?;

    for s in &subjects {
        let trials: Vec<&NeuralTrial> = ts.trials.iter().filter(|t| &t.subject_id == s).collect();
        let mut buf = Vec::new();
        buf.extend_from_slice(TRIALS_MAGIC);
        for v in [TRIALS_VERSION, trials.len() as u32, ts.channels() as u32, ts.samples as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in &trials {
            buf.extend_from_slice(&t.category_id.to_le_bytes());
        }
        for t in &trials {
            buf.extend_from_slice(&t.image_id.to_le_bytes());
        }
        for t in &trials {
            buf.extend_from_slice(&t.repetition.to_le_bytes());
        }
        for t in &trials {
            for v in t.signal.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(&dir.join(format!("{s}.trials")), &buf)?;
    }
    Ok(())
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_field<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Format(format!("metadata lacks {key}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("cannot parse {what} from {s:?}")))
}

fn read_catalog(path: &Path) -> Result<Vec<StimulusRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(CATALOG_HEADER) {
        return Err(Error::Format(format!("{} has an unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("catalog row has {} columns: {line:?}", cols.len())));
        }
        out.push(StimulusRecord {
            image_id: parse_num(cols[0], "image_id")?,
            category_id: parse_num(cols[1], "category_id")?,
            image_ref: unescape(cols[2]),
            coarse_text: unescape(cols[3]),
            fine_text: unescape(cols[4]),
        });
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!("{} is truncated", self.path.display())));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[allow(clippy::too_many_arguments)]
fn read_subject(
    path: &Path,
    subject: &str,
    channels: usize,
    samples: usize,
    rate: f64,
    start_ms: f64,
    out: &mut Vec<NeuralTrial>,
) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(8)? != TRIALS_MAGIC {
        return Err(Error::Format(format!("{} is not a trials file", path.display())));
    }
    let version = cur.u32()?;
    if version != TRIALS_VERSION {
        return Err(Error::Format(format!("unsupported trials version {version}")));
    }
    let n = cur.u32()? as usize;
    let (c, t) = (cur.u32()? as usize, cur.u32()? as usize);
    if (c, t) != (channels, samples) {
        return Err(Error::Format(format!(
            "{} holds {c}×{t} trials, metadata declares {channels}×{samples}",
            path.display()
        )));
    }
    let cats = (0..n).map(|_| cur.i64()).collect::<Result<Vec<_>>>()?;
    let imgs = (0..n).map(|_| cur.i64()).collect::<Result<Vec<_>>>()?;
    let reps = (0..n).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    for i in 0..n {
        let raw = cur.take(4 * c * t)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(NeuralTrial {
            signal: Array2::from_shape_vec((c, t), data).expect("sized above"),
            subject_id: subject.to_string(),
            category_id: cats[i],
            image_id: imgs[i],
            repetition: reps[i],
            sample_rate_hz: rate,
            start_ms,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("trailing bytes in {}", path.display())));
    }
    Ok(())
}

/// Loads one split directory; `split` must match the directory's metadata.
pub fn load_trialset(dir: &Path, split: Split) -> Result<TrialSet> {
    if !dir.is_dir() {
        return Err(Error::load(dir, "not a directory"));
    }
    let meta = read_meta(&dir.join("meta.txt"))?;
    if meta_field(&meta, "format")? != META_FORMAT {
        return Err(Error::Format(format!("unknown trialset format in {}", dir.display())));
    }
    let declared: Split = meta_field(&meta, "split")?.parse()?;
    if declared != split {
        return Err(Error::Format(format!(
            "{} is a {} split, {} requested",
            dir.display(),
            declared.as_str(),
            split.as_str()
        )));
    }
    let rate: f64 = parse_num(meta_field(&meta, "sample_rate_hz")?, "sample_rate_hz")?;
    let start_ms: f64 = parse_num(meta_field(&meta, "start_ms")?, "start_ms")?;
    let samples: usize = parse_num(meta_field(&meta, "samples")?, "samples")?;
    let channels: Vec<String> = meta_field(&meta, "channels")?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let subjects: Vec<String> = meta_field(&meta, "subjects")?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let catalog = read_catalog(&dir.join("catalog.tsv"))?;
    let mut trials = Vec::new();
    for s in &subjects {
        read_subject(
            &dir.join(format!("{s}.trials")),
            s,
            channels.len(),
            samples,
            rate,
            start_ms,
            &mut trials,
        )?;
    }
    TrialSet::new(trials, catalog, split, channels, rate, samples, start_ms)
}

pub fn write_dataset(train: &TrialSet, test: &TrialSet, root: &Path) -> Result<()> {
    write_trialset(train, &root.join("train"))?;
    write_trialset(test, &root.join("test"))
}

/// Loads `train/` and `test/` and enforces the zero-shot split.
pub fn load_dataset(root: &Path) -> Result<(TrialSet, TrialSet)> {
    let train = load_trialset(&root.join("train"), Split::Train)?;
    let test = load_trialset(&root.join("test"), Split::Test)?;
    check_zero_shot(&train, &test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_set;

    #[test]
    fn escape_round_trip() {
        let s = "a\tb\\n\nc";
        assert_eq!(unescape(&escape(s)), s);
    }

    #[test]
    fn missing_directory_is_load_error() {
        let err = load_trialset(Path::new("/nonexistent/xyz"), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
    }

    #[test]
    fn four_trials_two_stimuli() {
        let dir = tempfile::tempdir().unwrap();
        let ts = toy_set(Split::Train, &[1, 2], 2, 3, 5);
        write_trialset(&ts, dir.path()).unwrap();
        let back = load_trialset(dir.path(), Split::Train).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.catalog.len(), 2);
        assert_eq!(back, ts);
    }

    #[test]
    fn wrong_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_trialset(&toy_set(Split::Train, &[1], 1, 2, 3), dir.path()).unwrap();
        assert!(load_trialset(dir.path(), Split::Test).is_err());
    }
}
