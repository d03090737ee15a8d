use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{feature_distance, rank_generations, two_way_identification, FeatureExtractor};
use super::image::Image;
use super::lowlevel::{pearson, pixcorr, ssim};
use crate::error::{Error, Result};

/// Number of generations per stimulus in the ranking protocol.
pub const DEFAULT_CANDIDATES: usize = 10;

/// Table column order. The first four report two-way identification, the
/// last two correlation distance.
const TABLE_COLUMNS: [(&str, &str, bool); 6] = [
    ("alexnet-2", "AlexNet(2)", true),
    ("alexnet-5", "AlexNet(5)", true),
    ("inception", "Inception", true),
    ("clip", "CLIP", true),
    ("efficientnet", "EfficientNet", false),
    ("swav", "SwAV", false),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_pairs: usize,
    pub pixcorr: f64,
    pub ssim: f64,
    /// Two-way identification accuracy per extractor, in `[0, 1]`.
    pub two_way: BTreeMap<String, f64>,
    /// Mean correlation distance per extractor, in `[0, 2]`.
    pub distance: BTreeMap<String, f64>,
    pub extractors: BTreeMap<String, String>,
}

/// Scores of one generated/reference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub name: String,
    /// Candidate index when the pair came out of the ranking protocol.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub pixcorr: f64,
    pub ssim: f64,
    /// Feature correlation with the reference per extractor.
    pub feature_corr: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct MetricOptions {
    pub candidates: usize,
    /// Extractor used to rank candidates; `clip` if present, else the first.
    pub rank_by: Option<String>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_CANDIDATES,
            rank_by: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DirReport {
    /// Scores of the best-ranked (or only) generation per reference.
    pub report: MetricReport,
    pub pairs: Vec<PairRecord>,
    /// Report over the `r`-th ranked candidates, one per rank; empty when no
    /// ranking took place.
    pub per_rank: Vec<MetricReport>,
    /// Candidate order per reference, best first.
    pub rankings: BTreeMap<String, Vec<usize>>,
}

struct Features {
    name: String,
    gen: Vec<Vec<f64>>,
    refs: Vec<Vec<f64>>,
}

fn extract(extractors: &[Box<dyn FeatureExtractor>], images: &[Image], keys: &[String]) -> Result<Vec<Vec<Vec<f64>>>> {
    extractors
        .iter()
        .map(|x| {
            images
                .par_iter()
                .zip(keys.par_iter())
                .map(|(im, k)| x.embed(im, k))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn check_extractors(extractors: &[Box<dyn FeatureExtractor>]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for x in extractors {
        if !seen.insert(x.name()) {
            return Err(Error::Config(format!("extractor {:?} given twice", x.name())));
        }
    }
    Ok(())
}

/// Full suite over index-aligned pairs. `keys` name the pairs and are handed
/// to the extractors.
pub fn evaluate_pairs(
    keys: &[String],
    generated: &[Image],
    reference: &[Image],
    extractors: &[Box<dyn FeatureExtractor>],
) -> Result<(MetricReport, Vec<PairRecord>)> {
    let gen_feats = extract(extractors, generated, keys)?;
    let ref_feats = extract(extractors, reference, keys)?;
    score(keys, generated, reference, extractors, gen_feats, ref_feats)
}

fn score(
    keys: &[String],
    generated: &[Image],
    reference: &[Image],
    extractors: &[Box<dyn FeatureExtractor>],
    gen_feats: Vec<Vec<Vec<f64>>>,
    ref_feats: Vec<Vec<Vec<f64>>>,
) -> Result<(MetricReport, Vec<PairRecord>)> {
    let n = generated.len();
    if reference.len() != n || keys.len() != n {
        return Err(Error::Protocol(format!("{n} generated images for {} references", reference.len())));
    }
    if n == 0 {
        return Err(Error::Protocol("no image pairs".into()));
    }
    check_extractors(extractors)?;
    let feats: Vec<Features> = extractors
        .iter()
        .zip(gen_feats.into_iter().zip(ref_feats))
        .map(|(x, (gen, refs))| Features {
            name: x.name().to_string(),
            gen,
            refs,
        })
        .collect();

    let low: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = &generated[i];
            let r = &reference[i];
            Ok((pixcorr(g, r)?, ssim(g, r)?))
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(n);
    for (i, &(pc, ss)) in low.iter().enumerate() {
        let mut feature_corr = BTreeMap::new();
        for f in &feats {
            feature_corr.insert(f.name.clone(), pearson(&f.gen[i], &f.refs[i])?);
        }
        pairs.push(PairRecord {
            name: keys[i].clone(),
            candidate: None,
            rank: None,
            pixcorr: pc,
            ssim: ss,
            feature_corr,
        });
    }

    let mut two_way = BTreeMap::new();
    let mut distance = BTreeMap::new();
    for f in &feats {
        if n >= 2 {
            two_way.insert(f.name.clone(), two_way_identification(&f.gen, &f.refs)?);
        }
        distance.insert(f.name.clone(), feature_distance(&f.gen, &f.refs)?);
    }
    let report = MetricReport {
        n_pairs: n,
        pixcorr: low.iter().map(|p| p.0).sum::<f64>() / n as f64,
        ssim: low.iter().map(|p| p.1).sum::<f64>() / n as f64,
        two_way,
        distance,
        extractors: extractors.iter().map(|x| (x.name().to_string(), x.fingerprint())).collect(),
    };
    Ok((report, pairs))
}

fn is_image_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn visible_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::load(dir, e))?;
    let mut out = Vec::new();
    for e in rd {
        let p = e?.path();
        let hidden = p.file_name().and_then(|n| n.to_str()).is_none_or(|n| n.starts_with('.'));
        if !hidden {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

enum Generated {
    Single(PathBuf),
    Candidates(Vec<PathBuf>),
}

/// Pairs `generated/<name>.png` (or a candidate directory
/// `generated/<name>/`) with `reference/<name>.png`. Generated images are
/// resized to the reference size. When candidate directories are present
/// (they must be for every reference) each holds exactly
/// `opts.candidates` images, ranked by feature correlation with the
/// reference; the main report scores the best-ranked candidate.
pub fn evaluate_dirs(
    generated: &Path,
    reference: &Path,
    extractors: &[Box<dyn FeatureExtractor>],
    opts: &MetricOptions,
) -> Result<DirReport> {
    check_extractors(extractors)?;
    let refs: Vec<PathBuf> = visible_entries(reference)?.into_iter().filter(|p| is_image_file(p)).collect();
    if refs.is_empty() {
        return Err(Error::Protocol(format!("no PNG images in {}", reference.display())));
    }
    let gen_entries = visible_entries(generated)?;
    let mut by_stem: BTreeMap<String, Generated> = BTreeMap::new();
    for p in &gen_entries {
        if p.is_dir() {
            let c: Vec<PathBuf> = visible_entries(p)?.into_iter().filter(|q| is_image_file(q)).collect();
            by_stem.insert(file_name(p), Generated::Candidates(c));
        } else if is_image_file(p) {
            by_stem.insert(stem(p), Generated::Single(p.clone()));
        }
    }
    let ref_stems: std::collections::BTreeSet<String> = refs.iter().map(|p| stem(p)).collect();
    let missing: Vec<String> = refs.iter().map(|p| stem(p)).filter(|s| !by_stem.contains_key(s)).collect();
    let extra: Vec<String> = by_stem.keys().filter(|s| !ref_stems.contains(*s)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Protocol(format!(
            "generated and reference sets are misaligned; missing generations: [{}]; unmatched generations: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }

    let keys: Vec<String> = refs.iter().map(|p| file_name(p)).collect();
    let ref_imgs: Vec<Image> = refs.par_iter().map(|p| Image::load(p, None)).collect::<Result<_>>()?;
    let entries: Vec<&Generated> = refs.iter().map(|p| &by_stem[&stem(p)]).collect();
    let n_cand = entries.iter().filter(|g| matches!(g, Generated::Candidates(_))).count();
    let ref_feats = extract(extractors, &ref_imgs, &keys)?;

    if n_cand == 0 {
        let gen_imgs: Vec<Image> = entries
            .par_iter()
            .zip(ref_imgs.par_iter())
            .map(|(g, r)| match g {
                Generated::Single(p) => Image::load(p, Some((r.height(), r.width()))),
                Generated::Candidates(_) => unreachable!(),
            })
            .collect::<Result<_>>()?;
        let gen_feats = extract(extractors, &gen_imgs, &keys)?;
        let (report, pairs) = score(&keys, &gen_imgs, &ref_imgs, extractors, gen_feats, ref_feats)?;
        return Ok(DirReport {
            report,
            pairs,
            per_rank: Vec::new(),
            rankings: BTreeMap::new(),
        });
    }
    if n_cand != entries.len() {
        let singles: Vec<&String> = keys
            .iter()
            .zip(&entries)
            .filter(|(_, g)| matches!(g, Generated::Single(_)))
            .map(|(k, _)| k)
            .collect();
        return Err(Error::Protocol(format!(
            "candidate directories are required for every reference; single images given for {singles:?}"
        )));
    }

    let rank_idx = match &opts.rank_by {
        Some(name) => extractors
            .iter()
            .position(|x| x.name() == name)
            .ok_or_else(|| Error::Config(format!("ranking extractor {name:?} is not loaded")))?,
        None => extractors.iter().position(|x| x.name() == "clip").unwrap_or(0),
    };
    if extractors.is_empty() {
        return Err(Error::Config("ranking candidates needs at least one feature extractor".into()));
    }

    // candidate images and features: [reference][candidate]
    let mut cand_imgs: Vec<Vec<Image>> = Vec::with_capacity(entries.len());
    let mut cand_keys: Vec<Vec<String>> = Vec::with_capacity(entries.len());
    for ((g, r), k) in entries.iter().zip(&ref_imgs).zip(&keys) {
        let Generated::Candidates(paths) = g else { unreachable!() };
        if paths.len() != opts.candidates {
            return Err(Error::Protocol(format!(
                "{k}: expected {} candidates, found {}",
                opts.candidates,
                paths.len()
            )));
        }
        cand_imgs.push(
            paths
                .par_iter()
                .map(|p| Image::load(p, Some((r.height(), r.width()))))
                .collect::<Result<_>>()?,
        );
        cand_keys.push(paths.iter().map(|p| format!("{}/{}", stem(Path::new(k)), file_name(p))).collect());
    }
    let cand_feats: Vec<Vec<Vec<Vec<f64>>>> = cand_imgs
        .iter()
        .zip(&cand_keys)
        .map(|(imgs, ks)| extract(extractors, imgs, ks))
        .collect::<Result<_>>()?;

    let mut rankings = BTreeMap::new();
    let mut orders = Vec::with_capacity(entries.len());
    for (i, k) in keys.iter().enumerate() {
        let order = rank_generations(&cand_feats[i][rank_idx], &ref_feats[rank_idx][i], opts.candidates)?;
        rankings.insert(k.clone(), order.clone());
        orders.push(order);
    }

    let mut per_rank = Vec::with_capacity(opts.candidates);
    let mut best_pairs = Vec::new();
    for r in 0..opts.candidates {
        let gen: Vec<Image> = orders.iter().enumerate().map(|(i, o)| cand_imgs[i][o[r]].clone()).collect();
        let gen_feats: Vec<Vec<Vec<f64>>> = (0..extractors.len())
            .map(|x| orders.iter().enumerate().map(|(i, o)| cand_feats[i][x][o[r]].clone()).collect())
            .collect();
        let (report, mut pairs) = score(&keys, &gen, &ref_imgs, extractors, gen_feats, ref_feats.clone())?;
        for (p, o) in pairs.iter_mut().zip(&orders) {
            p.candidate = Some(o[r]);
            p.rank = Some(r);
        }
        if r == 0 {
            best_pairs = pairs;
        }
        per_rank.push(report);
    }
    Ok(DirReport {
        report: per_rank[0].clone(),
        pairs: best_pairs,
        per_rank,
        rankings,
    })
}

fn cell(v: Option<&f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

/// Tab-separated table, one row per method. Standard columns first:
/// PixCorr, SSIM, two-way identification for AlexNet(2), AlexNet(5),
/// Inception and CLIP, correlation distance for EfficientNet and SwAV.
/// The complementary score of every extractor follows in labelled columns
/// (`<name> distance` / `<name> two-way`).
pub fn table4(rows: &[(&str, &MetricReport)]) -> String {
    let mut extra: Vec<(String, String, bool)> = Vec::new();
    let mut names = std::collections::BTreeSet::new();
    for (_, r) in rows {
        names.extend(r.two_way.keys().cloned());
        names.extend(r.distance.keys().cloned());
    }
    for &(key, label, two_way_main) in &TABLE_COLUMNS {
        let (suffix, two_way) = if two_way_main { ("distance", false) } else { ("two-way", true) };
        if names.contains(key) {
            extra.push((key.to_string(), format!("{label} {suffix}"), two_way));
        }
    }
    for name in &names {
        if !TABLE_COLUMNS.iter().any(|c| c.0 == name) {
            extra.push((name.clone(), format!("{name} two-way"), true));
            extra.push((name.clone(), format!("{name} distance"), false));
        }
    }

    let mut out = String::from("method\tPixCorr\tSSIM");
    for (_, label, _) in &TABLE_COLUMNS {
        write!(out, "\t{label}").unwrap();
    }
    for (_, label, _) in &extra {
        write!(out, "\t{label}").unwrap();
    }
    out.push('\n');
    for (method, r) in rows {
        write!(out, "{method}\t{:.4}\t{:.4}", r.pixcorr, r.ssim).unwrap();
        for &(key, _, two_way) in &TABLE_COLUMNS {
            let v = if two_way { r.two_way.get(key) } else { r.distance.get(key) };
            write!(out, "\t{}", cell(v)).unwrap();
        }
        for (key, _, two_way) in &extra {
            let v = if *two_way { r.two_way.get(key) } else { r.distance.get(key) };
            write!(out, "\t{}", cell(v)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// One JSON object per pair.
pub fn pair_lines(pairs: &[PairRecord]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("pair record serializes") + "\n")
        .collect()
}

/// `(rank, report)` rows with per-rank averages of every score.
pub fn per_rank_table(per_rank: &[MetricReport]) -> String {
    let rows: Vec<(String, &MetricReport)> = per_rank.iter().enumerate().map(|(r, m)| (format!("rank-{}", r + 1), m)).collect();
    let refs: Vec<(&str, &MetricReport)> = rows.iter().map(|(l, m)| (l.as_str(), *m)).collect();
    table4(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::features::RandomProjection;
    use ndarray::Array2;

    fn pattern(seed: usize) -> Image {
        Image::from_gray(&Array2::from_shape_fn((16, 16), |(i, j)| {
            ((i * (seed + 3) + j * (2 * seed + 1) + seed * seed) % 17) as f64 / 16.0
        }))
        .unwrap()
    }

    #[test]
    fn identical_sets_score_perfectly() {
        let imgs: Vec<Image> = (0..4).map(pattern).collect();
        let keys: Vec<String> = (0..4).map(|i| format!("{i}.png")).collect();
        let ex = RandomProjection::standard(0);
        let (r, pairs) = evaluate_pairs(&keys, &imgs, &imgs, &ex).unwrap();
        assert_eq!(r.pixcorr, 1.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(pairs.len(), 4);
        for name in super::super::features::STANDARD_EXTRACTORS {
            assert_eq!(r.two_way[name], 1.0);
            assert!(r.distance[name].abs() < 1e-12);
        }
        let t = table4(&[("self", &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("method\tPixCorr\tSSIM\tAlexNet(2)\tAlexNet(5)\tInception\tCLIP\tEfficientNet\tSwAV\t"));
        assert!(!lines[1].contains("NA"));
        assert_eq!(pair_lines(&pairs).lines().count(), 4);
    }

    #[test]
    fn missing_extractor_columns_read_na() {
        let imgs: Vec<Image> = (0..2).map(pattern).collect();
        let keys = vec!["a".to_string(), "b".to_string()];
        let (r, _) = evaluate_pairs(&keys, &imgs, &imgs, &[]).unwrap();
        let t = table4(&[("m", &r)]);
        assert_eq!(t.lines().nth(1).unwrap().matches("NA").count(), 6);
    }
}
