use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::image::Image;
use super::lowlevel::pearson;
use crate::embed::{EmbeddingProvider, VectorTable};
use crate::error::{Error, Result};
use crate::params::seeded_rng;

/// Names of the stock extractors, in report column order.
pub const STANDARD_EXTRACTORS: [&str; 6] = ["alexnet-2", "alexnet-5", "inception", "clip", "efficientnet", "swav"];

/// Maps an image to a feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn fingerprint(&self) -> String;
    /// `key` is the image's file name, used by table-backed extractors.
    fn embed(&self, image: &Image, key: &str) -> Result<Vec<f64>>;
}

/// Fixed Gaussian projection of a downsampled image, followed by `tanh`.
/// Stands in for a pretrained network so the suite runs without weights.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    name: String,
    side: usize,
    weights: Array2<f64>,
    fingerprint: String,
}

impl RandomProjection {
    pub const SIDE: usize = 16;
    pub const DIM: usize = 64;

    pub fn new(name: &str, seed: u64) -> Self {
        let stream = u64::from_le_bytes(Sha256::digest(name.as_bytes())[..8].try_into().expect("8 bytes"));
        let mut rng = seeded_rng(seed, stream);
        let inputs = Self::SIDE * Self::SIDE * 3;
        let scale = 1.0 / (inputs as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((inputs, Self::DIM), || {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let mut h = Sha256::new();
        h.update(format!("random-projection {name} {seed} {} {}\n", Self::SIDE, Self::DIM));
        Self {
            name: name.to_string(),
            side: Self::SIDE,
            weights,
            fingerprint: hex::encode(h.finalize()),
        }
    }

    /// The six stock extractors.
    pub fn standard(seed: u64) -> Vec<Box<dyn FeatureExtractor>> {
        STANDARD_EXTRACTORS
            .iter()
            .map(|n| Box::new(Self::new(n, seed)) as Box<dyn FeatureExtractor>)
            .collect()
    }
}

impl FeatureExtractor for RandomProjection {
    fn name(&self) -> &str {
        &self.name
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn embed(&self, image: &Image, _key: &str) -> Result<Vec<f64>> {
        let small = image.resized(self.side, self.side);
        let x: Array1<f64> = small.data.iter().map(|v| v - 0.5).collect();
        Ok(x.dot(&self.weights).iter().map(|v| v.tanh()).collect())
    }
}

/// Precomputed features keyed by file name, e.g. from a pretrained network
/// run outside this crate.
#[derive(Debug, Clone)]
pub struct TableExtractor {
    name: String,
    table: VectorTable,
}

impl TableExtractor {
    pub fn new(name: impl Into<String>, table: VectorTable) -> Self {
        Self { name: name.into(), table }
    }
}

impl FeatureExtractor for TableExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn fingerprint(&self) -> String {
        self.table.fingerprint()
    }

    fn embed(&self, _image: &Image, key: &str) -> Result<Vec<f64>> {
        self.table.embed(key)
    }
}

/// Fraction of `(i, j ≠ i)` comparisons where `gen_i` correlates more with
/// `ref_i` than with `ref_j`. Ties count as failures.
pub fn two_way_identification(gen: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<f64> {
    let n = gen.len();
    if n != refs.len() {
        return Err(Error::Protocol(format!("{n} generated features for {} references", refs.len())));
    }
    if n < 2 {
        return Err(Error::Protocol(format!("two-way identification needs at least 2 pairs, got {n}")));
    }
    let mut wins = 0usize;
    for (i, g) in gen.iter().enumerate() {
        let own = pearson(g, &refs[i])?;
        for (j, r) in refs.iter().enumerate() {
            if j != i && own > pearson(g, r)? {
                wins += 1;
            }
        }
    }
    Ok(wins as f64 / (n * (n - 1)) as f64)
}

/// Mean correlation distance `1 − r` over aligned pairs.
pub fn feature_distance(gen: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<f64> {
    if gen.len() != refs.len() || gen.is_empty() {
        return Err(Error::Protocol(format!("{} generated features for {} references", gen.len(), refs.len())));
    }
    let mut total = 0.0;
    for (g, r) in gen.iter().zip(refs) {
        total += 1.0 - pearson(g, r)?;
    }
    Ok(total / gen.len() as f64)
}

/// Candidate indices in descending order of correlation with the reference;
/// ties keep the lower index first.
pub fn rank_generations(candidates: &[Vec<f64>], reference: &[f64], expected: usize) -> Result<Vec<usize>> {
    if candidates.len() != expected {
        return Err(Error::Protocol(format!("expected {expected} candidates, got {}", candidates.len())));
    }
    let scores = candidates.iter().map(|c| pearson(c, reference)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed, 0);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn two_way_self_is_one_and_asymmetric() {
        let f = random_features(1, 6, 8);
        assert_eq!(two_way_identification(&f, &f).unwrap(), 1.0);
        // gen_1 = c correlates better with ref_0 = a (0.76) than with its own
        // ref_1 = b (−0.33): one failure of two. With roles swapped, b
        // prefers c (−0.33) over a (−0.5), so every comparison wins.
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        let c = vec![1.0, 0.2, 0.0];
        let gen = vec![a.clone(), c.clone()];
        let refs = vec![a.clone(), b.clone()];
        let forward = two_way_identification(&gen, &refs).unwrap();
        let backward = two_way_identification(&refs, &gen).unwrap();
        assert_eq!(forward, 0.5);
        assert_eq!(backward, 1.0);
        assert!(matches!(two_way_identification(&f[..1], &f[..1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn two_pair_forced_outcomes() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![3.0, 1.0, 2.0];
        assert_eq!(two_way_identification(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap(), 1.0);
        assert_eq!(two_way_identification(&[b.clone(), a.clone()], &[a, b]).unwrap(), 0.0);
    }

    #[test]
    fn distance_cases() {
        let a = vec![1.0, 2.0, 4.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(feature_distance(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        assert!((feature_distance(&[a.clone()], &[neg]).unwrap() - 2.0).abs() < 1e-12);
        // [1,2,4] vs [1,3,2]: centred (−4/3, −1/3, 5/3) and (−1, 1, 0);
        // Σxy = 4/3 − 1/3 = 1, Σx² = 42/9, Σy² = 2, r = 1/√(84/9).
        let r = 1.0 / (84.0f64 / 9.0).sqrt();
        assert!((feature_distance(&[a], &[vec![1.0, 3.0, 2.0]]).unwrap() - (1.0 - r)).abs() < 1e-12);
        assert!(matches!(feature_distance(&[vec![1.0, 1.0]], &[vec![1.0, 2.0]]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ranking_follows_graded_noise() {
        let mut rng = seeded_rng(4, 0);
        let reference: Vec<f64> = (0..32).map(|_| rng.random::<f64>() - 0.5).collect();
        // Centred noise orthogonal to the centred reference: corr(r + t·e, r)
        // = σ_r / √(σ_r² + t²σ_e²), strictly decreasing in t.
        let centre = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.into_iter().map(|x| x - m).collect::<Vec<f64>>()
        };
        let r = centre(reference.clone());
        let e = centre((0..32).map(|_| rng.random::<f64>() - 0.5).collect());
        let proj = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / r.iter().map(|b| b * b).sum::<f64>();
        let e: Vec<f64> = e.iter().zip(&r).map(|(a, b)| a - proj * b).collect();
        let cands: Vec<Vec<f64>> = (0..10)
            .map(|k| reference.iter().zip(&e).map(|(x, n)| x + 0.3 * k as f64 * n).collect())
            .collect();
        let order = rank_generations(&cands, &reference, 10).unwrap();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
        let reversed: Vec<Vec<f64>> = cands.iter().rev().cloned().collect();
        let back = rank_generations(&reversed, &reference, 10).unwrap();
        assert_eq!(back.iter().map(|&i| 9 - i).collect::<Vec<_>>(), order);
        assert!(matches!(rank_generations(&cands[..9], &reference, 10), Err(Error::Protocol(_))));
    }

    #[test]
    fn random_projection_is_deterministic_per_name() {
        let img = Image::from_gray(&Array2::from_shape_fn((20, 20), |(i, j)| ((i * j) % 9) as f64 / 8.0)).unwrap();
        let a = RandomProjection::new("clip", 3);
        let b = RandomProjection::new("clip", 3);
        let c = RandomProjection::new("swav", 3);
        assert_eq!(a.embed(&img, "x").unwrap(), b.embed(&img, "x").unwrap());
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.embed(&img, "x").unwrap(), c.embed(&img, "x").unwrap());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
