//! FID, feature-distance diversity, and bin-based mode coverage (NDB / JSD).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{images_to_tensor, resize, Image};
use crate::error::{Error, Result};
use crate::segmentation::FeatureExtractor;
use crate::Graph;

/// `m` feature vectors of dimension `d`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCloud {
    pub m: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub source: String,
}

impl FeatureCloud {
    pub fn new(rows: Vec<Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("feature rows differ in length".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self {
            m,
            d,
            data,
            source: source.into(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.d, &self.data)
    }
}

/// Embeds whole images with `extractor` (resized to its input size).
pub fn image_features(images: &[Image], extractor: &dyn FeatureExtractor, source: &str) -> Result<FeatureCloud> {
    let size = extractor.input_size();
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let resized: Vec<Image> = chunk.iter().map(|i| resize(i, size)).collect();
        let refs: Vec<&Image> = resized.iter().collect();
        let g = Graph::new();
        let out = g.no_grad(|| extractor.embed_batch(g.constant(images_to_tensor(&refs))));
        let v = out.value();
        for r in v.data().chunks(extractor.dim()) {
            rows.push(r.iter().map(|&x| x as f64).collect());
        }
    }
    FeatureCloud::new(rows, source)
}

fn mean_cov(c: &FeatureCloud) -> (DVector<f64>, DMatrix<f64>) {
    let x = c.matrix();
    let mu = DVector::from_iterator(c.d, (0..c.d).map(|j| x.column(j).mean()));
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let denom = (c.m.max(2) - 1) as f64;
    let cov = centred.transpose() * &centred / denom;
    (mu, cov)
}

const EIG_FLOOR: f64 = 1e-10;

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| if v < EIG_FLOOR { 0.0 } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_r − μ_g‖² + tr(Σ_r + Σ_g − 2 (Σ_r Σ_g)^{1/2})`, with the trace of the
/// cross term evaluated as `tr((A Σ_g A)^{1/2})`, `A = Σ_r^{1/2}`.
pub fn fid(real: &FeatureCloud, generated: &FeatureCloud) -> Result<f64> {
    if real.d != generated.d {
        return Err(Error::Contract(format!("feature dims differ: {} vs {}", real.d, generated.d)));
    }
    if real.m < 2 || generated.m < 2 {
        return Err(Error::Contract("FID needs at least two samples per cloud".into()));
    }
    if real.m < real.d || generated.m < generated.d {
        log::warn!("FID with fewer samples than feature dimensions ({} / {} vs d = {})", real.m, generated.m, real.d);
    }
    let (mu_r, cov_r) = mean_cov(real);
    let (mu_g, cov_g) = mean_cov(generated);
    if cov_r.iter().chain(cov_g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite covariance".into()));
    }
    let a = sym_sqrt(&cov_r);
    let inner = &a * &cov_g * &a;
    let inner = (&inner + inner.transpose()) * 0.5;
    // Eigenvalues of `inner` are squared covariance scales, so only rounding
    // negatives are clamped; a 1e-10 floor here would drop real variance.
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();
    let diff = (mu_r - mu_g).norm_squared();
    let value = diff + cov_r.trace() + cov_g.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numeric("FID is not finite".into()));
    }
    Ok(value.max(0.0))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean feature-space L2 distance over sample pairs. All `m(m-1)/2` pairs are
/// used when `pairs` covers them, otherwise `pairs` random pairs of distinct
/// samples drawn with `seed`.
pub fn lpips_diversity(features: &FeatureCloud, pairs: usize, seed: u64) -> Result<f64> {
    let m = features.m;
    if m < 2 {
        return Err(Error::Contract("diversity needs at least two samples".into()));
    }
    let all = m * (m - 1) / 2;
    if pairs == 0 || pairs >= all {
        let mut s = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                s += l2(features.row(i), features.row(j));
            }
        }
        return Ok(s / all as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..m);
        let mut j = rng.random_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        s += l2(features.row(i), features.row(j));
    }
    Ok(s / pairs as f64)
}

pub fn lpips_diversity_images(images: &[Image], extractor: &dyn FeatureExtractor, pairs: usize, seed: u64) -> Result<f64> {
    lpips_diversity(&image_features(images, extractor, "generated")?, pairs, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub k: usize,
    pub d: usize,
    pub centroids: Vec<f64>,
    pub inertia: f64,
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.k {
            let d2: f64 = x.iter().zip(self.centroid(c)).map(|(a, b)| (a - b).powi(2)).sum();
            if d2 < best.0 {
                best = (d2, c);
            }
        }
        best.1
    }
}

pub const MAX_RESTARTS: usize = 50;
const MAX_LLOYD_ITERS: usize = 100;

/// Lloyd's algorithm from k-means++ seeds; the best of `restarts` runs.
pub fn kmeans(cloud: &FeatureCloud, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k < 1 || k > cloud.m {
        return Err(Error::Config(format!("k = {k} must be in [1, {}]", cloud.m)));
    }
    let restarts = restarts.clamp(1, MAX_RESTARTS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let run = lloyd(cloud, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(cloud: &FeatureCloud, k: usize, rng: &mut impl Rng) -> KMeans {
    let (m, d) = (cloud.m, cloud.d);
    let dist2 = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    // k-means++ seeding.
    let mut centroids: Vec<f64> = cloud.row(rng.random_range(0..m)).to_vec();
    let mut nearest: Vec<f64> = (0..m).map(|i| dist2(cloud.row(i), &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        let c = cloud.row(pick).to_vec();
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(dist2(cloud.row(i), &c));
        }
        centroids.extend(c);
    }
    let mut model = KMeans {
        k,
        d,
        centroids,
        inertia: f64::INFINITY,
    };
    let mut assign = vec![usize::MAX; m];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let c = model.assign(cloud.row(i));
            if c != *a {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(cloud.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    model.centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            } else {
                // Empty cluster: move it onto the point farthest from its centroid.
                let far = (0..m)
                    .max_by(|&a, &b| {
                        let da = dist2(cloud.row(a), model.centroid(assign[a]));
                        let db = dist2(cloud.row(b), model.centroid(assign[b]));
                        da.total_cmp(&db)
                    })
                    .expect("non-empty cloud");
                model.centroids[c * d..(c + 1) * d].copy_from_slice(cloud.row(far));
                assign[far] = c;
            }
        }
    }
    model.inertia = (0..m).map(|i| dist2(cloud.row(i), model.centroid(model.assign(cloud.row(i))))).sum();
    model
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub k: usize,
    pub train_proportions: Vec<f64>,
    pub generated_proportions: Vec<f64>,
    pub ndb_count: usize,
    pub jsd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdbConfig {
    pub k: usize,
    pub alpha: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for NdbConfig {
    fn default() -> Self {
        Self {
            k: 50,
            alpha: 0.05,
            restarts: 10,
            seed: 0,
        }
    }
}

/// Jensen-Shannon divergence (natural log) between two histograms.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0)
}

/// Two-proportion pooled z-test: does bin occupancy `a / n_a` differ from `b / n_b`?
pub fn proportions_differ(a: usize, n_a: usize, b: usize, n_b: usize, alpha: f64) -> bool {
    let (pa, pb) = (a as f64 / n_a as f64, b as f64 / n_b as f64);
    let pooled = (a + b) as f64 / (n_a + n_b) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n_a as f64 + 1.0 / n_b as f64)).sqrt();
    if se == 0.0 {
        return false;
    }
    let z = ((pa - pb) / se).abs();
    let crit = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    z > crit
}

/// Bins `train` with k-means, assigns `generated` to the nearest centroid and
/// compares the two bin histograms.
pub fn ndb_jsd(train: &FeatureCloud, generated: &FeatureCloud, cfg: &NdbConfig) -> Result<BinReport> {
    if cfg.k < 2 {
        return Err(Error::Config("k must be at least 2".into()));
    }
    if cfg.k > train.m {
        return Err(Error::Config(format!("k = {} exceeds the {} training vectors", cfg.k, train.m)));
    }
    if generated.m == 0 {
        return Err(Error::Contract("generated cloud is empty".into()));
    }
    if train.d != generated.d {
        return Err(Error::Contract("feature dims differ".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {}", cfg.alpha)));
    }
    let km = kmeans(train, cfg.k, cfg.restarts, cfg.seed)?;
    let count = |c: &FeatureCloud| {
        let mut h = vec![0usize; cfg.k];
        for i in 0..c.m {
            h[km.assign(c.row(i))] += 1;
        }
        h
    };
    let (ht, hg) = (count(train), count(generated));
    let ndb_count = (0..cfg.k)
        .filter(|&b| proportions_differ(ht[b], train.m, hg[b], generated.m, cfg.alpha))
        .count();
    let tp: Vec<f64> = ht.iter().map(|&c| c as f64 / train.m as f64).collect();
    let gp: Vec<f64> = hg.iter().map(|&c| c as f64 / generated.m as f64).collect();
    let jsd = js_divergence(&tp, &gp);
    Ok(BinReport {
        k: cfg.k,
        train_proportions: tp,
        generated_proportions: gp,
        ndb_count,
        jsd,
    })
}

/// The evaluation report written by the `evaluate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub lpips: f64,
    pub ndb: usize,
    pub jsd: f64,
    pub k: usize,
    pub n_real: usize,
    pub n_generated: usize,
    pub extractor_name: String,
}

pub fn evaluate_clouds(real: &FeatureCloud, generated: &FeatureCloud, ndb: &NdbConfig, extractor_name: &str) -> Result<EvalReport> {
    let bins = ndb_jsd(real, generated, ndb)?;
    Ok(EvalReport {
        fid: fid(real, generated)?,
        lpips: lpips_diversity(generated, 0, ndb.seed)?,
        ndb: bins.ndb_count,
        jsd: bins.jsd,
        k: ndb.k,
        n_real: real.m,
        n_generated: generated.m,
        extractor_name: extractor_name.to_string(),
    })
}
