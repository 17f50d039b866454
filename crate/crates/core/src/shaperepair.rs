//! Binary-mask repair through a sampled manifold of valid latent shapes.
//!
//! Valid training masks are encoded into a latent space. A kernel density
//! estimate `f_p` of those codes is the target density and a Gaussian fit
//! `f_q` the proposal; proposals are kept by rejection sampling when
//! `u < F[dec(z)]·f_p(z)` with `u ~ U(0, K·f_q(z))` and `F` the shape
//! validity test. A mask is repaired by decoding the mean of its nearest
//! accepted samples.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stage_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, values 0 or 1.
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(
                "mask dimensions must be positive".into(),
            ));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParams("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Parse a PGM image (P2 or P5). A pixel is foreground when its value
    /// is above half of maxval, so both 0/1 and 0/255 images work.
    pub fn parse_pgm(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: 0,
            message,
        };
        let mut pos = 0;
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated PGM header".into()));
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        let magic = tokens[0].as_str();
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| err(format!("bad {what} `{s}`")))
        };
        let width = num(&tokens[1], "width")?;
        let height = num(&tokens[2], "height")?;
        let maxval = num(&tokens[3], "maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(err("invalid PGM dimensions or maxval".into()));
        }
        let n = width * height;
        let values: Vec<usize> = match magic {
            "P5" => {
                pos += 1;
                let wide = maxval > 255;
                let need = if wide { 2 * n } else { n };
                if bytes.len() < pos + need {
                    return Err(err("truncated PGM raster".into()));
                }
                let raster = &bytes[pos..pos + need];
                if wide {
                    raster
                        .chunks(2)
                        .map(|c| (c[0] as usize) << 8 | c[1] as usize)
                        .collect()
                } else {
                    raster.iter().map(|&b| b as usize).collect()
                }
            }
            "P2" => {
                let text = String::from_utf8_lossy(&bytes[pos..]);
                let vals = text
                    .split_whitespace()
                    .take(n)
                    .map(|t| num(t, "pixel"))
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() != n {
                    return Err(err("truncated PGM raster".into()));
                }
                vals
            }
            other => return Err(err(format!("unsupported PGM magic `{other}`"))),
        };
        let data = values.iter().map(|&v| (2 * v > maxval) as u8).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Binary P5 with maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
        out
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_pgm(&bytes, &path.display().to_string())
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Encoder/decoder pair between masks of one raster size and `dim()`-long
/// latent vectors.
pub trait LatentEmbedding: Send + Sync {
    fn dim(&self) -> usize;
    fn raster(&self) -> (usize, usize);
    fn encode(&self, mask: &BinaryMask) -> Result<Vec<f64>>;
    /// Reconstruction thresholded at 0.5.
    fn decode(&self, z: &[f64]) -> BinaryMask;
}

/// Principal-subspace autoencoder: projection of the centered raster onto
/// the top principal directions of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEmbedding {
    pub width: usize,
    pub height: usize,
    pub mean: Vec<f64>,
    /// `dim` orthonormal rows (zero rows where the data has no variance).
    pub components: Vec<Vec<f64>>,
}

impl LatentEmbedding for LinearEmbedding {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn raster(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn encode(&self, mask: &BinaryMask) -> Result<Vec<f64>> {
        if mask.width != self.width || mask.height != self.height {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, embedding expects {}x{}",
                mask.width, mask.height, self.width, self.height
            )));
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(&mask.data)
                    .zip(&self.mean)
                    .map(|((ci, &v), m)| ci * (v as f64 - m))
                    .sum()
            })
            .collect())
    }

    fn decode(&self, z: &[f64]) -> BinaryMask {
        let mut values = self.mean.clone();
        for (c, &zk) in self.components.iter().zip(z) {
            if zk != 0.0 {
                for (v, ci) in values.iter_mut().zip(c) {
                    *v += zk * ci;
                }
            }
        }
        BinaryMask {
            width: self.width,
            height: self.height,
            data: values.iter().map(|&v| (v >= 0.5) as u8).collect(),
        }
    }
}

/// Principal-subspace embedding of `masks` with `dim` latent coordinates.
pub fn train_embedding(masks: &[BinaryMask], dim: usize) -> Result<LinearEmbedding> {
    if dim == 0 {
        return Err(Error::InvalidParams("latent dimension must be >= 1".into()));
    }
    if masks.len() < dim {
        return Err(Error::InvalidParams(format!(
            "{} masks cannot train a {dim}-dimensional embedding",
            masks.len()
        )));
    }
    let (width, height) = (masks[0].width, masks[0].height);
    for m in masks {
        m.same_shape(&masks[0])?;
    }
    let n = masks.len();
    let p = width * height;
    let mut mean = vec![0.0; p];
    for m in masks {
        for (a, &v) in mean.iter_mut().zip(&m.data) {
            *a += v as f64;
        }
    }
    for a in &mut mean {
        *a /= n as f64;
    }
    let x = DMatrix::from_fn(n, p, |i, j| masks[i].data[j] as f64 - mean[j]);
    // eigenvectors of the n×n Gram matrix give the principal directions
    let gram = &x * x.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let components = order[..dim]
        .iter()
        .map(|&k| {
            let lambda = eig.eigenvalues[k];
            if lambda <= 1e-9 * top.max(1e-300) {
                return vec![0.0; p];
            }
            let u = eig.eigenvectors.column(k);
            let mut v: Vec<f64> = (0..p)
                .map(|j| (0..n).map(|i| u[i] * x[(i, j)]).sum::<f64>())
                .collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for a in &mut v {
                *a /= norm;
            }
            // deterministic sign: largest-magnitude entry positive
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, a| if a.abs() > acc.abs() { a } else { acc });
            if lead < 0.0 {
                for a in &mut v {
                    *a = -*a;
                }
            }
            v
        })
        .collect();
    Ok(LinearEmbedding {
        width,
        height,
        mean,
        components,
    })
}

/// Area share of the largest foreground component at or above which a
/// secondary component makes a mask invalid.
pub const SECONDARY_COMPONENT_SHARE: f64 = 0.05;

/// Component sizes of the pixels where `data == value`, with the given
/// connectivity, and whether each component touches the border.
fn components(mask: &BinaryMask, value: u8, eight: bool) -> Vec<(usize, bool)> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || mask.data[start] != value {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        let mut border = false;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            if x == 0 || y == 0 || x == w as isize - 1 || y == h as isize - 1 {
                border = true;
            }
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && mask.data[j] == value {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push((size, border));
    }
    out
}

/// Anatomical plausibility: non-empty, no interior hole (4-connected
/// background component off the border), and no secondary 8-connected
/// foreground component of at least 5% of the largest one's area.
pub fn shape_valid(mask: &BinaryMask) -> bool {
    let fg = components(mask, 1, true);
    let Some(largest) = fg.iter().map(|c| c.0).max() else {
        return false;
    };
    let mut big = 0;
    for &(size, _) in &fg {
        if size as f64 >= SECONDARY_COMPONENT_SHARE * largest as f64 {
            big += 1;
        }
    }
    if big > 1 {
        return false;
    }
    components(mask, 0, false).iter().all(|&(_, border)| border)
}

/// Product Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub points: Vec<Vec<f64>>,
    pub bandwidth: Vec<f64>,
}

/// Bandwidth floor for dimensions without spread.
const MIN_BANDWIDTH: f64 = 1e-3;

impl Kde {
    /// Scott's rule per dimension: `h_j = σ_j · n^(−1/(D+4))`.
    pub fn scott(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyInput("density estimate without points"));
        }
        let d = points[0].len();
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let bandwidth = (0..d)
            .map(|j| {
                let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
                let var = if n > 1 {
                    points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                (var.sqrt() * factor).max(MIN_BANDWIDTH)
            })
            .collect();
        Ok(Self { points, bandwidth })
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let d = self.bandwidth.len();
        let norm = -(self.points.len() as f64).ln()
            - self.bandwidth.iter().map(|h| h.ln()).sum::<f64>()
            - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let inv: Vec<f64> = self.bandwidth.iter().map(|h| 1.0 / h).collect();
        let mut exps = Vec::with_capacity(self.points.len());
        let mut m = f64::NEG_INFINITY;
        for p in &self.points {
            let mut q = 0.0;
            for j in 0..d {
                let t = (p[j] - z[j]) * inv[j];
                q += t * t;
            }
            let e = -0.5 * q;
            m = m.max(e);
            exps.push(e);
        }
        // terms more than 40 nats below the peak cannot change the sum
        let sum: f64 = exps
            .iter()
            .filter(|&&e| e - m > -40.0)
            .map(|e| (e - m).exp())
            .sum();
        norm + m + sum.ln()
    }
}

/// Multivariate normal with eigenvalues of the covariance floored at 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
    log_norm: f64,
}

/// Covariance eigenvalue floor.
pub const COV_FLOOR: f64 = 1e-6;

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch("covariance shape".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let floored = eig.eigenvalues.map(|l| l.max(COV_FLOOR));
        let cov =
            &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("covariance is not positive definite".into()))?;
        let inv = chol.inverse();
        let log_det: f64 = floored.iter().map(|l| l.ln()).sum();
        Ok(Self {
            mean,
            chol: chol.l(),
            inv,
            cov,
            log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    /// Sample mean and population covariance of `points`.
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("Gaussian fit without points"));
        }
        let d = points[0].len();
        let n = points.len() as f64;
        let mean = DVector::from_fn(d, |j, _| points.iter().map(|p| p[j]).sum::<f64>() / n);
        let mut cov = DMatrix::zeros(d, d);
        for p in points {
            let c = DVector::from_fn(d, |j, _| p[j] - mean[j]);
            cov += &c * c.transpose();
        }
        Self::new(mean, cov / n)
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for i in 0..d {
            let ci = z[i] - self.mean[i];
            let mut row = 0.0;
            for (j, zj) in z.iter().enumerate() {
                row += self.inv[(i, j)] * (zj - self.mean[j]);
            }
            q += ci * row;
        }
        self.log_norm - 0.5 * q
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let e = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        (&self.mean + &self.chol * e).iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldParams {
    /// Accepted samples to collect.
    pub target_count: usize,
    pub rng_seed: u64,
    /// Proposals per independently seeded batch.
    pub batch_size: usize,
}

impl Default for ManifoldParams {
    fn default() -> Self {
        Self {
            target_count: 110_000,
            rng_seed: 0,
            batch_size: 4096,
        }
    }
}

/// Acceptance statistics of a manifold build.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ManifoldStats {
    pub proposed: u64,
    pub accepted: u64,
    /// Mean `log f_p` over all proposals and over the accepted ones.
    pub proposal_log_density_mean: f64,
    pub accepted_log_density_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidManifold {
    pub samples: Vec<Vec<f64>>,
    pub kde: Kde,
    pub gaussian_mean: Vec<f64>,
    pub gaussian_cov: Vec<Vec<f64>>,
    pub k_rs: f64,
    pub stats: ManifoldStats,
}

/// Minimum number of valid masks for a manifold.
pub const MIN_MANIFOLD_MASKS: usize = 30;
/// Proposals after which a low acceptance rate aborts the build.
pub const STARVATION_PROPOSALS: u64 = 1_000_000;
/// Acceptance rate under which the build counts as starved.
pub const STARVATION_RATE: f64 = 1e-4;

struct BatchResult {
    accepted: Vec<(Vec<f64>, f64)>,
    proposed: u64,
    log_fp_sum: f64,
}

/// Sample the manifold of latent codes whose decodes are valid shapes.
pub fn build_manifold(
    embedding: &dyn LatentEmbedding,
    valid_masks: &[BinaryMask],
    params: &ManifoldParams,
) -> Result<ValidManifold> {
    if valid_masks.len() < MIN_MANIFOLD_MASKS {
        return Err(Error::InvalidParams(format!(
            "manifold needs at least {MIN_MANIFOLD_MASKS} valid masks, got {}",
            valid_masks.len()
        )));
    }
    if params.target_count == 0 || params.batch_size == 0 {
        return Err(Error::InvalidParams(
            "target_count and batch_size must be >= 1".into(),
        ));
    }
    let codes = valid_masks
        .iter()
        .map(|m| embedding.encode(m))
        .collect::<Result<Vec<_>>>()?;
    let kde = Kde::scott(codes.clone())?;
    let q = Gaussian::fit(&codes)?;
    let max_ratio = codes
        .iter()
        .map(|z| kde.log_density(z) - q.log_density(z))
        .fold(f64::NEG_INFINITY, f64::max);
    let log_k = 1.1f64.ln() + max_ratio;

    let batch = |k: u64| -> BatchResult {
        let mut rng = stage_rng(params.rng_seed, &format!("manifold/batch/{k}"));
        let mut out = BatchResult {
            accepted: Vec::new(),
            proposed: 0,
            log_fp_sum: 0.0,
        };
        for _ in 0..params.batch_size {
            let z = q.sample(&mut rng);
            let u: f64 = rng.random();
            out.proposed += 1;
            let log_fp = kde.log_density(&z);
            out.log_fp_sum += log_fp;
            // u·K·f_q(z) < f_p(z), evaluated in log space
            if u.ln() + log_k + q.log_density(&z) < log_fp && shape_valid(&embedding.decode(&z)) {
                out.accepted.push((z, log_fp));
            }
        }
        out
    };

    let wave = rayon::current_num_threads().max(1) as u64 * 2;
    let mut samples = Vec::with_capacity(params.target_count);
    let mut stats = ManifoldStats::default();
    let (mut sum_all, mut sum_acc) = (0.0, 0.0);
    let mut next = 0u64;
    while samples.len() < params.target_count {
        let results: Vec<BatchResult> = (next..next + wave).into_par_iter().map(batch).collect();
        next += wave;
        for r in results {
            if samples.len() >= params.target_count {
                break;
            }
            stats.proposed += r.proposed;
            sum_all += r.log_fp_sum;
            for (z, lp) in r.accepted {
                if samples.len() >= params.target_count {
                    break;
                }
                sum_acc += lp;
                samples.push(z);
            }
        }
        stats.accepted = samples.len() as u64;
        if stats.proposed >= STARVATION_PROPOSALS
            && (stats.accepted as f64) < STARVATION_RATE * stats.proposed as f64
        {
            return Err(Error::ManifoldStarved {
                accepted: stats.accepted as usize,
                proposed: stats.proposed as usize,
            });
        }
    }
    stats.proposal_log_density_mean = sum_all / stats.proposed as f64;
    stats.accepted_log_density_mean = sum_acc / stats.accepted as f64;
    let d = q.mean.len();
    Ok(ValidManifold {
        samples,
        kde,
        gaussian_mean: q.mean.iter().copied().collect(),
        gaussian_cov: (0..d)
            .map(|i| (0..d).map(|j| q.cov[(i, j)]).collect())
            .collect(),
        k_rs: log_k.exp(),
        stats,
    })
}

/// Indices of the `k` samples nearest to `z` (Euclidean), nearest first.
pub fn nearest_samples(manifold: &ValidManifold, z: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = manifold
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                s.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                i,
            )
        })
        .collect();
    let k = k.min(d.len());
    if k == 0 {
        return Vec::new();
    }
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut near: Vec<(f64, usize)> = d[..k].to_vec();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.into_iter().map(|(_, i)| i).collect()
}

/// Decode of the mean of the `k` manifold samples nearest to the mask's
/// code. With `k = 1` the result is a decoded accepted sample and hence
/// always passes [`shape_valid`].
pub fn repair(
    mask: &BinaryMask,
    embedding: &dyn LatentEmbedding,
    manifold: &ValidManifold,
    k: usize,
) -> Result<BinaryMask> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be >= 1".into()));
    }
    if manifold.samples.is_empty() {
        return Err(Error::EmptyInput("manifold has no samples"));
    }
    let z = embedding.encode(mask)?;
    let near = nearest_samples(manifold, &z, k);
    let mut mean = vec![0.0; z.len()];
    for &i in &near {
        for (m, v) in mean.iter_mut().zip(&manifold.samples[i]) {
            *m += v / near.len() as f64;
        }
    }
    Ok(embedding.decode(&mean))
}

/// Embedding plus manifold, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeModel {
    pub embedding: LinearEmbedding,
    pub manifold: ValidManifold,
}

impl ShapeModel {
    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Filled ellipse with center `(cx, cy)`, semi-axes `a`, `b` (pixels) and
/// rotation `angle` (radians); pixel centers are tested.
pub fn ellipse_mask(
    width: usize,
    height: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
) -> BinaryMask {
    let (s, c) = angle.sin_cos();
    let mut m = BinaryMask::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (c * dx + s * dy) / a;
            let v = (-s * dx + c * dy) / b;
            if u * u + v * v <= 1.0 {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// Latent dimension used for shape models unless configured otherwise.
pub const DEFAULT_LATENT_DIM: usize = 5;

/// Angular width (radians) of the wedge removed by synthetic decay.
pub const DEFAULT_WEDGE_SPAN: f64 = 2.0;

/// Parameters of a generated ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl EllipseSpec {
    /// Ellipse centered in the raster, as in a region-of-interest crop,
    /// with random semi-axes and orientation.
    pub fn random(rng: &mut impl Rng, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        let side = w.min(h);
        Self {
            cx: 0.5 * w,
            cy: 0.5 * h,
            a: rng.random_range(0.25 * side..0.32 * side),
            b: rng.random_range(0.18 * side..0.24 * side),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    pub fn render(&self, width: usize, height: usize) -> BinaryMask {
        ellipse_mask(width, height, self.cx, self.cy, self.a, self.b, self.angle)
    }
}

/// `count` random valid ellipse masks.
pub fn ellipse_dataset(
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Vec<(EllipseSpec, BinaryMask)> {
    let mut rng = stage_rng(seed, "shaperepair/ellipses");
    (0..count)
        .map(|_| {
            let e = EllipseSpec::random(&mut rng, width, height);
            (e, e.render(width, height))
        })
        .collect()
}

/// Remove the pixels whose direction from `(cx, cy)` lies within the angular
/// wedge `[start, start + span)`.
pub fn wedge_decay(mask: &BinaryMask, cx: f64, cy: f64, start: f64, span: f64) -> BinaryMask {
    let tau = std::f64::consts::TAU;
    let mut out = mask.clone();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let t = (y as f64 + 0.5 - cy).atan2(x as f64 + 0.5 - cx);
            if (t - start).rem_euclid(tau) < span {
                out.set(x, y, false);
            }
        }
    }
    out
}
