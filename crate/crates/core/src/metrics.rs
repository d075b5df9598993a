//! Fréchet distances and cosine similarity scores over proxy embeddings.
//!
//! The embedders are seeded random projections, so the numbers are only
//! comparable between runs that share an embedder configuration. Every
//! [`MetricReport`] carries the hash of that configuration.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::Video;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-6;
const EIGEN_FLOOR: f64 = -1e-8;
const RESIDUE_TOL: f64 = 1e-6;

/// Square root of a symmetric positive semi-definite matrix through its
/// eigendecomposition. Eigenvalues down to `-1e-8` (relative to the largest
/// magnitude) are treated as rounding and clamped to zero.
pub fn psd_matrix_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::dims(
            "psd_matrix_sqrt",
            &[m.nrows(), m.ncols()],
            &[m.ncols(), m.nrows()],
        ));
    }
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > SYMMETRY_TOL {
                return Err(Error::contract(
                    "psd_matrix_sqrt",
                    format!("not symmetric: entries ({i},{j}) differ by {gap:e}"),
                ));
            }
        }
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(low) = eig.eigenvalues.iter().copied().find(|&v| v < EIGEN_FLOOR * scale) {
        return Err(Error::contract(
            "psd_matrix_sqrt",
            format!("negative eigenvalue {low:e}"),
        ));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Two-pass mean and unbiased covariance of the rows of `samples`. With
    /// fewer than `d + 1` samples the covariance is rank deficient; `shrink`
    /// then adds `λI` with `λ = 1e-6·trace/d`, otherwise it is an error.
    pub fn fit(samples: &[Vec<f64>], shrink: bool) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::contract(
                "gaussian_stats",
                format!("need at least 2 samples, got {n}"),
            ));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::dims("gaussian_stats", &[d], &[bad.len()]));
        }
        if n < d + 1 && !shrink {
            return Err(Error::contract(
                "gaussian_stats",
                format!("{n} samples cannot give a full-rank {d}-dim covariance"),
            ));
        }
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        if n < d + 1 {
            let lambda = 1e-6 * cov.trace() / d as f64;
            for i in 0..d {
                cov[(i, i)] += lambda;
            }
        }
        Ok(Self { mean, cov, count: n })
    }
}

/// `‖μ1 − μ2‖² + tr(C1 + C2 − 2·sqrt(C1^½ C2 C1^½))`.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    for (what, got) in [
        ("mu2", vec![mu2.len()]),
        ("cov1", vec![cov1.nrows(), cov1.ncols()]),
        ("cov2", vec![cov2.nrows(), cov2.ncols()]),
    ] {
        if got.iter().any(|&g| g != d) {
            return Err(Error::contract(
                "frechet_distance",
                format!("{what} has shape {got:?}, mean has {d}"),
            ));
        }
    }
    let s1 = psd_matrix_sqrt(cov1)?;
    let inner = &s1 * cov2 * &s1;
    let cross = psd_matrix_sqrt(&((&inner + inner.transpose()) * 0.5))?;
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * cross.trace();
    if value < -RESIDUE_TOL {
        return Err(Error::contract(
            "frechet_distance",
            format!("negative residue {value:e} beyond tolerance"),
        ));
    }
    Ok(value.max(0.0))
}

fn frechet_of(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (sa, sb) = (GaussianStats::fit(a, true)?, GaussianStats::fit(b, true)?);
    frechet_distance(&sa.mean, &sa.cov, &sb.mean, &sb.cov)
}

/// Maps one video frame to a feature vector.
pub trait FrameEmbedder {
    fn dim(&self) -> usize;
    fn embed_frame(&self, video: &Video, frame: usize) -> Result<Vec<f64>>;
    /// Stable description used for the report's configuration hash.
    fn describe(&self) -> String;
}

/// Maps a prompt to a feature vector.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Vec<f64>;
    fn describe(&self) -> String;
}

fn gaussian_matrix(seed: u64, rows: usize, cols: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng) * scale)
        .collect()
}

/// Average-pools a frame by `pool`, maps pixels to `[-1, 1]` and applies a
/// seeded Gaussian projection followed by `tanh`.
#[derive(Clone, Debug)]
pub struct ProjectionEmbedder {
    seed: u64,
    dim: usize,
    height: usize,
    width: usize,
    pool: usize,
    weights: Vec<f64>,
}

impl ProjectionEmbedder {
    pub fn new(seed: u64, dim: usize, height: usize, width: usize, pool: usize) -> Result<Self> {
        if dim == 0 || pool == 0 || !height.is_multiple_of(pool) || !width.is_multiple_of(pool) {
            return Err(Error::contract(
                "projection_embedder",
                format!("dim {dim}, pool {pool} must be positive and divide {height}×{width}"),
            ));
        }
        let inputs = 3 * (height / pool) * (width / pool);
        Ok(Self {
            seed,
            dim,
            height,
            width,
            pool,
            weights: gaussian_matrix(seed, dim, inputs),
        })
    }

    fn pooled(&self, v: &Video, k: usize) -> Vec<f64> {
        let (ph, pw, p) = (self.height / self.pool, self.width / self.pool, self.pool);
        let norm = 1.0 / (p * p) as f64;
        let mut out = Vec::with_capacity(3 * ph * pw);
        for ch in 0..3 {
            for by in 0..ph {
                for bx in 0..pw {
                    let mut s = 0.0;
                    for y in by * p..(by + 1) * p {
                        for x in bx * p..(bx + 1) * p {
                            s += v.get(k, ch, y, x) as f64;
                        }
                    }
                    out.push(2.0 * s * norm - 1.0);
                }
            }
        }
        out
    }
}

impl FrameEmbedder for ProjectionEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_frame(&self, video: &Video, frame: usize) -> Result<Vec<f64>> {
        if (video.height(), video.width()) != (self.height, self.width) || frame >= video.frames() {
            return Err(Error::dims(
                "embed_frame",
                &[frame, video.height(), video.width()],
                &[video.frames(), self.height, self.width],
            ));
        }
        let x = self.pooled(video, frame);
        Ok(self
            .weights
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>().tanh())
            .collect())
    }

    fn describe(&self) -> String {
        format!(
            "projection(seed={},dim={},size={}x{},pool={})",
            self.seed, self.dim, self.height, self.width, self.pool
        )
    }
}

/// Whole-clip features: the mean frame embedding followed by the mean
/// difference between consecutive frame embeddings, so reordering frames
/// changes the result.
pub struct ClipEmbedder<'a> {
    pub frames: &'a dyn FrameEmbedder,
}

impl ClipEmbedder<'_> {
    pub fn dim(&self) -> usize {
        2 * self.frames.dim()
    }

    pub fn embed_clip(&self, clip: &Video) -> Result<Vec<f64>> {
        let f = clip.frames();
        if f == 0 {
            return Err(Error::contract("embed_clip", "empty clip"));
        }
        let per: Vec<Vec<f64>> = (0..f)
            .map(|k| self.frames.embed_frame(clip, k))
            .collect::<Result<_>>()?;
        let d = self.frames.dim();
        let mut out = vec![0.0; 2 * d];
        for e in &per {
            for j in 0..d {
                out[j] += e[j] / f as f64;
            }
        }
        if f > 1 {
            for w in per.windows(2) {
                for j in 0..d {
                    out[d + j] += (w[1][j] - w[0][j]) / (f - 1) as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Sum of seeded Gaussian vectors, one per whitespace-separated word.
#[derive(Clone, Debug)]
pub struct BagOfWordsEmbedder {
    seed: u64,
    dim: usize,
}

impl BagOfWordsEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl TextEmbedder for BagOfWordsEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for word in text.split_whitespace() {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(word.to_lowercase().as_bytes());
            let word_seed = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
            for (o, w) in out.iter_mut().zip(gaussian_matrix(word_seed, 1, self.dim)) {
                *o += w;
            }
        }
        out
    }

    fn describe(&self) -> String {
        format!("bag-of-words(seed={},dim={})", self.seed, self.dim)
    }
}

fn all_frames(videos: &[Video], e: &dyn FrameEmbedder) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for v in videos {
        for k in 0..v.frames() {
            out.push(e.embed_frame(v, k)?);
        }
    }
    Ok(out)
}

/// Fréchet distance between the frame-embedding distributions of two video
/// sets.
pub fn fid(frames_a: &[Video], frames_b: &[Video], e: &dyn FrameEmbedder) -> Result<f64> {
    frechet_of(&all_frames(frames_a, e)?, &all_frames(frames_b, e)?)
}

/// Fréchet distance between clip-embedding distributions.
pub fn fvd(clips_a: &[Video], clips_b: &[Video], e: &ClipEmbedder<'_>) -> Result<f64> {
    let embed = |set: &[Video]| set.iter().map(|c| e.embed_clip(c)).collect::<Result<Vec<_>>>();
    frechet_of(&embed(clips_a)?, &embed(clips_b)?)
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn pooled_video(v: &Video, e: &dyn FrameEmbedder) -> Result<Vec<f64>> {
    let mut out = vec![0.0; e.dim()];
    for k in 0..v.frames() {
        for (o, x) in out.iter_mut().zip(e.embed_frame(v, k)?) {
            *o += x / v.frames() as f64;
        }
    }
    Ok(out)
}

/// `(clip_i, dino_i, clip_t)`: mean cosine similarity of paired generated and
/// target videos under two image embedders, and of generated videos against
/// their prompts. The text embedder must share the first image embedder's
/// dimension.
pub fn similarity_scores(
    gen: &[Video],
    target: &[Video],
    prompts: &[String],
    e_img: &dyn FrameEmbedder,
    e_fine: &dyn FrameEmbedder,
    e_txt: &dyn TextEmbedder,
) -> Result<(f64, f64, f64)> {
    if gen.len() != target.len() || gen.len() != prompts.len() {
        return Err(Error::contract(
            "similarity_scores",
            format!(
                "{} generated, {} targets, {} prompts",
                gen.len(),
                target.len(),
                prompts.len()
            ),
        ));
    }
    if gen.is_empty() {
        return Err(Error::contract("similarity_scores", "empty evaluation set"));
    }
    if e_txt.dim() != e_img.dim() {
        return Err(Error::contract(
            "similarity_scores",
            "text and image embedders differ in dimension",
        ));
    }
    let (mut ci, mut di, mut ct) = (0.0, 0.0, 0.0);
    for ((g, t), p) in gen.iter().zip(target).zip(prompts) {
        let (gi, ti) = (pooled_video(g, e_img)?, pooled_video(t, e_img)?);
        ci += cosine(&gi, &ti);
        di += cosine(&pooled_video(g, e_fine)?, &pooled_video(t, e_fine)?);
        ct += cosine(&gi, &e_txt.embed_text(p));
    }
    let n = gen.len() as f64;
    Ok((ci / n, di / n, ct / n))
}

/// The proxy embedders used by evaluation, built for one frame size.
pub struct EvalEmbedders {
    pub image: ProjectionEmbedder,
    pub fine: ProjectionEmbedder,
    pub text: BagOfWordsEmbedder,
}

impl EvalEmbedders {
    pub fn new(seed: u64, height: usize, width: usize) -> Result<Self> {
        let pool = if height.is_multiple_of(2) && width.is_multiple_of(2) {
            2
        } else {
            1
        };
        Ok(Self {
            image: ProjectionEmbedder::new(seed, 64, height, width, pool)?,
            fine: ProjectionEmbedder::new(seed.wrapping_add(1), 96, height, width, 1)?,
            text: BagOfWordsEmbedder::new(seed.wrapping_add(2), 64),
        })
    }

    pub fn config_hash(&self) -> String {
        let text = format!(
            "{};{};{}",
            self.image.describe(),
            self.fine.describe(),
            self.text.describe()
        );
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// One evaluation, in benchmark column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub fvd: f64,
    pub clip_i: f64,
    pub dino_i: f64,
    pub clip_t: f64,
    pub videos: usize,
    pub frames: usize,
    pub embedder_hash: String,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Header and value rows with right-aligned columns.
    pub fn table(&self) -> String {
        let heads = ["FID", "FVD", "CLIP-I", "DINO-I", "CLIP-T"];
        let vals = [
            format!("{:.4}", self.fid),
            format!("{:.4}", self.fvd),
            format!("{:.4}", self.clip_i),
            format!("{:.4}", self.dino_i),
            format!("{:.4}", self.clip_t),
        ];
        let widths: Vec<usize> = heads.iter().zip(&vals).map(|(h, v)| h.len().max(v.len())).collect();
        let row = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!(
            "{}\n{}\n",
            row(heads.to_vec()),
            row(vals.iter().map(String::as_str).collect())
        )
    }
}

/// Computes every metric for paired generated and target videos.
pub fn evaluate(gen: &[Video], target: &[Video], prompts: &[String], e: &EvalEmbedders) -> Result<MetricReport> {
    let (clip_i, dino_i, clip_t) = similarity_scores(gen, target, prompts, &e.image, &e.fine, &e.text)?;
    Ok(MetricReport {
        fid: fid(gen, target, &e.image)?,
        fvd: fvd(gen, target, &ClipEmbedder { frames: &e.image })?,
        clip_i,
        dino_i,
        clip_t,
        videos: gen.len(),
        frames: gen.iter().map(Video::frames).sum(),
        embedder_hash: e.config_hash(),
    })
}
