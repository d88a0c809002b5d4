//! Synthetic temporal datasets, persistence, and windowing.
//!
//! Two generators exercise the prediction axis at desk scale: a linear
//! Gaussian state-space model (analytically tractable, used by the sampler
//! oracles) and advected Gaussian blobs on a periodic grid (spatiotemporal,
//! mass-conserving). Datasets are persisted in a single binary container:
//! a fixed 64-byte header, a row-major f64 little-endian payload, and a TOML
//! metadata trailer whose byte length sits in the header.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::checkpoint::write_atomic;
use crate::error::{DyDiffError, Result};
use crate::rng::RngFactory;
use crate::sequence::StateSequence;
use crate::Real;

/// A clean trajectory split into `P + 1` observations `x^{-P:0}` and `S`
/// prediction targets `x^{1:S}`; targets immediately follow observations in
/// source time.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    observations: StateSequence,
    targets: StateSequence,
}

impl SequenceWindow {
    pub fn new(observations: StateSequence, targets: StateSequence) -> Result<Self> {
        if observations.end() != 0 {
            return Err(DyDiffError::NonContiguous(format!(
                "observations must cover -P..=0, got {}..={}",
                observations.start(),
                observations.end()
            )));
        }
        if targets.start() != 1 {
            return Err(DyDiffError::NonContiguous(format!(
                "targets must cover 1..=S, got {}..={}",
                targets.start(),
                targets.end()
            )));
        }
        if observations.frame_shape() != targets.frame_shape() {
            return Err(DyDiffError::ShapeMismatch {
                expected: observations.frame_shape().to_vec(),
                got: targets.frame_shape().to_vec(),
            });
        }
        Ok(Self {
            observations,
            targets,
        })
    }

    /// Splits a full `-P..=S` trajectory into a window.
    pub fn from_full(full: &StateSequence) -> Result<Self> {
        if full.start() > 0 || full.end() < 1 {
            return Err(DyDiffError::NonContiguous(format!(
                "window must span -P..=S with P >= 0, S >= 1; got {}..={}",
                full.start(),
                full.end()
            )));
        }
        Self::new(full.slice(full.start(), 0)?, full.slice(1, full.end())?)
    }

    /// Number of past states beyond the current one (observations are `-P..=0`).
    pub fn p(&self) -> usize {
        (-self.observations.start()) as usize
    }

    /// Number of prediction targets.
    pub fn s(&self) -> usize {
        self.targets.num_frames()
    }

    pub fn observations(&self) -> &StateSequence {
        &self.observations
    }

    pub fn targets(&self) -> &StateSequence {
        &self.targets
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.observations.frame_shape()
    }

    /// The full clean trajectory `x^{-P:S}`.
    pub fn full(&self) -> StateSequence {
        self.observations
            .concat(&self.targets)
            .expect("window parts are contiguous by construction")
    }
}

/// Global affine normalizer `(x - mean) / std`, stored in dataset metadata and
/// applied when a dataset is loaded for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Real,
    pub std: Real,
}

impl Normalizer {
    fn fit(values: &[Real]) -> Self {
        let n = values.len() as Real;
        let mean = values.iter().sum::<Real>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
        Self {
            mean,
            std: var.sqrt().max(1e-12),
        }
    }

    pub fn apply(&self, v: Real) -> Real {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: Real) -> Real {
        v * self.std + self.mean
    }
}

/// Generator provenance and reproducibility metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub params: String,
    pub seed: u64,
    pub fingerprint: String,
    pub normalizer: Normalizer,
}

/// An in-memory dataset: `num_sequences` trajectories of `length` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_sequences: usize,
    length: usize,
    frame_shape: Vec<usize>,
    data: Vec<Real>,
    meta: DatasetMeta,
}

impl Dataset {
    fn assemble(
        num_sequences: usize,
        length: usize,
        frame_shape: Vec<usize>,
        data: Vec<Real>,
        generator: &str,
        params: String,
        seed: u64,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DyDiffError::Dataset("generator produced non-finite values".into()));
        }
        let normalizer = Normalizer::fit(&data);
        let fingerprint = fingerprint_payload(num_sequences, length, &frame_shape, &data);
        Ok(Self {
            num_sequences,
            length,
            frame_shape,
            data,
            meta: DatasetMeta {
                generator: generator.to_string(),
                params,
                seed,
                fingerprint,
                normalizer,
            },
        })
    }

    pub fn num_sequences(&self) -> usize {
        self.num_sequences
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.frame_shape
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape.iter().product()
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn fingerprint(&self) -> &str {
        &self.meta.fingerprint
    }

    /// One frame of one sequence.
    pub fn frame(&self, seq: usize, k: usize) -> &[Real] {
        let fl = self.frame_len();
        let o = (seq * self.length + k) * fl;
        &self.data[o..o + fl]
    }

    pub fn values(&self) -> &[Real] {
        &self.data
    }

    /// A copy with the stored normalizer applied to every value.
    pub fn normalized(&self) -> Dataset {
        let norm = self.meta.normalizer;
        let mut out = self.clone();
        for v in &mut out.data {
            *v = norm.apply(*v);
        }
        out
    }

    /// All valid windows, in source order or deterministically shuffled.
    /// Windows never cross sequence boundaries; each covers `p + 1 + s`
    /// consecutive frames.
    pub fn window_iter(&self, p: usize, s: usize, shuffle_seed: Option<u64>) -> Result<WindowIter<'_>> {
        let need = p + s + 1;
        if s == 0 {
            return Err(DyDiffError::InvalidInput("S must be at least 1".into()));
        }
        if self.length < need {
            return Err(DyDiffError::Dataset(format!(
                "window of {need} frames does not fit sequences of length {}",
                self.length
            )));
        }
        let per_seq = self.length - need + 1;
        let mut order: Vec<(usize, usize)> = (0..self.num_sequences)
            .flat_map(|q| (0..per_seq).map(move |o| (q, o)))
            .collect();
        if let Some(seed) = shuffle_seed {
            let mut rng = RngFactory::new(seed).stream(&[0x57_49_4e_44]);
            // Fisher-Yates.
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        Ok(WindowIter {
            dataset: self,
            p,
            s,
            order,
            next: 0,
        })
    }

    /// Serializes the dataset into the binary container at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta =
            toml::to_string(&self.meta).map_err(|e| DyDiffError::Dataset(e.to_string()))?;
        let meta_bytes = meta.as_bytes();
        let mut dims = [0u32; 6];
        let rank = 2 + self.frame_shape.len();
        if rank > 6 {
            return Err(DyDiffError::Dataset("rank exceeds container limit of 6".into()));
        }
        dims[0] = self.num_sequences as u32;
        dims[1] = self.length as u32;
        for (i, &d) in self.frame_shape.iter().enumerate() {
            dims[2 + i] = d as u32;
        }

        let mut bytes = Vec::with_capacity(64 + self.data.len() * 8 + meta_bytes.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes()); // version
        bytes.extend_from_slice(&1u32.to_le_bytes()); // dtype: f64 LE
        bytes.extend_from_slice(&(rank as u32).to_le_bytes());
        for d in dims {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
        bytes.resize(64, 0);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(meta_bytes);
        write_atomic(path, &bytes)
    }

    /// Reads a container and returns the raw (unnormalized) dataset after
    /// validating the header and the content fingerprint.
    pub fn read_raw(path: &Path) -> Result<Dataset> {
        let mut file = fs::File::open(path)?;
        let mut header = [0u8; 64];
        file.read_exact(&mut header)
            .map_err(|_| DyDiffError::Dataset("container shorter than its header".into()))?;
        if &header[0..8] != MAGIC {
            return Err(DyDiffError::Dataset("bad magic; not a dataset container".into()));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != 1 {
            return Err(DyDiffError::Dataset(format!("unsupported version {version}")));
        }
        let dtype = u32::from_le_bytes(header[12..16].try_into().unwrap());
        if dtype != 1 {
            return Err(DyDiffError::Dataset(format!("unsupported dtype code {dtype}")));
        }
        let rank = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        if !(3..=6).contains(&rank) {
            return Err(DyDiffError::Dataset(format!("bad rank {rank}")));
        }
        let mut dims = [0usize; 6];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32::from_le_bytes(header[20 + 4 * i..24 + 4 * i].try_into().unwrap()) as usize;
        }
        let meta_len = u64::from_le_bytes(header[44..52].try_into().unwrap()) as usize;

        let count: usize = dims[..rank].iter().product();
        let mut payload = vec![0u8; count * 8];
        file.read_exact(&mut payload)
            .map_err(|_| DyDiffError::Dataset("container payload truncated".into()))?;
        let mut meta_bytes = vec![0u8; meta_len];
        file.read_exact(&mut meta_bytes)
            .map_err(|_| DyDiffError::Dataset("metadata trailer truncated".into()))?;

        let data: Vec<Real> = payload
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let meta: DatasetMeta = toml::from_str(
            std::str::from_utf8(&meta_bytes)
                .map_err(|_| DyDiffError::Dataset("metadata is not UTF-8".into()))?,
        )
        .map_err(|e| DyDiffError::Dataset(format!("bad metadata: {e}")))?;

        let frame_shape = dims[2..rank].to_vec();
        let computed = fingerprint_payload(dims[0], dims[1], &frame_shape, &data);
        if computed != meta.fingerprint {
            return Err(DyDiffError::Dataset(format!(
                "fingerprint mismatch: stored {}, computed {computed}",
                meta.fingerprint
            )));
        }
        Ok(Dataset {
            num_sequences: dims[0],
            length: dims[1],
            frame_shape,
            data,
            meta,
        })
    }

    /// Standard load path: read, validate, and apply the stored normalizer so
    /// diffusion operates on standardized values.
    pub fn read(path: &Path) -> Result<Dataset> {
        Ok(Self::read_raw(path)?.normalized())
    }
}

const MAGIC: &[u8; 8] = b"DYDIFFDS";

fn fingerprint_payload(
    num_sequences: usize,
    length: usize,
    frame_shape: &[usize],
    data: &[Real],
) -> String {
    let mut hasher = Sha256::new();
    hasher.update((num_sequences as u64).to_le_bytes());
    hasher.update((length as u64).to_le_bytes());
    for &d in frame_shape {
        hasher.update((d as u64).to_le_bytes());
    }
    for v in data {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stream over a dataset's windows in a fixed (possibly shuffled) order.
pub struct WindowIter<'a> {
    dataset: &'a Dataset,
    p: usize,
    s: usize,
    order: Vec<(usize, usize)>,
    next: usize,
}

impl WindowIter<'_> {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Iterator for WindowIter<'_> {
    type Item = SequenceWindow;

    fn next(&mut self) -> Option<SequenceWindow> {
        let &(seq, off) = self.order.get(self.next)?;
        self.next += 1;
        let fl = self.dataset.frame_len();
        let base = (seq * self.dataset.length + off) * fl;
        let count = (self.p + 1 + self.s) * fl;
        let full = StateSequence::from_flat(
            -(self.p as i64),
            &self.dataset.frame_shape,
            self.dataset.data[base..base + count].to_vec(),
        )
        .expect("window bounds checked at iterator construction");
        Some(SequenceWindow::from_full(&full).expect("range starts at -p"))
    }
}

/// Transition operator of the linear Gaussian generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransitionSpec {
    /// `A = factor * I`.
    ScaledIdentity { factor: Real },
    /// Dense row-major `dim x dim` matrix.
    Matrix { rows: Vec<Vec<Real>> },
}

impl TransitionSpec {
    fn matrix(&self, dim: usize) -> Result<Vec<Real>> {
        match self {
            TransitionSpec::ScaledIdentity { factor } => {
                let mut m = vec![0.0; dim * dim];
                for i in 0..dim {
                    m[i * dim + i] = *factor;
                }
                Ok(m)
            }
            TransitionSpec::Matrix { rows } => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(DyDiffError::Dataset(format!(
                        "transition matrix must be {dim}x{dim}"
                    )));
                }
                Ok(rows.iter().flatten().copied().collect())
            }
        }
    }
}

/// Estimates the spectral radius via `||A^256||_F^(1/256)` (repeated
/// squaring); accurate to a factor `dim^(1/256)` which is negligible at desk
/// scale.
fn spectral_radius_estimate(a: &[Real], dim: usize) -> Real {
    let mut m = a.to_vec();
    let mut scale_log = 0.0;
    for _ in 0..8 {
        // Normalize to dodge overflow/underflow, tracking the log scale.
        let norm = m.iter().map(|v| v * v).sum::<Real>().sqrt().max(1e-300);
        for v in &mut m {
            *v /= norm;
        }
        scale_log += norm.ln();
        let mut next = vec![0.0; dim * dim];
        for i in 0..dim {
            for k in 0..dim {
                let v = m[i * dim + k];
                if v == 0.0 {
                    continue;
                }
                for j in 0..dim {
                    next[i * dim + j] += v * m[k * dim + j];
                }
            }
        }
        m = next;
        scale_log *= 2.0;
    }
    let norm = m.iter().map(|v| v * v).sum::<Real>().sqrt().max(1e-300);
    ((norm.ln() + scale_log) / 256.0).exp()
}

/// Lower-triangular Cholesky factor of a small SPD matrix.
fn cholesky(a: &[Real], dim: usize) -> Result<Vec<Real>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut sum = a[i * dim + j];
            for k in 0..j {
                sum -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(DyDiffError::Dataset(
                        "stationary covariance is not positive definite".into(),
                    ));
                }
                l[i * dim + j] = sum.sqrt();
            } else {
                l[i * dim + j] = sum / l[j * dim + j];
            }
        }
    }
    Ok(l)
}

/// `x_{k+1} = A x_k + w_k`, `w_k ~ N(0, q^2 I)`, started from the stationary
/// distribution. Rejects transitions with spectral radius >= 1.
pub fn gen_linear_gaussian(
    num_sequences: usize,
    length: usize,
    dim: usize,
    transition: &TransitionSpec,
    noise_scale: Real,
    seed: u64,
) -> Result<Dataset> {
    if num_sequences == 0 || length == 0 || dim == 0 {
        return Err(DyDiffError::Dataset("counts must be positive".into()));
    }
    if noise_scale < 0.0 {
        return Err(DyDiffError::Dataset("noise scale must be nonnegative".into()));
    }
    let a = transition.matrix(dim)?;
    let rho = spectral_radius_estimate(&a, dim);
    if rho >= 0.999 {
        return Err(DyDiffError::Dataset(format!(
            "transition is not stable: spectral radius ~ {rho:.4} (need < 1)"
        )));
    }

    // Stationary covariance by fixed-point iteration of S = A S A^T + q^2 I.
    let q2 = noise_scale * noise_scale;
    let mut cov = vec![0.0; dim * dim];
    for i in 0..dim {
        cov[i * dim + i] = q2.max(1e-12);
    }
    for _ in 0..2000 {
        let mut next = vec![0.0; dim * dim];
        // next = A cov A^T + q^2 I
        let mut tmp = vec![0.0; dim * dim];
        for i in 0..dim {
            for k in 0..dim {
                let v = a[i * dim + k];
                if v == 0.0 {
                    continue;
                }
                for j in 0..dim {
                    tmp[i * dim + j] += v * cov[k * dim + j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += tmp[i * dim + k] * a[j * dim + k];
                }
                next[i * dim + j] = acc;
            }
        }
        for i in 0..dim {
            next[i * dim + i] += q2;
        }
        let delta: Real = next
            .iter()
            .zip(&cov)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, Real::max);
        cov = next;
        if delta < 1e-14 {
            break;
        }
    }
    // Degenerate stationary covariance (q = 0): fall back to a unit
    // Gaussian init; the trajectory itself is then deterministic.
    let chol = match cholesky(&cov, dim) {
        Ok(l) => l,
        Err(_) if noise_scale == 0.0 => {
            let mut l = vec![0.0; dim * dim];
            for i in 0..dim {
                l[i * dim + i] = 1.0;
            }
            l
        }
        Err(e) => return Err(e),
    };

    let factory = RngFactory::new(seed);
    let mut data = Vec::with_capacity(num_sequences * length * dim);
    for q in 0..num_sequences {
        let mut rng = factory.stream(&[0x4c47, q as u64]);
        // Stationary init: x_0 = L z.
        let z: Vec<Real> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut x: Vec<Real> = (0..dim)
            .map(|i| (0..=i).map(|k| chol[i * dim + k] * z[k]).sum())
            .collect();
        data.extend_from_slice(&x);
        for _ in 1..length {
            let mut next = vec![0.0; dim];
            for i in 0..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += a[i * dim + k] * x[k];
                }
                let w: Real = rng.sample(StandardNormal);
                next[i] = acc + noise_scale * w;
            }
            data.extend_from_slice(&next);
            x = next;
        }
    }
    Dataset::assemble(
        num_sequences,
        length,
        vec![dim],
        data,
        "linear-gaussian",
        format!("dim={dim} transition={transition:?} noise_scale={noise_scale}"),
        seed,
    )
}

/// Velocity field of the blob generator: a shared base drift plus a
/// per-blob random-walk perturbation of scale `jitter` per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityFieldSpec {
    pub base: (Real, Real),
    pub jitter: Real,
    pub num_blobs: usize,
    /// Gaussian bump width in cells; >= 1 keeps the discrete mass
    /// translation-invariant to well below 1e-6.
    pub sigma: Real,
}

impl Default for VelocityFieldSpec {
    fn default() -> Self {
        Self {
            base: (0.7, 0.3),
            jitter: 0.1,
            num_blobs: 3,
            sigma: 1.6,
        }
    }
}

/// Gaussian bumps advected over a periodic grid with stochastic velocity
/// perturbations; per-frame total mass is conserved (periodic advection).
pub fn gen_advected_blobs(
    num_sequences: usize,
    length: usize,
    grid: usize,
    field: &VelocityFieldSpec,
    seed: u64,
) -> Result<Dataset> {
    if grid < 8 {
        return Err(DyDiffError::Dataset(format!(
            "grid must be at least 8, got {grid}"
        )));
    }
    if num_sequences == 0 || length == 0 || field.num_blobs == 0 {
        return Err(DyDiffError::Dataset("counts must be positive".into()));
    }
    if field.sigma < 1.0 {
        return Err(DyDiffError::Dataset(
            "blob sigma below 1 cell breaks discrete mass conservation".into(),
        ));
    }
    let g = grid as Real;
    let factory = RngFactory::new(seed);
    let mut data = Vec::with_capacity(num_sequences * length * grid * grid);
    for q in 0..num_sequences {
        let mut rng = factory.stream(&[0x424c_4f42, q as u64]);
        let mut centers: Vec<(Real, Real)> = (0..field.num_blobs)
            .map(|_| (rng.gen_range(0.0..g), rng.gen_range(0.0..g)))
            .collect();
        let mut vels: Vec<(Real, Real)> = (0..field.num_blobs)
            .map(|_| field.base)
            .collect();
        let amps: Vec<Real> = (0..field.num_blobs)
            .map(|_| rng.gen_range(0.6..1.4))
            .collect();
        for _ in 0..length {
            data.extend(render_blobs(grid, &centers, &amps, field.sigma));
            for (b, c) in centers.iter_mut().enumerate() {
                let (dvy, dvx): (Real, Real) =
                    (rng.sample(StandardNormal), rng.sample(StandardNormal));
                vels[b].0 += field.jitter * dvy;
                vels[b].1 += field.jitter * dvx;
                c.0 = (c.0 + vels[b].0).rem_euclid(g);
                c.1 = (c.1 + vels[b].1).rem_euclid(g);
            }
        }
    }
    Dataset::assemble(
        num_sequences,
        length,
        vec![grid, grid],
        data,
        "advected-blobs",
        format!("grid={grid} field={field:?}"),
        seed,
    )
}

/// Renders periodized Gaussian bumps on the grid (3x3 wrapped images, enough
/// for sigma >= 1 to conserve the discrete mass to ~1e-12).
fn render_blobs(grid: usize, centers: &[(Real, Real)], amps: &[Real], sigma: Real) -> Vec<Real> {
    let g = grid as Real;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut frame = vec![0.0; grid * grid];
    for (b, &(cy, cx)) in centers.iter().enumerate() {
        for y in 0..grid {
            for x in 0..grid {
                let mut v = 0.0;
                for iy in -1i32..=1 {
                    let dy = y as Real - cy + iy as Real * g;
                    for ix in -1i32..=1 {
                        let dx = x as Real - cx + ix as Real * g;
                        v += (-(dy * dy + dx * dx) * inv).exp();
                    }
                }
                frame[y * grid + x] += amps[b] * v;
            }
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_split_and_full_roundtrip() {
        let full = StateSequence::scalars(-2, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = SequenceWindow::from_full(&full).unwrap();
        assert_eq!(w.p(), 2);
        assert_eq!(w.s(), 2);
        assert_eq!(w.observations().frame(0), &[3.0]);
        assert_eq!(w.targets().frame(1), &[4.0]);
        assert_eq!(w.full(), full);
    }

    #[test]
    fn rejects_misaligned_ranges() {
        let obs = StateSequence::scalars(-1, &[1.0, 2.0]).unwrap();
        let bad_targets = StateSequence::scalars(2, &[3.0]).unwrap();
        assert!(SequenceWindow::new(obs, bad_targets).is_err());
        let no_targets = StateSequence::scalars(-1, &[1.0, 2.0]).unwrap();
        assert!(SequenceWindow::from_full(&no_targets).is_err());
    }

    #[test]
    fn zero_transition_zero_noise_collapses_to_zero() {
        let ds = gen_linear_gaussian(
            2,
            5,
            3,
            &TransitionSpec::ScaledIdentity { factor: 0.0 },
            0.0,
            1,
        )
        .unwrap();
        for q in 0..2 {
            for k in 1..5 {
                assert!(ds.frame(q, k).iter().all(|&v| v == 0.0), "seq {q} frame {k}");
            }
        }
    }

    #[test]
    fn ar1_stationary_variance_matches_formula() {
        // A = 0.9 I, q = 0.1, dim 4: stationary variance q^2/(1-0.81) per
        // coordinate, within 5% at 1e6 samples.
        let ds = gen_linear_gaussian(
            50,
            5000,
            4,
            &TransitionSpec::ScaledIdentity { factor: 0.9 },
            0.1,
            7,
        )
        .unwrap();
        let want = 0.01 / (1.0 - 0.81);
        let values = ds.values();
        let n = values.len() as Real;
        assert!(n >= 1e6);
        let mean = values.iter().sum::<Real>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
        assert!(
            (var - want).abs() < 0.05 * want,
            "var {var} vs stationary {want}"
        );
    }

    #[test]
    fn unstable_transition_is_rejected() {
        let err = gen_linear_gaussian(
            1,
            10,
            2,
            &TransitionSpec::ScaledIdentity { factor: 1.01 },
            0.1,
            0,
        );
        assert!(err.is_err());
        // A rotation-like matrix with radius ~1.02 must also be rejected.
        let rows = vec![vec![0.0, -1.02], vec![1.02, 0.0]];
        assert!(gen_linear_gaussian(1, 10, 2, &TransitionSpec::Matrix { rows }, 0.1, 0).is_err());
    }

    #[test]
    fn fingerprint_is_seed_deterministic() {
        let spec = TransitionSpec::ScaledIdentity { factor: 0.5 };
        let a = gen_linear_gaussian(3, 20, 2, &spec, 0.2, 42).unwrap();
        let b = gen_linear_gaussian(3, 20, 2, &spec, 0.2, 42).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = gen_linear_gaussian(3, 20, 2, &spec, 0.2, 43).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn blobs_conserve_mass_and_zero_velocity_is_static() {
        let field = VelocityFieldSpec {
            base: (0.9, -0.4),
            jitter: 0.15,
            num_blobs: 3,
            sigma: 1.5,
        };
        let ds = gen_advected_blobs(2, 12, 16, &field, 3).unwrap();
        for q in 0..2 {
            let mass0: Real = ds.frame(q, 0).iter().sum();
            for k in 1..12 {
                let mass: Real = ds.frame(q, k).iter().sum();
                assert!(
                    ((mass - mass0) / mass0).abs() < 1e-6,
                    "seq {q} frame {k}: {mass} vs {mass0}"
                );
            }
        }

        let static_field = VelocityFieldSpec {
            base: (0.0, 0.0),
            jitter: 0.0,
            num_blobs: 2,
            sigma: 1.5,
        };
        let ds = gen_advected_blobs(1, 6, 12, &static_field, 9).unwrap();
        for k in 1..6 {
            assert_eq!(ds.frame(0, k), ds.frame(0, 0), "frame {k} drifted");
        }

        assert!(gen_advected_blobs(1, 5, 6, &field, 0).is_err());
    }

    #[test]
    fn window_count_and_shuffle_multiset() {
        let ds = gen_linear_gaussian(
            4,
            11,
            2,
            &TransitionSpec::ScaledIdentity { factor: 0.8 },
            0.3,
            5,
        )
        .unwrap();
        let (p, s) = (2, 3);
        let windows: Vec<_> = ds.window_iter(p, s, None).unwrap().collect();
        assert_eq!(windows.len(), 4 * (11 - p - s));

        let shuffled: Vec<_> = ds.window_iter(p, s, Some(11)).unwrap().collect();
        assert_eq!(shuffled.len(), windows.len());
        // Same multiset: compare sorted flattened contents.
        let key = |w: &SequenceWindow| {
            w.full()
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        let mut a: Vec<_> = windows.iter().map(key).collect();
        let mut b: Vec<_> = shuffled.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        // Deterministic shuffle.
        let again: Vec<_> = ds.window_iter(p, s, Some(11)).unwrap().collect();
        assert_eq!(shuffled, again);

        // P = 0, S = 1 yields adjacent pairs.
        let pairs: Vec<_> = ds.window_iter(0, 1, None).unwrap().collect();
        assert_eq!(pairs.len(), 4 * 10);
        assert_eq!(pairs[0].observations().frame(0), ds.frame(0, 0));
        assert_eq!(pairs[0].targets().frame(1), ds.frame(0, 1));

        // Windows longer than the sequence are rejected.
        assert!(ds.window_iter(6, 6, None).is_err());
    }

    #[test]
    fn container_roundtrip_preserves_everything() {
        let ds = gen_linear_gaussian(
            2,
            9,
            3,
            &TransitionSpec::ScaledIdentity { factor: 0.7 },
            0.25,
            123,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("dydiff-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.bin");
        ds.save(&path).unwrap();

        let raw = Dataset::read_raw(&path).unwrap();
        assert_eq!(raw, ds);

        let norm = Dataset::read(&path).unwrap();
        let m = norm.values().iter().sum::<Real>() / norm.values().len() as Real;
        assert!(m.abs() < 1e-10, "normalized mean {m}");

        // Corrupting the payload is caught by the fingerprint.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[80] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(Dataset::read_raw(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
