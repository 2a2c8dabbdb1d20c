//! Residual vector-quantized motion autoencoder.
//!
//! Motions are tokenized in a canonical frame space: root positions become
//! per-frame displacements and every channel is standardized with statistics
//! fitted on training data. Decoding integrates the displacements back to
//! positions and renormalizes the sin/cos pairs.

use mvq_tensor::{Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{channel as ch, MotionSequence, MOTION_DIM};
use crate::nn::{Conv1d, ResBlock};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RvqConfig {
    /// Residual layer count V; the grid has V + 1 rows.
    pub layers: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub downsample_ratio: usize,
    pub beta: f64,
    pub ema_decay: f64,
    /// Steps without any assignment before an entry is re-seeded.
    pub dead_after: u32,
    /// First layer included in the commitment term (0, or 1 for the
    /// literal reading that skips the base layer).
    pub commit_from: usize,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            codebook_size: 128,
            latent_dim: 64,
            width: 64,
            downsample_ratio: 4,
            beta: 0.02,
            ema_decay: 0.99,
            dead_after: 256,
            commit_from: 0,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config(format!("rvq.codebook_size must be >= 2, got {}", self.codebook_size)));
        }
        if ![2, 4].contains(&self.downsample_ratio) {
            return Err(Error::Config(format!(
                "rvq.downsample_ratio must be 2 or 4, got {}",
                self.downsample_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_decay == 0.0 {
            return Err(Error::Config(format!("rvq.ema_decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        if self.latent_dim == 0 || self.width == 0 {
            return Err(Error::Config("rvq dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// `n x d` encoder output for one motion.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub codes: Vec<f64>,
    pub dim: usize,
    /// Frames appended to reach a multiple of the downsampling ratio.
    pub pad_frames: usize,
}

impl LatentSequence {
    pub fn new(codes: Vec<f64>, dim: usize) -> Self {
        Self {
            codes,
            dim,
            pad_frames: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }
}

/// Row `j` holds the layer-`j` indices; row 0 is the base layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: Vec<Vec<usize>>,
}

impl TokenGrid {
    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        for (layer, row) in self.rows.iter().enumerate() {
            if row.len() != self.len() {
                return Err(crate::error::format_err("token grid", "ragged rows"));
            }
            if let Some((pos, &index)) = row.iter().enumerate().find(|(_, &t)| t >= k) {
                return Err(Error::CorruptToken { layer, pos, index, k });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Vec<f64>,
    k: usize,
    dim: usize,
    decay: f64,
    usage: Vec<u64>,
    cluster_size: Vec<f64>,
    embed_sum: Vec<f64>,
    idle: Vec<u32>,
    /// Entry 0 is the zero vector and never moves.
    pinned_zero: bool,
}

impl Codebook {
    /// Entry 0 pinned to zero, the rest zero until seeded from data.
    pub fn new(k: usize, dim: usize, decay: f64) -> Self {
        Self::from_entries(vec![0.0; k * dim], dim, decay, true)
    }

    pub fn from_entries(entries: Vec<f64>, dim: usize, decay: f64, pinned_zero: bool) -> Self {
        assert!(dim > 0 && entries.len() % dim == 0);
        let k = entries.len() / dim;
        let mut book = Self {
            cluster_size: vec![1.0; k],
            embed_sum: entries.clone(),
            entries,
            k,
            dim,
            decay,
            usage: vec![0; k],
            idle: vec![0; k],
            pinned_zero,
        };
        if pinned_zero && k > 0 {
            book.entries[..dim].fill(0.0);
            book.embed_sum[..dim].fill(0.0);
        }
        book
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn pinned_zero(&self) -> bool {
        self.pinned_zero
    }

    /// Training assignments per entry since the last [`Codebook::reset_usage`].
    pub fn usage_counts(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.fill(0);
    }

    fn movable(&self, i: usize) -> bool {
        !(self.pinned_zero && i == 0)
    }

    /// Overwrites every movable entry with a randomly chosen data vector.
    pub fn seed_from(&mut self, vectors: &[f64], rng: &mut impl Rng) {
        let count = vectors.len() / self.dim;
        if count == 0 {
            return;
        }
        let first = usize::from(self.pinned_zero);
        for i in first..self.k {
            let pick = rng.gen_range(0..count);
            self.reseed(i, &vectors[pick * self.dim..(pick + 1) * self.dim]);
        }
    }

    fn reseed(&mut self, i: usize, v: &[f64]) {
        let d = self.dim;
        self.entries[i * d..(i + 1) * d].copy_from_slice(v);
        self.embed_sum[i * d..(i + 1) * d].copy_from_slice(v);
        self.cluster_size[i] = 1.0;
        self.idle[i] = 0;
    }

    /// One EMA step from `vectors` and their assigned `indices`. Entries
    /// with no assignment are left untouched; entries idle for `dead_after`
    /// consecutive steps are re-seeded from a random batch vector.
    pub fn ema_update(&mut self, vectors: &[f64], indices: &[usize], dead_after: u32, rng: &mut impl Rng) {
        let d = self.dim;
        let mut counts = vec![0.0; self.k];
        let mut sums = vec![0.0; self.k * d];
        for (p, &i) in indices.iter().enumerate() {
            counts[i] += 1.0;
            self.usage[i] += 1;
            for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(&vectors[p * d..(p + 1) * d]) {
                *s += v;
            }
        }
        for i in 0..self.k {
            if counts[i] > 0.0 {
                self.idle[i] = 0;
                if !self.movable(i) {
                    continue;
                }
                self.cluster_size[i] = self.decay * self.cluster_size[i] + (1.0 - self.decay) * counts[i];
                let cs = self.cluster_size[i];
                for c in 0..d {
                    let e = &mut self.embed_sum[i * d + c];
                    *e = self.decay * *e + (1.0 - self.decay) * sums[i * d + c];
                    self.entries[i * d + c] = *e / cs;
                }
            } else if self.movable(i) {
                self.idle[i] += 1;
                if self.idle[i] >= dead_after && !indices.is_empty() {
                    let pick = rng.gen_range(0..indices.len());
                    let v = vectors[pick * d..(pick + 1) * d].to_vec();
                    self.reseed(i, &v);
                }
            }
        }
    }
}

/// Nearest entry by Euclidean distance; ties go to the lowest index.
pub fn quantize_layer<'a>(r: &[f64], book: &'a Codebook) -> Result<(&'a [f64], usize)> {
    if book.is_empty() {
        return Err(Error::Config("empty codebook".into()));
    }
    if r.len() != book.dim() {
        return Err(Error::Config(format!(
            "vector dim {} does not match codebook dim {}",
            r.len(),
            book.dim()
        )));
    }
    let mut best = (f64::INFINITY, 0);
    for i in 0..book.len() {
        let dist: f64 = r.iter().zip(book.entry(i)).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.0 {
            best = (dist, i);
        }
    }
    Ok((book.entry(best.1), best.1))
}

/// Per-position residual decomposition. Returns the token grid and the
/// final residual `r^{V+1}` (same layout as `latent.codes`).
pub fn rvq_decompose(latent: &LatentSequence, books: &[Codebook]) -> Result<(TokenGrid, Vec<f64>)> {
    let (grid, residual, _) = decompose_with_residuals(latent, books)?;
    Ok((grid, residual))
}

/// As [`rvq_decompose`], also returning the residual entering each layer.
fn decompose_with_residuals(latent: &LatentSequence, books: &[Codebook]) -> Result<(TokenGrid, Vec<f64>, Vec<Vec<f64>>)> {
    if books.is_empty() {
        return Err(Error::Config("no codebooks".into()));
    }
    let mut residual = latent.codes.clone();
    let mut rows = Vec::with_capacity(books.len());
    let mut inputs = Vec::with_capacity(books.len());
    let d = latent.dim;
    for book in books {
        inputs.push(residual.clone());
        let mut row = Vec::with_capacity(latent.len());
        for p in 0..latent.len() {
            let r = &mut residual[p * d..(p + 1) * d];
            let (code, index) = quantize_layer(r, book)?;
            r.iter_mut().zip(code).for_each(|(x, c)| *x -= c);
            row.push(index);
        }
        rows.push(row);
    }
    Ok((TokenGrid { rows }, residual, inputs))
}

/// Per-channel standardization of canonical frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; MOTION_DIM],
    pub std: [f64; MOTION_DIM],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            mean: [0.0; MOTION_DIM],
            std: [1.0; MOTION_DIM],
        }
    }
}

impl Normalizer {
    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Self {
        let mut sum = [0.0; MOTION_DIM];
        let mut sq = [0.0; MOTION_DIM];
        let mut count = 0.0;
        for m in motions {
            for f in to_canonical(m).chunks_exact(MOTION_DIM) {
                for c in 0..MOTION_DIM {
                    sum[c] += f[c];
                    sq[c] += f[c] * f[c];
                }
                count += 1.0;
            }
        }
        if count == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..MOTION_DIM {
            out.mean[c] = sum[c] / count;
            out.std[c] = (sq[c] / count - out.mean[c] * out.mean[c]).max(0.0).sqrt().max(1e-3);
        }
        out
    }

    pub fn normalize(&self, frames: &mut [f64]) {
        for f in frames.chunks_exact_mut(MOTION_DIM) {
            for c in 0..MOTION_DIM {
                f[c] = (f[c] - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn denormalize(&self, frames: &mut [f64]) {
        for f in frames.chunks_exact_mut(MOTION_DIM) {
            for c in 0..MOTION_DIM {
                f[c] = f[c] * self.std[c] + self.mean[c];
            }
        }
    }
}

/// Root positions replaced by per-frame displacements (the first frame keeps
/// its offset from the origin).
pub fn to_canonical(m: &MotionSequence) -> Vec<f64> {
    let mut out = m.frames.clone();
    let mut prev = (0.0, 0.0);
    for f in out.chunks_exact_mut(MOTION_DIM) {
        let pos = (f[ch::ROOT_X], f[ch::ROOT_Y]);
        f[ch::ROOT_X] = pos.0 - prev.0;
        f[ch::ROOT_Y] = pos.1 - prev.1;
        prev = pos;
    }
    out
}

/// Inverse of [`to_canonical`], projecting sin/cos pairs onto the unit circle.
pub fn from_canonical(frames: &[f64]) -> MotionSequence {
    let mut out = frames.to_vec();
    let mut pos = (0.0, 0.0);
    for f in out.chunks_exact_mut(MOTION_DIM) {
        pos = (pos.0 + f[ch::ROOT_X], pos.1 + f[ch::ROOT_Y]);
        f[ch::ROOT_X] = pos.0;
        f[ch::ROOT_Y] = pos.1;
        for (s, c) in [(ch::HEADING_SIN, ch::HEADING_COS), (ch::LIMB_SIN, ch::LIMB_COS)] {
            let norm = f[s].hypot(f[c]);
            if norm > 1e-9 {
                f[s] /= norm;
                f[c] /= norm;
            } else {
                f[s] = 0.0;
                f[c] = 1.0;
            }
        }
    }
    MotionSequence { frames: out }
}

#[derive(Debug, Clone)]
struct Encoder {
    input: Conv1d,
    levels: Vec<(ResBlock, Conv1d)>,
    mid: ResBlock,
    output: Conv1d,
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Conv1d,
    mid: ResBlock,
    levels: Vec<(Conv1d, ResBlock)>,
    output: Conv1d,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvqLoss {
    pub total: f64,
    pub recon: f64,
    pub commit: f64,
}

/// Encoder, decoder, codebooks and normalization statistics.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: RvqConfig,
    pub params: ParamStore,
    pub books: Vec<Codebook>,
    pub normalizer: Normalizer,
    encoder: Encoder,
    decoder: Decoder,
    seeded: bool,
}

impl Tokenizer {
    pub fn new(config: RvqConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let (w, d) = (config.width, config.latent_dim);
        let steps = config.downsample_ratio.trailing_zeros() as usize;
        let encoder = Encoder {
            input: Conv1d::same(&mut ps, "enc.in", MOTION_DIM, w, rng),
            levels: (0..steps)
                .map(|i| {
                    (
                        ResBlock::new(&mut ps, &format!("enc.res{i}"), w, rng),
                        Conv1d::new(&mut ps, &format!("enc.down{i}"), w, w, 4, 2, (1, 1), rng),
                    )
                })
                .collect(),
            mid: ResBlock::new(&mut ps, "enc.mid", w, rng),
            output: Conv1d::same(&mut ps, "enc.out", w, d, rng),
        };
        let decoder = Decoder {
            input: Conv1d::same(&mut ps, "dec.in", d, w, rng),
            mid: ResBlock::new(&mut ps, "dec.mid", w, rng),
            levels: (0..steps)
                .map(|i| {
                    (
                        Conv1d::same(&mut ps, &format!("dec.up{i}"), w, w, rng),
                        ResBlock::new(&mut ps, &format!("dec.res{i}"), w, rng),
                    )
                })
                .collect(),
            output: Conv1d::same(&mut ps, "dec.out", w, MOTION_DIM, rng),
        };
        let books = (0..=config.layers)
            .map(|_| Codebook::new(config.codebook_size, d, config.ema_decay))
            .collect();
        Ok(Self {
            config,
            params: ps,
            books,
            normalizer: Normalizer::default(),
            encoder,
            decoder,
            seeded: false,
        })
    }

    /// Marks the codebooks as already initialized (used after loading).
    pub fn set_seeded(&mut self, seeded: bool) {
        self.seeded = seeded;
    }

    pub fn ratio(&self) -> usize {
        self.config.downsample_ratio
    }

    fn encode_graph(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let e = &self.encoder;
        let mut h = e.input.forward(g, x)?;
        for (res, down) in &e.levels {
            h = res.forward(g, h)?;
            h = down.forward(g, h)?;
        }
        h = e.mid.forward(g, h)?;
        let h = g.relu(h);
        e.output.forward(g, h)
    }

    fn decode_graph(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let dcd = &self.decoder;
        let mut h = dcd.input.forward(g, z)?;
        h = dcd.mid.forward(g, h)?;
        for (conv, res) in &dcd.levels {
            h = g.upsample(h, 2)?;
            h = conv.forward(g, h)?;
            h = res.forward(g, h)?;
        }
        let h = g.relu(h);
        dcd.output.forward(g, h)
    }

    /// Normalized canonical frames, padded to a multiple of the ratio.
    fn prepare(&self, m: &MotionSequence) -> Result<(Vec<f64>, usize)> {
        let r = self.ratio();
        if m.len() < r {
            return Err(Error::InputTooShort { len: m.len(), min: r });
        }
        let mut padded = m.clone();
        let pad = padded.pad_to_multiple(r);
        let mut frames = to_canonical(&padded);
        // pad frames repeat the last pose, so their displacement is zero
        for f in frames.chunks_exact_mut(MOTION_DIM).skip(m.len()) {
            f[ch::ROOT_X] = 0.0;
            f[ch::ROOT_Y] = 0.0;
        }
        self.normalizer.normalize(&mut frames);
        Ok((frames, pad))
    }

    pub fn encode(&self, m: &MotionSequence) -> Result<LatentSequence> {
        let (frames, pad) = self.prepare(m)?;
        let n = frames.len() / MOTION_DIM;
        let mut g = Graph::with_params(&self.params);
        let x = g.constant(Tensor::new(vec![1, n, MOTION_DIM], frames)?);
        let z = self.encode_graph(&mut g, x)?;
        Ok(LatentSequence {
            codes: g.value(z).data().to_vec(),
            dim: self.config.latent_dim,
            pad_frames: pad,
        })
    }

    pub fn tokenize(&self, m: &MotionSequence) -> Result<TokenGrid> {
        Ok(rvq_decompose(&self.encode(m)?, &self.books)?.0)
    }

    /// Sum of the selected codes per position, `n x d`.
    pub fn embed_tokens(&self, grid: &TokenGrid) -> Result<Vec<f64>> {
        grid.validate(self.config.codebook_size)?;
        if grid.depth() > self.books.len() {
            return Err(Error::Config(format!(
                "token grid has {} layers, tokenizer has {}",
                grid.depth(),
                self.books.len()
            )));
        }
        let d = self.config.latent_dim;
        let mut out = vec![0.0; grid.len() * d];
        for (row, book) in grid.rows.iter().zip(&self.books) {
            for (p, &t) in row.iter().enumerate() {
                out[p * d..(p + 1) * d].iter_mut().zip(book.entry(t)).for_each(|(o, c)| *o += c);
            }
        }
        Ok(out)
    }

    /// Decodes every grid position to `n * ratio` frames.
    pub fn decode(&self, grid: &TokenGrid) -> Result<MotionSequence> {
        if grid.is_empty() {
            return Err(Error::EmptyInput("token grid"));
        }
        let q = self.embed_tokens(grid)?;
        let n = grid.len();
        let mut g = Graph::with_params(&self.params);
        let z = g.constant(Tensor::new(vec![1, n, self.config.latent_dim], q)?);
        let out = self.decode_graph(&mut g, z)?;
        let mut frames = g.value(out).data().to_vec();
        self.normalizer.denormalize(&mut frames);
        Ok(from_canonical(&frames))
    }

    /// Decodes only the positions covering the first `frames` frames and
    /// trims the result; later positions are never read.
    pub fn decode_frames(&self, grid: &TokenGrid, frames: usize) -> Result<MotionSequence> {
        let keep = frames.div_ceil(self.ratio());
        if keep == 0 || keep > grid.len() {
            return Err(Error::OutOfRange {
                field: "frames",
                value: format!("{frames} for a grid of {} positions", grid.len()),
            });
        }
        let trimmed = TokenGrid {
            rows: grid.rows.iter().map(|r| r[..keep].to_vec()).collect(),
        };
        let mut m = self.decode(&trimmed)?;
        m.truncate(frames);
        Ok(m)
    }

    /// Encode, quantize and decode, trimmed to the input length.
    pub fn reconstruct(&self, m: &MotionSequence) -> Result<MotionSequence> {
        let latent = self.encode(m)?;
        let (grid, _) = rvq_decompose(&latent, &self.books)?;
        self.decode_frames(&grid, m.len())
    }

    /// Random equal-length training windows in normalized canonical space.
    pub fn sample_windows(
        &self,
        motions: &[&MotionSequence],
        batch: usize,
        window: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if window % self.ratio() != 0 {
            return Err(Error::Config(format!("window {window} is not a multiple of the ratio")));
        }
        let eligible: Vec<&MotionSequence> = motions.iter().copied().filter(|m| m.len() >= window).collect();
        if eligible.is_empty() {
            return Err(Error::EmptyInput("no motion covers the training window"));
        }
        let mut out = Vec::with_capacity(batch * window * MOTION_DIM);
        for _ in 0..batch {
            let m = eligible.choose(rng).expect("non-empty");
            let start = rng.gen_range(0..=m.len() - window);
            let mut frames = to_canonical(m)[start * MOTION_DIM..(start + window) * MOTION_DIM].to_vec();
            self.normalizer.normalize(&mut frames);
            out.extend(frames);
        }
        Ok(out)
    }

    /// Seeds every layer's codebook from the encoded residuals of `batch`
    /// windows, as the first training step does.
    pub fn seed_codebooks(&mut self, windows: &[f64], batch: usize, rng: &mut impl Rng) -> Result<()> {
        let window = windows.len() / (batch * MOTION_DIM);
        let codes = {
            let mut g = Graph::with_params(&self.params);
            let x = g.constant(Tensor::new(vec![batch, window, MOTION_DIM], windows.to_vec())?);
            let z = self.encode_graph(&mut g, x)?;
            g.value(z).data().to_vec()
        };
        seed_books(&mut self.books, self.config.latent_dim, &codes, rng)?;
        self.seeded = true;
        Ok(())
    }

    /// One optimization step on `batch` windows of `window` normalized
    /// canonical frames each.
    pub fn train_step(
        &mut self,
        windows: &[f64],
        batch: usize,
        opt: &mut Adam,
        rng: &mut impl Rng,
    ) -> Result<RvqLoss> {
        let window = windows.len() / (batch * MOTION_DIM);
        let d = self.config.latent_dim;
        let (loss, assignments, grads) = {
            let mut g = Graph::with_params(&self.params);
            let x = g.constant(Tensor::new(vec![batch, window, MOTION_DIM], windows.to_vec())?);
            let z = self.encode_graph(&mut g, x)?;
            let zv = g.value(z).clone();
            let latent = LatentSequence::new(zv.data().to_vec(), d);

            if !self.seeded {
                seed_books(&mut self.books, d, &latent.codes, rng)?;
                self.seeded = true;
            }
            let (grid, _, inputs) = decompose_with_residuals(&latent, &self.books)?;

            // cumulative code sums S_j = sum_{i<=j} c^i
            let mut cumulative = vec![0.0; latent.codes.len()];
            let mut commit_terms = Vec::new();
            for (j, (row, book)) in grid.rows.iter().zip(&self.books).enumerate() {
                for (p, &t) in row.iter().enumerate() {
                    cumulative[p * d..(p + 1) * d]
                        .iter_mut()
                        .zip(book.entry(t))
                        .for_each(|(s, c)| *s += c);
                }
                if j >= self.config.commit_from {
                    let target = g.constant(Tensor::new(zv.shape().to_vec(), cumulative.clone())?);
                    let diff = g.sub(z, target)?;
                    let sq = g.mul(diff, diff)?;
                    let m = g.mean(sq);
                    commit_terms.push(g.scale(m, d as f64));
                }
            }
            let offset: Vec<f64> = cumulative.iter().zip(zv.data()).map(|(q, z)| q - z).collect();
            let offset = g.constant(Tensor::new(zv.shape().to_vec(), offset)?);
            let st = g.add(z, offset)?;
            let recon = self.decode_graph(&mut g, st)?;
            let diff = g.sub(recon, x)?;
            let diff = g.abs(diff);
            let recon_loss = g.mean(diff);
            let mut commit = None;
            for t in commit_terms {
                commit = Some(match commit {
                    None => t,
                    Some(acc) => g.add(acc, t)?,
                });
            }
            let (total, commit_value) = match commit {
                Some(c) => {
                    let cv = g.value(c).item();
                    let weighted = g.scale(c, self.config.beta);
                    (g.add(recon_loss, weighted)?, cv)
                }
                None => (recon_loss, 0.0),
            };
            let loss = RvqLoss {
                total: g.value(total).item(),
                recon: g.value(recon_loss).item(),
                commit: commit_value,
            };
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    step: opt.step_count(),
                    detail: format!("recon={} commit={}", loss.recon, loss.commit),
                });
            }
            let grads = g.backward(total)?.param_grads(&self.params);
            (loss, (grid, inputs), grads)
        };
        opt.step(&mut self.params, &grads)?;
        let (grid, inputs) = assignments;
        for ((book, row), input) in self.books.iter_mut().zip(&grid.rows).zip(&inputs) {
            book.ema_update(input, row, self.config.dead_after, rng);
        }
        Ok(loss)
    }
}

/// Layer-by-layer seeding: each codebook draws from the residuals left by
/// the layers before it.
fn seed_books(books: &mut [Codebook], d: usize, codes: &[f64], rng: &mut impl Rng) -> Result<()> {
    let mut residual = codes.to_vec();
    for book in books {
        book.seed_from(&residual, rng);
        let lat = LatentSequence::new(residual.clone(), d);
        let (_, r, _) = decompose_with_residuals(&lat, std::slice::from_ref(book))?;
        residual = r;
    }
    Ok(())
}

/// Mean per-element L1 error between two motions over their common length.
pub fn motion_l1(a: &MotionSequence, b: &MotionSequence) -> f64 {
    let n = a.len().min(b.len()) * MOTION_DIM;
    a.frames[..n].iter().zip(&b.frames[..n]).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
}

/// Deterministic rng for a component, derived from a base seed and a tag.
pub fn component_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_motion, InstructionSpec, Primitive};
    use mvq_tensor::AdamConfig;

    fn tiny() -> RvqConfig {
        RvqConfig {
            layers: 2,
            codebook_size: 8,
            latent_dim: 4,
            width: 8,
            ..RvqConfig::default()
        }
    }

    #[test]
    fn canonical_round_trip() {
        let m = synth_motion(&InstructionSpec::new(Primitive::RunCircle, 1.3, 2)).unwrap();
        let back = from_canonical(&to_canonical(&m));
        assert!(motion_l1(&m, &back) < 1e-6);
    }

    #[test]
    fn encode_shapes_and_padding() {
        let mut rng = component_rng(0, 1);
        let tok = Tokenizer::new(tiny(), &mut rng).unwrap();
        let lat = tok.encode(&MotionSequence::zeros(64)).unwrap();
        assert_eq!((lat.len(), lat.pad_frames), (16, 0));
        let lat = tok.encode(&MotionSequence::zeros(66)).unwrap();
        assert_eq!((lat.len(), lat.pad_frames), (17, 2));
        assert!(matches!(
            tok.encode(&MotionSequence::zeros(3)),
            Err(Error::InputTooShort { len: 3, min: 4 })
        ));
    }

    #[test]
    fn corrupt_tokens_are_rejected() {
        let mut rng = component_rng(0, 2);
        let tok = Tokenizer::new(tiny(), &mut rng).unwrap();
        let grid = TokenGrid {
            rows: vec![vec![0, 1], vec![8, 0], vec![0, 0]],
        };
        assert!(matches!(
            tok.decode(&grid),
            Err(Error::CorruptToken { layer: 1, pos: 0, index: 8, k: 8 })
        ));
    }

    #[test]
    fn zero_beta_gives_pure_reconstruction_loss() {
        let mut rng = component_rng(0, 3);
        let mut tok = Tokenizer::new(RvqConfig { beta: 0.0, ..tiny() }, &mut rng).unwrap();
        let m = synth_motion(&InstructionSpec::new(Primitive::Jump, 1.0, 1)).unwrap();
        let windows = tok.sample_windows(&[&m], 2, 16, &mut rng).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let loss = tok.train_step(&windows, 2, &mut opt, &mut rng).unwrap();
        assert_eq!(loss.total, loss.recon);
        assert!(loss.commit > 0.0);
    }
}
