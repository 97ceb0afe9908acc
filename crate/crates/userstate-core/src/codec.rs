//! Vector-quantized convolutional autoencoder over MFCC maps.
//!
//! The encoder runs six 3x3 convolutions with 2x2 max pooling after the
//! first, third and fifth, then a linear 1x1 projection down to the
//! codebook depth, turning a 40x80x3 feature map into a 5x10x1 embedding.
//! Each embedding cell snaps to its nearest codebook entry; gradients skip
//! the snap via a straight-through pass and the codebook itself follows
//! encoder outputs by exponential moving average. The decoder mirrors the
//! encoder with bilinear upsampling and a dense head that emits the raw
//! 1470-sample chunk. The flattened quantized map is the 50-value latent
//! used everywhere downstream.

use crate::audio::{self, mfcc, AudioChunk, MfccConfig, MfccTensor, CHUNK_SAMPLES};
use crate::data::{self, LatentClip, CLIP_FRAMES, LATENT_WIDTH};
use crate::nn::layers::{Bound, Conv2d, Dense};
use crate::nn::optim::SgdMomentum;
use crate::nn::{blob, ops, Graph, ParamStore, Var};
use crate::util::{rng_for, stream};
use ndarray::{Array2, Array3, ArrayD, Ix2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec config: {0}")]
    Config(String),
    #[error("shape mismatch: expected {expected}, got {got:?}")]
    Shape { expected: String, got: Vec<usize> },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("training diverged at epoch {epoch} before any finite checkpoint existed")]
    Diverged { epoch: usize },
    #[error("checkpoint restore failed: {0}")]
    Restore(String),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Architecture and quantizer settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mfcc: MfccConfig,
    /// Feature-axis width after zero padding; three 18-column derivative
    /// blocks live at offsets 0/18/36, one per input channel.
    pub input_width: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub codebook_size: usize,
    pub embed_dim: usize,
    pub leaky_slope: f64,
    pub commitment_weight: f64,
    pub ema_decay: f64,
    /// Consecutive epochs of zero usage before an entry is reseeded.
    pub dead_code_epochs: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mfcc: MfccConfig::default(),
            input_width: 80,
            encoder_widths: vec![32, 64, 64, 128, 128, 128],
            decoder_widths: vec![128, 128, 64, 64, 32, 1],
            codebook_size: 512,
            embed_dim: 1,
            leaky_slope: 0.3,
            commitment_weight: 0.25,
            ema_decay: 0.99,
            dead_code_epochs: 3,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CodecError::Config(msg));
        if self.encoder_widths.len() != 6 || self.decoder_widths.len() != 6 {
            return bad("encoder and decoder each need exactly 6 conv widths".into());
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return bad("conv widths must be positive".into());
        }
        if self.mfcc.sub_windows % 8 != 0 || self.input_width % 8 != 0 {
            return bad(format!(
                "three 2x2 poolings need dims divisible by 8, got {}x{}",
                self.mfcc.sub_windows, self.input_width
            ));
        }
        if 3 * self.mfcc.coefficients > self.input_width {
            return bad(format!(
                "3 derivative blocks of {} columns exceed input width {}",
                self.mfcc.coefficients, self.input_width
            ));
        }
        if self.codebook_size < 2 {
            return bad("codebook needs at least 2 entries".into());
        }
        if self.embed_dim == 0 {
            return bad("embedding depth must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema decay must lie in [0, 1)".into());
        }
        self.mfcc.validate()?;
        Ok(())
    }

    pub fn input_height(&self) -> usize {
        self.mfcc.sub_windows
    }

    pub fn map_height(&self) -> usize {
        self.mfcc.sub_windows / 8
    }

    pub fn map_width(&self) -> usize {
        self.input_width / 8
    }

    pub fn latent_len(&self) -> usize {
        self.map_height() * self.map_width() * self.embed_dim
    }

    /// Latent size relative to the tiled input map and to the raw chunk.
    pub fn compression_ratios(&self) -> (f64, f64) {
        let n = self.latent_len() as f64;
        (n / (self.input_height() * self.input_width()) as f64, n / CHUNK_SAMPLES as f64)
    }

    fn input_width(&self) -> usize {
        self.input_width
    }
}

fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Learned embedding table with per-entry usage bookkeeping.
///
/// Entries are kept exactly representable in f32 so latent clips stored in
/// the 32-bit clip format remain exact codebook members.
#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Array2<f64>,
    usage: Vec<u64>,
    ema_counts: Vec<f64>,
    ema_sums: Array2<f64>,
    dead_streak: Vec<u32>,
}

impl Codebook {
    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        let (k, _d) = entries.dim();
        if k < 2 {
            return Err(CodecError::Config("codebook needs at least 2 entries".into()));
        }
        let entries = entries.mapv(snap_f32);
        for i in 0..k {
            for j in (i + 1)..k {
                if entries.row(i) == entries.row(j) {
                    return Err(CodecError::Config(format!("entries {i} and {j} are identical")));
                }
            }
        }
        let ema_counts = vec![1.0; k];
        let ema_sums = entries.clone();
        Ok(Codebook { entries, usage: vec![0; k], ema_counts, ema_sums, dead_streak: vec![0; k] })
    }

    pub fn new_random<R: Rng>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut entries = Array2::<f64>::zeros((k, d));
        let mut seen = std::collections::HashSet::new();
        for mut row in entries.rows_mut() {
            loop {
                for v in row.iter_mut() {
                    *v = snap_f32(normal.sample(rng));
                }
                let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
                if seen.insert(key) {
                    break;
                }
            }
        }
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// True when `v` (a stored latent value) is exactly some entry value.
    pub fn contains_value(&self, v: f32) -> bool {
        self.entries.iter().any(|&e| e as f32 == v)
    }

    /// Index of the nearest entry under squared Euclidean distance; exact
    /// ties go to the lowest index.
    pub fn nearest(&self, cell: &[f64]) -> usize {
        assert_eq!(cell.len(), self.dim(), "cell depth must match codebook depth");
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, row) in self.entries.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(cell).map(|(e, z)| (z - e) * (z - e)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Quantizes a pre-quantization map of shape `H x W x D`.
    pub fn quantize_map(&self, pre: &Array3<f64>) -> Result<QuantizationResult> {
        let (h, w, d) = pre.dim();
        if d != self.dim() {
            return Err(CodecError::Shape {
                expected: format!("map depth {}", self.dim()),
                got: pre.shape().to_vec(),
            });
        }
        let mut quantized = Array3::<f64>::zeros((h, w, d));
        let mut indices = Array2::<usize>::zeros((h, w));
        let mut dist_acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                let cell: Vec<f64> = (0..d).map(|c| pre[(i, j, c)]).collect();
                let k = self.nearest(&cell);
                indices[(i, j)] = k;
                for c in 0..d {
                    quantized[(i, j, c)] = self.entries[(k, c)];
                    let diff = pre[(i, j, c)] - self.entries[(k, c)];
                    dist_acc += diff * diff;
                }
            }
        }
        let mean_dist = dist_acc / (h * w * d) as f64;
        let latent: Vec<f64> = quantized.iter().copied().collect();
        Ok(QuantizationResult {
            quantized,
            indices,
            codebook_loss: mean_dist,
            commitment_loss: mean_dist,
            latent,
        })
    }

    fn record_usage(&mut self, indices: &[usize]) {
        for &k in indices {
            self.usage[k] += 1;
        }
    }

    /// Moving-average update toward the batch of encoder outputs assigned to
    /// each entry. Entries are re-snapped to f32 and kept pairwise distinct.
    fn ema_update(&mut self, cells: &Array2<f64>, assignments: &[usize], decay: f64) {
        let k = self.len();
        let d = self.dim();
        let mut batch_counts = vec![0.0f64; k];
        let mut batch_sums = Array2::<f64>::zeros((k, d));
        for (cell, &a) in cells.rows().into_iter().zip(assignments) {
            batch_counts[a] += 1.0;
            for c in 0..d {
                batch_sums[(a, c)] += cell[c];
            }
        }
        for i in 0..k {
            self.ema_counts[i] = decay * self.ema_counts[i] + (1.0 - decay) * batch_counts[i];
            for c in 0..d {
                self.ema_sums[(i, c)] =
                    decay * self.ema_sums[(i, c)] + (1.0 - decay) * batch_sums[(i, c)];
                self.entries[(i, c)] =
                    snap_f32(self.ema_sums[(i, c)] / self.ema_counts[i].max(1e-12));
            }
        }
        self.dedup();
    }

    /// Reseeds entries unused for `dead_epochs` consecutive epochs from a
    /// reservoir of recent encoder outputs. Returns how many were reseeded.
    fn retire_dead_codes<R: Rng>(
        &mut self,
        epoch_usage: &[u64],
        dead_epochs: usize,
        reservoir: &[Vec<f64>],
        rng: &mut R,
    ) -> usize {
        let mut reinit = 0;
        for i in 0..self.len() {
            if epoch_usage[i] == 0 {
                self.dead_streak[i] += 1;
            } else {
                self.dead_streak[i] = 0;
            }
            if self.dead_streak[i] as usize >= dead_epochs && !reservoir.is_empty() {
                let pick = &reservoir[rng.random_range(0..reservoir.len())];
                for c in 0..self.dim() {
                    self.entries[(i, c)] = snap_f32(pick[c]);
                    self.ema_sums[(i, c)] = self.entries[(i, c)];
                }
                self.ema_counts[i] = 1.0;
                self.dead_streak[i] = 0;
                reinit += 1;
            }
        }
        if reinit > 0 {
            self.dedup();
        }
        reinit
    }

    /// Nudges exact duplicates apart by one f32 step so the distinctness
    /// invariant survives moving-average drift.
    fn dedup(&mut self) {
        let k = self.len();
        let mut seen: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
        for i in 0..k {
            loop {
                let key: Vec<u64> = self.entries.row(i).iter().map(|v| v.to_bits()).collect();
                if seen.insert(key) {
                    break;
                }
                let v = self.entries[(i, 0)] as f32;
                let nudged = if v == f32::MAX { v.next_down() } else { v.next_up() };
                self.entries[(i, 0)] = nudged as f64;
            }
        }
    }
}

/// Output of quantizing one embedding map.
#[derive(Debug, Clone)]
pub struct QuantizationResult {
    pub quantized: Array3<f64>,
    pub indices: Array2<usize>,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
    /// Row-major flattening of the quantized map.
    pub latent: Vec<f64>,
}

/// Graph-side quantization of a `[N, D, h, w]` activation.
pub struct QuantizedVars {
    /// Straight-through node: forwards codebook values, passes gradients
    /// back to the encoder unchanged.
    pub zq: Var,
    pub indices: Vec<usize>,
    /// Mean squared distance between encoder outputs and their entries.
    /// This is both the codebook loss (entries move, encoder detached) and
    /// the commitment loss value (encoder moves, entries detached); only
    /// the gradient routing differs, and entry updates happen by moving
    /// average outside the graph.
    pub distance: f64,
    /// Commitment penalty as a graph node pulling encoder outputs toward
    /// their (detached) entries.
    pub commitment: Var,
    /// Flattened encoder-output cells, one row per assignment.
    pub cells: Array2<f64>,
}

/// Quantizes every spatial cell of `z` against the codebook inside a graph.
pub fn quantize_vars(g: &mut Graph, codebook: &Codebook, z: Var) -> Result<QuantizedVars> {
    let zval = g.val(z).clone();
    let sh = zval.shape().to_vec();
    if sh.len() != 4 || sh[1] != codebook.dim() {
        return Err(CodecError::Shape {
            expected: format!("[N, {}, h, w] activation", codebook.dim()),
            got: sh,
        });
    }
    let (n, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let mut qvals = zval.clone();
    let mut indices = Vec::with_capacity(n * h * w);
    let mut cells = Array2::<f64>::zeros((n * h * w, d));
    let mut dist = 0.0;
    let mut row = 0usize;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let cell: Vec<f64> = (0..d).map(|c| zval[[ni, c, hi, wi]]).collect();
                let k = codebook.nearest(&cell);
                indices.push(k);
                for c in 0..d {
                    cells[(row, c)] = cell[c];
                    let e = codebook.entries()[(k, c)];
                    qvals[[ni, c, hi, wi]] = e;
                    dist += (cell[c] - e) * (cell[c] - e);
                }
                row += 1;
            }
        }
    }
    let distance = dist / (n * d * h * w) as f64;
    let zq = ops::passthrough(g, z, qvals.clone());
    let q_leaf = g.leaf(qvals);
    let diff = ops::sub(g, z, q_leaf);
    let sq = ops::square(g, diff);
    let commitment = ops::mean_all(g, sq);
    Ok(QuantizedVars { zq, indices, distance, commitment, cells })
}

/// Encoder, decoder and codebook with fixed parameter layout.
pub struct CodecModel {
    pub config: CodecConfig,
    params: ParamStore,
    enc: Vec<Conv2d>,
    enc_proj: Conv2d,
    dec_proj: Conv2d,
    dec: Vec<Conv2d>,
    head: Dense,
    pub codebook: Codebook,
}

impl CodecModel {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, &[stream::INIT_CODEC, 0]);
        let mut enc = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in config.encoder_widths.iter().enumerate() {
            enc.push(Conv2d::new(&mut params, &mut rng, &format!("enc{i}"), in_c, out_c, 3, 1, 1, true));
            in_c = out_c;
        }
        let enc_proj =
            Conv2d::new(&mut params, &mut rng, "enc_proj", in_c, config.embed_dim, 1, 1, 0, true);
        let dec_in = config.decoder_widths[0];
        let dec_proj =
            Conv2d::new(&mut params, &mut rng, "dec_proj", config.embed_dim, dec_in, 1, 1, 0, true);
        let mut dec = Vec::new();
        let mut in_c = dec_in;
        for (i, &out_c) in config.decoder_widths.iter().enumerate() {
            dec.push(Conv2d::new(&mut params, &mut rng, &format!("dec{i}"), in_c, out_c, 3, 1, 1, true));
            in_c = out_c;
        }
        let dense_in = config.input_height() * config.input_width * in_c;
        let head = Dense::new(&mut params, &mut rng, "head", dense_in, CHUNK_SAMPLES);
        let mut cb_rng = rng_for(seed, &[stream::INIT_CODEC, 1]);
        let codebook = Codebook::new_random(config.codebook_size, config.embed_dim, &mut cb_rng)?;
        Ok(CodecModel { config, params, enc, enc_proj, dec_proj, dec, head, codebook })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_scalar_count()
    }

    /// Spatial sizes entering each pooling stage of the encoder, ending at
    /// the embedding map.
    pub fn encoder_trace(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.config.input_height(), self.config.input_width);
        let mut trace = vec![(h, w)];
        for _ in 0..3 {
            h /= 2;
            w /= 2;
            trace.push((h, w));
        }
        trace
    }

    /// Spatial sizes after each upsampling stage of the decoder.
    pub fn decoder_trace(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.config.map_height(), self.config.map_width());
        let mut trace = vec![(h, w)];
        for _ in 0..3 {
            h *= 2;
            w *= 2;
            trace.push((h, w));
        }
        trace
    }

    /// Lays one MFCC tensor out as a `3 x H x W` conv input: derivative
    /// order c occupies columns `[K c, K (c+1))` of channel c, zeros elsewhere.
    pub fn tile(&self, feats: &MfccTensor) -> Result<Array3<f64>> {
        let v = feats.values();
        let (t, k, ch) = v.dim();
        if t != self.config.input_height() || k != self.config.mfcc.coefficients || ch != 3 {
            return Err(CodecError::Shape {
                expected: format!(
                    "{} x {} x 3 feature tensor",
                    self.config.input_height(),
                    self.config.mfcc.coefficients
                ),
                got: v.shape().to_vec(),
            });
        }
        let mut out = Array3::<f64>::zeros((3, t, self.config.input_width));
        for c in 0..3 {
            for ti in 0..t {
                for ki in 0..k {
                    out[(c, ti, k * c + ki)] = v[(ti, ki, c)];
                }
            }
        }
        Ok(out)
    }

    fn encode_graph(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let mut cur = x;
        for (i, conv) in self.enc.iter().enumerate() {
            cur = conv.forward(g, bound, cur);
            cur = ops::leaky_relu(g, cur, self.config.leaky_slope);
            if i % 2 == 0 && i < 5 {
                cur = ops::max_pool_2x2(g, cur);
            }
        }
        self.enc_proj.forward(g, bound, cur)
    }

    fn decode_graph(&self, g: &mut Graph, bound: &Bound, zq: Var) -> Var {
        let mut cur = self.dec_proj.forward(g, bound, zq);
        for (i, conv) in self.dec.iter().enumerate() {
            cur = conv.forward(g, bound, cur);
            cur = ops::leaky_relu(g, cur, self.config.leaky_slope);
            if i % 2 == 0 && i < 5 {
                cur = ops::bilinear_up2(g, cur);
            }
        }
        let sh = g.val(cur).shape().to_vec();
        let flat = ops::reshape(g, cur, &[sh[0], sh[1] * sh[2] * sh[3]]);
        self.head.forward(g, bound, flat)
    }

    fn check_tiles(&self, tiles: &ArrayD<f64>) -> Result<()> {
        let want = [3, self.config.input_height(), self.config.input_width];
        if tiles.ndim() != 4 || tiles.shape()[1..] != want {
            return Err(CodecError::Shape {
                expected: format!("[N, 3, {}, {}] input", want[1], want[2]),
                got: tiles.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Full differentiable pass over a batch of tiled inputs.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        bound: &Bound,
        tiles: ArrayD<f64>,
    ) -> Result<BatchForward> {
        self.check_tiles(&tiles)?;
        let x = g.leaf(tiles);
        let z = self.encode_graph(g, bound, x);
        let q = quantize_vars(g, &self.codebook, z)?;
        let recon = self.decode_graph(g, bound, q.zq);
        Ok(BatchForward { recon, pre_quant: z, quant: q })
    }

    /// Inference-mode encoder: pre-quantization maps for a tiled batch,
    /// shape `[N, h, w, D]`.
    pub fn encode_tiles(&self, tiles: ArrayD<f64>) -> Result<ndarray::Array4<f64>> {
        self.check_tiles(&tiles)?;
        let mut g = Graph::new(false);
        let bound = self.params.bind(&mut g);
        let x = g.leaf(tiles);
        let z = self.encode_graph(&mut g, &bound, x);
        let zv = g.val(z);
        let sh = zv.shape().to_vec();
        let mut out = ndarray::Array4::<f64>::zeros((sh[0], sh[2], sh[3], sh[1]));
        for n in 0..sh[0] {
            for c in 0..sh[1] {
                for h in 0..sh[2] {
                    for w in 0..sh[3] {
                        out[(n, h, w, c)] = zv[[n, c, h, w]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inference-mode encoder for one feature tensor: `h x w x D` map.
    pub fn encode_features(&self, feats: &MfccTensor) -> Result<Array3<f64>> {
        let tile = self.tile(feats)?;
        let (c, h, w) = tile.dim();
        let batch = tile.into_shape_with_order((1, c, h, w)).expect("static reshape").into_dyn();
        let maps = self.encode_tiles(batch)?;
        Ok(maps.index_axis(ndarray::Axis(0), 0).to_owned())
    }

    /// Inference-mode decoder from one quantized `h x w x D` map to a
    /// 1470-sample reconstruction.
    pub fn decode_map(&self, map: &Array3<f64>) -> Result<Vec<f64>> {
        let (h, w, d) = map.dim();
        if (h, w, d) != (self.config.map_height(), self.config.map_width(), self.config.embed_dim) {
            return Err(CodecError::Shape {
                expected: format!(
                    "{} x {} x {} quantized map",
                    self.config.map_height(),
                    self.config.map_width(),
                    self.config.embed_dim
                ),
                got: map.shape().to_vec(),
            });
        }
        let mut nchw = ndarray::Array4::<f64>::zeros((1, d, h, w));
        for hi in 0..h {
            for wi in 0..w {
                for c in 0..d {
                    nchw[(0, c, hi, wi)] = map[(hi, wi, c)];
                }
            }
        }
        let mut g = Graph::new(false);
        let bound = self.params.bind(&mut g);
        let zq = g.leaf(nchw.into_dyn());
        let recon = self.decode_graph(&mut g, &bound, zq);
        Ok(g.val(recon).iter().copied().collect())
    }

    /// Encodes and quantizes one chunk end to end.
    pub fn quantize_chunk(&self, chunk: &AudioChunk) -> Result<QuantizationResult> {
        let feats = mfcc(chunk, &self.config.mfcc)?;
        let pre = self.encode_features(&feats)?;
        self.codebook.quantize_map(&pre)
    }

    fn snapshot(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut map = self.params.snapshot();
        map.insert("codebook.entries".to_string(), self.codebook.entries().clone().into_dyn());
        map
    }

    fn restore(&mut self, map: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        self.params.restore(map).map_err(CodecError::Restore)?;
        let entries = map
            .get("codebook.entries")
            .ok_or_else(|| CodecError::Restore("missing codebook entries".into()))?;
        let entries: Array2<f64> = entries
            .clone()
            .into_dimensionality::<Ix2>()
            .map_err(|_| CodecError::Restore("codebook entries must be 2-d".into()))?;
        let fresh = Codebook::from_entries(entries)?;
        self.codebook.entries = fresh.entries;
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        blob::save_blob(path, &self.snapshot())?;
        Ok(())
    }

    pub fn load(config: CodecConfig, seed: u64, path: &std::path::Path) -> Result<Self> {
        let mut model = CodecModel::new(config, seed)?;
        let map = blob::load_blob(path)?;
        model.restore(&map)?;
        Ok(model)
    }
}

/// Hooks returned by one differentiable batch pass.
pub struct BatchForward {
    pub recon: Var,
    pub pre_quant: Var,
    pub quant: QuantizedVars,
}

/// Stacks the 50-value latents of exactly 30 consecutive chunks.
pub fn latents_for_segment(chunks: &[AudioChunk], model: &CodecModel) -> Result<LatentClip> {
    if chunks.len() != CLIP_FRAMES {
        return Err(CodecError::Shape {
            expected: format!("{CLIP_FRAMES} chunks"),
            got: vec![chunks.len()],
        });
    }
    if model.config.latent_len() != LATENT_WIDTH {
        return Err(CodecError::Config(format!(
            "configured latent length {} cannot fill {LATENT_WIDTH}-wide clips",
            model.config.latent_len()
        )));
    }
    let mut rows = Array3::<f32>::zeros((CLIP_FRAMES, LATENT_WIDTH, 1));
    for (i, chunk) in chunks.iter().enumerate() {
        let q = model.quantize_chunk(chunk)?;
        for (j, &v) in q.latent.iter().enumerate() {
            rows[(i, j, 0)] = v as f32;
        }
    }
    Ok(LatentClip::new(rows)?)
}

/// Disjoint train/val/test index sets over a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() || self.test.is_empty() {
            return Err(CodecError::Split("train, val and test must all be nonempty".into()));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(CodecError::Split(format!("index {i} out of range for corpus of {n}")));
            }
            if seen[i] {
                return Err(CodecError::Split(format!("index {i} appears in two splits")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Splits `n` items by ratio with at least one item per part.
    pub fn from_ratios(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (rt, rv, rs) = ratios;
        if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
            return Err(CodecError::Split(format!(
                "ratios must be positive and sum to 1, got {rt}/{rv}/{rs}"
            )));
        }
        let n_val = ((n as f64 * rv).round() as usize).max(1);
        let n_test = ((n as f64 * rs).round() as usize).max(1);
        if n_val + n_test >= n {
            return Err(CodecError::Split(format!(
                "corpus of {n} leaves no training items after {n_val} val and {n_test} test"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(seed, &[stream::SPLIT]));
        let val = order[..n_val].to_vec();
        let test = order[n_val..n_val + n_test].to_vec();
        let train = order[n_val + n_test..].to_vec();
        let spec = SplitSpec { train, val, test };
        spec.validate(n)?;
        Ok(spec)
    }
}

/// Optimization settings for codec training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
            momentum: 0.9,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

/// One epoch of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecEpochStats {
    pub epoch: usize,
    pub train_recon: f64,
    pub train_commitment: f64,
    pub val_recon: f64,
    pub val_codebook: f64,
    pub val_commitment: f64,
    pub val_total: f64,
    pub active_codes: usize,
    pub reinitialized: usize,
}

pub struct CodecTrainOutcome {
    pub model: CodecModel,
    pub history: Vec<CodecEpochStats>,
    pub best_epoch: usize,
    pub diverged_at: Option<usize>,
}

/// Mean reconstruction, codebook and commitment losses over an index set,
/// in inference mode.
pub fn evaluate_split(
    model: &CodecModel,
    tiles: &[Array3<f64>],
    targets: &[&[f64]],
    idx: &[usize],
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    assert!(!idx.is_empty(), "evaluation split must be nonempty");
    let mut recon_acc = 0.0;
    let mut dist_acc = 0.0;
    let mut count = 0usize;
    for batch in idx.chunks(batch_size.max(1)) {
        let x = stack_tiles(tiles, batch);
        let mut g = Graph::new(false);
        let bound = model.params.bind(&mut g);
        let fwd = model.forward_batch(&mut g, &bound, x)?;
        let rec = g.val(fwd.recon);
        for (row, &i) in batch.iter().enumerate() {
            let target = targets[i];
            let mse: f64 = (0..CHUNK_SAMPLES)
                .map(|s| {
                    let d = rec[[row, s]] - target[s];
                    d * d
                })
                .sum::<f64>()
                / CHUNK_SAMPLES as f64;
            recon_acc += mse;
        }
        dist_acc += fwd.quant.distance * batch.len() as f64;
        count += batch.len();
    }
    let recon = recon_acc / count as f64;
    let dist = dist_acc / count as f64;
    Ok((recon, dist, dist))
}

fn stack_tiles(tiles: &[Array3<f64>], idx: &[usize]) -> ArrayD<f64> {
    let (c, h, w) = tiles[idx[0]].dim();
    let mut out = ndarray::Array4::<f64>::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), row).assign(&tiles[i]);
    }
    out.into_dyn()
}

/// Trains a fresh codec on a chunk corpus and returns the checkpoint with
/// the lowest validation loss (reconstruction + codebook + weighted
/// commitment). A non-finite loss aborts training; the best finite
/// checkpoint so far is kept, and if none exists the run fails.
pub fn train_codec(
    corpus: &[AudioChunk],
    split: &SplitSpec,
    model_config: &CodecConfig,
    train_config: &CodecTrainConfig,
) -> Result<CodecTrainOutcome> {
    split.validate(corpus.len())?;
    let mut model = CodecModel::new(model_config.clone(), train_config.seed)?;
    let tiles: Vec<Array3<f64>> = corpus
        .iter()
        .map(|c| model.tile(&mfcc(c, &model_config.mfcc)?))
        .collect::<Result<_>>()?;
    let targets: Vec<&[f64]> = corpus.iter().map(|c| c.samples()).collect();
    let mut opt = SgdMomentum::new(&model.params, train_config.momentum, 0.0);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, BTreeMap<String, ArrayD<f64>>)> = None;
    let mut diverged_at = None;

    'epochs: for epoch in 0..train_config.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng_for(train_config.seed, &[stream::CODEC_BATCH, epoch as u64]));
        let usage_before: Vec<u64> = model.codebook.usage().to_vec();
        let mut train_recon = 0.0;
        let mut train_commit = 0.0;
        let mut batches = 0usize;
        let mut reservoir: Vec<Vec<f64>> = Vec::new();
        for batch in order.chunks(train_config.batch_size.max(1)) {
            let x = stack_tiles(&tiles, batch);
            let mut g = Graph::new(true);
            let bound = model.params.bind(&mut g);
            let fwd = model.forward_batch(&mut g, &bound, x)?;
            let mut t = Array2::<f64>::zeros((batch.len(), CHUNK_SAMPLES));
            for (row, &i) in batch.iter().enumerate() {
                for (s, &v) in targets[i].iter().enumerate() {
                    t[(row, s)] = v;
                }
            }
            let t_leaf = g.leaf(t.into_dyn());
            let diff = ops::sub(&mut g, fwd.recon, t_leaf);
            let sq = ops::square(&mut g, diff);
            let recon_mse = ops::mean_all(&mut g, sq);
            let weighted =
                ops::mul_scalar(&mut g, fwd.quant.commitment, model_config.commitment_weight);
            let loss = ops::add(&mut g, recon_mse, weighted);
            let loss_val = g.val(loss)[[]];
            if !loss_val.is_finite() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            train_recon += g.val(recon_mse)[[]];
            train_commit += g.val(fwd.quant.commitment)[[]];
            batches += 1;
            let grads = g.backward(loss);
            let pgrads = bound.param_grads(&grads);
            opt.step(&mut model.params, &pgrads, train_config.learning_rate);
            model.codebook.record_usage(&fwd.quant.indices);
            model.codebook.ema_update(
                &fwd.quant.cells,
                &fwd.quant.indices,
                model_config.ema_decay,
            );
            reservoir = fwd
                .quant
                .cells
                .rows()
                .into_iter()
                .take(4096)
                .map(|r| r.to_vec())
                .collect();
        }
        let epoch_usage: Vec<u64> = model
            .codebook
            .usage()
            .iter()
            .zip(usage_before.iter())
            .map(|(now, before)| now - before)
            .collect();
        let mut reinit_rng = rng_for(train_config.seed, &[stream::CODEC_REINIT, epoch as u64]);
        let reinitialized = model.codebook.retire_dead_codes(
            &epoch_usage,
            model_config.dead_code_epochs,
            &reservoir,
            &mut reinit_rng,
        );
        let (val_recon, val_codebook, val_commit) =
            evaluate_split(&model, &tiles, &targets, &split.val, train_config.batch_size)?;
        let val_total = val_recon + val_codebook + model_config.commitment_weight * val_commit;
        let stats = CodecEpochStats {
            epoch,
            train_recon: train_recon / batches.max(1) as f64,
            train_commitment: train_commit / batches.max(1) as f64,
            val_recon,
            val_codebook,
            val_commitment: val_commit,
            val_total,
            active_codes: epoch_usage.iter().filter(|&&u| u > 0).count(),
            reinitialized,
        };
        history.push(stats);
        let snap = model.snapshot();
        if let Some(dir) = &train_config.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            blob::save_blob(&dir.join(format!("epoch_{epoch:03}.ckpt")), &snap)?;
        }
        if val_total.is_finite() && best.as_ref().map_or(true, |(_, v, _)| val_total < *v) {
            best = Some((epoch, val_total, snap));
        }
    }

    match best {
        Some((best_epoch, _, snap)) => {
            model.restore(&snap)?;
            Ok(CodecTrainOutcome { model, history, best_epoch, diverged_at })
        }
        None => Err(CodecError::Diverged { epoch: diverged_at.unwrap_or(0) }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn entries(vals: &[f64]) -> Codebook {
        let arr = Array2::from_shape_vec((vals.len(), 1), vals.to_vec()).unwrap();
        Codebook::from_entries(arr).unwrap()
    }

    fn tiny_config() -> CodecConfig {
        CodecConfig {
            encoder_widths: vec![4, 6, 6, 8, 8, 8],
            decoder_widths: vec![8, 8, 6, 6, 4, 1],
            codebook_size: 16,
            ..CodecConfig::default()
        }
    }

    fn noise_chunk(seed: u64) -> AudioChunk {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let phase = next() * 100.0;
        let samples: Vec<f64> = (0..CHUNK_SAMPLES)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                0.4 * (2.0 * std::f64::consts::PI * 440.0 * t + phase).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * 1320.0 * t + 2.0 * phase).sin()
                    + 0.05 * next()
            })
            .collect();
        AudioChunk::new(samples).unwrap()
    }

    #[test]
    fn nearest_entry_and_tie_break() {
        let cb = entries(&[-1.0, 0.0, 1.0]);
        assert_eq!(cb.nearest(&[0.4]), 1);
        let cb = entries(&[0.0, 1.0]);
        assert_eq!(cb.nearest(&[0.5]), 0, "exact tie goes to the lowest index");
    }

    #[test]
    fn quantizing_exact_entries_has_zero_losses() {
        let cb = entries(&[-0.5, 0.25, 0.75]);
        let mut pre = Array3::<f64>::zeros((1, 3, 1));
        pre[(0, 0, 0)] = 0.25;
        pre[(0, 1, 0)] = -0.5;
        pre[(0, 2, 0)] = 0.75;
        let q = cb.quantize_map(&pre).unwrap();
        assert_eq!(q.codebook_loss, 0.0);
        assert_eq!(q.commitment_loss, 0.0);
        assert_eq!(q.indices[(0, 0)], 1);
        assert_eq!(q.latent, vec![0.25, -0.5, 0.75]);
    }

    #[test]
    fn quantized_cells_are_codebook_rows() {
        let cb = entries(&[-1.0, -0.25, 0.3, 0.9]);
        let pre = Array3::from_shape_fn((2, 3, 1), |(i, j, _)| (i as f64 - j as f64) * 0.4);
        let q = cb.quantize_map(&pre).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(q.quantized[(i, j, 0)], cb.entries()[(q.indices[(i, j)], 0)]);
            }
        }
    }

    #[test]
    fn duplicate_entries_rejected() {
        let arr = arr2(&[[0.5], [0.5]]);
        assert!(Codebook::from_entries(arr).is_err());
    }

    proptest! {
        #[test]
        fn quantizer_matches_exhaustive_search(
            k in 2usize..64,
            cells in proptest::collection::vec(-2.0f64..2.0, 12),
            seed in 0u64..1000,
        ) {
            let mut rng = rng_for(seed, &[99]);
            let cb = Codebook::new_random(k, 1, &mut rng).unwrap();
            let pre = Array3::from_shape_vec((3, 4, 1), cells.clone()).unwrap();
            let q = cb.quantize_map(&pre).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    let z = pre[(i, j, 0)];
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for e in 0..k {
                        let d = (z - cb.entries()[(e, 0)]).powi(2);
                        if d < best_d {
                            best_d = d;
                            best = e;
                        }
                    }
                    prop_assert_eq!(q.indices[(i, j)], best);
                }
            }
        }
    }

    #[test]
    fn encoder_shape_determinism_and_trace() {
        let model = CodecModel::new(tiny_config(), 7).unwrap();
        let zeros = ndarray::Array4::<f64>::zeros((1, 3, 40, 80)).into_dyn();
        let map = model.encode_tiles(zeros).unwrap();
        assert_eq!(map.shape(), &[1, 5, 10, 1]);
        let ones = ndarray::Array4::<f64>::ones((2, 3, 40, 80)).into_dyn();
        let a = model.encode_tiles(ones.clone()).unwrap();
        let b = model.encode_tiles(ones).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.encoder_trace(), vec![(40, 80), (20, 40), (10, 20), (5, 10)]);
        assert_eq!(model.decoder_trace(), vec![(5, 10), (10, 20), (20, 40), (40, 80)]);
        let bad = ndarray::Array4::<f64>::zeros((1, 3, 40, 64)).into_dyn();
        assert!(model.encode_tiles(bad).is_err());
    }

    #[test]
    fn decoder_emits_chunk_length_deterministically() {
        let model = CodecModel::new(tiny_config(), 3).unwrap();
        let map = Array3::from_shape_fn((5, 10, 1), |(i, j, _)| ((i * 10 + j) as f64) * 0.01);
        let a = model.decode_map(&map).unwrap();
        let b = model.decode_map(&map).unwrap();
        assert_eq!(a.len(), CHUNK_SAMPLES);
        assert_eq!(a, b);
        let bad = Array3::<f64>::zeros((5, 8, 1));
        assert!(model.decode_map(&bad).is_err());
    }

    #[test]
    fn straight_through_matches_direct_gradient() {
        let cb = entries(&[-0.75, -0.25, 0.25, 0.75]);
        let zvals = ndarray::Array4::from_shape_fn((1, 1, 2, 3), |(_, _, i, j)| {
            0.3 * (i as f64) - 0.2 * (j as f64) + 0.1
        })
        .into_dyn();
        let weights = ndarray::Array1::from_vec(vec![0.5, -1.0, 2.0, 0.25, -0.5, 1.5]);

        let mut g = Graph::new(true);
        let z = g.leaf(zvals.clone());
        let q = quantize_vars(&mut g, &cb, z).unwrap();
        let flat = ops::reshape(&mut g, q.zq, &[1, 6]);
        let w_leaf = g.leaf(weights.clone().insert_axis(ndarray::Axis(1)).into_dyn());
        let out = ops::matmul(&mut g, flat, w_leaf);
        let loss = ops::mean_all(&mut g, out);
        let grads = g.backward(loss);
        let g_z = grads.get(z).unwrap().clone();

        let qvals = g.val(q.zq).clone();
        let mut g2 = Graph::new(true);
        let q_leaf = g2.leaf(qvals);
        let flat2 = ops::reshape(&mut g2, q_leaf, &[1, 6]);
        let w2 = g2.leaf(weights.insert_axis(ndarray::Axis(1)).into_dyn());
        let out2 = ops::matmul(&mut g2, flat2, w2);
        let loss2 = ops::mean_all(&mut g2, out2);
        let grads2 = g2.backward(loss2);
        let g_q = grads2.get(q_leaf).unwrap().clone();

        for (a, b) in g_z.iter().zip(g_q.iter()) {
            assert!((a - b).abs() < 1e-6, "straight-through grad {a} vs direct {b}");
        }
    }

    #[test]
    fn ema_update_matches_hand_computation() {
        let mut cb = entries(&[0.0, 1.0]);
        let cells = arr2(&[[0.1], [0.9], [1.1]]);
        let assignments = vec![0usize, 1, 1];
        cb.ema_update(&cells, &assignments, 0.99);
        assert_eq!(cb.entries()[(0, 0)], 0.001f32 as f64);
        assert_eq!(cb.entries()[(1, 0)], 1.0);
    }

    #[test]
    fn entries_stay_f32_representable_and_distinct() {
        let mut rng = rng_for(5, &[1]);
        let mut cb = Codebook::new_random(8, 1, &mut rng).unwrap();
        let cells = Array2::from_shape_fn((32, 1), |(i, _)| (i as f64 / 7.0).sin());
        let assignments: Vec<usize> = (0..32).map(|i| i % 8).collect();
        for _ in 0..5 {
            cb.ema_update(&cells, &assignments, 0.9);
        }
        let mut seen = std::collections::HashSet::new();
        for &e in cb.entries().iter() {
            assert_eq!(e, e as f32 as f64, "entry {e} not f32 representable");
            assert!(seen.insert(e.to_bits()), "duplicate entry {e}");
        }
    }

    #[test]
    fn dead_codes_are_reseeded_after_three_idle_epochs() {
        let mut cb = entries(&[0.0, 10.0]);
        let reservoir = vec![vec![0.25]];
        let mut rng = rng_for(1, &[2]);
        let usage = [5u64, 0];
        assert_eq!(cb.retire_dead_codes(&usage, 3, &reservoir, &mut rng), 0);
        assert_eq!(cb.retire_dead_codes(&usage, 3, &reservoir, &mut rng), 0);
        assert_eq!(cb.retire_dead_codes(&usage, 3, &reservoir, &mut rng), 1);
        assert_eq!(cb.entries()[(1, 0)], 0.25);
        assert_eq!(cb.entries()[(0, 0)], 0.0, "live entry untouched");
        let used = [1u64, 1];
        assert_eq!(cb.retire_dead_codes(&used, 3, &reservoir, &mut rng), 0, "streak resets");
    }

    #[test]
    fn compression_ratio_stays_small() {
        let cfg = CodecConfig::default();
        assert_eq!(cfg.latent_len(), 50);
        let (vs_map, vs_chunk) = cfg.compression_ratios();
        assert!(vs_map <= 0.05, "latent/map ratio {vs_map}");
        assert!(vs_chunk <= 0.05, "latent/chunk ratio {vs_chunk}");
    }

    #[test]
    fn split_from_paper_like_ratios() {
        let split = SplitSpec::from_ratios(400, (0.99, 0.005, 0.005), 0).unwrap();
        assert_eq!(split.val.len(), 2);
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.train.len(), 396);
        split.validate(400).unwrap();
        let overlap = SplitSpec { train: vec![0, 1], val: vec![1], test: vec![2] };
        assert!(overlap.validate(4).is_err());
        let empty_val = SplitSpec { train: vec![0, 1], val: vec![], test: vec![2] };
        assert!(empty_val.validate(4).is_err());
    }

    #[test]
    fn segment_latents_stack_and_stay_in_codebook() {
        let model = CodecModel::new(tiny_config(), 11).unwrap();
        let chunk = noise_chunk(42);
        let chunks = vec![chunk; CLIP_FRAMES];
        let clip = latents_for_segment(&chunks, &model).unwrap();
        let first = clip.latents().index_axis(ndarray::Axis(0), 0).to_owned();
        for row in clip.latents().axis_iter(ndarray::Axis(0)) {
            assert_eq!(row, first.view(), "identical chunks give identical latent rows");
        }
        for &v in clip.latents().iter() {
            assert!(model.codebook.contains_value(v), "latent value {v} not in codebook");
        }
        let short = vec![noise_chunk(1); 29];
        assert!(latents_for_segment(&short, &model).is_err());
        let bytes = crate::data::clip_to_bytes(&clip.latents().clone().into_dyn()).unwrap();
        let back = crate::data::clip_from_bytes(&bytes, "test").unwrap();
        assert_eq!(back, clip.latents().clone().into_dyn());
    }

    #[test]
    fn training_improves_on_untrained_model_and_checkpoints() {
        let corpus: Vec<AudioChunk> = (0..40).map(|i| noise_chunk(i as u64)).collect();
        let split = SplitSpec {
            train: (0..32).collect(),
            val: (32..36).collect(),
            test: (36..40).collect(),
        };
        let model_config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let train_config = CodecTrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 2e-3,
            momentum: 0.9,
            seed: 4,
            checkpoint_dir: Some(dir.path().to_path_buf()),
        };

        let untrained = CodecModel::new(model_config.clone(), train_config.seed).unwrap();
        let tiles: Vec<Array3<f64>> = corpus
            .iter()
            .map(|c| untrained.tile(&mfcc(c, &model_config.mfcc).unwrap()).unwrap())
            .collect();
        let targets: Vec<&[f64]> = corpus.iter().map(|c| c.samples()).collect();
        let (base_recon, _, _) =
            evaluate_split(&untrained, &tiles, &targets, &split.val, 8).unwrap();

        let outcome = train_codec(&corpus, &split, &model_config, &train_config).unwrap();
        assert_eq!(outcome.history.len(), 3);
        assert!(outcome.diverged_at.is_none());
        let best = &outcome.history[outcome.best_epoch];
        assert!(
            best.val_recon < base_recon,
            "trained {} should beat untrained {}",
            best.val_recon,
            base_recon
        );
        for e in 0..3 {
            assert!(dir.path().join(format!("epoch_{e:03}.ckpt")).exists());
        }
        let restored = CodecModel::load(
            model_config.clone(),
            train_config.seed,
            &dir.path().join(format!("epoch_{:03}.ckpt", outcome.best_epoch)),
        )
        .unwrap();
        let (best_recon, _, _) =
            evaluate_split(&outcome.model, &tiles, &targets, &split.val, 8).unwrap();
        let (loaded_recon, _, _) =
            evaluate_split(&restored, &tiles, &targets, &split.val, 8).unwrap();
        assert!((best_recon - loaded_recon).abs() < 1e-12);
        assert!((best_recon - best.val_recon).abs() < 1e-12);
    }

    #[test]
    fn divergence_without_finite_checkpoint_is_an_error() {
        let corpus: Vec<AudioChunk> = (0..12).map(|i| noise_chunk(100 + i as u64)).collect();
        let split =
            SplitSpec { train: (0..8).collect(), val: vec![8, 9], test: vec![10, 11] };
        let cfg = tiny_config();
        let train_config = CodecTrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e12,
            ..CodecTrainConfig::default()
        };
        match train_codec(&corpus, &split, &cfg, &train_config) {
            Err(CodecError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.diverged_at)),
        }
    }

    #[test]
    fn single_epoch_returns_that_checkpoint() {
        let corpus: Vec<AudioChunk> = (0..10).map(|i| noise_chunk(7 + i as u64)).collect();
        let split = SplitSpec { train: (0..6).collect(), val: vec![6, 7], test: vec![8, 9] };
        let cfg = tiny_config();
        let train_config =
            CodecTrainConfig { epochs: 1, batch_size: 6, ..CodecTrainConfig::default() };
        let outcome = train_codec(&corpus, &split, &cfg, &train_config).unwrap();
        assert_eq!(outcome.best_epoch, 0);
        assert_eq!(outcome.history.len(), 1);
    }
}
