//! Sparse-line training samples, the progressive line-retention schedule,
//! dataset generation from solver runs and the `TWD1` container.
//!
//! `TWD1` layout (little-endian): magic, `u32` version, `u32` sample count,
//! `u32` height, `u32` width, `f32` floor_db; per sample `f32` frequency,
//! `f32` conductivity, `f32` source height, `u32` source row, `u32` observed
//! row count, the `u32` row indices and the `f32` target image (row-major);
//! a CRC32 of all preceding bytes ends the file.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::FieldImage;
use crate::pwe::{self, PweError, SourceSpec, TunnelEnvironment};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TWD1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic: not a TWD1 dataset")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("invalid dataset configuration: {0}")]
    InvalidConfig(String),
    #[error("row set is empty")]
    EmptyRows,
    #[error("row {row} outside image of height {height}")]
    RowOutOfRange { row: usize, height: usize },
    #[error("source row {0} is not among the observed rows")]
    SourceNotObserved(usize),
    #[error("line has {got} values, image width is {expected}")]
    LineLength { expected: usize, got: usize },
    #[error("line value {0} outside [0, 1]")]
    LineValue(f64),
    #[error(transparent)]
    Solver(#[from] PweError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mixes a seed with stream keys into an independent generator.
pub fn keyed_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    for &k in keys {
        state = splitmix64(state ^ splitmix64(k.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(state)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Linearly decaying line-retention ratio, held at `rho_final` after `t_prog`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveSchedule {
    pub rho_init: f64,
    pub rho_final: f64,
    pub t_prog: usize,
}

impl Default for ProgressiveSchedule {
    fn default() -> Self {
        Self {
            rho_init: 0.2,
            rho_final: 0.01,
            t_prog: 100,
        }
    }
}

impl ProgressiveSchedule {
    pub fn validate(&self) -> Result<(), String> {
        let ok = |r: f64| r > 0.0 && r <= 1.0;
        if !(ok(self.rho_init) && ok(self.rho_final)) {
            return Err("retention ratios must lie in (0, 1]".into());
        }
        if self.rho_init < self.rho_final {
            return Err("rho_init must be at least rho_final".into());
        }
        if self.t_prog == 0 {
            return Err("t_prog must be at least 1".into());
        }
        Ok(())
    }
}

pub fn progressive_rho(t: usize, s: &ProgressiveSchedule) -> f64 {
    if t >= s.t_prog {
        return s.rho_final;
    }
    s.rho_init - (s.rho_init - s.rho_final) * t as f64 / s.t_prog as f64
}

/// `max(1, round(rho * n_rows))`, capped at `n_rows`.
pub fn row_count(rho: f64, n_rows: usize) -> usize {
    ((rho * n_rows as f64).round() as usize).clamp(1, n_rows.max(1))
}

/// Sorted distinct rows: `source_row` plus `k - 1` rows drawn uniformly
/// without replacement from the rest.
pub fn sample_rows<R: Rng + ?Sized>(rho: f64, n_rows: usize, source_row: usize, rng: &mut R) -> Vec<usize> {
    assert!(source_row < n_rows, "source row {source_row} outside {n_rows} rows");
    let k = row_count(rho, n_rows);
    let mut rows: Vec<usize> = index::sample(rng, n_rows - 1, k - 1)
        .into_iter()
        .map(|i| if i >= source_row { i + 1 } else { i })
        .collect();
    rows.push(source_row);
    rows.sort_unstable();
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub frequency_hz: f64,
    pub sigma_s_per_m: f64,
    pub source_height_m: f64,
    pub floor_db: f64,
}

/// Two-channel conditioning input (row mask, masked data) with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSample {
    pub mask: FieldImage,
    pub data: FieldImage,
    pub target: Option<FieldImage>,
    pub rows: Vec<usize>,
    pub source_row: usize,
    pub meta: Option<SampleMeta>,
}

fn masked(image: &FieldImage, rows: &[usize]) -> (FieldImage, FieldImage) {
    let (h, w) = (image.height(), image.width());
    let mut mask = vec![0.0; h * w];
    let mut data = vec![0.0; h * w];
    for &r in rows {
        mask[r * w..(r + 1) * w].fill(1.0);
        data[r * w..(r + 1) * w].copy_from_slice(image.row(r));
    }
    (
        FieldImage::new(h, w, mask).expect("binary mask"),
        FieldImage::new(h, w, data).expect("subset of a valid image"),
    )
}

fn check_rows(rows: &[usize], source_row: usize, height: usize) -> Result<Vec<usize>, DatasetError> {
    if rows.is_empty() {
        return Err(DatasetError::EmptyRows);
    }
    if let Some(&row) = rows.iter().find(|&&r| r >= height) {
        return Err(DatasetError::RowOutOfRange { row, height });
    }
    if !rows.contains(&source_row) {
        return Err(DatasetError::SourceNotObserved(source_row));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(sorted)
}

pub fn make_sparse_sample(
    target: &FieldImage,
    rows: &[usize],
    source_row: usize,
    meta: Option<SampleMeta>,
) -> Result<SparseSample, DatasetError> {
    let rows = check_rows(rows, source_row, target.height())?;
    let (mask, data) = masked(target, &rows);
    Ok(SparseSample {
        mask,
        data,
        target: Some(target.clone()),
        rows,
        source_row,
        meta,
    })
}

/// Single measured line placed at `row` of an otherwise unobserved image.
pub fn inference_line_input(
    line: &[f64],
    row: usize,
    height: usize,
    width: usize,
) -> Result<SparseSample, DatasetError> {
    if line.len() != width {
        return Err(DatasetError::LineLength {
            expected: width,
            got: line.len(),
        });
    }
    if row >= height {
        return Err(DatasetError::RowOutOfRange { row, height });
    }
    if let Some(&v) = line.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
        return Err(DatasetError::LineValue(v));
    }
    let mut values = vec![0.0; height * width];
    values[row * width..(row + 1) * width].copy_from_slice(line);
    let carrier = FieldImage::new(height, width, values).expect("validated line");
    let (mask, data) = masked(&carrier, &[row]);
    Ok(SparseSample {
        mask,
        data,
        target: None,
        rows: vec![row],
        source_row: row,
        meta: None,
    })
}

/// `(N, 2, H, W)` stack of mask and data channels.
pub fn input_tensor(samples: &[&SparseSample]) -> Tensor {
    let (h, w) = (samples[0].mask.height(), samples[0].mask.width());
    let mut out = Vec::with_capacity(samples.len() * 2 * h * w);
    for s in samples {
        out.extend_from_slice(s.mask.values());
        out.extend_from_slice(s.data.values());
    }
    Tensor::new(vec![samples.len(), 2, h, w], out).expect("uniform sample shapes")
}

/// `(N, 1, H, W)` data channel, the discriminator's condition.
pub fn condition_tensor(samples: &[&SparseSample]) -> Tensor {
    let (h, w) = (samples[0].data.height(), samples[0].data.width());
    let out = samples.iter().flat_map(|s| s.data.values().iter().copied()).collect();
    Tensor::new(vec![samples.len(), 1, h, w], out).expect("uniform sample shapes")
}

/// `(N, 1, H, W)` targets. Panics on samples without a target.
pub fn target_tensor(samples: &[&SparseSample]) -> Tensor {
    let t0 = samples[0].target.as_ref().expect("target");
    let (h, w) = (t0.height(), t0.width());
    let out = samples
        .iter()
        .flat_map(|s| s.target.as_ref().expect("target").values().iter().copied())
        .collect();
    Tensor::new(vec![samples.len(), 1, h, w], out).expect("uniform sample shapes")
}

/// One stored solver output.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub meta: SampleMeta,
    pub source_row: usize,
    pub observed_rows: Vec<usize>,
    pub target: FieldImage,
}

impl DatasetEntry {
    pub fn sparse(&self, rows: &[usize]) -> Result<SparseSample, DatasetError> {
        make_sparse_sample(&self.target, rows, self.source_row, Some(self.meta))
    }

    pub fn single_line(&self) -> SparseSample {
        self.sparse(&[self.source_row]).expect("source row is in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub floor_db: f64,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub length_m: f64,
    pub height_m: f64,
    pub delta_range_m: f64,
    pub delta_height_m: f64,
    pub freq_min_hz: f64,
    pub freq_max_hz: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Source height range as fractions of the tunnel height.
    pub source_min_frac: f64,
    pub source_max_frac: f64,
    pub beam_waist_m: f64,
    pub eps_r: f64,
    pub floor_db: f64,
    /// Retention ratio of the row set stored with each sample.
    pub observed_rho: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 16,
            seed: 0,
            length_m: 500.0,
            height_m: 50.0,
            delta_range_m: 0.5,
            delta_height_m: 0.5,
            freq_min_hz: 0.9e9,
            freq_max_hz: 5.8e9,
            sigma_min: 0.001,
            sigma_max: 0.1,
            source_min_frac: 0.25,
            source_max_frac: 0.75,
            beam_waist_m: 2.0,
            eps_r: 5.0,
            floor_db: pwe::DEFAULT_FLOOR_DB,
            observed_rho: 0.01,
        }
    }
}

impl DatasetConfig {
    /// 128 x 32 grid (range x height) used for quick experiments.
    pub fn desk(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            length_m: 127.0,
            height_m: 15.5,
            delta_range_m: 1.0,
            delta_height_m: 0.5,
            ..Self::default()
        }
    }

    pub fn environment(&self, frequency_hz: f64, sigma: f64) -> TunnelEnvironment {
        TunnelEnvironment {
            length_m: self.length_m,
            height_m: self.height_m,
            delta_range_m: self.delta_range_m,
            delta_height_m: self.delta_height_m,
            frequency_hz,
            eps_r: self.eps_r,
            sigma_s_per_m: sigma,
            ..TunnelEnvironment::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidConfig(m.to_string()));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        if !(self.freq_min_hz > 0.0 && self.freq_min_hz <= self.freq_max_hz) {
            return bad("frequency range must satisfy 0 < min <= max");
        }
        if !(0.9e9..=5.8e9).contains(&self.freq_min_hz) || !(0.9e9..=5.8e9).contains(&self.freq_max_hz) {
            return bad("dataset frequencies must lie in [0.9, 5.8] GHz");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return bad("conductivity range must satisfy 0 < min <= max");
        }
        if !(0.0 < self.source_min_frac
            && self.source_min_frac <= self.source_max_frac
            && self.source_max_frac < 1.0)
        {
            return bad("source fractions must satisfy 0 < min <= max < 1");
        }
        if !(self.beam_waist_m > 0.0) {
            return bad("beam waist must be positive");
        }
        if !(self.floor_db < 0.0 && self.floor_db.is_finite()) {
            return bad("floor_db must be negative");
        }
        if !(self.observed_rho > 0.0 && self.observed_rho <= 1.0) {
            return bad("observed_rho must lie in (0, 1]");
        }
        self.environment(self.freq_min_hz, self.sigma_min).validate()?;
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

/// Nearest `f32` to `v` that still lies in `[lo, hi]` (positive bounds).
fn q32_within(v: f64, lo: f64, hi: f64) -> f64 {
    let mut q = v.clamp(lo, hi) as f32;
    if f64::from(q) > hi {
        q = f32::from_bits(q.to_bits() - 1);
    }
    if f64::from(q) < lo {
        q = f32::from_bits(q.to_bits() + 1);
    }
    f64::from(q)
}

/// Solves one sample; parameters come from a stream keyed by `(seed, index)`.
pub fn generate_entry(cfg: &DatasetConfig, index: usize) -> Result<DatasetEntry, DatasetError> {
    let mut rng = keyed_rng(cfg.seed, &[index as u64]);
    let frequency_hz = q32_within(
        uniform(&mut rng, cfg.freq_min_hz, cfg.freq_max_hz),
        cfg.freq_min_hz,
        cfg.freq_max_hz,
    );
    let log_sigma = uniform(&mut rng, cfg.sigma_min.ln(), cfg.sigma_max.ln());
    let sigma = q32_within(log_sigma.exp(), cfg.sigma_min, cfg.sigma_max);
    let frac = uniform(&mut rng, cfg.source_min_frac, cfg.source_max_frac);
    let env = cfg.environment(frequency_hz, sigma);
    let height = q32(frac * cfg.height_m);
    let src = SourceSpec {
        height_m: height,
        beam_waist_m: cfg.beam_waist_m,
        amplitude: 1.0,
    };
    let slice = pwe::solve(&env, &src)?;
    let target = pwe::to_field_image(&slice, cfg.floor_db)?.quantized_f32();
    let source_row = env.nearest_row(height)?;
    let observed_rows = sample_rows(cfg.observed_rho, target.height(), source_row, &mut rng);
    Ok(DatasetEntry {
        meta: SampleMeta {
            frequency_hz,
            sigma_s_per_m: sigma,
            source_height_m: height,
            floor_db: q32(cfg.floor_db),
        },
        source_row,
        observed_rows,
        target,
    })
}

/// Worker count: `TW_THREADS` if set to a positive integer, else all cores.
pub fn thread_cap() -> usize {
    std::env::var("TW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every solve, in parallel up to [`thread_cap`], keeping index order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| DatasetError::InvalidConfig(e.to_string()))?;
    let entries: Vec<DatasetEntry> = pool.install(|| {
        (0..cfg.n_samples)
            .into_par_iter()
            .map(|i| generate_entry(cfg, i))
            .collect::<Result<_, _>>()
    })?;
    let (height, width) = (entries[0].target.height(), entries[0].target.width());
    Ok(Dataset {
        height,
        width,
        floor_db: q32(cfg.floor_db),
        entries,
    })
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4], DatasetError> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| DatasetError::Malformed(format!("{what} {v} exceeds u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(ds.entries.len(), "sample count")?);
    out.extend_from_slice(&u32_of(ds.height, "height")?);
    out.extend_from_slice(&u32_of(ds.width, "width")?);
    out.extend_from_slice(&(ds.floor_db as f32).to_le_bytes());
    for e in &ds.entries {
        if (e.target.height(), e.target.width()) != (ds.height, ds.width) {
            return Err(DatasetError::Malformed("sample shape differs from header".into()));
        }
        for v in [e.meta.frequency_hz, e.meta.sigma_s_per_m, e.meta.source_height_m] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&u32_of(e.source_row, "source row")?);
        out.extend_from_slice(&u32_of(e.observed_rows.len(), "row count")?);
        for &r in &e.observed_rows {
            out.extend_from_slice(&u32_of(r, "row")?);
        }
        for &v in e.target.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).ok_or(DatasetError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DatasetError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f64, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(DatasetError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    if bytes.len() < 28 {
        return Err(DatasetError::Truncated);
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { buf: body, pos: 8 };
    let n = r.u32()?;
    let height = r.u32()?;
    let width = r.u32()?;
    let floor_db = r.f32()?;
    let mut raw_entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let frequency_hz = r.f32()?;
        let sigma_s_per_m = r.f32()?;
        let source_height_m = r.f32()?;
        let source_row = r.u32()?;
        let k = r.u32()?;
        let mut observed_rows = Vec::with_capacity(k.min(height));
        for _ in 0..k {
            observed_rows.push(r.u32()?);
        }
        let pixels = height.checked_mul(width).ok_or(DatasetError::Truncated)?;
        let raw = r.take(pixels.checked_mul(4).ok_or(DatasetError::Truncated)?)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        raw_entries.push((
            SampleMeta {
                frequency_hz,
                sigma_s_per_m,
                source_height_m,
                floor_db,
            },
            source_row,
            observed_rows,
            values,
        ));
    }
    if r.pos != body.len() {
        return Err(DatasetError::Malformed("trailing bytes after last sample".into()));
    }
    if crc32fast::hash(body).to_le_bytes() != crc {
        return Err(DatasetError::Checksum);
    }
    let mut entries = Vec::with_capacity(raw_entries.len());
    for (meta, source_row, observed_rows, values) in raw_entries {
        check_rows(&observed_rows, source_row, height)?;
        let target = FieldImage::new(height, width, values).map_err(|e| DatasetError::Malformed(e.to_string()))?;
        entries.push(DatasetEntry {
            meta,
            source_row,
            observed_rows,
            target,
        });
    }
    Ok(Dataset {
        height,
        width,
        floor_db,
        entries,
    })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    let bytes = encode_dataset(ds)?;
    crate::tensor::checkpoint::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    decode_dataset(&std::fs::read(path)?)
}

/// Deterministic train/validation partition by index hash. With at least two
/// samples and a positive fraction, both sides are non-empty.
pub fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let score = |i: usize| splitmix64(i as u64 ^ 0x7477_6431) as f64 / u64::MAX as f64;
    let (mut train, mut val): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| score(i) >= val_fraction);
    if n >= 2 && val_fraction > 0.0 {
        if val.is_empty() {
            let pick = *train
                .iter()
                .min_by(|&&a, &&b| score(a).total_cmp(&score(b)))
                .expect("non-empty");
            train.retain(|&i| i != pick);
            val.push(pick);
        } else if train.is_empty() {
            let pick = *val
                .iter()
                .max_by(|&&a, &&b| score(a).total_cmp(&score(b)))
                .expect("non-empty");
            val.retain(|&i| i != pick);
            train.push(pick);
            train.sort_unstable();
        }
    }
    (train, val)
}
