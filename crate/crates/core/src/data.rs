//! Synthetic SST-anomaly cutouts, local-mean ingest and the `ENKD` stack file.
//!
//! Fields are isotropic Gaussian random fields with a power-law spectrum,
//! optionally crossed by a smooth front, generated on a finer grid and
//! block-averaged down to the cutout size. Every cutout has its mean removed
//! and is rescaled to a σ_T drawn log-uniformly.
//!
//! Stack layout: `"ENKD"`, then u32 LE version, count, height, width and dtype
//! code (0 = f32, 1 = f64), then `count·height·width` row-major values, then
//! an optional UTF-8 JSON metadata array followed by its u64 LE byte length.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{EnkiError, Result};
use crate::format::{u32_field, write_u32, write_u64, write_values, ByteReader, Dtype};
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub const STACK_MAGIC: &[u8; 4] = b"ENKD";
pub const STACK_VERSION: u32 = 1;
const STACK_HEADER_LEN: u64 = 24;

/// Validation ids start here so they never collide with training ids.
pub const VALIDATION_ID_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoutMeta {
    pub id: u64,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

/// One single-channel temperature-anomaly field in kelvin.
#[derive(Debug, Clone, PartialEq)]
pub struct Cutout {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub meta: CutoutMeta,
}

impl Cutout {
    pub fn new(height: usize, width: usize, values: Vec<f64>, meta: CutoutMeta) -> Result<Self> {
        if values.len() != height * width {
            return Err(EnkiError::shape("cutout", &[values.len()], &[height, width]));
        }
        Ok(Cutout { height, width, values, meta })
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// Population standard deviation of the pixel values.
    pub fn sigma_t(&self) -> f64 {
        std_dev(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontSpec {
    /// Chance that a given cutout gets a front.
    pub probability: f64,
    /// Step height relative to the background field's standard deviation.
    pub amplitude: f64,
    /// tanh width in output pixels.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSpec {
    pub size: usize,
    /// Power spectrum falls as k^-gamma.
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Synthesis grid is `size·supersample` on a side, block-averaged down.
    pub supersample: usize,
    pub front: Option<FrontSpec>,
    /// Additive white noise, in units of the drawn σ_T.
    pub noise: Option<f64>,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            size: 64,
            gamma: 3.0,
            sigma_min: 0.01,
            sigma_max: 1.0,
            supersample: 2,
            front: None,
            noise: None,
        }
    }
}

impl FieldSpec {
    /// Every problem with the spec, or an empty list.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.size == 0 {
            out.push("size must be positive".to_string());
        }
        if self.supersample == 0 {
            out.push("supersample must be positive".to_string());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            out.push(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            out.push(format!("sigma_min must be positive, got {}", self.sigma_min));
        }
        if !(self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            out.push(format!("sigma_max {} must be at least sigma_min {}", self.sigma_max, self.sigma_min));
        }
        if let Some(f) = &self.front {
            if !(0.0..=1.0).contains(&f.probability) {
                out.push(format!("front.probability must lie in [0, 1], got {}", f.probability));
            }
            if !(f.width > 0.0) {
                out.push(format!("front.width must be positive, got {}", f.width));
            }
            if !f.amplitude.is_finite() {
                out.push("front.amplitude must be finite".to_string());
            }
        }
        if let Some(n) = self.noise {
            if !(n >= 0.0 && n.is_finite()) {
                out.push(format!("noise must be non-negative, got {n}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EnkiError::invalid(problems.join("; ")))
        }
    }
}

/// Forward and inverse 2-D transforms of one size, with scratch space.
struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex<f64>>,
    transposed: Vec<Complex<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        Fft2 {
            n,
            forward,
            inverse,
            scratch: vec![Complex::default(); len],
            transposed: vec![Complex::default(); n * n],
        }
    }

    /// In-place transform of an `n×n` row-major grid.
    fn process(&mut self, grid: &mut [Complex<f64>], inverse: bool) {
        let fft = if inverse { &self.inverse } else { &self.forward };
        let n = self.n;
        fft.process_with_scratch(grid, &mut self.scratch);
        transpose(grid, &mut self.transposed, n);
        fft.process_with_scratch(&mut self.transposed, &mut self.scratch);
        transpose(&self.transposed, grid, n);
    }
}

fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], n: usize) {
    for r in 0..n {
        for c in 0..n {
            dst[c * n + r] = src[r * n + c];
        }
    }
}

/// Signed integer frequency of FFT bin `i` on an `n`-point axis.
fn frequency(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Spectral synthesis state for one field spec.
struct Synthesizer {
    fft: Fft2,
    /// Amplitude filter |k|^(-gamma/2), zero at k = 0.
    filter: Vec<f64>,
    grid: Vec<Complex<f64>>,
}

impl Synthesizer {
    fn new(spec: &FieldSpec) -> Self {
        let n = spec.size * spec.supersample;
        let mut filter = vec![0.0; n * n];
        for r in 0..n {
            let ky = frequency(r, n);
            for c in 0..n {
                let kx = frequency(c, n);
                let k2 = kx * kx + ky * ky;
                if k2 > 0.0 {
                    filter[r * n + c] = libm::pow(k2, -spec.gamma / 4.0);
                }
            }
        }
        Synthesizer {
            fft: Fft2::new(n),
            filter,
            grid: vec![Complex::default(); n * n],
        }
    }

    /// Power-law Gaussian random field on the periodic synthesis grid, arbitrary scale.
    fn field(&mut self, rng: &mut Rng) -> Vec<f64> {
        for z in &mut self.grid {
            *z = Complex::new(rng.sample(StandardNormal), 0.0);
        }
        self.fft.process(&mut self.grid, false);
        for (z, a) in self.grid.iter_mut().zip(&self.filter) {
            *z *= a;
        }
        self.fft.process(&mut self.grid, true);
        self.grid.iter().map(|z| z.re).collect()
    }
}

/// Draw one cutout. The same `(spec, seed)` always yields the same bytes.
pub fn generate_field(spec: &FieldSpec, seed: u64, id: u64) -> Result<Cutout> {
    spec.validate()?;
    generate_with(&mut Synthesizer::new(spec), spec, seed, id)
}

fn generate_with(synth: &mut Synthesizer, spec: &FieldSpec, seed: u64, id: u64) -> Result<Cutout> {
    let mut rng = rng_from_seed(seed);
    let u: f64 = rng.random_range(0.0..=1.0);
    let sigma = libm::exp(u * libm::log(spec.sigma_max / spec.sigma_min)) * spec.sigma_min;
    let fine = spec.size * spec.supersample;
    let field = synth.field(&mut rng);
    let mut values = local_mean_downsample(&field, fine, fine, spec.supersample)?;
    let n = spec.size;

    if let Some(front) = &spec.front {
        if rng.random_range(0.0..1.0) < front.probability {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let shift = rng.random_range(-0.25..0.25) * n as f64;
            let step = front.amplitude * std_dev(&values);
            let (s, c) = (libm::sin(theta), libm::cos(theta));
            let centre = (n as f64 - 1.0) / 2.0;
            for r in 0..n {
                for col in 0..n {
                    let d = (col as f64 - centre) * c + (r as f64 - centre) * s - shift;
                    values[r * n + col] += 0.5 * step * libm::tanh(d / front.width);
                }
            }
        }
    }

    normalize(&mut values, 1.0);
    if let Some(noise) = spec.noise {
        for v in &mut values {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    normalize(&mut values, sigma);
    Cutout::new(
        n,
        n,
        values,
        CutoutMeta {
            id,
            provenance: Provenance::Synthetic,
            seed: Some(seed),
        },
    )
}

/// Remove the mean and rescale to the given population standard deviation.
/// A constant field stays at zero.
fn normalize(values: &mut [f64], sigma: f64) {
    let m = mean(values);
    values.iter_mut().for_each(|v| *v -= m);
    let s = std_dev(values);
    if s > 0.0 {
        values.iter_mut().for_each(|v| *v *= sigma / s);
    }
    // a second centring pass takes the residual mean to rounding level
    let m = mean(values);
    values.iter_mut().for_each(|v| *v -= m);
}

/// Cutouts for the given ids, each from `derive_seed(master_seed, id)`.
pub fn generate_cutouts(spec: &FieldSpec, master_seed: u64, ids: impl IntoIterator<Item = u64>) -> Result<Vec<Cutout>> {
    spec.validate()?;
    let mut synth = Synthesizer::new(spec);
    ids.into_iter()
        .map(|id| generate_with(&mut synth, spec, derive_seed(master_seed, id), id))
        .collect()
}

/// Disjoint id ranges for training and validation sets.
pub fn split_ids(n_train: usize, n_validation: usize) -> (Range<u64>, Range<u64>) {
    (
        0..n_train as u64,
        VALIDATION_ID_OFFSET..VALIDATION_ID_OFFSET + n_validation as u64,
    )
}

/// Mean of each `factor×factor` block of an `height×width` field.
pub fn local_mean_downsample(field: &[f64], height: usize, width: usize, factor: usize) -> Result<Vec<f64>> {
    if field.len() != height * width {
        return Err(EnkiError::shape("local_mean_downsample", &[field.len()], &[height, width]));
    }
    if factor == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
        return Err(EnkiError::invalid(format!(
            "factor {factor} does not divide {height}×{width}"
        )));
    }
    let (h, w) = (height / factor, width / factor);
    let mut out = vec![0.0; h * w];
    for r in 0..height {
        let row = &field[r * width..(r + 1) * width];
        let dst = &mut out[(r / factor) * w..(r / factor + 1) * w];
        for (c, v) in row.iter().enumerate() {
            dst[c / factor] += v;
        }
    }
    let area = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// Block-average an external field to cutout size and remove its mean.
pub fn ingest(field: &[f64], height: usize, width: usize, factor: usize, id: u64) -> Result<Cutout> {
    let mut values = local_mean_downsample(field, height, width, factor)?;
    if !values.iter().all(|v| v.is_finite()) {
        return Err(EnkiError::invalid(format!("ingested field {id} has non-finite values")));
    }
    let m = mean(&values);
    values.iter_mut().for_each(|v| *v -= m);
    Cutout::new(
        height / factor,
        width / factor,
        values,
        CutoutMeta {
            id,
            provenance: Provenance::Ingested,
            seed: None,
        },
    )
}

pub fn write_stack(cutouts: &[Cutout], path: &Path) -> Result<()> {
    write_stack_as(cutouts, path, Dtype::F64)
}

/// Write a stack, storing values as `dtype`. `f32` storage is lossy.
pub fn write_stack_as(cutouts: &[Cutout], path: &Path, dtype: Dtype) -> Result<()> {
    let (height, width) = cutouts.first().map_or((0, 0), |c| (c.height, c.width));
    if let Some((i, c)) = cutouts
        .iter()
        .enumerate()
        .find(|(_, c)| (c.height, c.width) != (height, width))
    {
        return Err(EnkiError::invalid(format!(
            "cutout {i} is {}×{}, stack is {height}×{width}",
            c.height, c.width
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STACK_MAGIC)?;
    write_u32(&mut w, STACK_VERSION)?;
    write_u32(&mut w, u32_field(cutouts.len(), "count")?)?;
    write_u32(&mut w, u32_field(height, "height")?)?;
    write_u32(&mut w, u32_field(width, "width")?)?;
    write_u32(&mut w, dtype.code())?;
    for c in cutouts {
        write_values(&mut w, &c.values, dtype)?;
    }
    let meta: Vec<&CutoutMeta> = cutouts.iter().map(|c| &c.meta).collect();
    let json = serde_json::to_vec(&meta)?;
    w.write_all(&json)?;
    write_u64(&mut w, json.len() as u64)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackHeader {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: Dtype,
}

impl StackHeader {
    fn data_len(&self) -> u64 {
        (self.count * self.height * self.width * self.dtype.size()) as u64
    }
}

fn read_header(r: &mut ByteReader<impl Read>) -> Result<StackHeader> {
    r.magic(STACK_MAGIC)?;
    r.version(STACK_VERSION)?;
    let count = r.u32("count")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let at = r.offset();
    let code = r.u32("dtype code")?;
    let dtype = Dtype::from_code(code).ok_or_else(|| EnkiError::format(at, format!("unknown dtype code {code}")))?;
    Ok(StackHeader { count, height, width, dtype })
}

/// Header of a stack file without reading its values.
pub fn read_stack_header(path: &Path) -> Result<StackHeader> {
    read_header(&mut ByteReader::new(BufReader::new(File::open(path)?), 0))
}

pub fn read_stack(path: &Path) -> Result<Vec<Cutout>> {
    let header = read_stack_header(path)?;
    read_stack_range(path, 0..header.count)
}

/// Cutouts `range` of a stack, reading only their values and the trailer.
pub fn read_stack_range(path: &Path, range: Range<usize>) -> Result<Vec<Cutout>> {
    let mut file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let header = read_header(&mut ByteReader::new(&mut file, 0))?;
    if range.start > range.end || range.end > header.count {
        return Err(EnkiError::invalid(format!(
            "range {range:?} outside stack of {}",
            header.count
        )));
    }
    let data_end = STACK_HEADER_LEN + header.data_len();
    if file_len < data_end {
        return Err(EnkiError::format(
            file_len,
            format!("file truncated: header promises {data_end} bytes of values"),
        ));
    }
    let metas = read_trailer(&mut file, &header, file_len, data_end)?;

    let per = header.height * header.width;
    let start = STACK_HEADER_LEN + (range.start * per * header.dtype.size()) as u64;
    file.seek(SeekFrom::Start(start))?;
    let mut r = ByteReader::new(BufReader::new(file), start);
    let mut out = Vec::with_capacity(range.len());
    for i in range {
        let values = r.values(per, header.dtype, "cutout values")?;
        let meta = metas.as_ref().map_or(
            CutoutMeta {
                id: i as u64,
                provenance: Provenance::Ingested,
                seed: None,
            },
            |m| m[i].clone(),
        );
        out.push(Cutout::new(header.height, header.width, values, meta)?);
    }
    Ok(out)
}

fn read_trailer(file: &mut File, header: &StackHeader, file_len: u64, data_end: u64) -> Result<Option<Vec<CutoutMeta>>> {
    if file_len == data_end {
        return Ok(None);
    }
    if file_len < data_end + 8 {
        return Err(EnkiError::format(data_end, "metadata trailer shorter than its length suffix"));
    }
    file.seek(SeekFrom::Start(file_len - 8))?;
    let len = ByteReader::new(&mut *file, file_len - 8).u64("metadata length")?;
    if len != file_len - 8 - data_end {
        return Err(EnkiError::format(
            file_len - 8,
            format!("metadata length {len} disagrees with the {} bytes present", file_len - 8 - data_end),
        ));
    }
    file.seek(SeekFrom::Start(data_end))?;
    let mut json = vec![0u8; len as usize];
    file.read_exact(&mut json)?;
    let metas: Vec<CutoutMeta> = serde_json::from_slice(&json)
        .map_err(|e| EnkiError::format(data_end, format!("metadata trailer: {e}")))?;
    if metas.len() != header.count {
        return Err(EnkiError::format(
            data_end,
            format!("metadata lists {} cutouts, header {}", metas.len(), header.count),
        ));
    }
    Ok(Some(metas))
}
