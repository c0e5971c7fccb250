//! Masked-pixel RMSE and the analyses built on it: set bias, per-position
//! patch RMSE maps, σ_T-binned patch RMSE, complexity-binned image RMSE and
//! graymap galleries.
//!
//! Image complexity here is a proxy computed from the cutout itself (its σ_T
//! or mean gradient magnitude), not the Ulmo log-likelihood; every table that
//! uses it carries a label saying so.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::std_dev;
use crate::error::{EnkiError, Result};
use crate::patching::{MaskSpec, PatchGrid, PatchIndex};
use crate::pipeline::{compute_offset, median, ReconstructionResult};

/// One original/reconstruction pair and the mask it was made under.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub id: u64,
    pub original: &'a [f64],
    pub reconstructed: &'a [f64],
    pub mask: &'a MaskSpec,
}

impl<'a> From<&'a ReconstructionResult> for EvalItem<'a> {
    fn from(r: &'a ReconstructionResult) -> Self {
        EvalItem {
            id: r.original.meta.id,
            original: &r.original.values,
            reconstructed: &r.composite.values,
            mask: &r.mask,
        }
    }
}

/// Masked patch indices that survive border exclusion.
fn scored_patches(mask: &MaskSpec, grid: &PatchGrid, exclude_border: bool) -> Vec<usize> {
    mask.masked()
        .into_iter()
        .filter(|&k| !(exclude_border && grid.is_border(k)))
        .collect()
}

/// Root mean squared error over the masked pixels, optionally ignoring the
/// outer ring of patch positions.
pub fn rmse(original: &[f64], reconstructed: &[f64], mask: &MaskSpec, grid: &PatchGrid, exclude_border: bool) -> Result<f64> {
    if original.len() != grid.num_pixels() || reconstructed.len() != grid.num_pixels() {
        return Err(EnkiError::shape("rmse", &[original.len(), reconstructed.len()], &[grid.num_pixels()]));
    }
    if mask.num_masked() == 0 {
        return Err(EnkiError::EmptyMask);
    }
    let patches = scored_patches(mask, grid, exclude_border);
    if patches.is_empty() {
        return Err(EnkiError::invalid("border exclusion removed every masked patch"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in patches {
        for o in grid.pixel_offsets(k) {
            let d = original[o] - reconstructed[o];
            sum += d * d;
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchStats {
    pub position: PatchIndex,
    /// Standard deviation of the original pixels in the patch.
    pub sigma_t: f64,
    pub rmse: f64,
}

/// Stats for each masked patch of one image.
pub fn patch_stats(item: &EvalItem, grid: &PatchGrid, exclude_border: bool) -> Vec<PatchStats> {
    scored_patches(item.mask, grid, exclude_border)
        .into_iter()
        .map(|k| {
            let orig: Vec<f64> = grid.pixel_offsets(k).map(|o| item.original[o]).collect();
            let se: f64 = grid
                .pixel_offsets(k)
                .map(|o| (item.original[o] - item.reconstructed[o]).powi(2))
                .sum();
            PatchStats {
                position: grid.position(k),
                sigma_t: std_dev(&orig),
                rmse: (se / orig.len() as f64).sqrt(),
            }
        })
        .collect()
}

/// Mean of the per-image offsets.
pub fn estimate_bias(results: &[ReconstructionResult]) -> Result<f64> {
    mean_offset(&results.iter().map(|r| r.offset).collect::<Vec<_>>())
}

pub fn mean_offset(offsets: &[f64]) -> Result<f64> {
    if offsets.is_empty() {
        return Err(EnkiError::invalid("bias of an empty set"));
    }
    Ok(offsets.iter().sum::<f64>() / offsets.len() as f64)
}

/// Mean patch RMSE at each grid position, over the images that masked it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionMap {
    pub side: usize,
    /// Row-major by patch row `i`; `None` where no image masked the position.
    pub mean_rmse: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    sums: Vec<f64>,
}

impl PositionMap {
    pub fn new(side: usize) -> Self {
        PositionMap {
            side,
            mean_rmse: vec![None; side * side],
            counts: vec![0; side * side],
            sums: vec![0.0; side * side],
        }
    }

    pub fn add(&mut self, stats: &PatchStats) {
        let k = stats.position.i * self.side + stats.position.j;
        self.sums[k] += stats.rmse;
        self.counts[k] += 1;
        self.mean_rmse[k] = Some(self.sums[k] / self.counts[k] as f64);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.mean_rmse[i * self.side + j]
    }

    fn pooled(&self, border: bool) -> Option<f64> {
        let grid_side = self.side;
        let is_border = |k: usize| {
            let (i, j) = (k / grid_side, k % grid_side);
            i == 0 || j == 0 || i + 1 == grid_side || j + 1 == grid_side
        };
        let (s, n) = (0..self.sums.len())
            .filter(|&k| is_border(k) == border)
            .fold((0.0, 0usize), |(s, n), k| (s + self.sums[k], n + self.counts[k]));
        (n > 0).then(|| s / n as f64)
    }

    /// Mean patch RMSE over every masked patch on the outer ring.
    pub fn border_mean(&self) -> Option<f64> {
        self.pooled(true)
    }

    pub fn interior_mean(&self) -> Option<f64> {
        self.pooled(false)
    }

    /// Rows top to bottom for display, so position (0, 0) sits lower left.
    pub fn display_rows(&self) -> Vec<Vec<Option<f64>>> {
        self.mean_rmse.chunks(self.side).rev().map(<[Option<f64>]>::to_vec).collect()
    }

    /// CSV with columns `i,j,count,mean_rmse`; absent entries are empty.
    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row {
            i: usize,
            j: usize,
            count: usize,
            mean_rmse: Option<f64>,
        }
        let rows = (0..self.mean_rmse.len()).map(|k| Row {
            i: k / self.side,
            j: k % self.side,
            count: self.counts[k],
            mean_rmse: self.mean_rmse[k],
        });
        to_csv(rows)
    }
}

pub fn position_rmse_map<'a>(items: impl IntoIterator<Item = EvalItem<'a>>, grid: &PatchGrid) -> PositionMap {
    let mut map = PositionMap::new(grid.grid_side());
    for item in items {
        for s in patch_stats(&item, grid, false) {
            map.add(&s);
        }
    }
    map
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| EnkiError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `bins + 1` evenly spaced log10 σ_T edges from `lo` to `hi`.
pub fn log_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect()
}

/// 24 bins over 10^-3.5 to 10^0.5 K.
pub fn default_sigma_edges() -> Vec<f64> {
    log_edges(-3.5, 0.5, 24)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaBin {
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub count: usize,
    pub median_rmse: Option<f64>,
    /// σ_T at the bin's log-centre, where RMSE equal to σ_T would sit.
    pub identity: f64,
}

/// Median patch RMSE per log10 σ_T bin. Values beyond the outer edges land
/// in the first or last bin, so counts always sum to the number of patches.
pub fn sigma_binned_rmse(stats: &[PatchStats], edges_log10: &[f64]) -> Result<Vec<SigmaBin>> {
    if stats.is_empty() {
        return Err(EnkiError::invalid("no patches to bin"));
    }
    if edges_log10.len() < 2 || edges_log10.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EnkiError::invalid("bin edges must be increasing and at least two"));
    }
    let nb = edges_log10.len() - 1;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); nb];
    for s in stats {
        let x = s.sigma_t.log10();
        let b = edges_log10[1..nb].partition_point(|&e| e <= x);
        members[b].push(s.rmse);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(b, mut m)| SigmaBin {
            log10_lo: edges_log10[b],
            log10_hi: edges_log10[b + 1],
            count: m.len(),
            median_rmse: (!m.is_empty()).then(|| median(&mut m)),
            identity: 10f64.powf(0.5 * (edges_log10[b] + edges_log10[b + 1])),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplexityProxy {
    /// Standard deviation of the whole cutout.
    SigmaT,
    /// Mean magnitude of the forward-difference gradient.
    GradientMagnitude,
}

impl ComplexityProxy {
    pub fn label(self) -> &'static str {
        match self {
            ComplexityProxy::SigmaT => "image sigma_T (proxy, not Ulmo LL)",
            ComplexityProxy::GradientMagnitude => "mean gradient magnitude (proxy, not Ulmo LL)",
        }
    }

    pub fn of(self, values: &[f64], width: usize) -> f64 {
        match self {
            ComplexityProxy::SigmaT => std_dev(values),
            ComplexityProxy::GradientMagnitude => {
                let height = values.len() / width;
                let mut sum = 0.0;
                for r in 0..height.saturating_sub(1) {
                    for c in 0..width.saturating_sub(1) {
                        let v = values[r * width + c];
                        let gx = values[r * width + c + 1] - v;
                        let gy = values[(r + 1) * width + c] - v;
                        sum += (gx * gx + gy * gy).sqrt();
                    }
                }
                sum / ((height.max(2) - 1) * (width.max(2) - 1)) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityBin {
    pub proxy_lo: f64,
    pub proxy_hi: f64,
    pub count: usize,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityTable {
    pub proxy: String,
    pub bins: Vec<ComplexityBin>,
    /// Spearman rank correlation between bin index and mean RMSE; `None`
    /// when the means are all equal.
    pub spearman: Option<f64>,
}

/// Equal-population bins of ascending proxy value with the mean image RMSE
/// of each. `items` holds `(proxy, rmse)` pairs.
pub fn complexity_binned_rmse(items: &[(f64, f64)], proxy: ComplexityProxy, n_bins: usize) -> Result<ComplexityTable> {
    if n_bins == 0 || items.len() < n_bins {
        return Err(EnkiError::invalid(format!(
            "{} images cannot fill {n_bins} bins",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].0.total_cmp(&items[b].0).then(a.cmp(&b)));
    let (base, extra) = (items.len() / n_bins, items.len() % n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let len = base + usize::from(b < extra);
        let members = &order[start..start + len];
        start += len;
        bins.push(ComplexityBin {
            proxy_lo: items[members[0]].0,
            proxy_hi: items[members[len - 1]].0,
            count: len,
            mean_rmse: members.iter().map(|&k| items[k].1).sum::<f64>() / len as f64,
        });
    }
    let index: Vec<f64> = (0..n_bins).map(|b| b as f64).collect();
    let means: Vec<f64> = bins.iter().map(|b| b.mean_rmse).collect();
    Ok(ComplexityTable {
        proxy: proxy.label().to_string(),
        spearman: spearman(&index, &means),
        bins,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of ranks; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub exclude_border: bool,
    pub sigma_edges: Vec<f64>,
    pub complexity_bins: usize,
    pub proxy: ComplexityProxy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exclude_border: true,
            sigma_edges: default_sigma_edges(),
            complexity_bins: 10,
            proxy: ComplexityProxy::SigmaT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: u64,
    pub rmse: f64,
    pub offset: f64,
    pub complexity: f64,
}

/// Set-level statistics for one reconstruction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t_percent: Option<f64>,
    pub p_percent: Option<f64>,
    pub checkpoint_sha256: Option<String>,
    pub exclude_border: bool,
    pub images: Vec<ImageRow>,
    /// Images with no masked pixel left after border exclusion.
    pub skipped: Vec<u64>,
    pub mean_rmse: f64,
    pub median_rmse: f64,
    pub bias: f64,
    pub border_mean_rmse: Option<f64>,
    pub interior_mean_rmse: Option<f64>,
    pub position_map: PositionMap,
    pub sigma_bins: Vec<SigmaBin>,
    /// Absent when there are fewer images than bins.
    pub complexity: Option<ComplexityTable>,
}

pub fn evaluate<'a>(items: &[EvalItem<'a>], grid: &PatchGrid, options: &EvalOptions) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(EnkiError::invalid("nothing to evaluate"));
    }
    let mut images = Vec::with_capacity(items.len());
    let mut skipped = Vec::new();
    let mut offsets = Vec::with_capacity(items.len());
    let mut stats = Vec::new();
    for (index, item) in items.iter().enumerate() {
        let wrap = |e| EnkiError::Item {
            index,
            source: Box::new(e),
        };
        let offset = compute_offset(item.original, item.reconstructed, item.mask, grid).map_err(wrap)?;
        offsets.push(offset);
        if scored_patches(item.mask, grid, options.exclude_border).is_empty() {
            skipped.push(item.id);
            continue;
        }
        images.push(ImageRow {
            id: item.id,
            rmse: rmse(item.original, item.reconstructed, item.mask, grid, options.exclude_border).map_err(wrap)?,
            offset,
            complexity: options.proxy.of(item.original, grid.image_size),
        });
        stats.extend(patch_stats(item, grid, options.exclude_border));
    }
    if images.is_empty() {
        return Err(EnkiError::invalid("border exclusion removed every masked patch of every image"));
    }
    let mut rmses: Vec<f64> = images.iter().map(|r| r.rmse).collect();
    let mean_rmse = rmses.iter().sum::<f64>() / rmses.len() as f64;
    let median_rmse = median(&mut rmses);
    let map = position_rmse_map(items.iter().copied(), grid);
    let pairs: Vec<(f64, f64)> = images.iter().map(|r| (r.complexity, r.rmse)).collect();
    let complexity = if pairs.len() >= options.complexity_bins {
        Some(complexity_binned_rmse(&pairs, options.proxy, options.complexity_bins)?)
    } else {
        None
    };
    Ok(EvalReport {
        t_percent: None,
        p_percent: None,
        checkpoint_sha256: None,
        exclude_border: options.exclude_border,
        skipped,
        mean_rmse,
        median_rmse,
        bias: mean_offset(&offsets)?,
        border_mean_rmse: map.border_mean(),
        interior_mean_rmse: map.interior_mean(),
        position_map: map,
        sigma_bins: sigma_binned_rmse(&stats, &options.sigma_edges)?,
        complexity,
        images,
    })
}

impl EvalReport {
    pub fn images_csv(&self) -> Result<String> {
        to_csv(&self.images)
    }

    pub fn sigma_csv(&self) -> Result<String> {
        to_csv(&self.sigma_bins)
    }

    /// Complexity bins with the proxy label and Spearman ρ as comment lines.
    pub fn complexity_csv(&self) -> Result<String> {
        match &self.complexity {
            None => Ok(String::new()),
            Some(t) => {
                let mut s = String::new();
                let _ = writeln!(s, "# proxy: {}", t.proxy);
                let _ = writeln!(s, "# spearman: {}", t.spearman.map_or("undefined".to_string(), |r| r.to_string()));
                s.push_str(&to_csv(&t.bins)?);
                Ok(s)
            }
        }
    }
}

/// Parse CSV text written by this module back into rows.
pub fn parse_csv<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(EnkiError::from)).collect()
}

pub const GUTTER: usize = 4;

/// Byte value for `v` on a linear scale over `[lo, hi]`; a flat scale maps
/// everything to mid-gray.
pub fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 128;
    }
    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Binary graymap as `(width, height, pixels)`. Only 8-bit files are accepted.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(EnkiError::format(pos as u64, "graymap header truncated"));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(EnkiError::format(0, "not a binary graymap"));
    }
    let mut nums = [0usize; 3];
    for (k, (at, s)) in fields[1..].iter().enumerate() {
        nums[k] = s
            .parse()
            .map_err(|_| EnkiError::format(*at as u64, format!("bad graymap header field {s:?}")))?;
    }
    let [width, height, maxval] = nums;
    if maxval != 255 {
        return Err(EnkiError::format(fields[3].0 as u64, "only maxval 255 is supported"));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + width * height).ok_or_else(|| {
        EnkiError::format(bytes.len() as u64, "graymap pixel data truncated")
    })?;
    Ok((width, height, pixels.to_vec()))
}

/// Original | masked | composite, sharing one linear scale. Hidden patches in
/// the middle panel and the gutters are black. Returns the pixels, the
/// layout width and the scale.
pub fn triptych(original: &[f64], mask: &MaskSpec, composite: &[f64], grid: &PatchGrid) -> (Vec<u8>, usize, (f64, f64)) {
    let side = grid.image_size;
    let width = 3 * side + 2 * GUTTER;
    let (lo, hi) = original
        .iter()
        .chain(composite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut hidden = vec![false; side * side];
    for k in mask.masked() {
        for o in grid.pixel_offsets(k) {
            hidden[o] = true;
        }
    }
    let mut px = vec![0u8; width * side];
    for r in 0..side {
        for c in 0..side {
            let o = r * side + c;
            let row = &mut px[r * width..(r + 1) * width];
            row[c] = quantize(original[o], lo, hi);
            row[side + GUTTER + c] = if hidden[o] { 0 } else { quantize(original[o], lo, hi) };
            row[2 * (side + GUTTER) + c] = quantize(composite[o], lo, hi);
        }
    }
    (px, width, (lo, hi))
}

/// One `<prefix>_<id>.pgm` triptych per cutout plus `<prefix>_<id>.scale.txt`
/// recording the value range behind 0 and 255.
pub fn render_gallery(
    originals: &[&[f64]],
    masks: &[MaskSpec],
    composites: &[&[f64]],
    ids: &[u64],
    grid: &PatchGrid,
    path_prefix: &Path,
) -> Result<Vec<PathBuf>> {
    if originals.is_empty() || originals.len() != masks.len() || originals.len() != composites.len() || originals.len() != ids.len() {
        return Err(EnkiError::invalid("gallery inputs must be non-empty and equally long"));
    }
    let stem = path_prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut paths = Vec::new();
    for k in 0..originals.len() {
        let (px, width, (lo, hi)) = triptych(originals[k], &masks[k], composites[k], grid);
        let pgm = path_prefix.with_file_name(format!("{stem}_{}.pgm", ids[k]));
        write_pgm(&pgm, width, grid.image_size, &px)?;
        let scale = path_prefix.with_file_name(format!("{stem}_{}.scale.txt", ids[k]));
        fs::write(&scale, format!("min_kelvin {lo:e}\nmax_kelvin {hi:e}\npanels original|masked|composite\ngutter {GUTTER}\n"))?;
        paths.push(pgm);
        paths.push(scale);
    }
    Ok(paths)
}

/// The position map as a graymap, lower-left origin, absent positions black.
pub fn render_position_map(map: &PositionMap, path: &Path, scale: usize) -> Result<()> {
    let present = map.mean_rmse.iter().flatten();
    let (lo, hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let side = map.side * scale;
    let rows = map.display_rows();
    let mut px = vec![0u8; side * side];
    for r in 0..side {
        for c in 0..side {
            if let Some(v) = rows[r / scale][c / scale] {
                px[r * side + c] = quantize(v, lo, hi).max(1);
            }
        }
    }
    write_pgm(path, side, side, &px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::random_mask;
    use crate::rng::{rng_from_seed, Rng};
    use rand::Rng as _;

    fn grid() -> PatchGrid {
        PatchGrid::default()
    }

    fn fixture(rng: &mut Rng, p: f64) -> (Vec<f64>, Vec<f64>, MaskSpec) {
        let a: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        (a, b, random_mask(&grid(), p, rng).unwrap())
    }

    /// Direct pixel loop over image coordinates.
    fn brute_rmse(a: &[f64], b: &[f64], m: &MaskSpec, exclude: bool) -> f64 {
        let (mut s, mut n) = (0.0, 0);
        for y in 0..64 {
            for x in 0..64 {
                let (i, j) = (y / 4, x / 4);
                if !m.flags[i * 16 + j] || (exclude && (i == 0 || j == 0 || i == 15 || j == 15)) {
                    continue;
                }
                s += (a[y * 64 + x] - b[y * 64 + x]).powi(2);
                n += 1;
            }
        }
        (s / n as f64).sqrt()
    }

    #[test]
    fn rmse_examples() {
        let g = grid();
        let mut rng = rng_from_seed(1);
        let (a, _, m) = fixture(&mut rng, 30.0);
        assert_eq!(rmse(&a, &a, &m, &g, true).unwrap(), 0.0);

        let mut one = vec![false; 256];
        one[5 * 16 + 7] = true;
        let one = MaskSpec::from_flags(one);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((rmse(&a, &b, &one, &g, true).unwrap() - 0.1).abs() < 1e-12);

        let mut edge = vec![false; 256];
        edge[3] = true;
        assert!(rmse(&a, &b, &MaskSpec::from_flags(edge), &g, true).is_err());
        assert!(matches!(rmse(&a, &b, &MaskSpec::from_flags(vec![false; 256]), &g, false), Err(EnkiError::EmptyMask)));
    }

    #[test]
    fn rmse_matches_pixel_loop() {
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let (a, b, m) = fixture(&mut rng, 40.0);
            for exclude in [false, true] {
                let x = rmse(&a, &b, &m, &grid(), exclude).unwrap();
                assert!((x - brute_rmse(&a, &b, &m, exclude)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rmse_scales_and_ignores_pixel_order() {
        let mut rng = rng_from_seed(3);
        let (a, b, m) = fixture(&mut rng, 50.0);
        let base = rmse(&a, &b, &m, &grid(), false).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| -2.5 * v).collect();
        let sb: Vec<f64> = b.iter().map(|v| -2.5 * v).collect();
        assert!((rmse(&sa, &sb, &m, &grid(), false).unwrap() - 2.5 * base).abs() < 1e-12);
        // transposing pixels and mask together leaves the value unchanged
        let t = |v: &[f64]| -> Vec<f64> { (0..4096).map(|k| v[(k % 64) * 64 + k / 64]).collect() };
        let mt = MaskSpec::from_flags((0..256).map(|k| m.flags[(k % 16) * 16 + k / 16]).collect());
        assert!((rmse(&t(&a), &t(&b), &mt, &grid(), false).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn border_ring_is_sixty_positions() {
        let g = grid();
        assert_eq!((0..256).filter(|&k| g.is_border(k)).count(), 60);
        let all = MaskSpec::from_flags(vec![true; 256]);
        assert_eq!(scored_patches(&all, &g, true).len(), 196);
    }

    #[test]
    fn position_map_filters_by_mask() {
        let g = grid();
        let mut rng = rng_from_seed(4);
        let fx: Vec<_> = (0..100).map(|_| fixture(&mut rng, 30.0)).collect();
        let items: Vec<EvalItem> = fx
            .iter()
            .enumerate()
            .map(|(k, (a, b, m))| EvalItem {
                id: k as u64,
                original: a,
                reconstructed: b,
                mask: m,
            })
            .collect();
        let map = position_rmse_map(items.iter().copied(), &g);
        for i in 0..16 {
            for j in 0..16 {
                let k = i * 16 + j;
                let vals: Vec<f64> = fx
                    .iter()
                    .filter(|f| f.2.flags[k])
                    .map(|(a, b, _)| {
                        let s: f64 = g.pixel_offsets(k).map(|o| (a[o] - b[o]).powi(2)).sum();
                        (s / 16.0).sqrt()
                    })
                    .collect();
                match map.get(i, j) {
                    None => assert!(vals.is_empty()),
                    Some(v) => assert!((v - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12),
                }
            }
        }
        let interior: Vec<f64> = items.iter().flat_map(|it| patch_stats(it, &g, true)).map(|s| s.rmse).collect();
        let expect = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!((map.interior_mean().unwrap() - expect).abs() < 1e-12);
        assert!(map.border_mean().is_some());
        assert_eq!(map.display_rows()[15][0], map.get(0, 0));
    }

    #[test]
    fn uniform_error_gives_flat_map() {
        let g = grid();
        let a = vec![0.3; 4096];
        let b = vec![0.35; 4096];
        let m = MaskSpec::from_flags(vec![true; 255].into_iter().chain([false]).collect());
        let item = EvalItem {
            id: 0,
            original: &a,
            reconstructed: &b,
            mask: &m,
        };
        let map = position_rmse_map([item], &g);
        assert!(map.mean_rmse[..255].iter().all(|v| (v.unwrap() - 0.05).abs() < 1e-12));
        assert_eq!(map.mean_rmse[255], None);
    }

    #[test]
    fn sigma_bins_match_sorting() {
        let mut rng = rng_from_seed(5);
        let edges = default_sigma_edges();
        for _ in 0..100 {
            let stats: Vec<PatchStats> = (0..300)
                .map(|k| PatchStats {
                    position: PatchIndex { i: k % 16, j: 0 },
                    sigma_t: 10f64.powf(rng.random_range(-4.0..1.0)),
                    rmse: rng.random_range(0.0..1.0),
                })
                .collect();
            let bins = sigma_binned_rmse(&stats, &edges).unwrap();
            assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 300);
            for (b, bin) in bins.iter().enumerate() {
                let mut v: Vec<f64> = stats
                    .iter()
                    .filter(|s| {
                        let x = s.sigma_t.log10();
                        let lo_ok = b == 0 || x >= edges[b];
                        let hi_ok = b == bins.len() - 1 || x < edges[b + 1];
                        lo_ok && hi_ok
                    })
                    .map(|s| s.rmse)
                    .collect();
                v.sort_by(f64::total_cmp);
                let expect = match v.len() {
                    0 => None,
                    n if n % 2 == 1 => Some(v[n / 2]),
                    n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
                };
                match (bin.median_rmse, expect) {
                    (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                    (x, y) => assert_eq!(x, y),
                }
            }
        }
    }

    #[test]
    fn identical_patches_fill_one_bin() {
        let s = PatchStats {
            position: PatchIndex { i: 1, j: 1 },
            sigma_t: 0.05,
            rmse: 0.004,
        };
        let bins = sigma_binned_rmse(&[s; 7], &default_sigma_edges()).unwrap();
        let full: Vec<&SigmaBin> = bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(full.len(), 1);
        assert_eq!((full[0].count, full[0].median_rmse), (7, Some(0.004)));
    }

    #[test]
    fn complexity_bins() {
        let items: Vec<(f64, f64)> = (0..103).map(|k| ((k * 37 % 103) as f64, 0.25)).collect();
        let t = complexity_binned_rmse(&items, ComplexityProxy::SigmaT, 10).unwrap();
        let counts: Vec<usize> = t.bins.iter().map(|b| b.count).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(t.bins.iter().all(|b| b.mean_rmse == 0.25));
        assert_eq!(t.spearman, None);
        assert!(t.proxy.contains("not Ulmo LL"));

        let rising: Vec<(f64, f64)> = (0..50).map(|k| (k as f64, k as f64 * 0.01)).collect();
        let t = complexity_binned_rmse(&rising, ComplexityProxy::SigmaT, 10).unwrap();
        assert_eq!(t.spearman, Some(1.0));
        assert!(complexity_binned_rmse(&rising[..5], ComplexityProxy::SigmaT, 10).is_err());
    }

    #[test]
    fn spearman_handles_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_tables_round_trip() {
        let g = grid();
        let mut rng = rng_from_seed(6);
        let fx: Vec<_> = (0..20).map(|_| fixture(&mut rng, 20.0)).collect();
        let items: Vec<EvalItem> = fx
            .iter()
            .enumerate()
            .map(|(k, (a, b, m))| EvalItem {
                id: k as u64,
                original: a,
                reconstructed: b,
                mask: m,
            })
            .collect();
        let report = evaluate(&items, &g, &EvalOptions::default()).unwrap();
        assert_eq!(parse_csv::<ImageRow>(&report.images_csv().unwrap()).unwrap(), report.images);
        assert_eq!(parse_csv::<SigmaBin>(&report.sigma_csv().unwrap()).unwrap(), report.sigma_bins);
        let c = report.complexity.as_ref().unwrap();
        assert_eq!(parse_csv::<ComplexityBin>(&report.complexity_csv().unwrap()).unwrap(), c.bins);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
        assert_eq!(report.position_map.to_csv().unwrap().lines().count(), 257);
    }

    #[test]
    fn gallery_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let mut rng = rng_from_seed(7);
        let (a, b, m) = fixture(&mut rng, 30.0);
        let flat = vec![0.7; 4096];
        let paths = render_gallery(
            &[&a, &flat],
            &[m.clone(), m.clone()],
            &[&b, &flat],
            &[3, 4],
            &g,
            &dir.path().join("gal"),
        )
        .unwrap();
        assert_eq!(paths.len(), 4);
        let (w, h, px) = read_pgm(&paths[0]).unwrap();
        assert_eq!((w, h), (3 * 64 + 2 * GUTTER, 64));
        let (expect, _, _) = triptych(&a, &m, &b, &g);
        assert_eq!(px, expect);
        let (lo, hi) = a.iter().chain(&b).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        assert_eq!(px[5 * w + 9], quantize(a[5 * 64 + 9], lo, hi));

        let (_, _, flat_px) = read_pgm(&paths[2]).unwrap();
        assert_eq!(flat_px[0], 128);
        assert!(fs::read_to_string(&paths[3]).unwrap().contains("min_kelvin"));
    }
}
