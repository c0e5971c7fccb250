//! Patch sequences, masks and fixed positional embeddings.
//!
//! Patches are numbered row-major over the grid and pixels are row-major
//! within each patch. Patch `(0, 0)` holds the first stored rows and columns
//! of the image; flipping for display is left to the renderers.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{EnkiError, Result};
use crate::numerics::Tensor;
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchIndex {
    pub i: usize,
    pub j: usize,
}

impl Default for PatchGrid {
    fn default() -> Self {
        PatchGrid {
            image_size: 64,
            patch_size: 4,
        }
    }
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image_size == 0 || !image_size.is_multiple_of(patch_size) {
            return Err(EnkiError::invalid(format!(
                "patch size {patch_size} does not divide image size {image_size}"
            )));
        }
        Ok(PatchGrid {
            image_size,
            patch_size,
        })
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Pixels per patch.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn num_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn position(&self, index: usize) -> PatchIndex {
        PatchIndex {
            i: index / self.grid_side(),
            j: index % self.grid_side(),
        }
    }

    pub fn index(&self, at: PatchIndex) -> usize {
        at.i * self.grid_side() + at.j
    }

    /// True for patches in the outermost ring of the grid.
    pub fn is_border(&self, index: usize) -> bool {
        let PatchIndex { i, j } = self.position(index);
        let last = self.grid_side() - 1;
        i == 0 || j == 0 || i == last || j == last
    }

    /// Flat pixel offsets of patch `index`, in within-patch row-major order.
    pub fn pixel_offsets(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        let PatchIndex { i, j } = self.position(index);
        let (p, w) = (self.patch_size, self.image_size);
        (0..p).flat_map(move |r| (0..p).map(move |c| (i * p + r) * w + j * p + c))
    }
}

/// Split an `image_size²` image into a flat `[num_patches, patch_len]` sequence.
pub fn patchify(image: &[f64], grid: &PatchGrid) -> Result<Vec<f64>> {
    if image.len() != grid.num_pixels() {
        return Err(EnkiError::shape("patchify", &[image.len()], &[grid.image_size, grid.image_size]));
    }
    let mut out = Vec::with_capacity(image.len());
    for k in 0..grid.num_patches() {
        out.extend(grid.pixel_offsets(k).map(|o| image[o]));
    }
    Ok(out)
}

pub fn unpatchify(patches: &[f64], grid: &PatchGrid) -> Result<Vec<f64>> {
    if patches.len() != grid.num_pixels() {
        return Err(EnkiError::shape(
            "unpatchify",
            &[patches.len() / grid.patch_len().max(1), grid.patch_len()],
            &[grid.num_patches(), grid.patch_len()],
        ));
    }
    let mut out = vec![0.0; patches.len()];
    let pl = grid.patch_len();
    for k in 0..grid.num_patches() {
        for (src, o) in patches[k * pl..(k + 1) * pl].iter().zip(grid.pixel_offsets(k)) {
            out[o] = *src;
        }
    }
    Ok(out)
}

/// Rows of `patches` in the order given by `index`.
pub fn gather_patches(patches: &[f64], patch_len: usize, index: &[usize]) -> Vec<f64> {
    index
        .iter()
        .flat_map(|&k| patches[k * patch_len..(k + 1) * patch_len].iter().copied())
        .collect()
}

/// Inverse of [`gather_patches`] for a permutation `index`.
pub fn scatter_patches(rows: &[f64], patch_len: usize, index: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for (r, &k) in index.iter().enumerate() {
        out[k * patch_len..(k + 1) * patch_len].copy_from_slice(&rows[r * patch_len..(r + 1) * patch_len]);
    }
    out
}

/// Per-patch mask over a grid; `true` marks a hidden patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub flags: Vec<bool>,
    /// Nominal ratio for random masks, realized ratio for block masks.
    pub ratio_percent: f64,
    pub seed: Option<u64>,
}

/// Number of masked patches for a ratio: `p/100·n`, rounded half away from zero.
pub fn mask_count(ratio_percent: f64, num_patches: usize) -> usize {
    (ratio_percent / 100.0 * num_patches as f64).round() as usize
}

impl MaskSpec {
    /// Wrap explicit flags; the ratio is the realized fraction.
    pub fn from_flags(flags: Vec<bool>) -> Self {
        let n = flags.len().max(1);
        let masked = flags.iter().filter(|&&f| f).count();
        MaskSpec {
            ratio_percent: masked as f64 * 100.0 / n as f64,
            flags,
            seed: None,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.flags.len()
    }

    pub fn num_masked(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn num_visible(&self) -> usize {
        self.flags.len() - self.num_masked()
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.flags[index]
    }

    /// Visible patch indices, ascending.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&k| !self.flags[k]).collect()
    }

    /// Masked patch indices, ascending.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&k| self.flags[k]).collect()
    }

    /// Visible then masked indices. `order[r]` is the patch at sequence slot `r`.
    pub fn shuffle_order(&self) -> Vec<usize> {
        let mut order = self.visible();
        order.extend(self.masked());
        order
    }

    /// For each patch, its slot in [`MaskSpec::shuffle_order`].
    pub fn restore_order(&self) -> Vec<usize> {
        let order = self.shuffle_order();
        let mut restore = vec![0; order.len()];
        for (slot, &k) in order.iter().enumerate() {
            restore[k] = slot;
        }
        restore
    }
}

fn check_ratio(ratio_percent: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&ratio_percent) {
        return Err(EnkiError::invalid(format!("masking ratio {ratio_percent} outside [0, 100]")));
    }
    Ok(())
}

/// Uniformly random subset of exactly `mask_count(ratio)` patches.
pub fn random_mask(grid: &PatchGrid, ratio_percent: f64, rng: &mut Rng) -> Result<MaskSpec> {
    check_ratio(ratio_percent)?;
    let n = grid.num_patches();
    let count = mask_count(ratio_percent, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut flags = vec![false; n];
    for &k in &order[..count] {
        flags[k] = true;
    }
    Ok(MaskSpec {
        flags,
        ratio_percent,
        seed: None,
    })
}

pub fn random_mask_seeded(grid: &PatchGrid, ratio_percent: f64, seed: u64) -> Result<MaskSpec> {
    let mut mask = random_mask(grid, ratio_percent, &mut rng_from_seed(seed))?;
    mask.seed = Some(seed);
    Ok(mask)
}

/// Rectangle shape `(rows, cols)` whose area is closest to `target` on a
/// `side × side` grid, preferring squarer shapes on ties.
pub fn block_shape(side: usize, target: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_key = (usize::MAX, usize::MAX);
    for h in 1..=side {
        for w in h..=side {
            let key = ((h * w).abs_diff(target), w - h);
            if key < best_key {
                best_key = key;
                best = (h, w);
            }
        }
    }
    best
}

/// A single axis-aligned rectangle of patches, placed uniformly.
pub fn block_mask(grid: &PatchGrid, ratio_percent: f64, rng: &mut Rng) -> Result<MaskSpec> {
    check_ratio(ratio_percent)?;
    if ratio_percent == 0.0 {
        return Err(EnkiError::invalid("block mask needs a positive ratio"));
    }
    let side = grid.grid_side();
    let n = grid.num_patches();
    let (mut h, mut w) = block_shape(side, mask_count(ratio_percent, n).max(1));
    if h != w && rng.random::<bool>() {
        std::mem::swap(&mut h, &mut w);
    }
    let top = rng.random_range(0..=side - h);
    let left = rng.random_range(0..=side - w);
    let mut flags = vec![false; n];
    for i in top..top + h {
        for j in left..left + w {
            flags[i * side + j] = true;
        }
    }
    Ok(MaskSpec::from_flags(flags))
}

/// Fixed 2-D sine-cosine embedding, `[num_patches, dim]`. The first half of
/// the channels encodes the row `i`, the second half the column `j`; each half
/// is `[sin(pos·ω_k), cos(pos·ω_k)]` with `ω_k = 10000^(−k/(dim/4))`.
pub fn positional_embedding(grid: &PatchGrid, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(EnkiError::invalid(format!("embedding dim {dim} not divisible by 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let n = grid.num_patches();
    let mut data = Vec::with_capacity(n * dim);
    for k in 0..n {
        let PatchIndex { i, j } = grid.position(k);
        for pos in [i as f64, j as f64] {
            data.extend(omega.iter().map(|w| (pos * w).sin()));
            data.extend(omega.iter().map(|w| (pos * w).cos()));
        }
    }
    Tensor::new(data, &[n, dim])
}
