//! Mask, encode, decode, composite.
//!
//! A reconstruction keeps the original pixels of every visible patch and
//! takes the decoder's output, minus an optional bias, for the hidden ones.
//! The per-image offset is the signed median of `composite − original` over
//! the hidden pixels; the mean offset over a set is its bias.
//!
//! Mask files (`ENKM`): magic, u32 LE version, count and patch count, then
//! `ceil(patches/8)` bytes per mask with patch `k` in bit `k % 8` of byte
//! `k / 8`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Cutout;
use crate::error::{EnkiError, Result};
use crate::evaluation::rmse;
use crate::format::{u32_field, write_u32, ByteReader};
use crate::model::MaskedAutoencoder;
use crate::patching::{random_mask_seeded, unpatchify, MaskSpec, PatchGrid};
use crate::rng::derive_seed;

pub const MASK_MAGIC: &[u8; 4] = b"ENKM";
pub const MASK_VERSION: u32 = 1;

/// Anything that can fill in hidden patches.
pub trait Reconstructor {
    fn grid(&self) -> PatchGrid;

    /// Full-image prediction, row-major, for `image` under `mask`. Only the
    /// visible patches of `image` may influence the result.
    fn predict(&self, image: &[f64], mask: &MaskSpec) -> Result<Vec<f64>>;
}

impl Reconstructor for MaskedAutoencoder {
    fn grid(&self) -> PatchGrid {
        self.config.grid()
    }

    fn predict(&self, image: &[f64], mask: &MaskSpec) -> Result<Vec<f64>> {
        let patches = MaskedAutoencoder::predict(self, image, mask)?;
        unpatchify(&patches, &self.config.grid())
    }
}

/// Returns its input plus a constant. With shift 0 it is a perfect oracle.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedIdentity {
    pub grid: PatchGrid,
    pub shift: f64,
}

impl Reconstructor for ShiftedIdentity {
    fn grid(&self) -> PatchGrid {
        self.grid
    }

    fn predict(&self, image: &[f64], _mask: &MaskSpec) -> Result<Vec<f64>> {
        Ok(image.iter().map(|v| v + self.shift).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub original: Cutout,
    pub mask: MaskSpec,
    /// Decoder output for every patch, before bias and compositing.
    pub raw_prediction: Vec<f64>,
    pub composite: Cutout,
    pub offset: f64,
    pub bias_applied: f64,
}

impl ReconstructionResult {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            image_size: self.original.width,
            patch_size: self.original.width / (self.mask.num_patches() as f64).sqrt().round() as usize,
        }
    }
}

/// Signed median of `reconstructed − original` over the masked pixels.
pub fn compute_offset(original: &[f64], reconstructed: &[f64], mask: &MaskSpec, grid: &PatchGrid) -> Result<f64> {
    let mut diffs: Vec<f64> = mask
        .masked()
        .into_iter()
        .flat_map(|k| grid.pixel_offsets(k))
        .map(|o| reconstructed[o] - original[o])
        .collect();
    if diffs.is_empty() {
        return Err(EnkiError::EmptyMask);
    }
    Ok(median(&mut diffs))
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (lo, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

/// Reconstruct under a random mask at `p_percent` drawn from `seed`.
pub fn reconstruct(
    model: &(impl Reconstructor + ?Sized),
    img: &Cutout,
    p_percent: f64,
    seed: u64,
    bias: f64,
) -> Result<ReconstructionResult> {
    if !(p_percent > 0.0 && p_percent < 100.0) {
        return Err(EnkiError::invalid(format!("masking ratio {p_percent} outside (0, 100)")));
    }
    let mask = random_mask_seeded(&model.grid(), p_percent, seed)?;
    reconstruct_masked(model, img, &mask, bias)
}

/// Reconstruct under a supplied mask.
pub fn reconstruct_masked(
    model: &(impl Reconstructor + ?Sized),
    img: &Cutout,
    mask: &MaskSpec,
    bias: f64,
) -> Result<ReconstructionResult> {
    let grid = model.grid();
    if img.height != grid.image_size || img.width != grid.image_size {
        return Err(EnkiError::shape(
            "reconstruct",
            &[img.height, img.width],
            &[grid.image_size, grid.image_size],
        ));
    }
    if mask.num_patches() != grid.num_patches() {
        return Err(EnkiError::shape("reconstruct mask", &[mask.num_patches()], &[grid.num_patches()]));
    }
    if mask.num_masked() == 0 {
        return Err(EnkiError::EmptyMask);
    }
    if mask.num_visible() == 0 {
        return Err(EnkiError::NoVisiblePatches);
    }
    let raw = model.predict(&img.values, mask)?;
    if raw.len() != img.values.len() {
        return Err(EnkiError::shape("prediction", &[raw.len()], &[img.values.len()]));
    }
    let mut composite = img.values.clone();
    for k in mask.masked() {
        for o in grid.pixel_offsets(k) {
            composite[o] = raw[o] - bias;
        }
    }
    let offset = compute_offset(&img.values, &composite, mask, &grid)?;
    Ok(ReconstructionResult {
        original: img.clone(),
        mask: mask.clone(),
        raw_prediction: raw,
        composite: Cutout {
            values: composite,
            ..img.clone()
        },
        offset,
        bias_applied: bias,
    })
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub id: u64,
    pub p: f64,
    pub n_masked: usize,
    pub rmse: f64,
    pub offset: f64,
    pub bias_applied: f64,
}

impl ResultRow {
    pub fn from_result(r: &ReconstructionResult, p: f64) -> Result<Self> {
        Ok(ResultRow {
            id: r.original.meta.id,
            p,
            n_masked: r.mask.num_masked(),
            rmse: rmse(&r.original.values, &r.composite.values, &r.mask, &r.grid(), false)?,
            offset: r.offset,
            bias_applied: r.bias_applied,
        })
    }
}

#[derive(Debug, Default)]
pub struct BatchReconstruction {
    pub results: Vec<ReconstructionResult>,
    pub rows: Vec<ResultRow>,
    /// Items that failed, as [`EnkiError::Item`] with their stack index.
    pub failures: Vec<EnkiError>,
}

/// Seed of the mask for the cutout with this id.
pub fn item_seed(seed: u64, id: u64) -> u64 {
    derive_seed(seed, id)
}

/// Reconstruct every cutout, each under its own mask from
/// [`item_seed`]`(seed, id)`. Failures are collected and the batch goes on.
pub fn batch_reconstruct(
    model: &(impl Reconstructor + ?Sized),
    stack: &[Cutout],
    p_percent: f64,
    seed: u64,
    bias: f64,
) -> BatchReconstruction {
    let mut out = BatchReconstruction::default();
    for (index, img) in stack.iter().enumerate() {
        let done = reconstruct(model, img, p_percent, item_seed(seed, img.meta.id), bias)
            .and_then(|r| ResultRow::from_result(&r, p_percent).map(|row| (r, row)));
        match done {
            Ok((r, row)) => {
                out.results.push(r);
                out.rows.push(row);
            }
            Err(e) => out.failures.push(EnkiError::Item {
                index,
                source: Box::new(e),
            }),
        }
    }
    out
}

pub fn write_masks(masks: &[MaskSpec], path: &Path) -> Result<()> {
    let n = masks.first().map_or(0, MaskSpec::num_patches);
    if let Some(i) = masks.iter().position(|m| m.num_patches() != n) {
        return Err(EnkiError::invalid(format!("mask {i} has {} patches, expected {n}", masks[i].num_patches())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MASK_MAGIC)?;
    write_u32(&mut w, MASK_VERSION)?;
    write_u32(&mut w, u32_field(masks.len(), "count")?)?;
    write_u32(&mut w, u32_field(n, "patch count")?)?;
    for m in masks {
        let mut bytes = vec![0u8; n.div_ceil(8)];
        for k in m.masked() {
            bytes[k / 8] |= 1 << (k % 8);
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_masks(path: &Path) -> Result<Vec<MaskSpec>> {
    let len = fs::metadata(path)?.len();
    let mut r = ByteReader::new(BufReader::new(File::open(path)?), 0);
    r.magic(MASK_MAGIC)?;
    r.version(MASK_VERSION)?;
    let count = r.u32("count")? as usize;
    let n = r.u32("patch count")? as usize;
    let per = n.div_ceil(8);
    let expected = 16 + (count * per) as u64;
    if len != expected {
        return Err(EnkiError::format(
            len.min(expected),
            format!("mask file is {len} bytes, header implies {expected}"),
        ));
    }
    let mut out = Vec::with_capacity(count);
    let mut bytes = vec![0u8; per];
    for _ in 0..count {
        r.fill(&mut bytes, "mask bits")?;
        let flags = (0..n).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect();
        out.push(MaskSpec::from_flags(flags));
    }
    Ok(out)
}

pub fn write_rows(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(EnkiError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cutouts, FieldSpec};
    use crate::model::ModelConfig;
    use crate::patching::random_mask;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn grid() -> PatchGrid {
        PatchGrid::default()
    }

    fn cutouts(n: u64) -> Vec<Cutout> {
        generate_cutouts(&FieldSpec::default(), 2, 0..n).unwrap()
    }

    /// Adds seeded white noise to its input.
    struct Noisy(f64, u64);

    impl Reconstructor for Noisy {
        fn grid(&self) -> PatchGrid {
            grid()
        }

        fn predict(&self, image: &[f64], _mask: &MaskSpec) -> Result<Vec<f64>> {
            let mut rng = rng_from_seed(self.1);
            Ok(image.iter().map(|v| v + self.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        }
    }

    #[test]
    fn tiny_and_invalid_ratios_fail() {
        let stub = ShiftedIdentity { grid: grid(), shift: 0.0 };
        let img = &cutouts(1)[0];
        assert!(matches!(reconstruct(&stub, img, 0.1, 1, 0.0), Err(EnkiError::EmptyMask)));
        assert!(reconstruct(&stub, img, 0.0, 1, 0.0).is_err());
        assert!(reconstruct(&stub, img, 100.0, 1, 0.0).is_err());
        let all = MaskSpec::from_flags(vec![true; 256]);
        assert!(matches!(reconstruct_masked(&stub, img, &all, 0.0), Err(EnkiError::NoVisiblePatches)));
    }

    #[test]
    fn identity_oracle_reconstructs_exactly() {
        let stub = ShiftedIdentity { grid: grid(), shift: 0.0 };
        for img in cutouts(5) {
            let r = reconstruct(&stub, &img, 30.0, 4, 0.0).unwrap();
            assert_eq!(r.composite.values, img.values);
            assert_eq!(r.offset, 0.0);
        }
    }

    #[test]
    fn bias_cancels_a_constant_shift() {
        let c = 0.0267;
        let stub = ShiftedIdentity { grid: grid(), shift: c };
        for img in cutouts(5) {
            let r = reconstruct(&stub, &img, 40.0, 9, c).unwrap();
            for k in r.mask.masked() {
                for o in grid().pixel_offsets(k) {
                    assert!((r.composite.values[o] - img.values[o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn composite_keeps_visible_pixels_and_offset_is_reproducible() {
        let model = MaskedAutoencoder::new(ModelConfig::desk(), 3).unwrap();
        for img in cutouts(3) {
            let r = reconstruct(&model, &img, 20.0, 1, 0.01).unwrap();
            for k in r.mask.visible() {
                for o in grid().pixel_offsets(k) {
                    assert_eq!(r.composite.values[o].to_bits(), img.values[o].to_bits());
                }
            }
            let again = compute_offset(&r.original.values, &r.composite.values, &r.mask, &grid()).unwrap();
            assert_eq!(again, r.offset);
            // same mask twice gives the same result
            assert_eq!(reconstruct_masked(&model, &img, &r.mask, 0.01).unwrap(), r);
        }
    }

    #[test]
    fn offset_examples() {
        let g = grid();
        let mask = random_mask(&g, 30.0, &mut rng_from_seed(1)).unwrap();
        let orig: Vec<f64> = (0..4096).map(|v| (v as f64 * 0.37).sin()).collect();
        assert_eq!(compute_offset(&orig, &orig, &mask, &g).unwrap(), 0.0);
        let shifted: Vec<f64> = orig.iter().map(|v| v + 0.0131).collect();
        assert!((compute_offset(&orig, &shifted, &mask, &g).unwrap() - 0.0131).abs() < 1e-15);
        assert!(matches!(
            compute_offset(&orig, &orig, &MaskSpec::from_flags(vec![false; 256]), &g),
            Err(EnkiError::EmptyMask)
        ));
    }

    #[test]
    fn symmetric_noise_has_small_offset() {
        let sigma = 0.1;
        let img = &cutouts(1)[0];
        let r = reconstruct(&Noisy(sigma, 5), img, 50.0, 2, 0.0).unwrap();
        let n = (r.mask.num_masked() * 16) as f64;
        assert!(r.offset.abs() < 3.0 * sigma / n.sqrt(), "{}", r.offset);
    }

    #[test]
    fn median_matches_sorting() {
        let mut rng = rng_from_seed(8);
        for len in 1..40 {
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let expect = if len % 2 == 1 {
                s[len / 2]
            } else {
                0.5 * (s[len / 2 - 1] + s[len / 2])
            };
            assert_eq!(median(&mut v.clone()), expect);
        }
    }

    #[test]
    fn bias_shifts_the_offset_linearly() {
        let model = Noisy(0.05, 3);
        for img in cutouts(4) {
            let a = reconstruct(&model, &img, 30.0, 6, 0.0).unwrap();
            let b = reconstruct(&model, &img, 30.0, 6, 0.02).unwrap();
            assert!((b.offset - (a.offset - 0.02)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_single_and_collects_failures() {
        let stub = Noisy(0.05, 3);
        let mut stack = cutouts(4);
        let single = reconstruct(&stub, &stack[2], 20.0, item_seed(7, stack[2].meta.id), 0.0).unwrap();
        let one = batch_reconstruct(&stub, &stack[2..3], 20.0, 7, 0.0);
        assert_eq!(one.results[0], single);

        stack[1].values.truncate(10);
        stack[1].height = 1;
        let out = batch_reconstruct(&stub, &stack, 20.0, 7, 0.0);
        assert_eq!(out.rows.len(), 3);
        assert!(matches!(out.failures[..], [EnkiError::Item { index: 1, .. }]));
        assert!(out.rows.iter().all(|r| r.n_masked == 51));
    }

    #[test]
    fn masks_and_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let mut rng = rng_from_seed(3);
        let masks: Vec<MaskSpec> = (0..20).map(|_| random_mask(&g, 35.0, &mut rng).unwrap()).collect();
        let path = dir.path().join("m.enkm");
        write_masks(&masks, &path).unwrap();
        let back = read_masks(&path).unwrap();
        assert!(masks.iter().zip(&back).all(|(a, b)| a.flags == b.flags));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_masks(&path), Err(EnkiError::Format { .. })));

        let stub = Noisy(0.05, 3);
        let rows = batch_reconstruct(&stub, &cutouts(5), 10.0, 1, 0.003).rows;
        let csv_path = dir.path().join("r.csv");
        write_rows(&rows, &csv_path).unwrap();
        assert_eq!(read_rows(&csv_path).unwrap(), rows);
        let text = fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("id,p,n_masked,rmse,offset,bias_applied\n"));
    }
}
