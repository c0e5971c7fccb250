//! Full evaluation of one reconstruction set: per-image RMSE, bias, border
//! vs interior position map, σ_T bins, complexity bins and a small gallery.
//!
//! cargo run --release --example evaluate_report -- [out_dir]

use std::path::PathBuf;

use enki::data::{generate_cutouts, FieldSpec};
use enki::evaluation::{evaluate, render_gallery, render_position_map, EvalItem, EvalOptions};
use enki::model::ModelConfig;
use enki::pipeline::{batch_reconstruct, ShiftedIdentity};

fn main() -> enki::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("enki_report"));
    std::fs::create_dir_all(&out)?;

    let grid = ModelConfig::desk().grid();
    let stack = generate_cutouts(&FieldSpec::default(), 3, 0..40)?;
    // a stand-in reconstructor; swap in a trained MaskedAutoencoder for real numbers
    let model = ShiftedIdentity { grid, shift: 0.01 };
    let batch = batch_reconstruct(&model, &stack, 30.0, 4, 0.0);
    let items: Vec<EvalItem> = batch.results.iter().map(EvalItem::from).collect();

    let report = evaluate(&items, &grid, &EvalOptions::default())?;
    println!("mean {:.4} median {:.4} bias {:+.4}", report.mean_rmse, report.median_rmse, report.bias);
    println!("border {:?} interior {:?}", report.border_mean_rmse, report.interior_mean_rmse);
    print!("{}", report.sigma_csv()?);
    print!("{}", report.complexity_csv()?);

    render_position_map(&report.position_map, &out.join("position_map.pgm"), 8)?;
    let n = 3;
    let originals: Vec<&[f64]> = batch.results[..n].iter().map(|r| r.original.values.as_slice()).collect();
    let composites: Vec<&[f64]> = batch.results[..n].iter().map(|r| r.composite.values.as_slice()).collect();
    let masks: Vec<_> = batch.results[..n].iter().map(|r| r.mask.clone()).collect();
    let ids: Vec<u64> = batch.results[..n].iter().map(|r| r.original.meta.id).collect();
    let files = render_gallery(&originals, &masks, &composites, &ids, &grid, &out.join("cutout"))?;
    println!("wrote {} gallery files under {}", files.len(), out.display());
    Ok(())
}
