//! Mask, encode, decode and composite. Runs an untrained model next to the
//! shifted-identity reference so the offset and bias bookkeeping is visible.

use enki::data::{generate_cutouts, FieldSpec};
use enki::evaluation::estimate_bias;
use enki::model::{MaskedAutoencoder, ModelConfig};
use enki::pipeline::{batch_reconstruct, reconstruct, ShiftedIdentity};

fn main() -> enki::Result<()> {
    let config = ModelConfig::desk();
    let model = MaskedAutoencoder::new(config.clone(), 1)?;
    let stack = generate_cutouts(&FieldSpec::default(), 5, 0..16)?;

    let one = reconstruct(&model, &stack[0], 30.0, 99, 0.0)?;
    let untouched = one
        .mask
        .visible()
        .into_iter()
        .flat_map(|k| config.grid().pixel_offsets(k).collect::<Vec<_>>())
        .all(|o| one.composite.values[o] == one.original.values[o]);
    println!("{} of {} patches masked, visible pixels untouched: {untouched}", one.mask.num_masked(), one.mask.num_patches());

    let shifted = ShiftedIdentity {
        grid: config.grid(),
        shift: 0.05,
    };
    for p in [10.0, 30.0, 50.0] {
        let raw = batch_reconstruct(&shifted, &stack, p, 2, 0.0);
        let bias = estimate_bias(&raw.results)?;
        let fixed = batch_reconstruct(&shifted, &stack, p, 2, bias);
        let mean = |rows: &[enki::pipeline::ResultRow]| rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len() as f64;
        println!(
            "shifted identity p={p}: bias {bias:.4}, rmse {:.4} -> {:.2e} after correction",
            mean(&raw.rows),
            mean(&fixed.rows)
        );
    }

    let batch = batch_reconstruct(&model, &stack, 30.0, 2, 0.0);
    for row in batch.rows.iter().take(5) {
        println!("untrained id {:>2}: rmse {:.4} offset {:+.4}", row.id, row.rmse, row.offset);
    }
    Ok(())
}
