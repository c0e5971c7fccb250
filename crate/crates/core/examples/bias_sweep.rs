//! A t×p sweep in the layout of the bias table: one bias per training ratio
//! t and reconstruction ratio p. Models here are untrained and only show the
//! mechanics; pass checkpoints through `enki sweep --model T=PATH` for real
//! runs.

use enki::cli::{bias_table, sweep_cell};
use enki::data::{generate_cutouts, FieldSpec};
use enki::evaluation::EvalOptions;
use enki::model::{MaskedAutoencoder, ModelConfig};

fn main() -> enki::Result<()> {
    let stack = generate_cutouts(&FieldSpec::default(), 8, 0..24)?;
    let options = EvalOptions::default();
    let mut rows = Vec::new();
    for (t, seed) in [(10.0, 1), (75.0, 2)] {
        let model = MaskedAutoencoder::new(ModelConfig::desk(), seed)?;
        for p in [10.0, 30.0, 50.0] {
            let row = sweep_cell(&model, &stack, t, p, 5, true, &options)?;
            println!(
                "t={t:>4} p={p:>4}: mean {:.4} bias {:+.4} corrected {:?}",
                row.mean_rmse, row.bias, row.corrected_mean_rmse
            );
            rows.push(row);
        }
    }
    print!("{}", bias_table(&rows));
    Ok(())
}
