//! Draw a handful of synthetic SST-anomaly cutouts, write them as an ENKD
//! stack and read them back.
//!
//! cargo run --release --example generate_cutouts -- [count] [out.enkd]

use std::path::PathBuf;

use enki::data::{generate_cutouts, read_stack, write_stack, FieldSpec, FrontSpec};

fn main() -> enki::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("enki_cutouts.enkd"));

    let spec = FieldSpec {
        front: Some(FrontSpec {
            probability: 0.25,
            amplitude: 1.0,
            width: 2.0,
        }),
        ..FieldSpec::default()
    };
    let cutouts = generate_cutouts(&spec, 7, 0..count)?;
    println!("{:>4} {:>10} {:>12}", "id", "sigma_T", "mean");
    for c in &cutouts {
        println!("{:>4} {:>10.4} {:>12.2e}", c.meta.id, c.sigma_t(), c.mean());
    }

    write_stack(&cutouts, &out)?;
    let back = read_stack(&out)?;
    assert_eq!(back, cutouts);
    println!("wrote and re-read {} cutouts at {}", back.len(), out.display());
    Ok(())
}
