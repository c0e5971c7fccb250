//! Patch grids, random and block masks, and the shuffle/restore orders the
//! encoder and decoder use.

use enki::patching::{block_mask, mask_count, patchify, positional_embedding, random_mask, unpatchify, PatchGrid};
use enki::rng::rng_from_seed;

fn show(mask: &enki::patching::MaskSpec, side: usize) {
    for r in 0..side {
        let row: String = (0..side).map(|c| if mask.is_masked(r * side + c) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() -> enki::Result<()> {
    let grid = PatchGrid::new(64, 4)?;
    println!("{} patches of {} pixels", grid.num_patches(), grid.patch_len());
    for p in [10.0, 20.0, 30.0, 40.0, 50.0, 75.0] {
        println!("p={p:>4}: {} masked", mask_count(p, grid.num_patches()));
    }

    let mut rng = rng_from_seed(3);
    let random = random_mask(&grid, 30.0, &mut rng)?;
    println!("random mask, p=30");
    show(&random, grid.grid_side());
    let block = block_mask(&grid, 30.0, &mut rng)?;
    println!("block mask, p=30");
    show(&block, grid.grid_side());

    // shuffle puts visible patches first; restore undoes it
    let order = random.shuffle_order();
    let restore = random.restore_order();
    assert!(restore.iter().enumerate().all(|(k, &r)| order[r] == k));
    println!("first visible {:?}, first masked {:?}", &order[..4], &order[random.num_visible()..random.num_visible() + 4]);

    let image: Vec<f64> = (0..grid.num_pixels()).map(|i| i as f64).collect();
    assert_eq!(unpatchify(&patchify(&image, &grid)?, &grid)?, image);
    let pos = positional_embedding(&grid, 32)?;
    println!("positional table {:?}", pos.shape());
    Ok(())
}
