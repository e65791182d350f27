//! Macenko stain estimation and normalization onto a reference profile.

use histotype::rng;
use histotype::stain::{self, angle_deg, StainParams};
use histotype::synthetic::{random_concentrations, random_stain_matrix, reference_he, synthesize_stained};

fn main() -> histotype::error::Result<()> {
    let mut r = rng::seeded(11);
    let truth = random_stain_matrix(&mut r, 20.0);
    let conc = random_concentrations(&mut r, 128 * 128);
    let tile = synthesize_stained(&truth, &conc, 128, 128, 255.0, 0.5);

    let params = StainParams::default();
    let profile = stain::estimate_stain_profile(&stain::rgb_to_od(&tile, params.i0), &params)?;
    println!("hematoxylin error: {:.3} deg", angle_deg(&profile.hematoxylin(), &truth[0]));
    println!("eosin error:       {:.3} deg", angle_deg(&profile.eosin(), &truth[1]));

    let reference = reference_he();
    let normalized = stain::normalize_tile(&tile, &profile, &reference, params.i0)?;
    let refit = stain::estimate_stain_profile(&stain::rgb_to_od(&normalized, params.i0), &params)?;
    println!(
        "after normalization, H vs reference: {:.3} deg",
        angle_deg(&refit.hematoxylin(), &reference.hematoxylin())
    );
    print!("{}", profile.to_text());
    Ok(())
}
