//! Training-set sizes for the domain-adaptation fractions, and a reproducible subsample.

use mtdnn::data::{make_synthetic, sample_size, subsample, FRACTIONS};
use mtdnn::rng::{stream, Purpose};
use mtdnn::TaskKind;

fn main() -> mtdnn::Result<()> {
    for n in [23_596, 549_367] {
        let sizes = FRACTIONS.iter().map(|&f| sample_size(n, f)).collect::<mtdnn::Result<Vec<_>>>()?;
        println!("N = {n}: {sizes:?}");
    }

    let split = make_synthetic(TaskKind::Pair, 1000, 100, &mut stream(0, Purpose::Sampling))?;
    let small = subsample(&split, 0.01, &mut stream(42, Purpose::Sampling))?;
    let again = subsample(&split, 0.01, &mut stream(42, Purpose::Sampling))?;
    println!("1% of {} examples: {} kept, reproducible: {}", split.len(), small.len(), small == again);
    Ok(())
}
