//! Draw the receptive field of every path through a 3-layer dense block under
//! the three dilation schemes, then confirm the union width with a probe.

use d3net::blocks::DilationScheme;
use d3net::rf::{block_report, empirical_coverage, probe_block, skip_coverage};

fn main() -> d3net::Result<()> {
    for scheme in [DilationScheme::None, DilationScheme::Naive, DilationScheme::Multi] {
        print!("{}", block_report(3, 3, scheme)?.to_text());
        println!();
    }

    println!("what each layer sees through each skip (union field of the source, spread by its group's kernel):");
    for scheme in [DilationScheme::Naive, DilationScheme::Multi] {
        let holes: usize = skip_coverage(4, 3, scheme)?
            .iter()
            .map(|s| s.coverage.blind_spots())
            .sum();
        println!("  {scheme:<6} L=4: {holes} blind spots over all skips");
    }

    println!("\nunion width, analytic vs. measured by pushing an impulse through a real block:");
    for layers in 1..=5 {
        let analytic = block_report(layers, 3, DilationScheme::Multi)?.union.width();
        let (block, store) = probe_block(layers, 3, DilationScheme::Multi, 0)?;
        let measured = empirical_coverage(&block, &store)?.width();
        println!(
            "  L={layers}: {analytic:>3} {measured:>3}  (2^(L+1)-1 = {})",
            (1usize << (layers + 1)) - 1
        );
    }
    Ok(())
}
