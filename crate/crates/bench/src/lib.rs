//! Fixtures shared by the benchmarks.

use warpmix::sim::{brain_template, simulate_dataset, Mask, SimDataset, SimSpec, BRAIN_RADIUS};
use warpmix::{AnchorGrid, Lattice};

/// Simulated stack on a `size x size` lattice with the default study variances.
pub fn study_data(size: usize, n: usize, grid: usize, seed: u64) -> SimDataset {
    let l = Lattice::new(size, size).expect("nonzero lattice");
    let spec = SimSpec {
        template: brain_template(l),
        n,
        sigma2: 0.001,
        sigma2_tau2: 0.1,
        sigma2_gamma2: 0.01,
        warp_grid: AnchorGrid::new(grid, grid).expect("nonzero grid"),
        mask: Some(Mask::disk(l, BRAIN_RADIUS)),
        seed,
    };
    simulate_dataset(&spec).expect("valid simulation")
}
