//! Benchmark fixtures.

use eqft::functional::FieldSpace;
use eqft::{build_lattice, BackgroundGeometry, LatticeSpace, Parametrix};
use std::sync::Arc;

pub struct Torus {
    pub geometry: BackgroundGeometry,
    pub lattice: LatticeSpace,
    pub space: Arc<FieldSpace>,
    pub green: Parametrix,
}

/// Unit-mass flat torus of side 4 with `n` sites per axis.
pub fn torus(dim: usize, n: usize) -> Torus {
    let geometry = BackgroundGeometry::torus(vec![4.0; dim], 1.0).expect("valid torus");
    let lattice = build_lattice(&geometry, n).expect("lattice fits");
    let space = FieldSpace::new(lattice.clone(), 0).expect("field space");
    let green = Parametrix::green(&geometry, &lattice).expect("green kernel");
    Torus { geometry, lattice, space, green }
}

/// Smooth probe field `sin(x₀) + ½ cos(x_last)`.
pub fn probe(lattice: &LatticeSpace) -> Vec<f64> {
    lattice.sample(|x| x[0].sin() + 0.5 * x[x.len() - 1].cos())
}
