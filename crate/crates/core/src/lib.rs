//! Euclidean scalar field theory on lattice backgrounds.
//!
//! Polynomial functionals of a real scalar field are stored as small
//! contraction graphs over the sites of a periodic (or open) lattice.
//! On top of that representation the crate provides the
//! parametrix-indexed star product, Hadamard-subtracted Wick powers with
//! their renormalization ambiguities, extension of radial singular kernels,
//! the perturbative Møller map and a set of brute-force oracles used to
//! validate all of the above.

pub mod algebra;
pub mod background;
pub mod error;
pub mod extension;
pub mod fit;
pub mod functional;
pub mod interacting;
pub mod io;
pub mod oracle;
pub mod parametrix;
pub mod spectral;
pub mod taylor;
pub mod verify;
pub mod wick;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

pub use algebra::{
    change_of_parametrix, gamma_exp, involution, star_product, ContractionOperator,
    EquivariantObservable,
};
pub use background::{
    build_lattice, elliptic_operator, scale_background, BackgroundGeometry, EllipticOperator,
    GeometryKind, LatticeSpace, SmoothFamily,
};
pub use functional::{Locality, PolynomialFunctional, Term, Vertex};
pub use interacting::{FormalSeries, InteractionTerm};
pub use parametrix::{
    exact_green, hadamard_kernel, smooth_part, HadamardExpansion, Parametrix, SmoothPart,
};
pub use wick::{WickFamily, WickPower};
pub use extension::{extend, LatticePatch, RadialKernel};
