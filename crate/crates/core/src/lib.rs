#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod density;
pub mod diagnostics;
pub mod error;
pub mod geom2d;
pub mod oned;
pub mod quantize;
pub mod sdot;

pub use density::{Density, PolygonMoments};
pub use diagnostics::{BoundCheck, SeparationStats};
pub use error::{Error, Result};
pub use geom2d::{ConvexPolygon, HalfPlane, Point2, PointCloud, PowerDiagram};
pub use quantize::{DescentConfig, DescentTrace, Schedule};
pub use sdot::{Potentials, Quantization, SolveReport, SolverConfig};
