//! Linear and nonlinear registration, deformation fields and Jacobians.

mod field;
mod linear;
mod nmi;
mod nonlinear;
mod optim;

pub use field::{apply_deformation, jacobian_determinant, modulate, DeformationField, JacobianMap};
pub(crate) use field::{warp_data, Boundary};
pub use linear::{
    fit_affine, fit_rigid, register_affine, register_rigid, AffineParams, LinearFit, LinearRegOpts, RigidParams,
};
pub use nmi::nmi;
pub use nonlinear::{register_nonlinear, NonlinearOpts, NonlinearResult};
