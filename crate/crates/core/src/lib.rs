pub mod error;
pub mod expm;
pub mod flow;
pub mod krylov;
pub mod manifold;
pub mod pacbayes;
pub mod par;
pub mod pipeline;
pub mod pushforward;
pub mod quadrature;

pub use error::{Error, Result};
