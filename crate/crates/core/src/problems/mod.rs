//! Concrete problem instances.

pub mod continual;
pub mod data;
pub mod hyperclean;
pub mod quadratic;

pub use continual::{gen_continual, ContinualInstance, ContinualParams};
pub use hyperclean::{gen_hyperclean, HyperCleanInstance, HyperCleanParams};
pub use quadratic::{gen_quadratic, QuadraticInstance, QuadraticParams};
