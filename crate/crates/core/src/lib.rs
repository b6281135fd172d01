pub mod autodiff;
pub mod signal;
pub mod model;
pub mod train;
pub mod transfer;
