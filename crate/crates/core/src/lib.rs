pub mod cholesky;
pub mod error;
pub mod notation;
pub mod ram;
pub mod sparse;
pub mod gmrf;
pub mod spatial;
pub mod data;
pub mod design;
pub mod family;
pub mod model;
pub mod laplace;
pub mod optim;
pub mod fit;
pub mod cli;
