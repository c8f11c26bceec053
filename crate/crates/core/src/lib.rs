pub mod acquire;
pub mod bench;
pub mod driver;
pub mod gp;
pub mod linalg;
pub mod nn;
pub mod space;
