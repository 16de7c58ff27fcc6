mod bench;
mod check;
mod gen;
mod masks;
mod plan;
mod train;

pub use bench::{bench, fit_r2};
pub use check::check;
pub use gen::gen;
pub use masks::masks;
pub use plan::plan;
pub use train::{eval, eval_split_seed, train};
