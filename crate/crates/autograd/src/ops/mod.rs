pub(crate) mod conv;
mod elementwise;
mod norm;
mod reduce;
pub(crate) mod spatial;
