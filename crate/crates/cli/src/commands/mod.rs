pub mod decode;
pub mod diagnose;
pub mod eval;
pub mod sweep;
pub mod train;
