pub mod evaluate;
pub mod infer;
pub mod plot;
pub mod reconstruct;
pub mod train;
