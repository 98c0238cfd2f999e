pub mod evaluate;
pub mod generate;
pub mod sweep;
pub mod train;
pub mod translate;
