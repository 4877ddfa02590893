pub mod bench;
pub mod decompose;
pub mod fit;
pub mod predict;
pub mod synth;
