pub mod align;
pub mod divergence;
pub mod features;
pub mod nbe;
pub mod ransac;
pub mod cnn;
pub mod classical;
