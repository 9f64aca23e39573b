pub mod analysis;
pub mod dataio;
pub mod diff;
pub mod etf;
pub mod localnet;
pub mod rng;
pub mod theory;
pub mod train;
