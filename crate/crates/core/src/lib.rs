pub mod energy;
pub mod engine;
pub mod harness;
pub mod medium;
pub mod powertrace;
pub mod protocols;
