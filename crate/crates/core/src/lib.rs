pub mod env;
pub mod exploration;
pub mod harness;
pub mod human;
pub mod kitchen;
pub mod nn;
pub mod ppo;
pub mod reward;
