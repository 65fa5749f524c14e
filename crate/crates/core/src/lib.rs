pub mod adversarial;
pub mod attack;
pub mod detector;
pub mod estimation;
pub mod grid;
pub mod harness;
pub mod physics;
pub mod pool;
pub mod seed;
pub mod textio;
