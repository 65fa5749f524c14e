pub mod adapt;
pub mod opf;
pub mod perturb;
pub mod spa;
