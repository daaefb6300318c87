pub mod gaussmeasure;
pub mod specfun;
pub mod poly;
pub mod spectral;
pub mod extension;
pub mod solver;
pub mod frequency;
pub mod blowup;
pub mod cli;
