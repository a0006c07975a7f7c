pub mod datagen;
pub mod diff;
pub mod embedding;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod network;
pub mod seeds;
pub mod training;
