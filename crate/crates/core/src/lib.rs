pub mod arm;
pub mod dataset;
pub mod eval;
pub mod expert;
pub mod metadata;
pub mod nn;
pub mod policy;
pub mod render;
pub mod rollout;
pub mod scene;
pub mod sim;
pub mod teleop;
