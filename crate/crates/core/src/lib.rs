pub mod adversarial;
pub mod genref;
pub mod matching;
pub mod motion_io;
pub mod nn;
pub mod pporl;
pub mod retarget;
pub mod rotmath;
pub mod similarity;
pub mod simworld;
