//! Semi-supervised learning with mutual-information maximisation run
//! alongside supervised, teacher-student, label-propagation and
//! threshold pseudo-labelling objectives.

pub mod data;
pub mod error;
pub mod labelprop;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod train;

pub use error::{Error, Result};
