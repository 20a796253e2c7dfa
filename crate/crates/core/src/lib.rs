//! Learned inverse kinematics: skeleton and rotation math, sparse effector
//! encoding, the prototype-subtraction network, training, datasets and
//! benchmarks.

pub mod augment;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod effector;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod losses;
pub mod model;
pub mod nn;
pub mod noise;
pub mod skeleton;
pub mod train;
pub mod trainer;

pub use effector::{Effector, EffectorRecord, EffectorSet, EffectorType, JointRef};
pub use error::{Error, Result};
pub use kinematics::{forward_kinematics, GlobalTransforms, Pose};
pub use skeleton::{Joint, SkeletonSpec, Zone};
