//! Webcam eye tracking from face landmarks: metric head pose, eye-patch
//! normalization, a compact gaze network and few-shot personalization.

pub mod blazegaze;
pub mod data;
pub mod geometry;
pub mod headpose;
pub mod meta;
pub mod nn;
pub mod preprocess;
pub mod simulator;

pub use geometry::{CameraIntrinsics, FacePoints3D, LandmarkFrame, LandmarkTopology, PointUnit};
pub use headpose::{HeadPose, SolverConfig, StepRule};
pub use preprocess::{EyePatch, PatchConfig, SampleWeightGrid, ScreenSpec};
