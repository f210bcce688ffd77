//! Online IMU-to-segment calibration for inertial body motion capture.

pub mod biomech;
pub mod residuals;
pub mod sim;
pub mod so3;
pub mod solver;
pub mod window;
