//! Event-stream densification with a pair of point-cloud networks: a
//! diffusion model that proposes dense events from a sparse slice and a
//! refinement network that corrects the proposal.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod event;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
pub use event::{EventCloud, Point3, RawEvent, RawEventSlice, SensorGeometry, TimeAnchor};
