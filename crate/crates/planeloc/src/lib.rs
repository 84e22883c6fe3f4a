//! Standard-plane localization in 3D voxel volumes.
//!
//! `planeloc` searches a volume for anatomical standard planes with a small
//! deep-RL agent. The pipeline has three stages:
//!
//! 1. **Warm start** — three landmarks are detected in the volume and rigidly
//!    registered to a plane-specific atlas; the atlas plane mapped through
//!    that transform is the agent's starting plane ([`align`], [`landmarks`]).
//! 2. **Plane search** — a Double-DQN agent nudges the plane's direction
//!    angles and offset one step at a time, rewarded by the sign of its
//!    progress toward the target ([`plane`], [`agent`], [`nn`]).
//! 3. **Active termination** — a sequence regressor watches the agent's
//!    Q-value trajectory and decides when to stop, instead of running a fixed
//!    step budget ([`termination`]).
//!
//! Everything is validated on procedurally generated phantom volumes with
//! exact ground-truth landmarks and planes ([`volume`]), and scored with
//! angle/offset/SSIM metrics ([`eval`]). The `planeloc` binary drives the
//! full experiment pipeline from a single TOML config; see the book under
//! `book/` for a guided tour.

pub mod agent;
pub mod align;
mod book;
pub mod commands;
pub mod config;
pub mod eval;
pub mod io;
pub mod landmarks;
pub mod nn;
pub mod plane;
pub mod termination;
pub mod volume;

pub use plane::{AgentAction, Plane, PlaneMetrics, StepSizes};
pub use volume::{Annotation, PlaneType, SliceImage, Volume};
