//! Second-moment scaling analysis for ReLU networks.
//!
//! The crate propagates uncentered second moments of activations and
//! gradients through a network description, derives per-layer scaling
//! factors from them, plans initializations that equalize those factors, and
//! checks the analytic predictions against a small dense reference engine.
//!
//! * [`graph`]: network IR, JSON documents, shape inference and lint.
//! * [`moments`]: analytic forward/backward moment propagation.
//! * [`scaling`]: activation, weight, bias and scalar scaling factors.
//! * [`initplan`]: initialization schemes and corrective scalars.
//! * [`verify`]: Monte-Carlo and Gauss-Newton checks of the analytic values.

pub mod graph;
pub mod initplan;
pub mod moments;
pub mod scaling;
pub mod verify;

pub use graph::{EdgeShape, NetworkGraph, OpKind};
