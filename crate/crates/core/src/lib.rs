//! Signal temporal logic tasks compiled into time-varying control barrier
//! functions, with decentralized min-norm controllers, nonconvex parameter
//! synthesis, and coupled multi-agent simulation.

pub mod barrier;
pub mod control;
pub mod scenario;
pub mod stl;
pub mod sim;
pub mod synthesis;

pub use barrier::{BarrierTerm, BarrierTermSpec, CompositeBarrier, GammaFn, TermOrigin};
pub use control::{AgentModel, TaskGroup};
pub use stl::{Formula, Predicate, Signal, SliceEnv};
