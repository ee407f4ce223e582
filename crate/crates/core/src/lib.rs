//! Simulation and closed-form theory for transfer learning in deep linear
//! networks and two-layer mean-field ReLU networks.
//!
//! The crate is organized by model family. [`task_gen`] builds source/target
//! tasks and the distances between them, [`deep_linear`] and [`relu_mf`]
//! train the two network families, [`transfer_linear`] runs the transfer
//! protocols on top of a pretrained linear net, and [`theory`] evaluates the
//! asymptotic predictions those simulations are compared against.

pub mod deep_linear;
pub mod error;
pub mod linalg;
pub mod relu_mf;
pub mod rng;
pub mod task_gen;
pub mod theory;
pub mod transfer_linear;

pub use deep_linear::{FlowConfig, FlowOutcome, InitMode, LinearNet, Objective, SparsificationReport};
pub use error::{Result, TlabError};
pub use relu_mf::{KernelGrams, ReluNet, TeacherPair};
pub use task_gen::{Dataset, FunctionInSpan, TaskPair};
pub use theory::{Extended, Label, Method, RegionLabel};
pub use transfer_linear::{TransferMethod, TransferOutcome};

pub use nalgebra::{DMatrix, DVector};
