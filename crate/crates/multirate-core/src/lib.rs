//! Multi-rate safety-critical control stack.
//!
//! A low-rate robust tube MPC planner over a linear planning model commands a
//! high-rate CLF-CBF quadratic-program controller running on the full nonlinear
//! plant. Set-valued error tubes connect the two layers, and a deterministic
//! multi-rate simulator with runtime safety monitors closes the loop. The
//! benchmark plant is a voltage-driven Segway (wheeled inverted pendulum).

pub mod dynamics;
pub mod qp;
pub mod sets;

pub use dynamics::{DiscreteModel, PlanningModel, PlantModel, SegwayParams};
pub use qp::{QProblem, QSolution, QpSolver, SolveStatus, Tolerances};
pub use sets::{Ellipsoid, HPolytope, TubeSchedule};
