//! Small dense linear programming: a bounded two-phase primal simplex with
//! Bland's anti-cycling rule, the forward network-flow policies, and their
//! inverse-optimization counterparts.

mod network;
mod simplex;

pub use network::{
    duality_inverse, flow_balance_inverse, rebalancing_policy, supplychain_policy, DualityOutcome,
    NetworkEdge, NetworkNode, NetworkProblem, NodeRole, SuboptimalityForm, SupplyChainPlan,
};
pub use simplex::{optimality_residuals, solve_lp, LpProblem, LpSolution, LpStatus};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("numerical breakdown after {pivots} simplex pivots")]
    NumericalBreakdown { pivots: usize },
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("forward problem was {status:?}, expected Optimal")]
    NotOptimal { status: LpStatus },
    #[error("outflow {outflow} exceeds inventory {inventory} at node {node}")]
    FlowExceedsInventory { node: usize, outflow: f64, inventory: f64 },
    #[error("observed flows admit no feasible right-hand side reconstruction")]
    InfeasibleReconstruction,
}
