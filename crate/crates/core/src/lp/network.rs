//! Forward LP policies over commodity networks (vehicle rebalancing and
//! supply-chain distribution) and their inverse-optimization counterparts:
//! the direct flow-conservation inverse and the strong-duality
//! suboptimality reconstruction.

use nalgebra::{DMatrix, DVector};

use super::simplex::{solve_lp, LpProblem, LpStatus};
use super::LpError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Warehouse,
    Store,
    Station,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkNode {
    pub role: NodeRole,
    pub inventory: f64,
    pub storage_cap: f64,
    pub prod_cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkEdge {
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// Node/edge graph shared by the LP policies and their inverses. Edge order
/// defines the layout of every flow vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkProblem {
    pub nodes: Vec<NetworkNode>,
    pub edges: Vec<NetworkEdge>,
    pub slack_penalty: f64,
}

impl NetworkProblem {
    /// Complete digraph over stations with the given idle-vehicle counts.
    /// The slack penalty defaults to 10x the largest edge cost.
    pub fn routing(inventories: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> Self {
        let n = inventories.len();
        let mut edges = Vec::new();
        let mut max_cost: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let c = cost(i, j);
                    max_cost = max_cost.max(c);
                    edges.push(NetworkEdge { from: i, to: j, cost: c });
                }
            }
        }
        let nodes = inventories
            .iter()
            .map(|&q| NetworkNode {
                role: NodeRole::Station,
                inventory: q,
                storage_cap: f64::INFINITY,
                prod_cap: 0.0,
            })
            .collect();
        Self { nodes, edges, slack_penalty: 10.0 * max_cost.max(1.0) }
    }

    /// Star graph: one warehouse (node 0) connected to every store.
    pub fn one_warehouse(
        warehouse_inventory: f64,
        warehouse_caps: (f64, f64),
        store_inventories: &[f64],
        store_caps: &[f64],
        transport_cost: f64,
    ) -> Self {
        let mut nodes = vec![NetworkNode {
            role: NodeRole::Warehouse,
            inventory: warehouse_inventory,
            storage_cap: warehouse_caps.0,
            prod_cap: warehouse_caps.1,
        }];
        for (i, &q) in store_inventories.iter().enumerate() {
            nodes.push(NetworkNode {
                role: NodeRole::Store,
                inventory: q,
                storage_cap: store_caps[i],
                prod_cap: 0.0,
            });
        }
        let edges = (0..store_inventories.len())
            .map(|i| NetworkEdge { from: 0, to: i + 1, cost: transport_cost })
            .collect();
        Self { nodes, edges, slack_penalty: 10.0 * transport_cost.max(1.0) }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn warehouses(&self) -> Vec<usize> {
        self.role_indices(NodeRole::Warehouse)
    }

    pub fn stores(&self) -> Vec<usize> {
        self.role_indices(NodeRole::Store)
    }

    fn role_indices(&self, role: NodeRole) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].role == role).collect()
    }

    pub fn outflow(&self, node: usize, flows: &[f64]) -> f64 {
        self.edges
            .iter()
            .zip(flows)
            .filter(|(e, _)| e.from == node)
            .map(|(_, f)| *f)
            .sum()
    }

    pub fn inflow(&self, node: usize, flows: &[f64]) -> f64 {
        self.edges
            .iter()
            .zip(flows)
            .filter(|(e, _)| e.to == node)
            .map(|(_, f)| *f)
            .sum()
    }

    pub fn flow_cost(&self, flows: &[f64]) -> f64 {
        self.edges.iter().zip(flows).map(|(e, f)| e.cost * f).sum()
    }

    fn check_flow_inventory(&self, flows: &[f64]) -> Result<(), LpError> {
        for i in 0..self.node_count() {
            if self.nodes[i].role == NodeRole::Store {
                continue; // stores ship nothing in these topologies
            }
            let out = self.outflow(i, flows);
            if out > self.nodes[i].inventory + 1e-9 {
                return Err(LpError::FlowExceedsInventory {
                    node: i,
                    outflow: out,
                    inventory: self.nodes[i].inventory,
                });
            }
        }
        Ok(())
    }
}

/// Minimum-cost rebalancing toward the desired per-node counts, in the
/// always-feasible slack-penalized form:
/// min sum c_e f_e + p sum z_i subject to
/// (outflow_i - inflow_i) - z_i <= q_i - qhat_i, outflow_i <= q_i, f, z >= 0.
pub fn rebalancing_policy(net: &NetworkProblem, desired: &[f64]) -> Result<Vec<f64>, LpError> {
    assert_eq!(desired.len(), net.node_count());
    let ne = net.edges.len();
    let nn = net.node_count();
    let mut obj = Vec::with_capacity(ne + nn);
    obj.extend(net.edges.iter().map(|e| e.cost));
    obj.extend(std::iter::repeat(net.slack_penalty).take(nn));
    let mut p = LpProblem::minimize(&obj);
    for i in 0..nn {
        let mut coeffs: Vec<(usize, f64)> = Vec::new();
        for (k, e) in net.edges.iter().enumerate() {
            if e.from == i {
                coeffs.push((k, 1.0));
            } else if e.to == i {
                coeffs.push((k, -1.0));
            }
        }
        coeffs.push((ne + i, -1.0));
        p.add_ub_row(&coeffs, net.nodes[i].inventory - desired[i]);
    }
    for i in 0..nn {
        let coeffs: Vec<(usize, f64)> = net
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.from == i)
            .map(|(k, _)| (k, 1.0))
            .collect();
        if !coeffs.is_empty() {
            p.add_ub_row(&coeffs, net.nodes[i].inventory);
        }
    }
    let sol = solve_lp(&p)?;
    if sol.status != LpStatus::Optimal {
        return Err(LpError::NotOptimal { status: sol.status });
    }
    Ok(sol.x.as_slice()[..ne].to_vec())
}

/// Shipment flows and production chosen by the supply-chain LP.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplyChainPlan {
    pub flows: Vec<f64>,
    pub production: Vec<f64>,
    /// Per-store deviation of incoming flow from the desired inventory.
    pub eps_flow: Vec<f64>,
    /// Per-warehouse deviation of production from the desired level.
    pub eps_prod: Vec<f64>,
    pub objective: f64,
}

/// Distribution policy: meet the desired store inventories and warehouse
/// production as closely as possible (L1-minimal deviations) while hard
/// constraints hold exactly:
/// inflow_i = qhat_i + eps_f,i and inflow_i + q_i - d_i <= C_s,i (stores);
/// outflow_i <= q_i, q_i + w_i - outflow_i <= C_p,i, w_i = what_i + eps_w,i,
/// 0 <= w_i <= C_p,i (warehouses); f >= 0.
///
/// `consumption` is the amount each store will sell this step; the capacity
/// row uses it so post-arrival inventory cannot exceed storage capacity.
pub fn supplychain_policy(
    net: &NetworkProblem,
    desired_production: &[f64],
    desired_inventory: &[f64],
    consumption: &[f64],
) -> Result<SupplyChainPlan, LpError> {
    let warehouses = net.warehouses();
    let stores = net.stores();
    assert_eq!(desired_production.len(), warehouses.len());
    assert_eq!(desired_inventory.len(), stores.len());
    assert_eq!(consumption.len(), stores.len());

    let ne = net.edges.len();
    let nw = warehouses.len();
    let ns = stores.len();
    // Layout: f (ne), w (nw), eps_w+ (nw), eps_w- (nw), eps_f+ (ns), eps_f- (ns).
    let w0 = ne;
    let ewp = w0 + nw;
    let ewm = ewp + nw;
    let efp = ewm + nw;
    let efm = efp + ns;
    let total = efm + ns;

    let mut obj = vec![0.0; total];
    for v in obj.iter_mut().take(total).skip(ewp) {
        *v = 1.0;
    }
    let mut p = LpProblem::minimize(&obj);
    for (wi, &node) in warehouses.iter().enumerate() {
        p = p.with_bounds(w0 + wi, 0.0, net.nodes[node].prod_cap);
    }

    for (si, &node) in stores.iter().enumerate() {
        let in_edges: Vec<(usize, f64)> = net
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.to == node)
            .map(|(k, _)| (k, 1.0))
            .collect();
        // inflow - eps_f+ + eps_f- = qhat
        let mut coeffs = in_edges.clone();
        coeffs.push((efp + si, -1.0));
        coeffs.push((efm + si, 1.0));
        p.add_eq_row(&coeffs, desired_inventory[si]);
        // inflow <= C_s - q + consumption
        p.add_ub_row(
            &in_edges,
            net.nodes[node].storage_cap - net.nodes[node].inventory + consumption[si],
        );
    }
    for (wi, &node) in warehouses.iter().enumerate() {
        let out_edges: Vec<(usize, f64)> = net
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.from == node)
            .map(|(k, _)| (k, 1.0))
            .collect();
        p.add_ub_row(&out_edges, net.nodes[node].inventory);
        // w - outflow <= C_p - q
        let mut coeffs: Vec<(usize, f64)> = out_edges.iter().map(|&(k, _)| (k, -1.0)).collect();
        coeffs.push((w0 + wi, 1.0));
        p.add_ub_row(&coeffs, net.nodes[node].prod_cap - net.nodes[node].inventory);
        // w - eps_w+ + eps_w- = what
        p.add_eq_row(
            &[(w0 + wi, 1.0), (ewp + wi, -1.0), (ewm + wi, 1.0)],
            desired_production[wi],
        );
    }

    let sol = solve_lp(&p)?;
    if sol.status != LpStatus::Optimal {
        return Err(LpError::NotOptimal { status: sol.status });
    }
    let x = sol.x.as_slice();
    Ok(SupplyChainPlan {
        flows: x[..ne].to_vec(),
        production: x[w0..w0 + nw].to_vec(),
        eps_prod: (0..nw).map(|i| x[ewp + i] - x[ewm + i]).collect(),
        eps_flow: (0..ns).map(|i| x[efp + i] - x[efm + i]).collect(),
        objective: sol.objective_value,
    })
}

/// Direct inverse by flow conservation. For stations the reconstructed
/// target is q_i + inflow - outflow; for stores it is the total incoming
/// flow. Warehouse entries are zero (their target is the observed
/// production, which is not an edge flow). Fails when any node ships more
/// than its inventory.
pub fn flow_balance_inverse(net: &NetworkProblem, flows: &[f64]) -> Result<Vec<f64>, LpError> {
    assert_eq!(flows.len(), net.edges.len());
    net.check_flow_inventory(flows)?;
    let mut targets = vec![0.0; net.node_count()];
    for i in 0..net.node_count() {
        targets[i] = match net.nodes[i].role {
            NodeRole::Station => net.nodes[i].inventory + net.inflow(i, flows) - net.outflow(i, flows),
            NodeRole::Store => net.inflow(i, flows),
            NodeRole::Warehouse => 0.0,
        };
    }
    Ok(targets)
}

/// Primal data for the absolute-suboptimality reconstruction:
/// minimize c.x + p.z subject to A x + B z <= b, x, z >= 0, where the
/// right-hand side depends affinely on unknown parameters theta:
/// b = rhs_fixed + rhs_theta . theta.
#[derive(Debug, Clone)]
pub struct SuboptimalityForm {
    pub a: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub c: DVector<f64>,
    pub p: DVector<f64>,
    pub rhs_fixed: DVector<f64>,
    pub rhs_theta: DMatrix<f64>,
    /// Candidate parameter values used to price the forward problem.
    pub theta0: DVector<f64>,
}

impl SuboptimalityForm {
    pub fn rhs_at(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.rhs_fixed + &self.rhs_theta * theta
    }

    /// Rebalancing primal in suboptimality form; theta is the vector of
    /// desired per-node counts.
    pub fn rebalancing(net: &NetworkProblem, theta0: &[f64]) -> Self {
        let ne = net.edges.len();
        let nn = net.node_count();
        let rows = 2 * nn;
        let mut a = DMatrix::zeros(rows, ne);
        let mut b_mat = DMatrix::zeros(rows, nn);
        let mut rhs_fixed = DVector::zeros(rows);
        let mut rhs_theta = DMatrix::zeros(rows, nn);
        for i in 0..nn {
            for (k, e) in net.edges.iter().enumerate() {
                if e.from == i {
                    a[(i, k)] = 1.0;
                } else if e.to == i {
                    a[(i, k)] = -1.0;
                }
            }
            b_mat[(i, i)] = -1.0;
            rhs_fixed[i] = net.nodes[i].inventory;
            rhs_theta[(i, i)] = -1.0;
            for (k, e) in net.edges.iter().enumerate() {
                if e.from == i {
                    a[(nn + i, k)] = 1.0;
                }
            }
            rhs_fixed[nn + i] = net.nodes[i].inventory;
        }
        Self {
            a,
            b_mat,
            c: DVector::from_iterator(ne, net.edges.iter().map(|e| e.cost)),
            p: DVector::from_element(nn, net.slack_penalty),
            rhs_fixed,
            rhs_theta,
            theta0: DVector::from_column_slice(theta0),
        }
    }

    /// Supply-chain primal in suboptimality form. x stacks flows then
    /// production, z stacks the four deviation blocks, and theta stacks
    /// desired production per warehouse then desired inventory per store.
    pub fn supply_chain(net: &NetworkProblem, consumption: &[f64], theta0: &[f64]) -> Self {
        let warehouses = net.warehouses();
        let stores = net.stores();
        let ne = net.edges.len();
        let nw = warehouses.len();
        let ns = stores.len();
        let nx = ne + nw;
        let nz = 2 * nw + 2 * ns;
        // Rows: store eq pairs (2ns), store capacity (ns), warehouse outflow
        // (nw), warehouse post-production capacity (nw), warehouse eq pairs
        // (2nw), production upper bound (nw).
        let rows = 2 * ns + ns + nw + nw + 2 * nw + nw;
        let mut a = DMatrix::zeros(rows, nx);
        let mut b_mat = DMatrix::zeros(rows, nz);
        let mut rhs_fixed = DVector::zeros(rows);
        let mut rhs_theta = DMatrix::zeros(rows, nw + ns);
        let (ewp, ewm, efp, efm) = (0, nw, 2 * nw, 2 * nw + ns);
        let mut row = 0;
        for (si, &node) in stores.iter().enumerate() {
            let theta_idx = nw + si;
            // inflow - eps_f+ + eps_f- <= qhat
            for (k, e) in net.edges.iter().enumerate() {
                if e.to == node {
                    a[(row, k)] = 1.0;
                    a[(row + 1, k)] = -1.0;
                }
            }
            b_mat[(row, efp + si)] = -1.0;
            b_mat[(row, efm + si)] = 1.0;
            rhs_theta[(row, theta_idx)] = 1.0;
            // and the mirrored >= half
            b_mat[(row + 1, efp + si)] = 1.0;
            b_mat[(row + 1, efm + si)] = -1.0;
            rhs_theta[(row + 1, theta_idx)] = -1.0;
            row += 2;
        }
        for (si, &node) in stores.iter().enumerate() {
            for (k, e) in net.edges.iter().enumerate() {
                if e.to == node {
                    a[(row, k)] = 1.0;
                }
            }
            rhs_fixed[row] =
                net.nodes[node].storage_cap - net.nodes[node].inventory + consumption[si];
            row += 1;
        }
        for &node in &warehouses {
            for (k, e) in net.edges.iter().enumerate() {
                if e.from == node {
                    a[(row, k)] = 1.0;
                }
            }
            rhs_fixed[row] = net.nodes[node].inventory;
            row += 1;
        }
        for (wi, &node) in warehouses.iter().enumerate() {
            for (k, e) in net.edges.iter().enumerate() {
                if e.from == node {
                    a[(row, k)] = -1.0;
                }
            }
            a[(row, ne + wi)] = 1.0;
            rhs_fixed[row] = net.nodes[node].prod_cap - net.nodes[node].inventory;
            row += 1;
        }
        for wi in 0..nw {
            // w - eps_w+ + eps_w- <= what and mirrored
            a[(row, ne + wi)] = 1.0;
            b_mat[(row, ewp + wi)] = -1.0;
            b_mat[(row, ewm + wi)] = 1.0;
            rhs_theta[(row, wi)] = 1.0;
            a[(row + 1, ne + wi)] = -1.0;
            b_mat[(row + 1, ewp + wi)] = 1.0;
            b_mat[(row + 1, ewm + wi)] = -1.0;
            rhs_theta[(row + 1, wi)] = -1.0;
            row += 2;
        }
        for (wi, &node) in warehouses.iter().enumerate() {
            a[(row, ne + wi)] = 1.0;
            rhs_fixed[row] = net.nodes[node].prod_cap;
            row += 1;
        }
        debug_assert_eq!(row, rows);
        Self {
            a,
            b_mat,
            c: DVector::zeros(nx),
            p: DVector::from_element(nz, 1.0),
            rhs_fixed,
            rhs_theta,
            theta0: DVector::from_column_slice(theta0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityOutcome {
    /// Reconstructed parameters (per-node targets).
    pub theta: DVector<f64>,
    /// Full reconstructed right-hand side.
    pub rhs: DVector<f64>,
    /// Absolute suboptimality of the observed solution under the
    /// reconstruction; zero when the observation is optimal for some rhs.
    pub epsilon: f64,
}

/// Strong-duality reconstruction of the right-hand side rationalizing the
/// observed solution `x_star`. The multipliers are fixed to the dual
/// solution of the forward problem priced at `theta0`, which reduces the
/// bilinear suboptimality condition to a linear program in (theta, z, eps).
pub fn duality_inverse(
    form: &SuboptimalityForm,
    x_star: &DVector<f64>,
) -> Result<DualityOutcome, LpError> {
    let rows = form.a.nrows();
    let nx = form.a.ncols();
    let nz = form.b_mat.ncols();
    let nt = form.rhs_theta.ncols();
    assert_eq!(x_star.len(), nx);

    // Forward solve at the candidate rhs to price the rows.
    let rhs0 = form.rhs_at(&form.theta0);
    let mut fwd_obj = Vec::with_capacity(nx + nz);
    fwd_obj.extend(form.c.iter());
    fwd_obj.extend(form.p.iter());
    let mut fwd = LpProblem::minimize(&fwd_obj);
    for i in 0..rows {
        let mut coeffs: Vec<(usize, f64)> = Vec::new();
        for j in 0..nx {
            if form.a[(i, j)] != 0.0 {
                coeffs.push((j, form.a[(i, j)]));
            }
        }
        for j in 0..nz {
            if form.b_mat[(i, j)] != 0.0 {
                coeffs.push((nx + j, form.b_mat[(i, j)]));
            }
        }
        fwd.add_ub_row(&coeffs, rhs0[i]);
    }
    let fwd_sol = solve_lp(&fwd)?;
    if fwd_sol.status != LpStatus::Optimal {
        return Err(LpError::NotOptimal { status: fwd_sol.status });
    }
    let lambda = fwd_sol.dual_ub;

    // Reconstruction LP over [theta (free), z, eps].
    let z0 = nt;
    let eps0 = nt + nz;
    let mut obj = vec![0.0; nt + nz + 1];
    obj[eps0] = 1.0;
    let mut rec = LpProblem::minimize(&obj);
    for k in 0..nt {
        rec = rec.with_free_var(k);
    }
    let ax = &form.a * x_star;
    for i in 0..rows {
        let mut coeffs: Vec<(usize, f64)> = Vec::new();
        for k in 0..nt {
            if form.rhs_theta[(i, k)] != 0.0 {
                coeffs.push((k, -form.rhs_theta[(i, k)]));
            }
        }
        for j in 0..nz {
            if form.b_mat[(i, j)] != 0.0 {
                coeffs.push((z0 + j, form.b_mat[(i, j)]));
            }
        }
        rec.add_ub_row(&coeffs, form.rhs_fixed[i] - ax[i]);
    }
    // eps - p.z + (lambda' rhs_theta) theta = c.x* - lambda' rhs_fixed
    let lam_theta = form.rhs_theta.transpose() * &lambda;
    let mut coeffs: Vec<(usize, f64)> = vec![(eps0, 1.0)];
    for j in 0..nz {
        coeffs.push((z0 + j, -form.p[j]));
    }
    for k in 0..nt {
        if lam_theta[k] != 0.0 {
            coeffs.push((k, lam_theta[k]));
        }
    }
    rec.add_eq_row(&coeffs, form.c.dot(x_star) - lambda.dot(&form.rhs_fixed));
    let rec_sol = solve_lp(&rec)?;
    match rec_sol.status {
        LpStatus::Optimal => {}
        _ => return Err(LpError::InfeasibleReconstruction),
    }
    let theta = DVector::from_iterator(nt, rec_sol.x.as_slice()[..nt].iter().copied());
    let rhs = form.rhs_at(&theta);
    Ok(DualityOutcome { theta, rhs, epsilon: rec_sol.objective_value.max(0.0) })
}
