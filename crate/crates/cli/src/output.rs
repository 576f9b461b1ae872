//! Long-format trajectory CSV: `t,entity,quantity,value`.

use std::path::Path;

use augpd_core::{Problem, System64, Trajectory64};

use crate::error::Result;
use crate::scenario::Scenario;

/// Writes every `stride`-th sample plus the final one. Rows per sample:
/// nodes, then multiplier chains, then edges, each in declaration order.
pub fn write_trajectory(path: &Path, scenario: &Scenario, system: &System64, traj: &Trajectory64, stride: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "entity", "quantity", "value"])?;
    let l = system.layout();
    let dual_ids = scenario.multiplier_ids();
    let consensus = matches!(system.problem(), Problem::Consensus(_));
    let last = traj.len() - 1;
    for k in (0..traj.len()).filter(|k| k % stride == 0 || *k == last) {
        let t = traj.times[k].to_string();
        let (s, o, u) = (&traj.states[k], &traj.outputs[k], &traj.controls[k]);
        let mut row = |entity: &str, quantity: &str, value: f64| w.write_record([t.as_str(), entity, quantity, &value.to_string()]);
        for (i, id) in scenario.node_ids.iter().enumerate() {
            row(id, "theta", o.theta[i])?;
            for (m, idx) in l.node[i].clone().enumerate() {
                row(id, &format!("xi_{}", m + 1), s.xi[idx])?;
            }
            for (m, idx) in l.node_control[i].clone().enumerate() {
                row(id, &format!("u_xi_{}", m + 2), u.node[idx])?;
            }
        }
        for (q, id) in dual_ids.iter().enumerate() {
            if l.dual[q].is_empty() {
                continue;
            }
            row(id, "lambda", o.lambda[q])?;
            if !consensus {
                row(id, "load", o.omega[q])?;
            }
            for (m, idx) in l.dual[q].clone().enumerate() {
                row(id, &format!("tau_{}", m + 1), s.tau[idx])?;
            }
            for (m, idx) in l.dual_control[q].clone().enumerate() {
                row(id, &format!("u_tau_{}", m + 2), u.dual[idx])?;
            }
        }
        for (j, id) in scenario.edge_ids.iter().enumerate() {
            row(id, "mu", o.mu[j])?;
            for (m, idx) in l.edge[j].clone().enumerate() {
                row(id, &format!("zeta_{}", m + 1), s.zeta[idx])?;
            }
            for (m, idx) in l.edge_control[j].clone().enumerate() {
                row(id, &format!("u_zeta_{}", m + 2), u.edge[idx])?;
            }
        }
        for (c, j) in l.feedforward_edges.iter().enumerate() {
            row(&scenario.edge_ids[*j], "u_ff", u.feedforward[c])?;
        }
    }
    w.flush().map_err(|e| crate::error::CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
