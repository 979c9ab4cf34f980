//! In-process simulation of the two-layer hierarchy: per-cluster weighted
//! state averaging, aggregate exchange between the cluster computers, and
//! control broadcast. Verifies exactness against the centralized feedback
//! and accounts communication links.

use ndarray::prelude::*;
use serde::Serialize;

use crate::cluster::ClusterPlan;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeId {
    Generator(usize),
    Vm(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Average,
    Exchange,
    Broadcast,
}

#[derive(Debug, Clone, Serialize)]
pub struct MessageRecord {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload_len: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MessageLog {
    pub records: Vec<MessageRecord>,
}

impl MessageLog {
    pub fn count(&self, phase: Phase) -> usize {
        self.records.iter().filter(|m| m.phase == phase).count()
    }

    /// The exchange records must connect every unordered VM pair.
    pub fn exchange_is_complete_graph(&self, r: usize) -> bool {
        let mut seen = vec![false; r * r];
        for m in &self.records {
            if m.phase == Phase::Exchange {
                if let (NodeId::Vm(i), NodeId::Vm(j)) = (m.sender, m.receiver) {
                    seen[i * r + j] = true;
                    seen[j * r + i] = true;
                }
            }
        }
        (0..r).all(|i| (0..r).all(|j| i == j || seen[i * r + j]))
    }

    /// The broadcast records must reach every generator exactly once.
    pub fn broadcast_covers(&self, n: usize) -> bool {
        let mut hits = vec![0usize; n];
        for m in &self.records {
            if m.phase == Phase::Broadcast {
                if let NodeId::Generator(j) = m.receiver {
                    hits[j] += 1;
                }
            }
        }
        hits.iter().all(|&h| h == 1)
    }
}

/// One cluster computer: its members, their weights, the received
/// aggregates and its slices of the controller data.
struct ClusterNode {
    members: Vec<usize>,
    weight_norm: f64,
    /// own 4-entry aggregate (one scalar per state block)
    aggregate: [f64; 4],
    /// inbox of everyone's aggregates, filled during the exchange
    inbox: Vec<[f64; 4]>,
}

/// Run the three synchronous phases of the hierarchy for one state vector.
/// Returns the control signal and the message log; the control equals
/// -K^ xbar up to reassociation of the same products.
pub fn run_hierarchy(
    plan: &ClusterPlan,
    x_tilde: &Array2<f64>,
    b: &Array2<f64>,
    r_mat: &Array2<f64>,
    xbar: &Array1<f64>,
) -> Result<(Array1<f64>, MessageLog)> {
    let n = plan.n();
    let r = plan.r();
    if xbar.len() != 4 * n {
        return Err(Error::Dimension(format!(
            "state vector has {} entries, expected {}",
            xbar.len(),
            4 * n
        )));
    }
    if x_tilde.dim() != (4 * r, 4 * r) {
        return Err(Error::Dimension("X~ does not match the plan's cluster count".into()));
    }
    if b.nrows() != 4 * n || r_mat.nrows() != b.ncols() {
        return Err(Error::Dimension("controller and plan are wired inconsistently".into()));
    }

    // gain rows (R^{-1} B' Pi') held by the owning cluster
    let r_inv_bt = linalg::solve_multi(r_mat, &b.t().to_owned())?; // n x 4n
    let mut gain_rows = Array2::<f64>::zeros((n, 4 * r));
    for blk in 0..4 {
        let cols = r_inv_bt.slice(s![.., blk * n..(blk + 1) * n]);
        gain_rows
            .slice_mut(s![.., blk * r..(blk + 1) * r])
            .assign(&cols.dot(&plan.p.t()));
    }

    let mut log = MessageLog::default();
    let mut nodes: Vec<ClusterNode> = plan
        .clusters
        .iter()
        .map(|members| ClusterNode {
            members: members.clone(),
            weight_norm: members.iter().map(|&j| plan.w[j] * plan.w[j]).sum::<f64>().sqrt(),
            aggregate: [0.0; 4],
            inbox: vec![[0.0; 4]; r],
        })
        .collect();

    // phase 1: each generator ships its four states to its cluster computer
    for (i, node) in nodes.iter_mut().enumerate() {
        for &j in &node.members {
            log.records.push(MessageRecord {
                sender: NodeId::Generator(j),
                receiver: NodeId::Vm(i),
                payload_len: 4,
                phase: Phase::Average,
            });
            for blk in 0..4 {
                node.aggregate[blk] += plan.w[j] * xbar[blk * n + j] / node.weight_norm;
            }
        }
        let agg = node.aggregate;
        node.inbox[i] = agg;
    }

    // phase 2: every VM sends its aggregate to every other VM
    let aggregates: Vec<[f64; 4]> = nodes.iter().map(|node| node.aggregate).collect();
    for i in 0..r {
        for j in 0..r {
            if i == j {
                continue;
            }
            log.records.push(MessageRecord {
                sender: NodeId::Vm(i),
                receiver: NodeId::Vm(j),
                payload_len: 4,
                phase: Phase::Exchange,
            });
            nodes[j].inbox[i] = aggregates[i];
        }
    }

    // phase 3: each VM evaluates X~ (Pi xbar) and broadcasts its members' inputs
    let mut u = Array1::<f64>::zeros(n);
    for (i, node) in nodes.iter().enumerate() {
        let mut projected = Array1::<f64>::zeros(4 * r);
        for (src, agg) in node.inbox.iter().enumerate() {
            for blk in 0..4 {
                projected[blk * r + src] = agg[blk];
            }
        }
        let y = x_tilde.dot(&projected);
        for &j in &node.members {
            let uj = -gain_rows.row(j).dot(&y);
            u[j] = uj;
            log.records.push(MessageRecord {
                sender: NodeId::Vm(i),
                receiver: NodeId::Generator(j),
                payload_len: 1,
                phase: Phase::Broadcast,
            });
        }
    }
    Ok((u, log))
}

/// Bidirectional link counts: (hierarchical, all-to-all). The hierarchy
/// needs one link per generator plus a link per VM pair.
pub fn link_budget(n: usize, r: usize) -> Result<(u64, u64)> {
    if r == 0 || r > n {
        return Err(Error::Parameter(format!("need 1 <= r <= n, got r={r}, n={n}")));
    }
    let n = n as u64;
    let r = r as u64;
    Ok((n + r * (r - 1) / 2, n * (n - 1) / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_projection, clustering_weight};
    use crate::cplqr::LqrWeights;
    use crate::fgram::FreqBand;
    use crate::inversion::{design_pipeline, DesignOptions};
    use crate::sysmodel::synth_random_model;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_cluster_has_no_exchange() {
        let model = synth_random_model(4, 1, 3).unwrap();
        let weights = LqrWeights::angle_consensus_default(&model);
        let mut opts = DesignOptions::new(FreqBand::new(2.0).unwrap(), 1);
        opts.seed = 2;
        let out = design_pipeline(&model, &weights, &opts).unwrap();
        let xbar = Array1::from_shape_fn(4 * model.n, |i| (i as f64 * 0.37).sin());
        let (u, log) = run_hierarchy(
            &out.controller.plan,
            &out.controller.x_tilde,
            model.b(),
            &weights.r,
            &xbar,
        )
        .unwrap();
        assert_eq!(log.count(Phase::Exchange), 0);
        let centralized = -out.controller.k_hat.dot(&xbar);
        let dev = (&u - &centralized)
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        let scale = centralized.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-12 * scale.max(1e-300));
    }

    #[test]
    fn hierarchy_matches_centralized_feedback() {
        let model = synth_random_model(8, 2, 11).unwrap();
        let weights = LqrWeights::angle_consensus_default(&model);
        let mut opts = DesignOptions::new(FreqBand::new(2.0).unwrap(), 3);
        opts.seed = 7;
        let out = design_pipeline(&model, &weights, &opts).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let xbar = Array1::from_shape_fn(4 * model.n, |_| rng.gen_range(-1.0..1.0));
            let (u, log) = run_hierarchy(
                &out.controller.plan,
                &out.controller.x_tilde,
                model.b(),
                &weights.r,
                &xbar,
            )
            .unwrap();
            let centralized = -out.controller.k_hat.dot(&xbar);
            let dev = (&u - &centralized).iter().map(|x| x.abs()).fold(0.0, f64::max);
            let scale = centralized.iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(dev <= 1e-12 * scale.max(1e-300), "deviation {dev:.3e}");
            assert!(log.exchange_is_complete_graph(3));
            assert!(log.broadcast_covers(model.n));
        }
    }

    #[test]
    fn consensus_state_draws_no_control() {
        let model = synth_random_model(5, 1, 19).unwrap();
        let weights = LqrWeights::angle_consensus_default(&model);
        let mut opts = DesignOptions::new(FreqBand::new(2.0).unwrap(), 2);
        opts.seed = 5;
        let out = design_pipeline(&model, &weights, &opts).unwrap();
        let v0 = model.v0();
        let (u, _) = run_hierarchy(
            &out.controller.plan,
            &out.controller.x_tilde,
            model.b(),
            &weights.r,
            &v0,
        )
        .unwrap();
        let umax = u.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(umax < 1e-10, "|u| = {umax:.3e} on the consensus direction");
    }

    #[test]
    fn only_aggregates_cross_cluster_boundaries() {
        let model = synth_random_model(6, 1, 23).unwrap();
        let w = clustering_weight(&model.m_diag).unwrap();
        let plan = build_projection(vec![vec![0, 1, 2], vec![3, 4], vec![5]], &w).unwrap();
        let x_tilde = Array2::<f64>::eye(12);
        let weights = LqrWeights::angle_consensus_default(&model);
        let xbar = Array1::ones(4 * model.n);
        let (_, log) = run_hierarchy(&plan, &x_tilde, model.b(), &weights.r, &xbar).unwrap();
        for m in &log.records {
            if m.phase == Phase::Exchange {
                assert_eq!(m.payload_len, 4, "inter-VM payload must be one aggregate");
            }
        }
        assert_eq!(log.count(Phase::Average), model.n);
        assert_eq!(log.count(Phase::Exchange), 3 * 2);
        assert_eq!(log.count(Phase::Broadcast), model.n);
    }

    #[test]
    fn link_budget_matches_formulas() {
        assert_eq!(link_budget(48, 11).unwrap(), (103, 1128));
        let n = 12;
        assert_eq!(link_budget(n, 1).unwrap(), (n as u64, (n * (n - 1) / 2) as u64));
        let (h, d) = link_budget(n, n).unwrap();
        assert_eq!(h, (n + n * (n - 1) / 2) as u64);
        assert!(h >= d);
        assert!(link_budget(4, 5).is_err());
    }
}
