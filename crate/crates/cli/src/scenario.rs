//! TOML scenario files: parsing, validation and assembly of the systems to run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use augpd_core::{
    AugmentationProfile, Block, ConsensusProblem, CouplingProblem, Function64, Graph, Matrix, Problem, Problem64,
    RoutingMatrix, System, System64, SystemState, Variant,
};
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    description: Option<String>,
    nodes: Vec<String>,
    #[serde(default)]
    edges: Vec<RawEdge>,
    /// Replaces the incidence matrix; one row per node, one column per edge.
    #[serde(default)]
    coupling_matrix: Option<Vec<Vec<f64>>>,
    objectives: BTreeMap<String, Function64>,
    #[serde(default)]
    constraints: BTreeMap<String, Function64>,
    #[serde(default)]
    links: Vec<RawLink>,
    #[serde(default)]
    initial: RawInitial,
    #[serde(default)]
    integration: Integration,
    #[serde(default)]
    verify: Verification,
    #[serde(default)]
    comparison: Option<Comparison>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default = "default_stride")]
    csv_stride: usize,
    #[serde(rename = "run")]
    runs: Vec<RawRun>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    id: String,
    source: String,
    sink: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    id: String,
    /// Node id to routing weight; missing nodes route nothing over the link.
    routing: BTreeMap<String, f64>,
    constraint: Function64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    #[serde(default)]
    theta: BTreeMap<String, f64>,
    #[serde(default)]
    lambda: BTreeMap<String, f64>,
    #[serde(default)]
    mu: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    label: String,
    variant: Variant,
    #[serde(default)]
    profile: ProfileSpec,
}

fn unit_block() -> Block<f64> {
    Block::integrator(1.0)
}

fn default_stride() -> usize {
    10
}

/// Default chains for every entity, with optional per-entity overrides.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileSpec {
    #[serde(default = "unit_block")]
    node: Block<f64>,
    #[serde(default = "unit_block")]
    dual: Block<f64>,
    #[serde(default = "unit_block")]
    edge: Block<f64>,
    #[serde(default)]
    node_feedforward: f64,
    #[serde(default)]
    dual_feedforward: f64,
    #[serde(default)]
    edge_feedforward: f64,
    #[serde(default)]
    nodes: BTreeMap<String, Block<f64>>,
    #[serde(default)]
    duals: BTreeMap<String, Block<f64>>,
    #[serde(default)]
    edges: BTreeMap<String, Block<f64>>,
    #[serde(default)]
    edge_feedforward_by_edge: BTreeMap<String, f64>,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec {
            node: unit_block(),
            dual: unit_block(),
            edge: unit_block(),
            node_feedforward: 0.0,
            dual_feedforward: 0.0,
            edge_feedforward: 0.0,
            nodes: BTreeMap::new(),
            duals: BTreeMap::new(),
            edges: BTreeMap::new(),
            edge_feedforward_by_edge: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Integration {
    #[serde(default = "Integration::default_dt")]
    pub dt: f64,
    #[serde(default = "Integration::default_t_end")]
    pub t_end: f64,
    #[serde(default = "Integration::default_band")]
    pub band_fraction: f64,
}

impl Integration {
    fn default_dt() -> f64 {
        1e-3
    }
    fn default_t_end() -> f64 {
        100.0
    }
    fn default_band() -> f64 {
        0.02
    }
}

impl Default for Integration {
    fn default() -> Self {
        Integration {
            dt: Self::default_dt(),
            t_end: Self::default_t_end(),
            band_fraction: Self::default_band(),
        }
    }
}

/// Which verifier suites a scenario enables.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verification {
    /// Compare the settled primal point with the centralized reference solver.
    #[serde(default = "yes")]
    pub oracle: bool,
    /// Trajectory cost equals the initial storage.
    #[serde(default = "yes")]
    pub cost_identity: bool,
    /// Pointwise structural identities and lemma slacks.
    #[serde(default = "yes")]
    pub identities: bool,
    /// Number of random perturbations to test optimality against; 0 disables.
    #[serde(default)]
    pub perturbations: usize,
    /// For feed-forward runs, compare against the direct edge feed-forward form.
    #[serde(default = "yes")]
    pub forms: bool,
}

fn yes() -> bool {
    true
}

impl Default for Verification {
    fn default() -> Self {
        Verification {
            oracle: true,
            cost_identity: true,
            identities: true,
            perturbations: 0,
            forms: true,
        }
    }
}

/// The named run is expected to settle slower and ring more than every other run.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub baseline: String,
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub label: String,
    pub system: System64,
    pub initial: SystemState<f64>,
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: Option<String>,
    pub problem: Problem64,
    pub node_ids: Vec<String>,
    pub edge_ids: Vec<String>,
    pub link_ids: Vec<String>,
    pub runs: Vec<RunSpec>,
    pub integration: Integration,
    pub verify: Verification,
    pub comparison: Option<Comparison>,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub csv_stride: usize,
}

impl Scenario {
    /// Ids of the multiplier chains: nodes for consensus, links for coupling.
    pub fn multiplier_ids(&self) -> &[String] {
        match self.problem {
            Problem::Consensus(_) => &self.node_ids,
            Problem::Coupling(_) => &self.link_ids,
        }
    }

    pub fn is_tree(&self) -> bool {
        matches!(self.problem, Problem::Consensus(_)) && self.edge_ids.len() + 1 == self.node_ids.len()
    }

    /// Applies command-line overrides of the integration grid and seed.
    pub fn override_with(&mut self, seed: Option<u64>, dt: Option<f64>, t_end: Option<f64>) -> Result<()> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = dt {
            self.integration.dt = d;
        }
        if let Some(t) = t_end {
            self.integration.t_end = t;
        }
        check_integration(&self.integration)
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Scenario(msg.into())
}

fn check_integration(i: &Integration) -> Result<()> {
    if !(i.dt > 0.0 && i.dt.is_finite()) {
        return Err(invalid(format!("integration.dt must be positive, got {}", i.dt)));
    }
    if !(i.t_end > i.dt && i.t_end.is_finite()) {
        return Err(invalid(format!("integration.t_end must exceed dt, got {}", i.t_end)));
    }
    if !(i.band_fraction > 0.0 && i.band_fraction < 1.0) {
        return Err(invalid("integration.band_fraction must lie in (0, 1)"));
    }
    Ok(())
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::from_toml(&text).map_err(|e| match e {
        CliError::Syntax { message, .. } => CliError::Syntax {
            path: path.to_path_buf(),
            message,
        },
        CliError::Scenario(m) => CliError::Scenario(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn lookup(ids: &[String], id: &str, what: &str) -> Result<usize> {
    ids.iter()
        .position(|n| n == id)
        .ok_or_else(|| invalid(format!("unknown {what} `{id}`")))
}

fn check_keys<V>(map: &BTreeMap<String, V>, ids: &[String], what: &str) -> Result<()> {
    for k in map.keys() {
        lookup(ids, k, what)?;
    }
    Ok(())
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| CliError::Syntax {
            path: PathBuf::from("<scenario>"),
            message: e.to_string(),
        })?;
        raw.build()
    }
}

impl RawScenario {
    fn build(self) -> Result<Scenario> {
        check_integration(&self.integration)?;
        if self.csv_stride == 0 {
            return Err(invalid("csv_stride must be at least 1"));
        }
        if self.runs.is_empty() {
            return Err(invalid("at least one [[run]] is required"));
        }
        let node_ids = self.nodes.clone();
        let edge_ids: Vec<String> = self.edges.iter().map(|e| e.id.clone()).collect();
        let link_ids: Vec<String> = self.links.iter().map(|l| l.id.clone()).collect();
        check_keys(&self.objectives, &node_ids, "node in objectives")?;
        check_keys(&self.constraints, &node_ids, "node in constraints")?;
        let objectives = node_ids
            .iter()
            .map(|n| {
                self.objectives
                    .get(n)
                    .cloned()
                    .ok_or_else(|| invalid(format!("node `{n}` has no objective")))
            })
            .collect::<Result<Vec<_>>>()?;

        let coupling_form = self.runs.iter().map(|r| r.variant == Variant::CouplingInequality);
        let coupling = coupling_form.clone().any(|c| c);
        if coupling && coupling_form.clone().any(|c| !c) {
            return Err(invalid("coupling_inequality runs cannot share a scenario with consensus runs"));
        }

        let problem = if coupling {
            if self.links.is_empty() {
                return Err(invalid("coupling_inequality requires [[links]] with routing and constraints"));
            }
            if !self.constraints.is_empty() || !self.edges.is_empty() {
                return Err(invalid("coupling_inequality takes link constraints only, not local constraints or edges"));
            }
            let mut rows = Vec::with_capacity(self.links.len());
            for link in &self.links {
                check_keys(&link.routing, &node_ids, &format!("node in routing of link `{}`", link.id))?;
                rows.push(node_ids.iter().map(|n| link.routing.get(n).copied().unwrap_or(0.0)).collect());
            }
            let routing = RoutingMatrix::new(Matrix::from_rows(&rows)?)?;
            let cons = self.links.iter().map(|l| l.constraint.clone()).collect();
            Problem::Coupling(CouplingProblem::new(routing, objectives, cons)?)
        } else {
            if !self.links.is_empty() {
                return Err(invalid("[[links]] are only meaningful for coupling_inequality runs"));
            }
            let triples: Vec<(String, String, String)> =
                self.edges.iter().map(|e| (e.id.clone(), e.source.clone(), e.sink.clone())).collect();
            let graph = Graph::new(&node_ids, &triples)?;
            let constraints = node_ids.iter().map(|n| self.constraints.get(n).cloned()).collect();
            let matrix = match &self.coupling_matrix {
                Some(rows) => {
                    let m = Matrix::from_rows(rows)?;
                    if m.rows() != node_ids.len() || m.cols() != edge_ids.len() {
                        return Err(invalid(format!(
                            "coupling_matrix must be {} x {}, got {} x {}",
                            node_ids.len(),
                            edge_ids.len(),
                            m.rows(),
                            m.cols()
                        )));
                    }
                    m
                }
                None => augpd_core::incidence_matrix(&graph).into_matrix(),
            };
            Problem::Consensus(ConsensusProblem::new(matrix, objectives, constraints)?)
        };

        let multiplier_ids = if coupling { &link_ids } else { &node_ids };
        check_keys(&self.initial.theta, &node_ids, "node in initial.theta")?;
        check_keys(&self.initial.lambda, multiplier_ids, "multiplier in initial.lambda")?;
        check_keys(&self.initial.mu, &edge_ids, "edge in initial.mu")?;
        if let Some((k, v)) = self.initial.lambda.iter().find(|(_, v)| **v < 0.0) {
            return Err(invalid(format!("initial.lambda.{k} = {v} must be non-negative")));
        }
        let pick = |map: &BTreeMap<String, f64>, ids: &[String]| -> Vec<f64> {
            ids.iter().map(|i| map.get(i).copied().unwrap_or(0.0)).collect()
        };
        let theta0 = pick(&self.initial.theta, &node_ids);
        let lambda0 = pick(&self.initial.lambda, multiplier_ids);
        let mu0 = pick(&self.initial.mu, &edge_ids);

        let mut runs = Vec::with_capacity(self.runs.len());
        let mut labels = std::collections::BTreeSet::new();
        for run in &self.runs {
            if !labels.insert(run.label.clone()) {
                return Err(invalid(format!("duplicate run label `{}`", run.label)));
            }
            if run.label.is_empty() || run.label.contains(['/', '\\']) {
                return Err(invalid(format!("run label `{}` must be a plain file name", run.label)));
            }
            let profile = run.profile.assemble(&problem, &node_ids, &edge_ids, multiplier_ids)?;
            let system = System::new(problem.clone(), profile, run.variant)
                .map_err(|e| invalid(format!("run `{}`: {e}", run.label)))?;
            let initial = system
                .chain_state(&theta0, &lambda0, &mu0)
                .map_err(|e| invalid(format!("run `{}`: {e}", run.label)))?;
            runs.push(RunSpec {
                label: run.label.clone(),
                system,
                initial,
            });
        }
        if let Some(c) = &self.comparison {
            if !labels.contains(&c.baseline) {
                return Err(invalid(format!("comparison baseline `{}` is not a run label", c.baseline)));
            }
            if runs.len() < 2 {
                return Err(invalid("a comparison needs at least two runs"));
            }
        }
        Ok(Scenario {
            name: self.name,
            description: self.description,
            problem,
            node_ids,
            edge_ids,
            link_ids,
            runs,
            integration: self.integration,
            verify: self.verify,
            comparison: self.comparison,
            seed: self.seed,
            output: self.output,
            csv_stride: self.csv_stride,
        })
    }
}

impl ProfileSpec {
    fn assemble(
        &self,
        problem: &Problem64,
        node_ids: &[String],
        edge_ids: &[String],
        multiplier_ids: &[String],
    ) -> Result<AugmentationProfile<f64>> {
        check_keys(&self.nodes, node_ids, "node in profile.nodes")?;
        check_keys(&self.duals, multiplier_ids, "multiplier in profile.duals")?;
        check_keys(&self.edges, edge_ids, "edge in profile.edges")?;
        check_keys(&self.edge_feedforward_by_edge, edge_ids, "edge in profile.edge_feedforward_by_edge")?;
        let mut p = AugmentationProfile::uniform(
            problem,
            self.node.clone(),
            self.dual.clone(),
            self.edge.clone(),
            self.edge_feedforward,
        );
        for (i, id) in node_ids.iter().enumerate() {
            if let Some(b) = self.nodes.get(id) {
                p.node[i] = b.clone();
            }
            p.node_feedforward[i] = self.node_feedforward;
        }
        for (k, id) in multiplier_ids.iter().enumerate() {
            if let Some(b) = self.duals.get(id) {
                if p.dual[k].order() == 0 {
                    return Err(invalid(format!("profile.duals.{id}: `{id}` has no constraint")));
                }
                p.dual[k] = b.clone();
            }
            p.dual_feedforward[k] = self.dual_feedforward;
        }
        for (j, id) in edge_ids.iter().enumerate() {
            if let Some(b) = self.edges.get(id) {
                p.edge[j] = b.clone();
            }
            if let Some(d) = self.edge_feedforward_by_edge.get(id) {
                p.edge_feedforward[j] = *d;
            }
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = r#"
name = "t"
nodes = ["v1", "v2", "v3"]
edges = [
  { id = "e1", source = "v1", sink = "v2" },
  { id = "e2", source = "v1", sink = "v3" },
  { id = "e3", source = "v2", sink = "v3" },
]
[objectives]
v1 = { kind = "quadratic", center = 0.5, weight = 1.0 }
v2 = { kind = "exponential", weight = 1.0, rate = -0.5 }
v3 = { kind = "neg_log", weight = 1.0, shift = 0.0 }
[initial]
theta = { v1 = 2.0, v2 = 0.5, v3 = 1.5 }
[[run]]
label = "aux"
variant = "consensus"
[run.profile]
node = { b = [0.5, 0.5], a = [2.0] }
"#;

    #[test]
    fn parses_a_minimal_scenario() {
        let s = Scenario::from_toml(TRIANGLE).unwrap();
        assert_eq!(s.runs.len(), 1);
        assert_eq!(s.runs[0].initial.xi, vec![2.0, 0.0, 0.5, 0.0, 1.5, 0.0]);
        assert_eq!(s.integration, Integration::default());
        assert!(!s.is_tree());
    }

    #[test]
    fn rejects_bad_inputs() {
        let negative = TRIANGLE.replace("b = [0.5, 0.5]", "b = [-0.5, 0.5]");
        assert!(matches!(Scenario::from_toml(&negative), Err(CliError::Scenario(_))));

        let unknown = TRIANGLE.replace("[initial]", "colour = 3\n[initial]");
        match Scenario::from_toml(&unknown) {
            Err(CliError::Syntax { message, .. }) => assert!(message.contains("colour")),
            other => panic!("{other:?}"),
        }
        let bad_node = TRIANGLE.replace("v3 = 1.5", "v9 = 1.5");
        assert!(Scenario::from_toml(&bad_node).is_err());
        let neg_lambda = TRIANGLE.replace("[initial]", "[initial]\nlambda = { v1 = -1.0 }");
        assert!(Scenario::from_toml(&neg_lambda).is_err());
        let coupled = TRIANGLE.replace("variant = \"consensus\"", "variant = \"coupling_inequality\"");
        assert!(Scenario::from_toml(&coupled).is_err());
    }

    #[test]
    fn cli_overrides_are_validated() {
        let mut s = Scenario::from_toml(TRIANGLE).unwrap();
        s.override_with(Some(9), Some(0.01), Some(5.0)).unwrap();
        assert_eq!((s.seed, s.integration.dt, s.integration.t_end), (9, 0.01, 5.0));
        assert!(s.override_with(None, Some(-1.0), None).is_err());
    }
}
