//! Directed network topology and the incidence/Laplacian algebra coupling
//! node subsystems to edge subsystems.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub id: String,
    pub source: usize,
    pub sink: usize,
}

/// A directed, weakly connected graph without self-loops. String ids are
/// mapped once to dense indices in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    nodes: Vec<String>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
}

impl Graph {
    /// `edges` holds `(edge id, source id, sink id)` triples.
    pub fn new<S: AsRef<str>>(nodes: &[S], edges: &[(S, S, S)]) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.as_ref().to_string(), i).is_some() {
                return Err(Error::Validation(format!("duplicate node id `{}`", n.as_ref())));
            }
        }
        if nodes.is_empty() {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(edges.len());
        for (id, src, dst) in edges {
            let id = id.as_ref();
            if !seen.insert(id.to_string()) {
                return Err(Error::Validation(format!("duplicate edge id `{id}`")));
            }
            let lookup = |n: &str| {
                index
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("edge `{id}` references unknown node `{n}`")))
            };
            let (source, sink) = (lookup(src.as_ref())?, lookup(dst.as_ref())?);
            if source == sink {
                return Err(Error::Validation(format!("edge `{id}` is a self-loop")));
            }
            out.push(Edge {
                id: id.to_string(),
                source,
                sink,
            });
        }
        let g = Graph {
            nodes: nodes.iter().map(|n| n.as_ref().to_string()).collect(),
            edges: out,
            index,
        };
        if !g.is_connected() {
            return Err(Error::Validation("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_ids(&self) -> Vec<String> {
        self.edges.iter().map(|e| e.id.clone()).collect()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Connected with `|E| = |V| - 1`, so the incidence matrix has a trivial kernel.
    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.nodes.len()
    }

    fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.source].push(e.sink);
            adj[e.sink].push(e.source);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// `|V| × |E|` matrix with `+1` at an edge's sink and `-1` at its source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncidenceMatrix<T>(Matrix<T>);

impl<T: Scalar> IncidenceMatrix<T> {
    /// Checks the ±1 column structure of an externally supplied matrix.
    pub fn try_from_matrix(m: Matrix<T>) -> Result<Self> {
        for j in 0..m.cols() {
            let col = m.column(j);
            let plus = col.iter().filter(|v| **v == T::one()).count();
            let minus = col.iter().filter(|v| **v == -T::one()).count();
            let zero = col.iter().filter(|v| **v == T::zero()).count();
            if plus != 1 || minus != 1 || zero + 2 != col.len() {
                return Err(Error::Validation(format!(
                    "column {j} is not an incidence column (one +1, one -1, rest 0)"
                )));
            }
        }
        Ok(IncidenceMatrix(m))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }
}

impl<T> AsRef<Matrix<T>> for IncidenceMatrix<T> {
    fn as_ref(&self) -> &Matrix<T> {
        &self.0
    }
}

pub fn incidence_matrix<T: Scalar>(g: &Graph) -> IncidenceMatrix<T> {
    let mut m = Matrix::zeros(g.node_count(), g.edge_count());
    for (j, e) in g.edges().iter().enumerate() {
        m[(e.sink, j)] = T::one();
        m[(e.source, j)] = -T::one();
    }
    IncidenceMatrix(m)
}

/// `A diag(d) Aᵀ`. Accepts any `|V| × |E|` coupling matrix, not only incidence ones.
pub fn weighted_laplacian<T: Scalar>(a: &impl AsRef<Matrix<T>>, d: &[T]) -> Result<Matrix<T>> {
    let a = a.as_ref();
    if d.len() != a.cols() {
        return Err(Error::dim("laplacian edge weights", a.cols(), d.len()));
    }
    if let Some(j) = d.iter().position(|w| *w < T::zero() || !w.is_finite()) {
        return Err(Error::Validation(format!("edge weight {j} must be non-negative")));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for (j, w) in d.iter().enumerate() {
        if *w == T::zero() {
            continue;
        }
        for p in 0..n {
            let ap = a[(p, j)];
            if ap == T::zero() {
                continue;
            }
            for q in 0..n {
                l[(p, q)] += *w * ap * a[(q, j)];
            }
        }
    }
    Ok(l)
}

/// Non-negative `|links| × |V|` matrix mapping node rates to link loads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingMatrix<T>(Matrix<T>);

impl<T: Scalar> RoutingMatrix<T> {
    pub fn new(m: Matrix<T>) -> Result<Self> {
        for i in 0..m.rows() {
            let row = m.row(i);
            if row.iter().any(|v| *v < T::zero() || !v.is_finite()) {
                return Err(Error::Validation(format!("routing row {i} has a negative entry")));
            }
            if row.iter().all(|v| *v == T::zero()) {
                return Err(Error::Validation(format!("routing row {i} is empty")));
            }
        }
        Ok(RoutingMatrix(m))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }
}
