use augpd_core::{incidence_matrix, weighted_laplacian, Graph};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Random connected graph: a random spanning tree plus extra chords.
fn connected_graph() -> impl Strategy<Value = Graph> {
    (2usize..8)
        .prop_flat_map(|n| {
            let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
            let chords = proptest::collection::vec((0..n, 0..n), 0..6);
            (Just(n), parents, chords, proptest::collection::vec(any::<bool>(), n - 1))
        })
        .prop_map(|(n, parents, chords, flips)| {
            let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
            let mut edges = Vec::new();
            for (child, (parent, flip)) in parents.iter().zip(&flips).enumerate() {
                let (s, t) = if *flip { (child + 1, *parent) } else { (*parent, child + 1) };
                edges.push((format!("t{child}"), nodes[s].clone(), nodes[t].clone()));
            }
            for (k, (s, t)) in chords.into_iter().enumerate() {
                if s != t {
                    edges.push((format!("c{k}"), nodes[s].clone(), nodes[t].clone()));
                }
            }
            Graph::new(&nodes, &edges).unwrap()
        })
}

fn to_nalgebra(m: &augpd_core::Matrix64) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

proptest! {
    #[test]
    fn incidence_rank_is_one_below_node_count(g in connected_graph()) {
        let a = to_nalgebra(incidence_matrix::<f64>(&g).matrix());
        prop_assert_eq!(a.rank(1e-9), g.node_count() - 1);
        // ones vector lies in the left kernel
        let ones = DMatrix::from_element(1, g.node_count(), 1.0);
        prop_assert!((ones * &a).amax() == 0.0);
    }

    #[test]
    fn weighted_laplacian_is_symmetric_psd(g in connected_graph(), seed in 0u64..1000) {
        let d: Vec<f64> = (0..g.edge_count()).map(|j| ((seed + j as u64 * 37) % 11) as f64 / 5.0).collect();
        let l = weighted_laplacian(&incidence_matrix::<f64>(&g), &d).unwrap();
        prop_assert!(l.max_abs_asymmetry() == 0.0);
        let eig = to_nalgebra(&l).symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|v| *v >= -1e-12));
        let rows: Vec<f64> = (0..l.rows()).map(|i| l.row(i).iter().sum()).collect();
        prop_assert!(rows.iter().all(|s| s.abs() < 1e-12));
    }
}
