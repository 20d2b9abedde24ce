//! Sparse undirected graphs in CSR form.
//!
//! Graphs are symmetrized on ingest and never store self-loops; transition
//! builders add self-loops themselves so one graph serves every transition
//! kind.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::oracle::DenseMatrix;

/// Node count cap for dense conversions used by oracle-side checks.
pub const DENSE_ORACLE_CAP: usize = 256;

/// Immutable sparse adjacency structure over `num_nodes` nodes.
///
/// Column indices are strictly increasing within each row, so there are no
/// duplicate edges, and the adjacency is symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    edge_values: Option<Vec<f64>>,
}

impl Graph {
    /// Build a graph from undirected edge pairs.
    ///
    /// Edges are deduplicated and symmetrized; self-loop pairs are dropped.
    pub fn from_undirected_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) out of range for {num_nodes} nodes"
                )));
            }
            if a == b {
                continue;
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for neighbors in &mut adjacency {
            neighbors.sort_unstable();
            neighbors.dedup();
            col_indices.extend_from_slice(neighbors);
            row_offsets.push(col_indices.len());
        }
        Ok(Graph {
            num_nodes,
            row_offsets,
            col_indices,
            edge_values: None,
        })
    }

    /// Build a graph from raw CSR arrays, validating every invariant.
    pub fn from_csr(
        num_nodes: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
    ) -> Result<Graph> {
        if row_offsets.len() != num_nodes + 1 {
            return Err(Error::InvalidInput(format!(
                "row_offsets length {} != num_nodes + 1 = {}",
                row_offsets.len(),
                num_nodes + 1
            )));
        }
        if row_offsets[0] != 0 || *row_offsets.last().unwrap() != col_indices.len() {
            return Err(Error::InvalidInput(
                "row_offsets must start at 0 and end at the edge count".into(),
            ));
        }
        for w in row_offsets.windows(2) {
            if w[1] < w[0] {
                return Err(Error::InvalidInput("row_offsets must be non-decreasing".into()));
            }
        }
        for row in 0..num_nodes {
            let cols = &col_indices[row_offsets[row]..row_offsets[row + 1]];
            for pair in cols.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::InvalidInput(format!(
                        "columns in row {row} must be strictly increasing"
                    )));
                }
            }
            for &c in cols {
                if c >= num_nodes {
                    return Err(Error::InvalidInput(format!(
                        "column {c} out of range in row {row}"
                    )));
                }
            }
        }
        Ok(Graph {
            num_nodes,
            row_offsets,
            col_indices,
            edge_values: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of directed CSR entries (2x the undirected edge count).
    pub fn num_edges(&self) -> usize {
        self.col_indices.len()
    }

    pub fn undirected_edge_count(&self) -> usize {
        self.col_indices.len() / 2
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[node]..self.row_offsets[node + 1]]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Neighbor count per node; self-loops are never stored so none are counted.
    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes)
            .map(|i| self.row_offsets[i + 1] - self.row_offsets[i])
            .collect()
    }

    /// Undirected edge list with each edge reported once as (min, max).
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.undirected_edge_count());
        for i in 0..self.num_nodes {
            for &j in self.neighbors(i) {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    /// Dense adjacency matrix, refused above the oracle cap.
    pub fn to_dense(&self) -> Result<DenseMatrix> {
        self.to_dense_with_cap(DENSE_ORACLE_CAP)
    }

    pub fn to_dense_with_cap(&self, cap: usize) -> Result<DenseMatrix> {
        if self.num_nodes > cap {
            return Err(Error::InvalidInput(format!(
                "dense conversion refused: {} nodes exceeds cap {}",
                self.num_nodes, cap
            )));
        }
        let mut dense = DenseMatrix::zeros(self.num_nodes, self.num_nodes);
        for i in 0..self.num_nodes {
            for (off, &j) in self.neighbors(i).iter().enumerate() {
                let w = match &self.edge_values {
                    Some(values) => values[self.row_offsets[i] + off],
                    None => 1.0,
                };
                dense.set(i, j, w);
            }
        }
        Ok(dense)
    }
}

/// Parse an edge-list file: whitespace-separated 0-based `src dst` pairs,
/// one per line, `#` comment lines and blank lines skipped.
///
/// The result is deduplicated and symmetrized; self-loop lines are dropped
/// because transition builders add self-loops themselves.
pub fn load_edge_list(path: impl AsRef<Path>, num_nodes: usize) -> Result<Graph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let display = path.display().to_string();
    let mut edges = Vec::new();
    let mut saw_data = false;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                msg: format!("expected two node ids, found {} fields", fields.len()),
            });
        }
        let mut pair = [0usize; 2];
        for (slot, field) in pair.iter_mut().zip(&fields) {
            *slot = field.parse::<usize>().map_err(|_| Error::Parse {
                path: display.clone(),
                line: line_no,
                msg: format!("`{field}` is not a valid node id"),
            })?;
        }
        let (src, dst) = (pair[0], pair[1]);
        if src >= num_nodes || dst >= num_nodes {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                msg: format!("node id out of range for {num_nodes} nodes"),
            });
        }
        saw_data = true;
        edges.push((src, dst));
    }
    if !saw_data {
        return Err(Error::Parse {
            path: display,
            line: 0,
            msg: "edge list contains no edges".into(),
        });
    }
    Graph::from_undirected_edges(num_nodes, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_line_is_symmetrized() {
        let f = write_temp("0\t1\n");
        let g = load_edge_list(f.path(), 2).unwrap();
        assert!(g.has_edge(0, 1));
        assert!(g.has_edge(1, 0));
        assert_eq!(g.num_edges(), 2);
    }

    #[test]
    fn self_loop_lines_are_stripped() {
        let f = write_temp("0 0\n");
        let g = load_edge_list(f.path(), 1).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.num_nodes(), 1);
    }

    #[test]
    fn duplicate_lines_collapse() {
        let f = write_temp("0 1\n0 1\n1 0\n");
        let g = load_edge_list(f.path(), 2).unwrap();
        let single = load_edge_list(write_temp("0 1\n").path(), 2).unwrap();
        assert_eq!(g, single);
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let f = write_temp("# header\n\n0 1\n# trailing\n1 2\n");
        let g = load_edge_list(f.path(), 3).unwrap();
        assert_eq!(g.undirected_edge_count(), 2);
    }

    #[test]
    fn out_of_range_reports_line() {
        let f = write_temp("0 1\n5 1\n");
        let err = load_edge_list(f.path(), 3).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line() {
        let f = write_temp("0 1\nx y\n");
        let err = load_edge_list(f.path(), 3).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_errors() {
        let f = write_temp("# only a comment\n");
        assert!(load_edge_list(f.path(), 3).is_err());
    }

    #[test]
    fn degrees_basics() {
        let g = Graph::from_undirected_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(g.degrees(), vec![1, 1]);

        let k3 = Graph::from_undirected_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        assert_eq!(k3.degrees(), vec![2, 2, 2]);

        let iso = Graph::from_undirected_edges(3, &[(0, 1)]).unwrap();
        assert_eq!(iso.degrees()[2], 0);
    }

    #[test]
    fn to_dense_matches_structure() {
        let g = Graph::from_undirected_edges(2, &[(0, 1)]).unwrap();
        let d = g.to_dense().unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(1, 0), 1.0);
        assert_eq!(d.get(1, 1), 0.0);

        let empty = Graph::from_undirected_edges(3, &[]).unwrap();
        let d = empty.to_dense().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn to_dense_refuses_over_cap() {
        let g = Graph::from_undirected_edges(4, &[(0, 1)]).unwrap();
        assert!(g.to_dense_with_cap(3).is_err());
    }

    #[test]
    fn dense_round_trip_is_identity() {
        let g = Graph::from_undirected_edges(5, &[(0, 1), (1, 3), (2, 4), (0, 4)]).unwrap();
        let d = g.to_dense().unwrap();
        let mut edges = Vec::new();
        for i in 0..5 {
            for j in (i + 1)..5 {
                if d.get(i, j) != 0.0 {
                    edges.push((i, j));
                }
            }
        }
        let back = Graph::from_undirected_edges(5, &edges).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn from_csr_rejects_bad_rows() {
        assert!(Graph::from_csr(2, vec![0, 2, 1], vec![1, 0]).is_err());
        assert!(Graph::from_csr(2, vec![0, 1, 2], vec![1, 5]).is_err());
        assert!(Graph::from_csr(2, vec![0, 1], vec![1]).is_err());
    }

    proptest! {
        #[test]
        fn ingest_is_symmetric_and_degree_sum_matches(
            edges in proptest::collection::vec((0usize..12, 0usize..12), 0..40)
        ) {
            let g = Graph::from_undirected_edges(12, &edges).unwrap();
            for i in 0..12 {
                for &j in g.neighbors(i) {
                    prop_assert!(g.has_edge(j, i));
                }
            }
            let degree_sum: usize = g.degrees().iter().sum();
            prop_assert_eq!(degree_sum, 2 * g.undirected_edge_count());
        }

        #[test]
        fn reingesting_exported_edges_is_idempotent(
            edges in proptest::collection::vec((0usize..10, 0usize..10), 1..30)
        ) {
            let g = Graph::from_undirected_edges(10, &edges).unwrap();
            let again = Graph::from_undirected_edges(10, &g.undirected_edges()).unwrap();
            prop_assert_eq!(g, again);
        }
    }
}
