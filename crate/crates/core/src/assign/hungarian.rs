use super::AssignError;

/// Row-major `rows x cols` matching costs; rows are instances, columns
/// queries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AssignError> {
        if data.len() != rows * cols {
            return Err(AssignError::Shape {
                rows,
                cols,
                actual: data.len(),
            });
        }
        if rows > cols {
            return Err(AssignError::TooManyRows { rows, cols });
        }
        if let Some(i) = data.iter().position(|c| !c.is_finite()) {
            return Err(AssignError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AssignError::Shape {
                rows: rows.len(),
                cols,
                actual: rows.iter().map(Vec::len).sum(),
            });
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Injective map from instance rows to query columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `row_to_col[k]` is the query matched to instance `k`.
    pub row_to_col: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.row_to_col
            .iter()
            .enumerate()
            .map(|(r, &c)| cost.get(r, c))
            .sum()
    }

    /// Instance matched to each query, if any.
    pub fn col_to_row(&self, cols: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; cols];
        for (r, &c) in self.row_to_col.iter().enumerate() {
            out[c] = Some(r);
        }
        out
    }
}

/// Minimum-cost assignment of every row to a distinct column via shortest
/// augmenting paths with dual potentials, `O(rows^2 * cols)`.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 {
        return Assignment { row_to_col: Vec::new() };
    }
    // 1-based bookkeeping; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(r0 - 1, j - 1) - u[r0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    Assignment { row_to_col }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_diagonal_is_chosen() {
        let cost = CostMatrix::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let a = hungarian(&cost);
        assert_eq!(a.row_to_col, vec![0, 1, 2]);
        assert_eq!(a.total_cost(&cost), 0.0);
    }

    #[test]
    fn two_by_two() {
        let cost = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian(&cost);
        assert_eq!(a.row_to_col, vec![0, 1]);
        assert_eq!(a.total_cost(&cost), 2.0);
    }

    #[test]
    fn rectangular_picks_cheapest_columns() {
        let cost = CostMatrix::from_rows(&[vec![5.0, 9.0, 1.0, 4.0], vec![2.0, 8.0, 1.5, 7.0]]).unwrap();
        let a = hungarian(&cost);
        assert_eq!(a.row_to_col, vec![2, 0]);
        assert_eq!(a.col_to_row(4), vec![Some(1), None, Some(0), None]);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert_eq!(
            CostMatrix::new(3, 2, vec![0.0; 6]),
            Err(AssignError::TooManyRows { rows: 3, cols: 2 })
        );
        assert_eq!(
            CostMatrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(AssignError::NonFinite { row: 0, col: 1 })
        );
        assert!(matches!(CostMatrix::new(2, 2, vec![0.0; 3]), Err(AssignError::Shape { .. })));
    }

    #[test]
    fn empty_rows() {
        let cost = CostMatrix::new(0, 3, vec![]).unwrap();
        assert!(hungarian(&cost).row_to_col.is_empty());
    }
}
