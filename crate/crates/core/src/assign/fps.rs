use super::AssignError;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Maps coordinates onto the unit cube: `(p - min) / max_extent`.
pub fn normalize_unit_cube(coords: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coords {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let extent = if extent > 0.0 { extent } else { 1.0 };
    coords
        .iter()
        .map(|p| std::array::from_fn(|a| (p[a] - lo[a]) / extent))
        .collect()
}

/// Greedy farthest point sampling. The first pick is `start`; every later
/// pick maximizes the distance to its nearest already-selected point, with
/// ties going to the smallest index.
pub fn farthest_point_sampling(coords: &[[f64; 3]], n: usize, start: usize) -> Result<Vec<usize>, AssignError> {
    let m = coords.len();
    if n == 0 || n > m {
        return Err(AssignError::TooManySamples {
            requested: n,
            available: m,
        });
    }
    if start >= m {
        return Err(AssignError::BadStart { start, available: m });
    }
    if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(AssignError::NonFiniteCoord(i));
    }
    let mut selected = vec![false; m];
    let mut nearest = vec![f64::INFINITY; m];
    let mut picks = Vec::with_capacity(n);
    let mut current = start;
    loop {
        selected[current] = true;
        picks.push(current);
        if picks.len() == n {
            return Ok(picks);
        }
        let anchor = coords[current];
        let mut best: Option<usize> = None;
        for j in 0..m {
            if selected[j] {
                continue;
            }
            let d = dist2(&coords[j], &anchor);
            if d < nearest[j] {
                nearest[j] = d;
            }
            if best.map_or(true, |b| nearest[j] > nearest[b]) {
                best = Some(j);
            }
        }
        current = best.expect("n <= m leaves an unselected point");
    }
}
