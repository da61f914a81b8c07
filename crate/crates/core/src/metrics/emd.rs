//! Exact earth mover's distance via the transportation simplex.
//!
//! Start from a northwest-corner basis (always `m + n - 1` cells forming a
//! spanning tree, degenerate zeros included), price with row/column
//! potentials, and pivot around the tree cycle. Bland's rule on both the
//! entering and leaving choice rules out cycling under degeneracy.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-9;
const PRICE_TOL: f64 = 1e-12;

/// Optimal transport cost and plan (`plan[i][j]` mass from `a_i` to `b_j`).
#[derive(Clone, Debug, PartialEq)]
pub struct Transport {
    pub cost: f64,
    pub plan: Vec<Vec<f64>>,
}

fn check_weights(w: &[f64], side: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid(format!("emd: {side} weights empty")));
    }
    if let Some(x) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::invalid(format!("emd: {side} weight {x} is negative or non-finite")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(format!("emd: {side} weights sum to {s}, expected 1")));
    }
    Ok(())
}

pub fn emd(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<f64> {
    Ok(emd_with_plan(a, b, cost)?.cost)
}

pub fn emd_with_plan(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<Transport> {
    check_weights(a, "source")?;
    check_weights(b, "target")?;
    let (m, n) = (a.len(), b.len());
    if cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(format!("emd: cost matrix must be {m}x{n}")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::invalid("emd: cost entries must be finite and non-negative"));
    }

    let mut x = vec![vec![0.0; n]; m];
    let mut basic = vec![vec![false; n]; m];

    // northwest corner; when row and column run out together only the row
    // advances, so the next cell enters as a degenerate zero
    let (mut supply, mut demand) = (a.to_vec(), b.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let q = supply[i].min(demand[j]);
        x[i][j] = q;
        basic[i][j] = true;
        supply[i] -= q;
        demand[j] -= q;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || supply[i] <= demand[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    // clamp tiny negatives left by repeated subtraction
    for row in x.iter_mut() {
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    let max_iter = 50 * (m + n) * (m * n).max(1);
    for _ in 0..max_iter {
        let (u, v) = potentials(&basic, cost, m, n);
        let entering = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .find(|&(i, j)| !basic[i][j] && cost[i][j] - u[i] - v[j] < -PRICE_TOL);
        let Some((ei, ej)) = entering else {
            let total = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| x[i][j] * cost[i][j]).sum();
            return Ok(Transport { cost: total, plan: x });
        };
        let path = tree_path(&basic, m, n, ej, ei);
        // path runs column ej -> ... -> row ei; odd edges lose mass
        let minus: Vec<(usize, usize)> = path.iter().step_by(2).copied().collect();
        let theta = minus.iter().map(|&(i, j)| x[i][j]).fold(f64::INFINITY, f64::min);
        let leave = *minus
            .iter()
            .filter(|&&(i, j)| x[i][j] == theta)
            .min()
            .expect("cycle has a minus cell");
        for (k, &(i, j)) in path.iter().enumerate() {
            if k % 2 == 0 {
                x[i][j] -= theta;
            } else {
                x[i][j] += theta;
            }
        }
        x[ei][ej] += theta;
        x[leave.0][leave.1] = 0.0;
        basic[ei][ej] = true;
        basic[leave.0][leave.1] = false;
    }
    Err(Error::Numeric("emd: simplex iteration limit reached".into()))
}

/// Solves `u_i + v_j = c_ij` on the basis tree with `u_0 = 0`.
fn potentials(basic: &[Vec<bool>], cost: &[Vec<f64>], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    let mut queue = VecDeque::from([(true, 0usize)]);
    while let Some((is_row, k)) = queue.pop_front() {
        if is_row {
            for j in 0..n {
                if basic[k][j] && v[j].is_nan() {
                    v[j] = cost[k][j] - u[k];
                    queue.push_back((false, j));
                }
            }
        } else {
            for i in 0..m {
                if basic[i][k] && u[i].is_nan() {
                    u[i] = cost[i][k] - v[k];
                    queue.push_back((true, i));
                }
            }
        }
    }
    (u, v)
}

/// Basic cells on the tree path from column `from_col` to row `to_row`.
fn tree_path(basic: &[Vec<bool>], m: usize, n: usize, from_col: usize, to_row: usize) -> Vec<(usize, usize)> {
    // nodes: rows 0..m, columns m..m+n
    let mut parent: Vec<Option<usize>> = vec![None; m + n];
    let start = m + from_col;
    let mut seen = vec![false; m + n];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == to_row {
            break;
        }
        let next: Vec<usize> = if node < m {
            (0..n).filter(|&j| basic[node][j]).map(|j| m + j).collect()
        } else {
            (0..m).filter(|&i| basic[i][node - m]).collect()
        };
        for nb in next {
            if !seen[nb] {
                seen[nb] = true;
                parent[nb] = Some(node);
                queue.push_back(nb);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = to_row;
    while node != start {
        let p = parent[node].expect("basis is a spanning tree");
        let cell = if node < m { (node, p - m) } else { (p, node - m) };
        path.push(cell);
        node = p;
    }
    path.reverse();
    path
}
