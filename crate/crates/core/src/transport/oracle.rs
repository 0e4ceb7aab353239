use nalgebra::DMatrix;

use super::{vertex_solution, LpError, SolverKind, TransportProblem, TransportSolution};

pub const ORACLE_MAX_CELLS: usize = 16;

/// Exact optimum by enumerating every spanning-tree basis of the `m x k`
/// bipartite graph, solving its triangular system and keeping the cheapest
/// feasible one. Exponential; only for `m * k <= 16`.
pub fn solve_oracle(p: &TransportProblem) -> Result<TransportSolution, LpError> {
    p.check_balanced()?;
    let (m, k) = p.cost().shape();
    let n = m * k;
    if n > ORACLE_MAX_CELLS {
        return Err(LpError::InstanceTooLarge {
            cells: n,
            max: ORACLE_MAX_CELLS,
        });
    }
    let size = m + k - 1;
    let feas_tol = 1e-12 * p.total_mass();

    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    let mut visited = 0usize;
    let mut combo: Vec<usize> = (0..size).collect();
    loop {
        if is_spanning_tree(m, k, &combo) {
            visited += 1;
            let flows = tree_flows(p, &combo);
            if flows.iter().all(|&f| f >= -feas_tol) {
                let obj: f64 = combo
                    .iter()
                    .zip(&flows)
                    .map(|(&c, f)| p.cost()[(c / k, c % k)] * f.max(0.0))
                    .sum();
                if best.as_ref().is_none_or(|(b, _, _)| obj < *b - 1e-15) {
                    best = Some((obj, combo.clone(), flows));
                }
            }
        }
        if !next_combination(&mut combo, n) {
            break;
        }
    }
    let (_, tree, tree_flow) = best.expect("a balanced problem has a feasible basis");
    let mut flows = DMatrix::zeros(m, k);
    for (&c, f) in tree.iter().zip(&tree_flow) {
        flows[(c / k, c % k)] = f.max(0.0);
    }
    Ok(vertex_solution(p, flows, &tree, SolverKind::Oracle, visited))
}

fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let r = combo.len();
    let mut i = r;
    while i > 0 {
        i -= 1;
        if combo[i] < n - r + i {
            combo[i] += 1;
            for t in i + 1..r {
                combo[t] = combo[t - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn is_spanning_tree(m: usize, k: usize, cells: &[usize]) -> bool {
    let mut parent: Vec<usize> = (0..m + k).collect();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    for &c in cells {
        let (a, b) = (find(&mut parent, c / k), find(&mut parent, m + c % k));
        if a == b {
            return false;
        }
        parent[a] = b;
    }
    // m + k - 1 edges without a cycle on m + k nodes span the graph
    true
}

/// Flows on the cells of a spanning tree, by repeatedly peeling leaves.
fn tree_flows(p: &TransportProblem, cells: &[usize]) -> Vec<f64> {
    let (m, k) = p.cost().shape();
    let mut rs: Vec<f64> = p.supply().iter().copied().collect();
    let mut rd: Vec<f64> = p.demand().iter().copied().collect();
    let mut deg = vec![0usize; m + k];
    for &c in cells {
        deg[c / k] += 1;
        deg[m + c % k] += 1;
    }
    let mut flows = vec![0.0; cells.len()];
    let mut done = vec![false; cells.len()];
    for _ in 0..cells.len() {
        let (pos, from_row) = cells
            .iter()
            .enumerate()
            .filter(|(t, _)| !done[*t])
            .find_map(|(t, &c)| {
                if deg[c / k] == 1 {
                    Some((t, true))
                } else if deg[m + c % k] == 1 {
                    Some((t, false))
                } else {
                    None
                }
            })
            .expect("a tree always has a leaf");
        let c = cells[pos];
        let (i, j) = (c / k, c % k);
        let f = if from_row { rs[i] } else { rd[j] };
        flows[pos] = f;
        rs[i] -= f;
        rd[j] -= f;
        deg[i] -= 1;
        deg[m + j] -= 1;
        done[pos] = true;
    }
    flows
}
