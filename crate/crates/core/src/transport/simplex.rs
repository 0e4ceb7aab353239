use nalgebra::DMatrix;

use super::{potentials_on, vertex_solution, TreeAdj, LpError, SolverKind, TransportProblem, TransportSolution};

/// Transportation simplex (MODI) started from the northwest-corner basis.
///
/// The entering cell has the most negative reduced cost; ties, and the
/// leaving cell, go to the lowest flat index `i * k + j`. After a run of
/// degenerate pivots the entering rule falls back to pure Bland (first
/// improving cell) until flow moves again, which rules out cycling.
pub fn solve_simplex(p: &TransportProblem) -> Result<TransportSolution, LpError> {
    p.check_balanced()?;
    let (m, k) = p.cost().shape();
    let cost = p.cost();

    let mut flow = vec![0.0; m * k];
    let mut basic = vec![false; m * k];
    northwest_corner(p, &mut flow, &mut basic);

    let flat: Vec<f64> = (0..m * k).map(|c| cost[(c / k, c % k)]).collect();
    let max_cost = cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let rc_tol = 1e-12 * (1.0 + max_cost);
    let max_pivots = 100 * m * k + 1000;

    let mut tree: Vec<usize> = (0..m * k).filter(|&c| basic[c]).collect();
    let mut stalled = 0usize;
    for pivot in 0..=max_pivots {
        let adj = TreeAdj::new(m, k, &tree);
        let (u, v) = potentials_on(cost, &adj);
        let entering = if stalled >= STALL_LIMIT {
            (0..m * k).find(|&c| !basic[c] && flat[c] - u[c / k] - v[c % k] < -rc_tol)
        } else {
            let mut best = None;
            let mut best_rc = -rc_tol;
            for i in 0..m {
                let row = &flat[i * k..(i + 1) * k];
                for (j, (&c, &vj)) in row.iter().zip(&v).enumerate() {
                    let r = c - u[i] - vj;
                    // strict comparison keeps the lowest index among ties
                    if r < best_rc && !basic[i * k + j] {
                        best_rc = r;
                        best = Some(i * k + j);
                    }
                }
            }
            best
        };
        let Some(enter) = entering else {
            let flows = DMatrix::from_fn(m, k, |i, j| flow[i * k + j]);
            return Ok(vertex_solution(p, flows, &tree, SolverKind::Simplex, pivot));
        };

        let path = tree_path(&adj, m, k, enter / k, enter % k);
        // path[0] shares the entering row; odd positions in the cycle
        // (0, 2, 4, ...) lose flow.
        let leave = path
            .iter()
            .step_by(2)
            .copied()
            .min_by(|&a, &b| flow[a].total_cmp(&flow[b]).then(a.cmp(&b)))
            .expect("cycle has at least one donor cell");
        let theta = flow[leave];
        stalled = if theta > 0.0 { 0 } else { stalled + 1 };
        for (pos, &cell) in path.iter().enumerate() {
            if pos % 2 == 0 {
                flow[cell] = (flow[cell] - theta).max(0.0);
            } else {
                flow[cell] += theta;
            }
        }
        flow[leave] = 0.0;
        flow[enter] = theta;
        basic[leave] = false;
        basic[enter] = true;
        let slot = tree.iter().position(|&c| c == leave).unwrap();
        tree[slot] = enter;
    }
    Err(LpError::CyclingDetected {
        iterations: max_pivots,
    })
}

/// Consecutive zero-step pivots before switching to Bland's entering rule.
const STALL_LIMIT: usize = 8;

/// Northwest-corner initial basis. Always produces exactly `m + k - 1` basic
/// cells, some of which may carry zero flow.
fn northwest_corner(p: &TransportProblem, flow: &mut [f64], basic: &mut [bool]) {
    let (m, k) = p.cost().shape();
    let mut rs: Vec<f64> = p.supply().iter().copied().collect();
    let mut rd: Vec<f64> = p.demand().iter().copied().collect();
    let (mut i, mut j) = (0, 0);
    loop {
        let amount = rs[i].min(rd[j]);
        flow[i * k + j] = amount;
        basic[i * k + j] = true;
        rs[i] -= amount;
        rd[j] -= amount;
        if i == m - 1 && j == k - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == k - 1 || rs[i] <= rd[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
}

/// Cells on the unique tree path from row `row` to column `col`, ordered from
/// the row end.
fn tree_path(adj: &TreeAdj, m: usize, k: usize, row: usize, col: usize) -> Vec<usize> {
    // parent edge for each node reached from the row node
    let mut via = vec![usize::MAX; m + k];
    let mut seen = vec![false; m + k];
    seen[row] = true;
    let target = m + col;
    let mut stack = vec![row];
    while let Some(node) = stack.pop() {
        if node == target {
            break;
        }
        for (cell, other) in adj.edges(node) {
            if !seen[other] {
                seen[other] = true;
                via[other] = cell;
                stack.push(other);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = target;
    while node != row {
        let cell = via[node];
        assert!(cell != usize::MAX, "basis is a spanning tree");
        path.push(cell);
        node = if node < m { m + cell % k } else { cell / k };
    }
    path.reverse();
    path
}
