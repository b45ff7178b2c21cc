//! Minimum-cost bipartite assignment with a canonical tie-break.

use crate::error::{Error, Result};

/// Matched `(proposal, gt)` pairs sorted by proposal, plus the proposals
/// left unmatched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    /// Sum of the matched costs, added in pair order.
    pub total: f64,
}

/// Solution of a rectangular problem with `rows ≤ cols`: the column of
/// each row and dual potentials with `cost − u − v ≥ 0`, equality on
/// matched cells.
struct Solved {
    col_of_row: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian method on `a` (`n × m`, `n ≤ m`).
fn solve(a: &[Vec<f64>], n: usize, m: usize) -> Solved {
    debug_assert!(n <= m);
    // 1-based potentials and matching, index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    Solved {
        col_of_row,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

/// Optimal `(proposal, gt)` pairs of the sub-problem restricted to the given
/// proposals and gts, matching `min(|props|, |gts|)` pairs.
fn optimal_pairs(
    cost: &[Vec<f64>],
    props: &[usize],
    gts: &[usize],
) -> (Vec<(usize, usize)>, Solved, bool) {
    let transposed = props.len() < gts.len();
    let (rows, cols) = if transposed {
        (props, gts)
    } else {
        (gts, props)
    };
    let a: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| {
            cols.iter()
                .map(|&c| if transposed { cost[r][c] } else { cost[c][r] })
                .collect()
        })
        .collect();
    let solved = solve(&a, rows.len(), cols.len());
    let pairs = solved
        .col_of_row
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            if transposed {
                (rows[r], cols[c])
            } else {
                (cols[c], rows[r])
            }
        })
        .collect();
    (pairs, solved, transposed)
}

fn canonical_total(cost: &[Vec<f64>], pairs: &mut [(usize, usize)]) -> f64 {
    pairs.sort_unstable();
    pairs.iter().fold(0.0, |s, &(p, g)| s + cost[p][g])
}

/// Minimum-cost assignment of proposals (rows of `cost`) to gts (columns).
///
/// `min(N, M)` pairs are matched. Among all optimal assignments, the one
/// whose pair list (sorted by proposal) is lexicographically smallest is
/// returned, so the result does not depend on solver internals.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("hungarian", "cost rows differ in length"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Contract("hungarian needs finite costs".into()));
    }
    if n == 0 || m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
            total: 0.0,
        });
    }
    let all_p: Vec<usize> = (0..n).collect();
    let all_g: Vec<usize> = (0..m).collect();
    let (mut best, solved, transposed) = optimal_pairs(cost, &all_p, &all_g);
    let opt = canonical_total(cost, &mut best);
    let scale = cost.iter().flatten().fold(1.0f64, |s, c| s.max(c.abs()));
    let tol = 1e-9 * scale * (n.min(m) as f64);

    // Every optimal assignment uses only cells that are tight under the
    // optimal duals, so only those are candidates.
    let tight = |p: usize, g: usize| {
        let reduced = if transposed {
            cost[p][g] - solved.u[p] - solved.v[g]
        } else {
            cost[p][g] - solved.u[g] - solved.v[p]
        };
        reduced <= tol
    };

    let k = n.min(m);
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut fixed_cost = 0.0;
    let mut free_g: Vec<usize> = all_g.clone();
    for p in 0..n {
        if pairs.len() == k {
            break;
        }
        let mut chosen = None;
        for &g in &free_g {
            if !tight(p, g) {
                continue;
            }
            let rest_p: Vec<usize> = (p + 1..n).collect();
            let rest_g: Vec<usize> = free_g.iter().copied().filter(|&x| x != g).collect();
            let need = k - pairs.len() - 1;
            if rest_p.len().min(rest_g.len()) < need {
                continue;
            }
            let rest_total = if need == 0 {
                0.0
            } else {
                let (mut rest, _, _) = optimal_pairs(cost, &rest_p, &rest_g);
                if rest.len() != need {
                    continue;
                }
                canonical_total(cost, &mut rest)
            };
            if fixed_cost + cost[p][g] + rest_total <= opt + tol {
                chosen = Some(g);
                break;
            }
        }
        if let Some(g) = chosen {
            pairs.push((p, g));
            fixed_cost += cost[p][g];
            free_g.retain(|&x| x != g);
        }
    }
    if pairs.len() != k {
        // Only reachable if rounding defeats the tolerance; fall back to
        // the solver's own optimum.
        pairs = best;
    }
    let total = canonical_total(cost, &mut pairs);
    let matched: Vec<bool> = {
        let mut v = vec![false; n];
        for &(p, _) in &pairs {
            v[p] = true;
        }
        v
    };
    Ok(Assignment {
        unmatched: (0..n).filter(|&p| !matched[p]).collect(),
        pairs,
        total,
    })
}
