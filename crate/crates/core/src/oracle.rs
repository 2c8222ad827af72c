//! Reference solvers used to check the belief-propagation engine.
//!
//! Under the linear-Gaussian measurement model every path row reads
//! `g^T (s_to - s_from) = d + noise` with i.i.d. noise, so the joint MAP over
//! all positions is the unit-weight least-squares solution of the stacked
//! system. [`grid_map`] maximizes the same density by exhaustive search and
//! is only usable for one or two unknown nodes.

use nalgebra::{DMatrix, DVector, RowVector2, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Position;
use crate::network::{NetworkConstraints, NodeId};

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("stacked system is rank deficient (null space dimension {nullity})")]
    RankDeficientSystem { nullity: usize },
    #[error("grid search supports at most 2 unknown nodes, got {0}")]
    TooManyUnknowns(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSolution {
    pub positions: Vec<Position>,
    /// `||A x - b||` at the solution, meters.
    pub residual_norm: f64,
    /// Condition number of `A^T A`.
    pub normal_matrix_condition: f64,
}

/// One scalar row `g^T (s_to - s_from) = rhs`.
#[derive(Debug, Clone, Copy)]
struct Row {
    from: NodeId,
    to: NodeId,
    g: RowVector2<f64>,
    rhs: f64,
}

fn stacked_rows(network: &NetworkConstraints) -> Vec<Row> {
    network
        .edges()
        .iter()
        .flat_map(|(&(from, to), c)| {
            (0..c.geometry.nrows()).map(move |r| Row {
                from,
                to,
                g: c.geometry.row(r).into_owned(),
                rhs: c.rhs[r],
            })
        })
        .collect()
}

/// Column index of every non-anchor node.
fn unknown_columns(network: &NetworkConstraints) -> Vec<Option<usize>> {
    let mut next = 0;
    (0..network.node_count())
        .map(|n| {
            (n != network.anchor()).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Joint least-squares solve of every path row in the network.
pub fn joint_ls_solve(network: &NetworkConstraints) -> Result<JointSolution, OracleError> {
    let cols = unknown_columns(network);
    let unknowns = 2 * (network.node_count() - 1);
    let anchor = network.anchor_position().to_vector();
    let rows = stacked_rows(network);
    if unknowns == 0 {
        return Ok(JointSolution {
            positions: vec![network.anchor_position()],
            residual_norm: 0.0,
            normal_matrix_condition: 1.0,
        });
    }

    let mut a = DMatrix::zeros(rows.len(), unknowns);
    let mut b = DVector::zeros(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let mut rhs = row.rhs;
        for (node, sign) in [(row.to, 1.0), (row.from, -1.0)] {
            match cols[node] {
                Some(c) => {
                    a[(k, 2 * c)] += sign * row.g[0];
                    a[(k, 2 * c + 1)] += sign * row.g[1];
                }
                None => rhs -= sign * row.g.dot(&anchor.transpose()),
            }
        }
        b[k] = rhs;
    }

    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
    if rank < unknowns {
        return Err(OracleError::RankDeficientSystem {
            nullity: unknowns - rank,
        });
    }
    let smin = sv.min();
    let x = svd
        .solve(&b, RANK_TOL * smax)
        .map_err(|_| OracleError::RankDeficientSystem { nullity: 0 })?;
    let residual_norm = (&a * &x - &b).norm();

    let positions = (0..network.node_count())
        .map(|n| match cols[n] {
            Some(c) => Position::new(x[2 * c], x[2 * c + 1]),
            None => network.anchor_position(),
        })
        .collect();
    Ok(JointSolution {
        positions,
        residual_norm,
        normal_matrix_condition: (smax / smin).powi(2),
    })
}

/// Axis-aligned search box shared by every unknown node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub min: Position,
    pub max: Position,
}

impl GridBounds {
    fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        (0..n).map(|k| lo + k as f64 * step).collect()
    }

    fn points(&self, step: f64) -> Vec<Vector2<f64>> {
        let xs = Self::axis(self.min.x, self.max.x, step);
        let ys = Self::axis(self.min.y, self.max.y, step);
        xs.iter()
            .flat_map(|&x| ys.iter().map(move |&y| Vector2::new(x, y)))
            .collect()
    }
}

/// Exhaustive grid maximization of the joint Gaussian density.
pub fn grid_map(network: &NetworkConstraints, grid_step: f64, bounds: GridBounds) -> Result<Vec<Position>, OracleError> {
    let unknown: Vec<NodeId> = (0..network.node_count()).filter(|&n| n != network.anchor()).collect();
    if unknown.len() > 2 {
        return Err(OracleError::TooManyUnknowns(unknown.len()));
    }
    if !(grid_step > 0.0)
        || !(bounds.max.x >= bounds.min.x)
        || !(bounds.max.y >= bounds.min.y)
        || !bounds.min.is_finite()
        || !bounds.max.is_finite()
    {
        return Err(OracleError::InvalidGrid("step must be positive and bounds finite"));
    }
    let rows = stacked_rows(network);
    let points = bounds.points(grid_step);
    let anchor = network.anchor_position().to_vector();

    // negative log-density up to constants: half the sum of squared residuals
    let cost = |assign: &dyn Fn(NodeId) -> Vector2<f64>| -> f64 {
        rows.iter()
            .map(|r| {
                let diff = assign(r.to) - assign(r.from);
                let e = (r.g * diff)[0] - r.rhs;
                e * e
            })
            .sum::<f64>()
            * 0.5
    };

    let best = match unknown.as_slice() {
        [] => vec![],
        &[u] => {
            let (_, p) = points
                .par_iter()
                .map(|p| {
                    let c = cost(&|n| if n == u { *p } else { anchor });
                    (c, *p)
                })
                .reduce(|| (f64::INFINITY, Vector2::zeros()), pick_lower);
            vec![(u, p)]
        }
        &[u, v] => {
            let (_, pu, pv) = points
                .par_iter()
                .map(|pu| {
                    points
                        .iter()
                        .map(|pv| {
                            let c = cost(&|n| {
                                if n == u {
                                    *pu
                                } else if n == v {
                                    *pv
                                } else {
                                    anchor
                                }
                            });
                            (c, *pu, *pv)
                        })
                        .fold((f64::INFINITY, Vector2::zeros(), Vector2::zeros()), pick_lower_pair)
                })
                .reduce(|| (f64::INFINITY, Vector2::zeros(), Vector2::zeros()), pick_lower_pair);
            vec![(u, pu), (v, pv)]
        }
        _ => unreachable!("checked above"),
    };

    let mut positions = vec![network.anchor_position(); network.node_count()];
    for (n, p) in best {
        positions[n] = Position::from(p);
    }
    Ok(positions)
}

// Ties break toward the lexicographically smaller point so the parallel
// reduction is deterministic.
fn pick_lower(a: (f64, Vector2<f64>), b: (f64, Vector2<f64>)) -> (f64, Vector2<f64>) {
    if b.0 < a.0 || (b.0 == a.0 && (b.1.x, b.1.y) < (a.1.x, a.1.y)) {
        b
    } else {
        a
    }
}

fn pick_lower_pair(
    a: (f64, Vector2<f64>, Vector2<f64>),
    b: (f64, Vector2<f64>, Vector2<f64>),
) -> (f64, Vector2<f64>, Vector2<f64>) {
    let key = |t: &(f64, Vector2<f64>, Vector2<f64>)| (t.1.x, t.1.y, t.2.x, t.2.y);
    if b.0 < a.0 || (b.0 == a.0 && key(&b) < key(&a)) {
        b
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EdgeConstraint, GeometryTolerances, DEFAULT_RANK_TOL};
    use crate::sim::{build_scenario, GeneratorOptions, NoiseModel, ScenarioSpec};
    use nalgebra::MatrixXx2;
    use std::collections::BTreeMap;

    fn single_row_network() -> NetworkConstraints {
        let c = |rhs: f64| {
            EdgeConstraint::from_rows(
                MatrixXx2::from_row_slice(&[1.0, 0.0]),
                DVector::from_vec(vec![rhs]),
                1,
                DEFAULT_RANK_TOL,
            )
            .unwrap()
        };
        let mut edges = BTreeMap::new();
        edges.insert((0, 1), c(2.0));
        edges.insert((1, 0), c(-2.0));
        NetworkConstraints::new(2, 0, Position::ORIGIN, edges).unwrap()
    }

    #[test]
    fn noiseless_preset_is_recovered() {
        let s = build_scenario(&ScenarioSpec::PaperPreset, &GeneratorOptions::default(), NoiseModel::NONE, 4).unwrap();
        let net = s.noiseless_constraints(&GeometryTolerances::default()).unwrap();
        let sol = joint_ls_solve(&net).unwrap();
        for (p, t) in sol.positions.iter().zip(&s.true_positions) {
            assert!(p.distance_to(t) < 1e-9, "{p:?} vs {t:?}");
        }
        assert!(sol.residual_norm < 1e-9);
        assert!(sol.normal_matrix_condition >= 1.0);
    }

    #[test]
    fn single_path_edge_is_rank_deficient() {
        let net = single_row_network();
        assert_eq!(joint_ls_solve(&net), Err(OracleError::RankDeficientSystem { nullity: 1 }));
    }

    #[test]
    fn noisy_residual_is_positive() {
        let s = build_scenario(
            &ScenarioSpec::PaperPreset,
            &GeneratorOptions::default(),
            NoiseModel::reference(),
            4,
        )
        .unwrap();
        let net = s.noisy_constraints(&GeometryTolerances::default(), &mut crate::sim::trial_rng(4, 0)).unwrap();
        assert!(joint_ls_solve(&net).unwrap().residual_norm > 1e-6);
    }

    #[test]
    fn grid_rejects_large_networks() {
        let s = build_scenario(&ScenarioSpec::PaperPreset, &GeneratorOptions::default(), NoiseModel::NONE, 4).unwrap();
        let net = s.noiseless_constraints(&GeometryTolerances::default()).unwrap();
        let bounds = GridBounds {
            min: Position::new(-10.0, -10.0),
            max: Position::new(10.0, 10.0),
        };
        assert_eq!(grid_map(&net, 0.5, bounds), Err(OracleError::TooManyUnknowns(4)));
        assert!(matches!(grid_map(&single_row_network(), 0.0, bounds), Err(OracleError::InvalidGrid(_))));
    }
}
