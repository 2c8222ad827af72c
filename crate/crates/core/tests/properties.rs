//! Property tests for the geometry and fusion invariants.

use std::f64::consts::PI;

use nalgebra::{DVector, Matrix2, MatrixXx2, Vector2};
use proptest::prelude::*;

use nlos_bp::bp::{compute_message, fuse_messages, BeliefMessage, GaussianBelief};
use nlos_bp::experiments::{cdf_steps, format_sig6};
use nlos_bp::geometry::{steering_vector, DEFAULT_EPS_SING, DEFAULT_RANK_TOL};
use nlos_bp::sim::{mirror_path_measurement, Reflector};
use nlos_bp::{EdgeConstraint, Position};

fn spd() -> impl Strategy<Value = Matrix2<f64>> {
    (0.05f64..50.0, 0.05f64..50.0, 0.0..PI).prop_map(|(a, b, phi)| {
        let (c, s) = (phi.cos(), phi.sin());
        let r = Matrix2::new(c, -s, s, c);
        r * Matrix2::new(a, 0.0, 0.0, b) * r.transpose()
    })
}

fn message() -> impl Strategy<Value = BeliefMessage> {
    (-20.0f64..20.0, -20.0f64..20.0, spd()).prop_map(|(x, y, w)| BeliefMessage {
        mean: Vector2::new(x, y),
        covariance: w,
    })
}

fn rel(a: &Matrix2<f64>, b: &Matrix2<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

proptest! {
    #[test]
    fn steering_vector_is_antisymmetric(a in 0.0..2.0 * PI, b in 0.0..2.0 * PI) {
        if let (Ok(g), Ok(h)) = (steering_vector(a, b, DEFAULT_EPS_SING), steering_vector(b, a, DEFAULT_EPS_SING)) {
            prop_assert!((g + h).norm() <= 1e-12 * g.norm().max(1.0));
        }
    }

    #[test]
    fn mirror_paths_obey_the_linear_model(
        xi in -10.0f64..10.0, yi in -10.0f64..10.0,
        xj in -10.0f64..10.0, yj in -10.0f64..10.0,
        orientation in 0.0..PI, gap in 0.1f64..5.0, above in any::<bool>(),
    ) {
        let (si, sj) = (Position::new(xi, yi), Position::new(xj, yj));
        prop_assume!(si.distance_to(&sj) > 0.1);
        let probe = Reflector::new(orientation, 0.0);
        let (a, b) = (probe.signed_distance(&si), probe.signed_distance(&sj));
        let offset = if above { a.max(b) + gap } else { a.min(b) - gap };
        let m = mirror_path_measurement(&si, &sj, &Reflector::new(orientation, offset)).unwrap();
        if let Ok(g) = steering_vector(m.aoa_at_sender, m.aoa_at_receiver, DEFAULT_EPS_SING) {
            let residual = g.dot(&(si.to_vector() - sj.to_vector())) - m.range;
            prop_assert!(residual.abs() < 1e-9, "residual {residual}");
            // for a mirror the steering vector lies along the mirror line
            let along = Vector2::new(orientation.cos(), orientation.sin());
            prop_assert!((g - along * g.dot(&along)).norm() <= 1e-9 * g.norm().max(1.0));
        }
    }

    #[test]
    fn pseudo_inverse_satisfies_moore_penrose(
        rows in 1usize..=3,
        data in proptest::collection::vec(-5.0f64..5.0, 6),
        rhs in proptest::collection::vec(-10.0f64..10.0, 3),
    ) {
        let g = MatrixXx2::from_row_slice(&data[..2 * rows]);
        prop_assume!(g.norm() > 1e-3);
        let c = EdgeConstraint::from_rows(g.clone(), DVector::from_column_slice(&rhs[..rows]), rows, DEFAULT_RANK_TOL)
            .unwrap();
        let p = &c.pseudo_inverse;
        let scale = g.norm() * p.norm();
        prop_assert!((&g * p * &g - &g).norm() <= 1e-9 * g.norm());
        prop_assert!((p * &g * p - p).norm() <= 1e-9 * p.norm());
        let (gp, pg) = (&g * p, p * &g);
        prop_assert!((&gp - gp.transpose()).norm() <= 1e-9 * scale);
        prop_assert!((pg - pg.transpose()).norm() <= 1e-9 * scale);
        prop_assert!(c.basis.symmetric_eigenvalues().min() >= -1e-12 * c.basis.norm());
    }

    #[test]
    fn fusion_is_permutation_invariant(msgs in proptest::collection::vec(message(), 1..6), seed in any::<u64>()) {
        let mut shuffled = msgs.clone();
        // deterministic rotation plus reversal covers distinct orders
        shuffled.rotate_left((seed as usize) % msgs.len());
        if seed % 2 == 0 {
            shuffled.reverse();
        }
        let a = fuse_messages(&msgs).unwrap();
        let b = fuse_messages(&shuffled).unwrap();
        prop_assert!((a.mean - b.mean).norm() <= 1e-12 * a.mean.norm().max(1.0));
        prop_assert!(rel(&a.covariance, &b.covariance) <= 1e-12);
    }

    #[test]
    fn fused_precision_is_the_sum(msgs in proptest::collection::vec(message(), 2..6)) {
        let fused = fuse_messages(&msgs).unwrap();
        let sum: Matrix2<f64> = msgs.iter().map(|m| m.covariance.try_inverse().unwrap()).sum();
        prop_assert!(rel(&fused.covariance.try_inverse().unwrap(), &sum) <= 1e-9);
        // no single message is more certain than the fused belief
        for m in &msgs {
            prop_assert!((m.covariance - fused.covariance).symmetric_eigenvalues().min() >= -1e-9 * m.covariance.norm());
        }
    }

    #[test]
    fn messages_add_sender_uncertainty(
        x in -10.0f64..10.0, y in -10.0f64..10.0, p in spd(),
        g in proptest::collection::vec(-3.0f64..3.0, 4), d in proptest::collection::vec(-10.0f64..10.0, 2),
        sigma2 in 0.1f64..10.0,
    ) {
        let geometry = MatrixXx2::from_row_slice(&g);
        prop_assume!(geometry.determinant_2x2().abs() > 1e-3);
        let edge = EdgeConstraint::from_rows(geometry, DVector::from_vec(d), 2, DEFAULT_RANK_TOL).unwrap();
        let sender = GaussianBelief::new(Vector2::new(x, y), p);
        let msg = compute_message(&sender, &edge, sigma2);
        prop_assert_eq!(msg.mean, sender.mean + edge.offset);
        prop_assert!(rel(&msg.covariance, &(edge.basis * sigma2 + p)) <= 1e-15);
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one(values in proptest::collection::vec(0.0f64..100.0, 1..200)) {
        let steps = cdf_steps(&values);
        prop_assert!(steps.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        prop_assert_eq!(steps.last().unwrap().1, 1.0);
    }

    #[test]
    fn six_significant_digits(v in -1e9f64..1e9) {
        let back: f64 = format_sig6(v).parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-6 * v.abs());
    }
}

trait Det2 {
    fn determinant_2x2(&self) -> f64;
}

impl Det2 for MatrixXx2<f64> {
    fn determinant_2x2(&self) -> f64 {
        self[(0, 0)] * self[(1, 1)] - self[(0, 1)] * self[(1, 0)]
    }
}
