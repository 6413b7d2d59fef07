use std::collections::BTreeMap;

use guidance_ba::landmarks::{
    normalize_coefficients, normalize_line, point_line_signed_distance, sample_guidance_points,
};
use guidance_ba::synthetic::{generate, SceneConfig};
use guidance_ba::uncertainty::{eigenvalues_desc, pose_covariance};
use guidance_ba::{FactorGraph, Selector};
use nalgebra::{DMatrix, Vector2, Vector3};
use proptest::prelude::*;

fn pixel() -> impl Strategy<Value = Vector2<f64>> {
    (0.0f64..640.0, 0.0f64..480.0).prop_map(|(x, y)| Vector2::new(x, y))
}

fn scene(seed: u64) -> FactorGraph {
    let c = SceneConfig {
        seed,
        points: 25,
        lines: 5,
        guidance: 3,
        ..SceneConfig::default()
    };
    generate(&c).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn line_coefficients_ignore_endpoint_order_and_sliding(p in pixel(), q in pixel(), s in -2.0f64..2.0, t in -2.0f64..2.0) {
        prop_assume!((p - q).norm() > 10.0);
        let l = normalize_line(&p, &q).unwrap();
        prop_assert!((l.x * l.x + l.y * l.y - 1.0).abs() < 1e-12);
        prop_assert!((normalize_line(&q, &p).unwrap() - l).norm() < 1e-9);
        let d = q - p;
        let slid = normalize_line(&(p + s * d), &(p + (s + 1.0 + t.abs()) * d)).unwrap();
        prop_assert!((slid - l).norm() < 1e-9);
        for g in sample_guidance_points(&p, &q, 5).unwrap() {
            prop_assert!(point_line_signed_distance(&l, &Vector3::new(g.x, g.y, 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn coefficient_scale_is_irrelevant(p in pixel(), q in pixel(), k in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
        prop_assume!((p - q).norm() > 10.0);
        let raw = Vector3::new(p.x, p.y, 1.0).cross(&Vector3::new(q.x, q.y, 1.0));
        let a = normalize_coefficients(&raw).unwrap();
        let b = normalize_coefficients(&(raw * k)).unwrap();
        prop_assert!((a - b).norm() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn covariance_is_symmetric_positive_definite(seed in 0u64..1000) {
        let c = pose_covariance(&scene(seed), Selector::Both).unwrap();
        prop_assert!((&c - c.transpose()).norm() <= 1e-12 * c.norm());
        prop_assert!(*eigenvalues_desc(&c).last().unwrap() > 0.0);
    }

    #[test]
    fn covariance_ignores_landmark_labels_and_edge_order(seed in 0u64..1000, shift in 1000u64..5000) {
        let g = scene(seed);
        let mut h = g.clone();
        // reversed ids offset by `shift`, edges reversed
        let ids: Vec<u64> = g.point_landmarks.keys().chain(g.line_landmarks.keys()).copied().collect();
        let top = *ids.iter().max().unwrap();
        let map: BTreeMap<u64, u64> = ids.iter().map(|i| (*i, shift + top - i)).collect();
        h.point_landmarks = g.point_landmarks.values().map(|l| {
            let mut l = l.clone();
            l.id = map[&l.id];
            (l.id, l)
        }).collect();
        h.line_landmarks = g.line_landmarks.values().map(|l| {
            let mut l = l.clone();
            l.id = map[&l.id];
            (l.id, l)
        }).collect();
        for o in &mut h.point_edges {
            o.landmark_id = map[&o.landmark_id];
        }
        for o in &mut h.line_edges {
            o.landmark_id = map[&o.landmark_id];
        }
        h.point_edges.reverse();
        h.line_edges.reverse();
        let a = pose_covariance(&g, Selector::Both).unwrap();
        let b = pose_covariance(&h, Selector::Both).unwrap();
        prop_assert!((&a - &b).norm() <= 1e-9 * a.norm());
    }

    #[test]
    fn removing_an_edge_never_shrinks_covariance(seed in 0u64..1000, pick in 0usize..10_000) {
        let g = scene(seed);
        let full = pose_covariance(&g, Selector::Both).unwrap();
        let mut h = g.clone();
        if pick % 2 == 0 {
            h.point_edges.remove(pick % h.point_edges.len());
        } else {
            h.line_edges.remove(pick % h.line_edges.len());
        }
        let Ok(less) = pose_covariance(&h, Selector::Both) else { return Ok(()) };
        let diff: DMatrix<f64> = &less - &full;
        prop_assert!(*eigenvalues_desc(&diff).last().unwrap() >= -1e-9 * full.norm());
    }
}
