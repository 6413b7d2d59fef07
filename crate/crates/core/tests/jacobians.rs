use guidance_ba::geometry::{exp, jacobian_project_pose_point, CameraIntrinsics, Pose, Tangent};
use guidance_ba::landmarks::{
    guidance_component, guidance_component_jacobians, normalize_line, point_residual, point_residual_jacobians,
};
use guidance_ba::{PointLandmark, PointObservation};
use nalgebra::{DMatrix, Vector2, Vector3, Vector6};
use proptest::prelude::*;

const H: f64 = 1e-6;

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(517.0, 516.0, 318.6, 255.3, 0.08).unwrap()
}

fn numeric<F: Fn(&Pose, &Vector3<f64>) -> DMatrix<f64>>(
    f: F,
    pose: &Pose,
    x: &Vector3<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let rows = f(pose, x).nrows();
    let mut jp = DMatrix::zeros(rows, 6);
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = H;
        let plus = f(&exp(&Tangent(d)).compose(pose), x);
        let minus = f(&exp(&Tangent(-d)).compose(pose), x);
        jp.set_column(k, &((plus - minus) / (2.0 * H)).column(0));
    }
    let mut jx = DMatrix::zeros(rows, 3);
    for k in 0..3 {
        let mut d = Vector3::zeros();
        d[k] = H;
        let plus = f(pose, &(x + d));
        let minus = f(pose, &(x - d));
        jx.set_column(k, &((plus - minus) / (2.0 * H)).column(0));
    }
    (jp, jx)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

/// Pose plus a world point that lands in front of the camera.
fn config(xi: [f64; 6], cam: [f64; 3]) -> (Pose, Vector3<f64>) {
    let pose = exp(&Tangent(Vector6::from_row_slice(&xi)));
    let xc = Vector3::new(cam[0] * cam[2], cam[1] * cam[2], cam[2]);
    (pose, pose.inverse().transform(&xc))
}

fn strategy() -> impl Strategy<Value = ([f64; 6], [f64; 3])> {
    (
        proptest::array::uniform6(-2.0f64..2.0),
        (-0.6f64..0.6, -0.45f64..0.45, 0.5f64..8.0).prop_map(|(a, b, c)| [a, b, c]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn projection_jacobians(cfg in strategy()) {
        let k = intrinsics();
        let (pose, x) = config(cfg.0, cfg.1);
        let (jp, jx) = jacobian_project_pose_point(&pose, &x, &k).unwrap();
        let f = |p: &Pose, x: &Vector3<f64>| {
            let uv = k.project(&p.transform(x)).unwrap();
            DMatrix::from_column_slice(2, 1, uv.as_slice())
        };
        let (np, nx) = numeric(f, &pose, &x);
        prop_assert!(rel(&DMatrix::from_column_slice(2, 6, jp.as_slice()), &np) < 1e-5);
        prop_assert!(rel(&DMatrix::from_column_slice(2, 3, jx.as_slice()), &nx) < 1e-5);
        // translation columns times R give the point Jacobian
        let chained = jp.fixed_columns::<3>(0) * pose.rotation;
        prop_assert!((chained - jx).norm() <= 1e-9 * jx.norm());
    }

    #[test]
    fn point_residual_jacobians_match(cfg in strategy(), noise in proptest::array::uniform3(-2.0f64..2.0)) {
        let k = intrinsics();
        let (pose, x) = config(cfg.0, cfg.1);
        let xc = pose.transform(&x);
        let uv = k.project(&xc).unwrap();
        let obs = PointObservation {
            keyframe_id: 0,
            landmark_id: 0,
            u: uv.x + noise[0],
            v: uv.y + noise[1],
            depth: xc.z * (1.0 + 0.01 * noise[2]),
        };
        let (_, jp, jx) = point_residual_jacobians(&pose, &k, &x, &obs).unwrap();
        let f = |p: &Pose, x: &Vector3<f64>| {
            let r = point_residual(p, &k, &PointLandmark { id: 0, position: *x }, &obs).unwrap();
            DMatrix::from_column_slice(3, 1, r.as_slice())
        };
        let (np, nx) = numeric(f, &pose, &x);
        prop_assert!(rel(&DMatrix::from_column_slice(3, 6, jp.as_slice()), &np) < 1e-5);
        prop_assert!(rel(&DMatrix::from_column_slice(3, 3, jx.as_slice()), &nx) < 1e-5);
    }

    #[test]
    fn guidance_jacobians_match(cfg in strategy(), ends in proptest::array::uniform4(0.0f64..600.0)) {
        prop_assume!((ends[0] - ends[2]).abs() + (ends[1] - ends[3]).abs() > 5.0);
        let k = intrinsics();
        let (pose, x) = config(cfg.0, cfg.1);
        let l = normalize_line(&Vector2::new(ends[0], ends[1]), &Vector2::new(ends[2], ends[3])).unwrap();
        let (_, jp, jx) = guidance_component_jacobians(&pose, &k, &x, &l).unwrap();
        let f = |p: &Pose, x: &Vector3<f64>| DMatrix::from_element(1, 1, guidance_component(p, &k, x, &l).unwrap());
        let (np, nx) = numeric(f, &pose, &x);
        prop_assert!(rel(&DMatrix::from_row_slice(1, 6, jp.as_slice()), &np) < 1e-5);
        prop_assert!(rel(&DMatrix::from_row_slice(1, 3, jx.as_slice()), &nx) < 1e-5);
    }
}
