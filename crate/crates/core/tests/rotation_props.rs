use mimic_core::rotmath::{quat_mul, relative_rotation, rotation_between, Quat, Vec3};
use proptest::prelude::*;

fn unit_quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|a| Quat::from_array(a).normalize())
}

fn vec3() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-2.0f64..2.0).prop_filter("non-zero", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-4).prop_map(Vec3::from_array)
}

fn close(a: Quat, b: Quat, tol: f64) -> bool {
    a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() < tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn times_conjugate_is_identity(q in unit_quat()) {
        prop_assert!(close(quat_mul(q, q.conj()).canonicalize(), Quat::IDENTITY, 1e-9));
    }

    #[test]
    fn relative_rotation_composes(a in unit_quat(), b in unit_quat()) {
        prop_assert!(close(quat_mul(a, relative_rotation(a, b)).canonicalize(), b.canonicalize(), 1e-9));
    }

    #[test]
    fn rotation_between_aligns(u in vec3(), v in vec3()) {
        let (uh, vh) = (u * (1.0 / u.norm()), v * (1.0 / v.norm()));
        prop_assume!(uh.dot(vh) > -1.0 + 1e-6);
        let q = rotation_between(u, v).unwrap();
        prop_assert!((q.rotate(uh) - vh).norm() < 1e-6);
    }

    #[test]
    fn canonical_sign(q in unit_quat()) {
        let neg = Quat::new(-q.w, -q.x, -q.y, -q.z);
        let (a, b) = (q.canonicalize().to_array(), neg.canonicalize().to_array());
        prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
