use mimic_core::rotmath::{Quat, Vec3};
use mimic_core::motion_io::JointRot;
use mimic_core::similarity::{sim_humanoid, sim_quadruped, JointVel, SimWeights, StateDescriptor};
use proptest::prelude::*;

fn quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|a| Quat::from_array(a).normalize())
}

fn v3() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-1.0f64..1.0).prop_map(Vec3::from_array)
}

fn desc() -> impl Strategy<Value = StateDescriptor> {
    (quat(), -2.0f64..2.0, v3(), -3.0f64..3.0, v3(), v3(), v3(), quat()).prop_map(|(q, a, w, s, e1, e2, r, rr)| StateDescriptor {
        joint_rot: vec![JointRot::Quat(q), JointRot::Angle(a)],
        joint_vel: vec![JointVel::Vec(w), JointVel::Scalar(s)],
        ee_rel_pos: vec![e1, e2],
        root_pos: r,
        root_rot: rr,
    })
}

fn neg(q: Quat) -> Quat {
    Quat::new(-q.w, -q.x, -q.y, -q.z)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn symmetric(y in desc(), s in desc()) {
        let w = SimWeights::default();
        prop_assert!((sim_humanoid(&y, &s, &w).unwrap() - sim_humanoid(&s, &y, &w).unwrap()).abs() < 1e-12);
        prop_assert!((sim_quadruped(&y, &s, &w).unwrap() - sim_quadruped(&s, &y, &w).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sign_flips_do_not_matter(y in desc(), s in desc()) {
        let w = SimWeights::default();
        let mut f = s.clone();
        if let JointRot::Quat(q) = f.joint_rot[0] {
            f.joint_rot[0] = JointRot::Quat(neg(q));
        }
        f.root_rot = neg(f.root_rot);
        prop_assert_eq!(sim_humanoid(&y, &s, &w).unwrap(), sim_humanoid(&y, &f, &w).unwrap());
        prop_assert_eq!(sim_quadruped(&y, &s, &w).unwrap(), sim_quadruped(&y, &f, &w).unwrap());
    }

    #[test]
    fn strictly_decreasing_per_term(y in desc(), d in 0.01f64..0.5, extra in 0.01f64..0.5) {
        let w = SimWeights::default();
        let base = sim_humanoid(&y, &y, &w).unwrap();
        let tweak = |amount: f64, term: usize| {
            let mut s = y.clone();
            match term {
                0 => if let JointRot::Angle(a) = s.joint_rot[1] { s.joint_rot[1] = JointRot::Angle(a + amount) },
                1 => if let JointVel::Scalar(v) = s.joint_vel[1] { s.joint_vel[1] = JointVel::Scalar(v + amount) },
                2 => s.ee_rel_pos[0].x += amount,
                _ => s.root_pos.z += amount,
            }
            sim_humanoid(&y, &s, &w).unwrap()
        };
        for term in 0..4 {
            let (near, far) = (tweak(d, term), tweak(d + extra, term));
            prop_assert!(near < base && far < near, "term {term}: {base} {near} {far}");
        }
    }
}
