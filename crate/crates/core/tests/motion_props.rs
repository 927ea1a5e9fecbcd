use mimic_core::motion_io::{
    forward_kinematics, motion_from_json, motion_to_json, resample, Dof, Frame, Joint, JointRot, MotionSequence, Skeleton,
};
use mimic_core::rotmath::{Quat, Vec3};
use proptest::prelude::*;

fn skeleton() -> Skeleton {
    let j = |name: &str, parent: Option<usize>, off: Vec3, dof: Dof| Joint { name: name.into(), parent, offset: off, dof, limits: None };
    Skeleton::new(
        0.9,
        vec![
            j("pelvis", None, Vec3::ZERO, Dof::Three),
            j("hip", Some(0), Vec3::new(0.0, 0.1, -0.1), Dof::Three),
            j("knee", Some(1), Vec3::new(0.0, 0.0, -0.4), Dof::One { axis: Vec3::Y }),
            j("ankle", Some(2), Vec3::new(0.0, 0.0, -0.4), Dof::Zero),
        ],
    )
    .unwrap()
}

fn quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|a| Quat::from_array(a).normalize())
}

fn frame() -> impl Strategy<Value = Frame> {
    (prop::array::uniform3(-3.0f64..3.0), quat(), quat(), -2.0f64..2.0).prop_map(|(p, r, h, k)| Frame {
        root_pos: Vec3::from_array(p),
        root_rot: r,
        joint_rot: vec![JointRot::Quat(h), JointRot::Angle(k), JointRot::Quat(Quat::IDENTITY)],
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn save_load_identity(frames in prop::collection::vec(frame(), 1..12), fps in 10.0f64..120.0) {
        // loading renormalizes quaternions, so start from a loaded sequence
        let raw = MotionSequence::new(fps, skeleton(), frames).unwrap();
        let m = motion_from_json(&motion_to_json(&raw)).unwrap();
        let back = motion_from_json(&motion_to_json(&m)).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn resample_round_trip(starts in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 2..8), k in 2usize..5) {
        // root positions piecewise linear between keyframes
        let frames: Vec<Frame> = starts
            .iter()
            .map(|p| Frame {
                root_pos: Vec3::from_array(*p),
                root_rot: Quat::IDENTITY,
                joint_rot: vec![JointRot::Quat(Quat::IDENTITY), JointRot::Angle(0.0), JointRot::Quat(Quat::IDENTITY)],
            })
            .collect();
        let m = MotionSequence::new(30.0, skeleton(), frames).unwrap();
        let up = resample(&m, 30.0 * k as f64);
        let back = resample(&up, 30.0);
        prop_assert_eq!(back.frames.len(), m.frames.len());
        for (a, b) in back.frames.iter().zip(&m.frames) {
            prop_assert!((a.root_pos - b.root_pos).norm() < 1e-6);
        }
    }

    #[test]
    fn fk_ignores_quaternion_sign(f in frame()) {
        let mut g = f.clone();
        if let JointRot::Quat(q) = g.joint_rot[0] {
            g.joint_rot[0] = JointRot::Quat(Quat::new(-q.w, -q.x, -q.y, -q.z));
        }
        g.root_rot = Quat::new(-f.root_rot.w, -f.root_rot.x, -f.root_rot.y, -f.root_rot.z);
        let (a, b) = (forward_kinematics(&skeleton(), &f), forward_kinematics(&skeleton(), &g));
        for (p, q) in a.positions.iter().zip(&b.positions) {
            prop_assert!((*p - *q).norm() < 1e-12);
        }
    }
}
