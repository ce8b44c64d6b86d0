mod common;

use ncal_core::scene::*;
use ncal_core::seed;
use proptest::prelude::*;

fn scene(rig: &str) -> Scene {
    default_scene(rig, &ObjectKind::Cube8 { edge: 0.1 }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_is_bounded(cam in common::camera(), ki in 0.0..0.5f64, ke in 0.0..0.5f64, s in any::<u64>()) {
        let spec = PerturbationSpec::new(ki, ke).unwrap();
        let out = perturb(&cam, &spec, &mut seed::rng(s));
        let (a, b) = (cam.to_array(), out.to_array());
        for i in 9..21 {
            if a[i] != 0.0 {
                let k = if i < 12 { ke } else { ki };
                prop_assert!((b[i] / a[i] - 1.0).abs() <= k * (1.0 + 1e-12) + 1e-15, "slot {i}: {} -> {}", a[i], b[i]);
            }
        }
        prop_assert!(ncal_core::geometry::orthogonality_error(&out.extrinsics.r) < 1e-12);
    }

    #[test]
    fn emitted_samples_are_visible(s in any::<u64>(), k in 0.0..0.1f64, full in any::<bool>()) {
        let sc = scene("O-6");
        let ranges = if full { PoseRanges::full() } else { PoseRanges::overhead() };
        let spec = PerturbationSpec::new(k, k).unwrap();
        let batch = synthesize_batch(8, &sc, &spec, &ranges, s).unwrap();
        prop_assert_eq!(batch.samples.len(), 8);
        for smp in &batch.samples {
            prop_assert!(visibility_check(&smp.gt_params, &sc.object.fiducials, sc.image_size(), sc.margin));
            let re = project_all(&smp.gt_params, &sc.object.fiducials).unwrap();
            prop_assert_eq!(&re, &smp.observations);
        }
    }

    #[test]
    fn overhead_centroid_is_constant(s in any::<u64>()) {
        let sc = scene("O-10");
        let batch = synthesize_batch(6, &sc, &PerturbationSpec::new(0.05, 0.0).unwrap(), &PoseRanges::overhead(), s).unwrap();
        let c0 = batch.samples[0].pose.centroid;
        for smp in &batch.samples {
            prop_assert_eq!(smp.pose.centroid, c0);
            prop_assert_eq!((smp.pose.theta, smp.pose.phi), (0.0, 0.0));
        }
    }

    #[test]
    fn placement_preserves_camera_spacing(
        theta in 0.0..std::f64::consts::TAU,
        phi in 0.0..std::f64::consts::FRAC_PI_2,
        alpha in 0.0..std::f64::consts::TAU,
        rig in prop::sample::select(vec!["O-6", "O-10", "U-7", "T-4"]),
    ) {
        let sc = scene(rig);
        let pose = PoseSample::new(theta, phi, alpha, sc.radius);
        let posed = sc.pose(&pose, &sc.oem).unwrap();
        let nominal: Vec<_> = sc.oem.cameras.iter().map(|c| c.extrinsics.center()).collect();
        let world: Vec<_> = posed.iter().map(|c| c.extrinsics.center()).collect();
        for i in 0..world.len() {
            for j in 0..i {
                let d0 = (nominal[i] - nominal[j]).norm();
                let d1 = (world[i] - world[j]).norm();
                prop_assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn synthesis_is_seeded(s in any::<u64>()) {
        let sc = scene("O-6");
        let spec = PerturbationSpec::new(0.1, 0.1).unwrap();
        let a = synthesize_batch(4, &sc, &spec, &PoseRanges::full(), s).unwrap();
        let b = synthesize_batch(4, &sc, &spec, &PoseRanges::full(), s).unwrap();
        prop_assert_eq!(a.samples, b.samples);
        prop_assert_eq!(a.stats, b.stats);
    }
}
