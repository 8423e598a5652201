use proptest::prelude::*;

use semfuse::frames::{load_scene, save_scene, Bounds, Frame, Intrinsics, Scene};
use semfuse::geom::Pose;

fn pose(yaw: f64, t: [f64; 3]) -> Pose {
    let (s, c) = yaw.sin_cos();
    Pose::from_rotation_translation([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], t)
}

prop_compose! {
    fn arb_scene()(
        width in 1usize..6,
        height in 1usize..5,
        k in 2usize..5,
        frames in 1usize..4,
        with_gt in any::<bool>(),
        with_bounds in any::<bool>(),
        seed in any::<u64>(),
    ) -> Scene {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = width * height;
        let intrinsics = Intrinsics {
            fx: rng.random_range(10.0..500.0),
            fy: rng.random_range(10.0..500.0),
            cx: rng.random_range(0.0..width as f64),
            cy: rng.random_range(0.0..height as f64),
            width,
            height,
        };
        let frames = (0..frames)
            .map(|i| Frame {
                index: (i * 3) as u32,
                pose: pose(rng.random_range(-3.0..3.0), [rng.random(), rng.random(), rng.random()]),
                depth: (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.1f32..8.0) }).collect(),
                logits: (0..n * k).map(|_| rng.random_range(-10.0f32..10.0)).collect(),
                gt_labels: with_gt.then(|| (0..n).map(|_| rng.random_range(0..k as u16)).collect()),
                color: None,
            })
            .collect();
        Scene {
            intrinsics,
            frames,
            class_count: k,
            class_names: Some((0..k).map(|c| format!("class{c}")).collect()),
            voxel_size: rng.random_range(0.01..0.2),
            bounds: with_bounds.then(|| Bounds { min: [-1.0, -2.0, 0.0], max: [3.5, 4.25, 2.0] }),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scene_round_trips_through_disk(scene in arb_scene()) {
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        prop_assert_eq!(back, scene);
    }
}

#[test]
fn missing_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_scene(&dir.path().join("nope")).unwrap_err();
    assert!(err.to_string().contains("nope"), "{err}");
}
