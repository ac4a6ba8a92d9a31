use proptest::prelude::*;

use lidarsplat::gsplat::checkpoint::{from_bytes, to_bytes};
use lidarsplat::gsplat::PoseCorrection;
use lidarsplat::scene_io::{load_scene, read_lidar_bin, write_lidar_bin, write_scene};
use lidarsplat::synthetic::{random_splat_scene, street_scene, SplatSceneOptions, StreetOptions};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), degree in 0u32..=3, objects in 0usize..3, t in prop::array::uniform3(-1.0..1.0f64)) {
        let opts = SplatSceneOptions { sh_degree: degree, objects, ..Default::default() };
        let mut scene = random_splat_scene(seed, &opts).scene;
        for o in &mut scene.objects {
            o.corrections[0] = PoseCorrection { translation: t, rotation: [0.9, 0.1, -0.2, 0.3] };
        }
        let bytes = to_bytes(&scene).unwrap();
        prop_assert_eq!(from_bytes(&bytes).unwrap(), scene);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(seed in any::<u64>(), cut in 0.0..1.0f64) {
        let bytes = to_bytes(&random_splat_scene(seed, &SplatSceneOptions::default()).scene).unwrap();
        let n = (cut * bytes.len() as f64) as usize;
        prop_assert!(from_bytes(&bytes[..n]).is_err());
    }

    #[test]
    fn lidar_sidecar_round_trips(points in prop::collection::vec(prop::array::uniform3(-1e4f32..1e4f32), 0..200)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        write_lidar_bin(&path, &points).unwrap();
        prop_assert_eq!(read_lidar_bin(&path).unwrap(), points);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn scene_directory_round_trips(seed in any::<u64>(), frames in 2usize..5) {
        let opts = StreetOptions { width: 24, height: 16, focal: 16.0, frames, ..Default::default() };
        let scene = street_scene(seed, &opts).unwrap().scene;
        let dir = tempfile::tempdir().unwrap();
        write_scene(&scene, dir.path()).unwrap();
        prop_assert_eq!(load_scene(dir.path()).unwrap(), scene);
    }
}
