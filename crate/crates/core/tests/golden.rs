mod common;

use abc_core::arm::JointConfig;
use abc_core::scene::{make_training_scene, Side};
use abc_core::sim::World;
use common::cli::{abc_ok, golden_dir, GOLDEN_FRAMES};
use std::fs;

fn parse_joints(s: &str) -> JointConfig {
    let v: Vec<f64> = s.split(',').map(|x| x.parse().unwrap()).collect();
    JointConfig::new(v.try_into().unwrap()).unwrap()
}

#[test]
fn renderer_matches_golden_frames() {
    for (name, side, seed, joints) in GOLDEN_FRAMES {
        let scene = make_training_scene(side.parse::<Side>().unwrap(), seed).unwrap();
        let frame = World::new(&scene).observe(&parse_joints(joints)).unwrap();
        let mut ppm = Vec::new();
        frame.write_ppm(&mut ppm).unwrap();
        assert!(ppm == fs::read(golden_dir().join(name)).unwrap(), "{name} differs");
        assert!(!frame.is_blank(), "{name} shows no plant");
    }
}

#[test]
fn dump_frame_matches_golden_frames() {
    let dir = tempfile::tempdir().unwrap();
    for (name, side, seed, joints) in GOLDEN_FRAMES {
        let out = dir.path().join(name);
        let seed = seed.to_string();
        abc_ok(&[
            "dump-frame",
            "--side",
            side,
            "--seed",
            &seed,
            "--joints",
            joints,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            fs::read(&out).unwrap() == fs::read(golden_dir().join(name)).unwrap(),
            "{name} differs"
        );
    }
}
