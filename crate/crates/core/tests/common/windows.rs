//! Materialize-and-slice oracle for history windows.

use abc_core::arm::{JointConfig, JOINT_LIMITS};
use abc_core::dataset::{build_windows, Episode, EpisodeMeta, FORMAT_VERSION};
use abc_core::render::{Frame, FRAME_BYTES};
use abc_core::scene::{SceneSpec, SideLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Episode of `t` steps with random frames, some repeated back to back, and
/// random f32-representable joints.
pub fn synthetic_episode(t: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames: Vec<Frame> = Vec::with_capacity(t);
    for i in 0..t {
        if i > 0 && rng.random_bool(0.3) {
            frames.push(frames[i - 1].clone());
        } else {
            let bytes: Vec<u8> = (0..FRAME_BYTES).map(|_| rng.random()).collect();
            frames.push(Frame::from_bytes(&bytes).unwrap());
        }
    }
    let joints = (0..t)
        .map(|_| JointConfig(JOINT_LIMITS.map(|(lo, hi)| rng.random_range(lo..=hi) as f32 as f64)))
        .collect();
    let meta = EpisodeMeta {
        scene: SceneSpec {
            plant_azimuth: 0.55,
            plant_range: 0.35,
            plant_height: 0.29,
            seed,
            side_label: SideLabel::Left,
        },
        expert_seed: seed,
        format_version: FORMAT_VERSION,
    };
    Episode::new(frames, joints, meta).unwrap()
}

/// Prepends `h - 1` copies of the first frame and slices `h` frames ending at
/// each step.
fn oracle(ep: &Episode, h: usize) -> Vec<(Vec<Frame>, [f64; 6], [f64; 6])> {
    let mut padded = vec![ep.frames[0].clone(); h - 1];
    padded.extend(ep.frames.iter().cloned());
    (0..ep.len() - 1)
        .map(|t| {
            let (a, b) = (ep.joints[t].0, ep.joints[t + 1].0);
            (padded[t..t + h].to_vec(), std::array::from_fn(|i| b[i] - a[i]), b)
        })
        .collect()
}

/// Compares `build_windows` with the oracle for every `T` in `2..=max_t` and
/// `H` in `1..=max_h`. Returns the number of windows compared and a
/// description of each mismatch.
pub fn oracle_mismatches(max_t: usize, max_h: usize) -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for t in 2..=max_t {
        for h in 1..=max_h {
            let ep = synthetic_episode(t, (t * 100 + h) as u64);
            let got = build_windows(&ep, h).unwrap();
            let want = oracle(&ep, h);
            if got.len() != want.len() {
                bad.push(format!("T={t} H={h}: {} windows, expected {}", got.len(), want.len()));
                continue;
            }
            for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                checked += 1;
                let frames_equal = g.history.len() == w.0.len() && g.history.iter().zip(&w.0).all(|(a, b)| *a == b);
                if !frames_equal || g.target_delta.0 != w.1 || g.target_absolute.0 != w.2 || g.base_joints != ep.joints[i] {
                    bad.push(format!("T={t} H={h} t={i}"));
                }
            }
        }
    }
    (checked, bad)
}
