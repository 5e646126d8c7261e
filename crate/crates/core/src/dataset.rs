//! Demonstration episodes, their `ABC1` file format, sliding-window sample
//! construction and balanced train/validation/test splits.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arm::{JointConfig, JointDelta, NUM_JOINTS};
use crate::metadata;
use crate::render::{Frame, FRAME_BYTES, IMAGE_SIZE};
use crate::scene::{SceneSpec, SideLabel};

pub const EPISODE_MAGIC: &[u8; 4] = b"ABC1";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 4 + 2 + 2 + 1;
const JOINT_RECORD_BYTES: usize = NUM_JOINTS * 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic {found:?}, expected \"ABC1\"")]
    BadMagic { found: [u8; 4] },
    #[error("format version {found} does not match supported version {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated episode file: expected at least {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("length inconsistency: {0}")]
    LengthMismatch(String),
    #[error("bad metadata: {0}")]
    BadMetadata(String),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("history length must be at least 1")]
    BadHistory,
    #[error("split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMeta {
    pub scene: SceneSpec,
    pub expert_seed: u64,
    pub format_version: u16,
}

/// Time-aligned frames and joint configurations sampled at 10 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub joints: Vec<JointConfig>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn new(frames: Vec<Frame>, joints: Vec<JointConfig>, meta: EpisodeMeta) -> Result<Self, DatasetError> {
        let ep = Episode { frames, joints, meta };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.frames.len() != self.joints.len() {
            return Err(DatasetError::InvalidEpisode(format!(
                "{} frames but {} joint records",
                self.frames.len(),
                self.joints.len()
            )));
        }
        if self.frames.len() < 2 {
            return Err(DatasetError::InvalidEpisode("an episode needs at least two steps".into()));
        }
        for (t, q) in self.joints.iter().enumerate() {
            q.validate().map_err(|e| DatasetError::InvalidEpisode(format!("step {t}: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn side(&self) -> SideLabel {
        self.meta.scene.side_label
    }
}

fn meta_pairs(meta: &EpisodeMeta) -> Vec<(String, String)> {
    let s = &meta.scene;
    [
        ("format_version", meta.format_version.to_string()),
        ("side", s.side_label.to_string()),
        ("azimuth", s.plant_azimuth.to_string()),
        ("range", s.plant_range.to_string()),
        ("height", s.plant_height.to_string()),
        ("scene_seed", s.seed.to_string()),
        ("expert_seed", meta.expert_seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn parse_field<T: FromStr>(pairs: &[(String, String)], key: &str) -> Result<T, DatasetError> {
    let raw = metadata::lookup(pairs, key).ok_or_else(|| DatasetError::BadMetadata(format!("missing {key}")))?;
    raw.parse()
        .map_err(|_| DatasetError::BadMetadata(format!("cannot parse {key}={raw}")))
}

fn parse_meta(text: &str) -> Result<EpisodeMeta, DatasetError> {
    let pairs = metadata::decode(text).map_err(DatasetError::BadMetadata)?;
    Ok(EpisodeMeta {
        scene: SceneSpec {
            plant_azimuth: parse_field(&pairs, "azimuth")?,
            plant_range: parse_field(&pairs, "range")?,
            plant_height: parse_field(&pairs, "height")?,
            seed: parse_field(&pairs, "scene_seed")?,
            side_label: parse_field(&pairs, "side")?,
        },
        expert_seed: parse_field(&pairs, "expert_seed")?,
        format_version: parse_field(&pairs, "format_version")?,
    })
}

/// Serializes an episode. Joint values are stored as `f32`; episodes built
/// by this crate only hold `f32`-representable joints, so the round trip is
/// exact.
pub fn encode_episode(ep: &Episode) -> Result<Vec<u8>, DatasetError> {
    ep.validate()?;
    let t = ep.len();
    let text = metadata::encode(&meta_pairs(&ep.meta));
    let mut out = Vec::with_capacity(HEADER_BYTES + t * (FRAME_BYTES + JOINT_RECORD_BYTES) + 4 + text.len());
    out.extend_from_slice(EPISODE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(IMAGE_SIZE as u16).to_le_bytes());
    out.extend_from_slice(&(IMAGE_SIZE as u16).to_le_bytes());
    out.push(3);
    for f in &ep.frames {
        out.extend_from_slice(f.as_bytes());
    }
    for q in &ep.joints {
        for v in q.0 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn decode_episode(bytes: &[u8]) -> Result<Episode, DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != EPISODE_MAGIC {
        return Err(DatasetError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_BYTES {
        return Err(DatasetError::Truncated {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let w = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let c = bytes[14] as usize;
    if (h, w, c) != (IMAGE_SIZE, IMAGE_SIZE, 3) {
        return Err(DatasetError::LengthMismatch(format!(
            "frame geometry {h}×{w}×{c}, expected 64×64×3"
        )));
    }
    let frames_end = HEADER_BYTES + t * FRAME_BYTES;
    let joints_end = frames_end + t * JOINT_RECORD_BYTES;
    let fixed = joints_end + 4;
    if bytes.len() < fixed {
        return Err(DatasetError::Truncated {
            expected: fixed,
            actual: bytes.len(),
        });
    }
    let meta_len = u32::from_le_bytes(bytes[joints_end..fixed].try_into().unwrap()) as usize;
    let total = fixed + meta_len;
    if bytes.len() < total {
        return Err(DatasetError::Truncated {
            expected: total,
            actual: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(DatasetError::LengthMismatch(format!(
            "{} trailing bytes after metadata",
            bytes.len() - total
        )));
    }

    let frames = bytes[HEADER_BYTES..frames_end]
        .chunks_exact(FRAME_BYTES)
        .map(|chunk| Frame::from_bytes(chunk).expect("exact chunk"))
        .collect();
    let joints = bytes[frames_end..joints_end]
        .chunks_exact(JOINT_RECORD_BYTES)
        .map(|rec| {
            let mut q = [0.0; NUM_JOINTS];
            for (i, v) in rec.chunks_exact(4).enumerate() {
                q[i] = f32::from_le_bytes(v.try_into().unwrap()) as f64;
            }
            JointConfig(q)
        })
        .collect();
    let text = std::str::from_utf8(&bytes[fixed..total]).map_err(|_| DatasetError::BadMetadata("metadata is not UTF-8".into()))?;
    let meta = parse_meta(text)?;
    Episode::new(frames, joints, meta)
}

/// Writes atomically: the bytes land in a sibling temp file that is then renamed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<(), DatasetError> {
    write_atomic(path, &encode_episode(ep)?)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode, DatasetError> {
    decode_episode(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Representation {
    Delta,
    Absolute,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Delta => "delta",
            Representation::Absolute => "absolute",
        })
    }
}

impl FromStr for Representation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delta" => Ok(Representation::Delta),
            "absolute" | "position" => Ok(Representation::Absolute),
            other => Err(format!("unknown representation {other:?} (expected delta or absolute)")),
        }
    }
}

/// Identifies a window by its episode and final timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId {
    pub episode: usize,
    pub t: usize,
}

/// History of `H` frames ending at step `t`, with both supervision targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample<'a> {
    pub id: SampleId,
    pub history: Vec<&'a Frame>,
    pub target_delta: JointDelta,
    pub target_absolute: JointConfig,
    pub base_joints: JointConfig,
}

impl WindowSample<'_> {
    pub fn target(&self, repr: Representation) -> [f64; NUM_JOINTS] {
        match repr {
            Representation::Delta => self.target_delta.0,
            Representation::Absolute => self.target_absolute.0,
        }
    }
}

/// Sliding windows over `ep`, one per step `t ∈ 0..T-1`. Steps before the
/// start are filled with the first frame.
///
/// Consecutive identical frames are referenced through a single allocation,
/// which lets batch code detect repeated frames by address.
pub fn build_windows(ep: &Episode, h: usize) -> Result<Vec<WindowSample<'_>>, DatasetError> {
    build_windows_tagged(ep, 0, h)
}

pub fn build_windows_tagged(ep: &Episode, episode_id: usize, h: usize) -> Result<Vec<WindowSample<'_>>, DatasetError> {
    if h < 1 {
        return Err(DatasetError::BadHistory);
    }
    ep.validate()?;
    let mut canon = Vec::with_capacity(ep.len());
    for i in 0..ep.len() {
        if i > 0 && ep.frames[i] == ep.frames[i - 1] {
            canon.push(canon[i - 1]);
        } else {
            canon.push(i);
        }
    }
    let samples = (0..ep.len() - 1)
        .map(|t| {
            let history = (0..h)
                .map(|k| {
                    let idx = (t + k + 1).saturating_sub(h);
                    &ep.frames[canon[idx]]
                })
                .collect();
            let base = ep.joints[t];
            let next = ep.joints[t + 1];
            WindowSample {
                id: SampleId { episode: episode_id, t },
                history,
                target_delta: next.delta_from(&base),
                target_absolute: next,
                base_joints: base,
            }
        })
        .collect();
    Ok(samples)
}

/// Train/validation/test episode ids. `train_ids` alternates left and right
/// episodes, starting with a left one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub demo_count: usize,
}

fn permuted(mut ids: Vec<usize>, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    ids.shuffle(&mut rng);
    ids
}

fn interleave(left: &[usize], right: &[usize]) -> Vec<usize> {
    left.iter().zip(right).flat_map(|(&l, &r)| [l, r]).collect()
}

/// 80/10/10 split with left/right balance in every part.
pub fn make_splits(pool: &[Episode], seed: u64) -> Result<SplitSpec, DatasetError> {
    let sides: Vec<SideLabel> = pool.iter().map(Episode::side).collect();
    make_splits_from_sides(&sides, seed)
}

pub fn make_splits_from_sides(sides: &[SideLabel], seed: u64) -> Result<SplitSpec, DatasetError> {
    let n = sides.len();
    if n == 0 || !n.is_multiple_of(10) {
        return Err(DatasetError::Split(format!("pool size {n} is not a positive multiple of 10")));
    }
    let left: Vec<usize> = (0..n).filter(|&i| sides[i] == SideLabel::Left).collect();
    let right: Vec<usize> = (0..n).filter(|&i| sides[i] == SideLabel::Right).collect();
    if left.len() != right.len() || left.len() + right.len() != n {
        return Err(DatasetError::Split(format!(
            "pool is unbalanced: {} left, {} right, {} other",
            left.len(),
            right.len(),
            n - left.len() - right.len()
        )));
    }
    let per_side = n / 20;
    if !n.is_multiple_of(20) {
        return Err(DatasetError::Split(format!(
            "pool size {n} cannot give balanced validation and test sets of {} episodes",
            n / 10
        )));
    }
    let left = permuted(left, seed, 1);
    let right = permuted(right, seed, 2);
    let mut val_ids: Vec<usize> = left[..per_side].iter().chain(&right[..per_side]).copied().collect();
    let mut test_ids: Vec<usize> = left[per_side..2 * per_side]
        .iter()
        .chain(&right[per_side..2 * per_side])
        .copied()
        .collect();
    val_ids.sort_unstable();
    test_ids.sort_unstable();
    let train_ids = interleave(&left[2 * per_side..], &right[2 * per_side..]);
    Ok(SplitSpec {
        demo_count: train_ids.len(),
        train_ids,
        val_ids,
        test_ids,
    })
}

/// Balanced subset of `demo_count` training episodes. For one seed, the
/// subset for a larger count always contains the subset for a smaller one.
pub fn subsample_train(spec: &SplitSpec, demo_count: usize, seed: u64) -> Result<SplitSpec, DatasetError> {
    if demo_count == 0 || !demo_count.is_multiple_of(2) {
        return Err(DatasetError::Split(format!("demo count {demo_count} must be even and positive")));
    }
    if demo_count > spec.train_ids.len() {
        return Err(DatasetError::Split(format!(
            "demo count {demo_count} exceeds the {} training episodes",
            spec.train_ids.len()
        )));
    }
    let mut left: Vec<usize> = spec.train_ids.iter().step_by(2).copied().collect();
    let mut right: Vec<usize> = spec.train_ids.iter().skip(1).step_by(2).copied().collect();
    left.sort_unstable();
    right.sort_unstable();
    let left = permuted(left, seed, 3);
    let right = permuted(right, seed, 4);
    let half = demo_count / 2;
    Ok(SplitSpec {
        train_ids: interleave(&left[..half], &right[..half]),
        val_ids: spec.val_ids.clone(),
        test_ids: spec.test_ids.clone(),
        demo_count,
    })
}

impl SplitSpec {
    pub fn to_text(&self) -> String {
        let join = |ids: &[usize]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "train: {}\nval: {}\ntest: {}\ndemo_count: {}\n",
            join(&self.train_ids),
            join(&self.val_ids),
            join(&self.test_ids),
            self.demo_count
        )
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| DatasetError::Split(format!("bad splits line {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let ids = |key: &str| -> Result<Vec<usize>, DatasetError> {
            let raw = fields.get(key).ok_or_else(|| DatasetError::Split(format!("missing {key}")))?;
            raw.split_whitespace()
                .map(|s| s.parse().map_err(|_| DatasetError::Split(format!("bad id {s:?} in {key}"))))
                .collect()
        };
        let demo_count = fields
            .get("demo_count")
            .ok_or_else(|| DatasetError::Split("missing demo_count".into()))?
            .parse()
            .map_err(|_| DatasetError::Split("bad demo_count".into()))?;
        Ok(SplitSpec {
            train_ids: ids("train")?,
            val_ids: ids("val")?,
            test_ids: ids("test")?,
            demo_count,
        })
    }
}

pub fn episode_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("pool").join(format!("ep_{id:05}.abc1"))
}

/// Reads `pool/ep_*.abc1` in id order.
pub fn load_pool(dir: &Path) -> Result<Vec<Episode>, DatasetError> {
    let mut eps = Vec::new();
    loop {
        let path = episode_path(dir, eps.len());
        if !path.exists() {
            break;
        }
        eps.push(read_episode(&path)?);
    }
    if eps.is_empty() {
        return Err(DatasetError::InvalidEpisode(format!(
            "no episodes under {}",
            dir.join("pool").display()
        )));
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic_episode(t: usize, side: SideLabel, seed: u64) -> Episode {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| {
                let bytes: Vec<u8> = (0..FRAME_BYTES).map(|_| rng.random()).collect();
                Frame::from_bytes(&bytes).unwrap()
            })
            .collect();
        let joints = (0..t)
            .map(|_| {
                let mut q = [0.0; NUM_JOINTS];
                for (i, v) in q.iter_mut().enumerate() {
                    let (lo, hi) = crate::arm::JOINT_LIMITS[i];
                    *v = rng.random_range(lo..=hi) as f32 as f64;
                }
                JointConfig(q)
            })
            .collect();
        Episode::new(
            frames,
            joints,
            EpisodeMeta {
                scene: SceneSpec {
                    plant_azimuth: 0.55,
                    plant_range: 0.35,
                    plant_height: 0.29,
                    seed,
                    side_label: side,
                },
                expert_seed: seed ^ 0xff,
                format_version: FORMAT_VERSION,
            },
        )
        .unwrap()
    }

    /// Independent oracle: materialise the padded frame list and slice it.
    fn oracle_windows(ep: &Episode, h: usize) -> Vec<(Vec<Frame>, [f64; 6], [f64; 6], [f64; 6])> {
        let mut padded: Vec<Frame> = vec![ep.frames[0].clone(); h - 1];
        padded.extend(ep.frames.iter().cloned());
        (0..ep.len() - 1)
            .map(|t| {
                let hist = padded[t..t + h].to_vec();
                let a_t = ep.joints[t].0;
                let a_next = ep.joints[t + 1].0;
                let delta = std::array::from_fn(|i| a_next[i] - a_t[i]);
                (hist, delta, a_next, a_t)
            })
            .collect()
    }

    #[test]
    fn windows_match_materialised_oracle() {
        for t in 2..=12 {
            for h in 1..=5 {
                let ep = synthetic_episode(t, SideLabel::Left, (t * 10 + h) as u64);
                let got = build_windows(&ep, h).unwrap();
                let want = oracle_windows(&ep, h);
                assert_eq!(got.len(), t - 1);
                for (g, w) in got.iter().zip(&want) {
                    let hist: Vec<Frame> = g.history.iter().map(|f| (*f).clone()).collect();
                    assert_eq!(hist, w.0);
                    assert_eq!(g.target_delta.0, w.1);
                    assert_eq!(g.target_absolute.0, w.2);
                    assert_eq!(g.base_joints.0, w.3);
                }
            }
        }
    }

    #[test]
    fn window_examples() {
        let ep = synthetic_episode(2, SideLabel::Left, 1);
        let w = build_windows(&ep, 3).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].history.iter().all(|f| **f == ep.frames[0]));
        assert_eq!(w[0].target_delta, ep.joints[1].delta_from(&ep.joints[0]));

        let ep = synthetic_episode(5, SideLabel::Left, 2);
        let w = build_windows(&ep, 2).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(*w[2].history[0], ep.frames[1]);
        assert_eq!(*w[2].history[1], ep.frames[2]);
        assert_eq!(w[2].target_absolute, ep.joints[3]);

        assert!(matches!(build_windows(&ep, 0), Err(DatasetError::BadHistory)));
    }

    #[test]
    fn repeated_frames_share_storage() {
        let mut ep = synthetic_episode(6, SideLabel::Left, 3);
        ep.frames[3] = ep.frames[2].clone();
        ep.frames[4] = ep.frames[2].clone();
        let w = build_windows(&ep, 3).unwrap();
        assert!(std::ptr::eq(w[4].history[0], w[4].history[2]));
        assert_eq!(*w[4].history[2], ep.frames[4]);
    }

    #[test]
    fn targets_are_consistent_bitwise() {
        let ep = synthetic_episode(12, SideLabel::Right, 4);
        for s in build_windows(&ep, 4).unwrap() {
            for i in 0..NUM_JOINTS {
                assert_eq!(s.base_joints.0[i] + s.target_delta.0[i], s.target_absolute.0[i]);
            }
        }
    }

    #[test]
    fn episode_roundtrip_and_errors() {
        let ep = synthetic_episode(4, SideLabel::Right, 9);
        let bytes = encode_episode(&ep).unwrap();
        assert_eq!(&bytes[..4], b"ABC1");
        assert_eq!(decode_episode(&bytes).unwrap(), ep);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_episode(&bad), Err(DatasetError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_episode(&bad), Err(DatasetError::VersionMismatch { found: 9, .. })));

        let cut = &bytes[..HEADER_BYTES + FRAME_BYTES + 100];
        match decode_episode(cut) {
            Err(DatasetError::Truncated { expected, actual }) => {
                assert_eq!(actual, cut.len());
                assert_eq!(expected, HEADER_BYTES + 4 * (FRAME_BYTES + 24) + 4);
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_episode(&long), Err(DatasetError::LengthMismatch(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ep = synthetic_episode(3, SideLabel::Left, 5);
        let path = episode_path(dir.path(), 0);
        write_episode(&ep, &path).unwrap();
        assert_eq!(read_episode(&path).unwrap(), ep);
        assert_eq!(load_pool(dir.path()).unwrap(), vec![ep]);
    }

    fn balanced_sides(n: usize) -> Vec<SideLabel> {
        (0..n)
            .map(|i| if i % 2 == 0 { SideLabel::Left } else { SideLabel::Right })
            .collect()
    }

    #[test]
    fn split_examples() {
        let sides = balanced_sides(80);
        let s = make_splits_from_sides(&sides, 1).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len(), s.test_ids.len()), (64, 8, 8));
        for part in [&s.val_ids, &s.test_ids] {
            assert_eq!(part.iter().filter(|&&i| sides[i] == SideLabel::Left).count(), 4);
        }
        for (k, &id) in s.train_ids.iter().enumerate() {
            let want = if k % 2 == 0 { SideLabel::Left } else { SideLabel::Right };
            assert_eq!(sides[id], want);
        }
        let mut all: Vec<usize> = s.train_ids.iter().chain(&s.val_ids).chain(&s.test_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..80).collect::<Vec<_>>());
        assert_eq!(make_splits_from_sides(&sides, 1).unwrap(), s);
        assert_ne!(make_splits_from_sides(&sides, 2).unwrap(), s);

        assert!(make_splits_from_sides(&[SideLabel::Left; 10], 1).is_err());
        assert!(make_splits_from_sides(&balanced_sides(30), 1).is_err());
        assert!(make_splits_from_sides(&balanced_sides(12), 1).is_err());
    }

    #[test]
    fn subsample_examples() {
        let sides = balanced_sides(80);
        let s = make_splits_from_sides(&sides, 7).unwrap();
        let two = subsample_train(&s, 2, 3).unwrap();
        assert_eq!(two.train_ids.len(), 2);
        assert_eq!(sides[two.train_ids[0]], SideLabel::Left);
        assert_eq!(sides[two.train_ids[1]], SideLabel::Right);
        let mut prev: Vec<usize> = Vec::new();
        for k in [2, 4, 8, 16, 32, 64] {
            let sub = subsample_train(&s, k, 3).unwrap();
            assert!(prev.iter().all(|id| sub.train_ids.contains(id)));
            assert_eq!(sub.val_ids, s.val_ids);
            assert_eq!(sub.test_ids, s.test_ids);
            assert_eq!(sub.demo_count, k);
            prev = sub.train_ids;
        }
        assert!(subsample_train(&s, 128, 3).is_err());
        assert!(subsample_train(&s, 3, 3).is_err());
    }

    #[test]
    fn splits_text_roundtrip() {
        let s = make_splits_from_sides(&balanced_sides(40), 5).unwrap();
        assert_eq!(SplitSpec::from_text(&s.to_text()).unwrap(), s);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn random_episode_roundtrip(t in 2usize..6, seed in any::<u64>(), az in -0.7..0.7f64) {
                let mut ep = synthetic_episode(t, SideLabel::Intermediate, seed);
                ep.meta.scene.plant_azimuth = az;
                let back = decode_episode(&encode_episode(&ep).unwrap()).unwrap();
                prop_assert_eq!(back, ep);
            }

            #[test]
            fn window_count_is_t_minus_one(t in 2usize..30, h in 1usize..25) {
                let ep = synthetic_episode(t, SideLabel::Left, 0);
                let w = build_windows(&ep, h).unwrap();
                prop_assert_eq!(w.len(), t - 1);
                prop_assert!(w.iter().all(|s| s.history.len() == h));
            }
        }
    }
}
