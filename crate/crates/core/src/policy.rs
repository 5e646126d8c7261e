//! CNN + LSTM policy: each frame of the history is encoded independently,
//! the feature sequence runs through an LSTM from a zero state, and a linear
//! head maps the final hidden state to six joint outputs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arm::NUM_JOINTS;
use crate::dataset::{write_atomic, Representation, SampleId, WindowSample};
use crate::metadata;
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::layers::{conv_out_dim, flatten, relu_backward, relu_forward, unflatten, ConvCache};
use crate::nn::loss::mse_slices;
use crate::nn::lstm::LstmCache;
use crate::nn::{adam_step, AdamConfig, Conv2d, Grads, Linear, Lstm, Maps, NnError, ParamStore, Tensor};
use crate::render::{Frame, IMAGE_SIZE};

/// Keeps large training buffers on the heap instead of mapping fresh pages
/// for every allocation; page faults otherwise dominate a training step.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator thresholds.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
                libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            }
        });
    }
}

/// Scale from 8-bit pixel values to `[0, 1]`.
pub const PIXEL_SCALE: f32 = 1.0 / 255.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("history of {got} frames, policy expects {expected}")]
    History { expected: usize, got: usize },
    #[error("no samples")]
    Empty,
    #[error("numeric fault in epoch {epoch}, batch {batch}: {source}")]
    Training { epoch: usize, batch: usize, source: NnError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub representation: Representation,
    pub history: usize,
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Side of the square input image; 64 for rendered frames.
    pub image_size: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            representation: Representation::Delta,
            history: 20,
            channels: vec![8, 16, 32, 64],
            feature_dim: 128,
            hidden_dim: 128,
            lr: 1e-3,
            batch_size: 32,
            epochs: 40,
            max_steps: None,
            seed: 0,
            image_size: IMAGE_SIZE,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if self.history < 1 {
            return bad("history must be at least 1");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("every conv layer needs at least one channel");
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return bad("feature and hidden sizes must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("step cap must be positive");
        }
        if self.image_size == 0 {
            return bad("image size must be positive");
        }
        Ok(())
    }

    /// Spatial side after the conv stack.
    pub fn encoded_side(&self) -> usize {
        self.channels.iter().fold(self.image_size, |s, _| conv_out_dim(s, 2))
    }

    pub fn flat_dim(&self) -> usize {
        let s = self.encoded_side();
        self.channels.last().copied().unwrap_or(0) * s * s
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        let channels = self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        [
            ("representation", self.representation.to_string()),
            ("history", self.history.to_string()),
            ("channels", channels),
            ("feature_dim", self.feature_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.map_or("none".to_string(), |s| s.to_string())),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("pixel_scale", PIXEL_SCALE.to_string()),
            ("pixel_inverted", "true".to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self, PolicyError> {
        let get = |k: &str| metadata::lookup(pairs, k).ok_or_else(|| PolicyError::Config(format!("checkpoint metadata lacks {k}")));
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, PolicyError> {
            v.parse().map_err(|_| PolicyError::Config(format!("bad {k}={v}")))
        }
        let channels = get("channels")?
            .split(',')
            .map(|c| parse("channels", c))
            .collect::<Result<Vec<usize>, _>>()?;
        let max_steps = match get("max_steps")? {
            "none" => None,
            v => Some(parse("max_steps", v)?),
        };
        let cfg = PolicyConfig {
            representation: get("representation")?.parse().map_err(PolicyError::Config)?,
            history: parse("history", get("history")?)?,
            channels,
            feature_dim: parse("feature_dim", get("feature_dim")?)?,
            hidden_dim: parse("hidden_dim", get("hidden_dim")?)?,
            lr: parse("lr", get("lr")?)?,
            batch_size: parse("batch_size", get("batch_size")?)?,
            epochs: parse("epochs", get("epochs")?)?,
            max_steps,
            seed: parse("seed", get("seed")?)?,
            image_size: parse("image_size", get("image_size")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    fc: Linear,
    lstm: Lstm,
    head: Linear,
}

struct EncoderCache {
    conv: Vec<(ConvCache, Maps)>,
    flat: Vec<f32>,
    n: usize,
}

/// Everything the backward pass needs from one batched forward pass.
pub struct ForwardCache {
    encoder: EncoderCache,
    lstm: LstmCache,
    h_final: Vec<f32>,
    index: Vec<Vec<usize>>,
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, bound: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Policy {
    /// Freshly initialized policy. Conv layers use He-uniform weights, dense
    /// and recurrent layers `U(±1/√fan_in)`, and the LSTM forget bias starts
    /// at 1.
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let fan_in = cin * 9;
            let bound = (6.0 / fan_in as f32).sqrt();
            store.add(
                &format!("conv{i}.w"),
                Tensor::from_vec(&[cout, cin, 3, 3], uniform(&mut rng, cout * fan_in, bound))?,
            );
            store.add(&format!("conv{i}.b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let flat = config.flat_dim();
        let f = config.feature_dim;
        let h = config.hidden_dim;
        let b = 1.0 / (flat as f32).sqrt();
        store.add("fc.w", Tensor::from_vec(&[f, flat], uniform(&mut rng, f * flat, b))?);
        store.add("fc.b", Tensor::from_vec(&[f], uniform(&mut rng, f, b))?);
        let b = 1.0 / (h as f32).sqrt();
        store.add("lstm.w_ih", Tensor::from_vec(&[4 * h, f], uniform(&mut rng, 4 * h * f, b))?);
        store.add("lstm.w_hh", Tensor::from_vec(&[4 * h, h], uniform(&mut rng, 4 * h * h, b))?);
        let mut bias = vec![0f32; 4 * h];
        bias[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        store.add("lstm.b", Tensor::from_vec(&[4 * h], bias)?);
        store.add("head.w", Tensor::from_vec(&[NUM_JOINTS, h], uniform(&mut rng, NUM_JOINTS * h, b))?);
        store.add("head.b", Tensor::zeros(&[NUM_JOINTS]));
        Self::from_store(config, store)
    }

    fn from_store(config: PolicyConfig, store: ParamStore) -> Result<Self, PolicyError> {
        let id = |name: &str| {
            store
                .id_of(name)
                .ok_or_else(|| PolicyError::Config(format!("parameter {name} missing")))
        };
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            convs.push(Conv2d {
                weight: id(&format!("conv{i}.w"))?,
                bias: id(&format!("conv{i}.b"))?,
                cin,
                cout,
                stride: 2,
            });
            cin = cout;
        }
        let fc = Linear {
            weight: id("fc.w")?,
            bias: id("fc.b")?,
            din: config.flat_dim(),
            dout: config.feature_dim,
        };
        let lstm = Lstm {
            w_ih: id("lstm.w_ih")?,
            w_hh: id("lstm.w_hh")?,
            bias: id("lstm.b")?,
            din: config.feature_dim,
            hidden: config.hidden_dim,
        };
        let head = Linear {
            weight: id("head.w")?,
            bias: id("head.b")?,
            din: config.hidden_dim,
            dout: NUM_JOINTS,
        };
        let policy = Policy {
            config,
            store,
            convs,
            fc,
            lstm,
            head,
        };
        policy.check_shapes()?;
        Ok(policy)
    }

    fn check_shapes(&self) -> Result<(), PolicyError> {
        let shape = |id| self.store.get(id).shape().to_vec();
        for c in &self.convs {
            if shape(c.weight) != [c.cout, c.cin, 3, 3] || shape(c.bias) != [c.cout] {
                return Err(PolicyError::Config("conv parameter shapes do not match the config".into()));
            }
        }
        for l in [&self.fc, &self.head] {
            if shape(l.weight) != [l.dout, l.din] || shape(l.bias) != [l.dout] {
                return Err(PolicyError::Config("dense parameter shapes do not match the config".into()));
            }
        }
        let h = self.lstm.hidden;
        if shape(self.lstm.w_ih) != [4 * h, self.lstm.din] || shape(self.lstm.w_hh) != [4 * h, h] {
            return Err(PolicyError::Config("lstm parameter shapes do not match the config".into()));
        }
        Ok(())
    }

    /// Sets the head bias, typically to the mean training target.
    pub fn set_output_bias(&mut self, bias: [f32; NUM_JOINTS]) {
        self.store.get_mut(self.head.bias).data_mut().copy_from_slice(&bias);
    }

    fn encode(&self, images: &Maps) -> Result<(Vec<f32>, EncoderCache), NnError> {
        let s = self.config.image_size;
        if images.c != 3 || images.h != s || images.w != s {
            return Err(NnError::Shape(format!(
                "images {}×{}×{}, policy expects 3×{s}×{s}",
                images.c, images.h, images.w
            )));
        }
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut x = images.clone();
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&self.store, &x)?;
            relu_forward(&mut y.data);
            caches.push((cache, y.clone()));
            x = y;
        }
        let flat = flatten(&x);
        let feats = self.fc.forward(&self.store, &flat, images.n)?;
        Ok((
            feats,
            EncoderCache {
                conv: caches,
                flat,
                n: images.n,
            },
        ))
    }

    fn encode_backward(&self, cache: &EncoderCache, dfeat: &[f32], grads: &mut Grads) -> Result<(), NnError> {
        let dflat = self
            .fc
            .backward(&self.store, &cache.flat, dfeat, cache.n, grads, true)
            .expect("input gradient requested");
        let (_, last) = cache.conv.last().expect("at least one conv layer");
        let mut dy = unflatten(&dflat, last.c, last.n, last.h, last.w);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let (cc, y) = &cache.conv[i];
            relu_backward(&y.data, &mut dy.data);
            match conv.backward(&self.store, cc, &dy, grads, i > 0)? {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        Ok(())
    }

    /// Features (`feature_dim × n`) for a batch of images.
    pub fn frame_features(&self, images: &Maps) -> Result<Vec<f32>, NnError> {
        Ok(self.encode(images)?.0)
    }

    /// Runs the recurrent part for `index.len()` windows. `index[b][k]` is
    /// the column of `feats` (`feature_dim × u`) seen by window `b` at step
    /// `k`. Returns the `6 × b` predictions.
    fn sequence_forward(&self, feats: &[f32], u: usize, index: &[Vec<usize>]) -> Result<(Vec<f32>, LstmCache, Vec<f32>), NnError> {
        let b = index.len();
        let f = self.config.feature_dim;
        let h = self.config.history;
        if feats.len() != f * u {
            return Err(NnError::Shape(format!("features {} != {f}×{u}", feats.len())));
        }
        let mut xs = Vec::with_capacity(h);
        for k in 0..h {
            let mut x = vec![0f32; f * b];
            for (bi, steps) in index.iter().enumerate() {
                let col = steps[k];
                for r in 0..f {
                    x[r * b + bi] = feats[r * u + col];
                }
            }
            xs.push(x);
        }
        let (h_final, cache) = self.lstm.forward_sequence(&self.store, &xs, b)?;
        let pred = self.head.forward(&self.store, &h_final, b)?;
        Ok((pred, cache, h_final))
    }

    /// Batched forward pass over explicit images.
    pub fn forward_images(&self, images: &Maps, index: &[Vec<usize>]) -> Result<(Vec<f32>, ForwardCache), PolicyError> {
        for steps in index {
            if steps.len() != self.config.history {
                return Err(PolicyError::History {
                    expected: self.config.history,
                    got: steps.len(),
                });
            }
            if let Some(&bad) = steps.iter().find(|&&i| i >= images.n) {
                return Err(PolicyError::Config(format!("image index {bad} out of range")));
            }
        }
        let (feats, encoder) = self.encode(images)?;
        let (pred, lstm, h_final) = self.sequence_forward(&feats, images.n, index)?;
        Ok((
            pred,
            ForwardCache {
                encoder,
                lstm,
                h_final,
                index: index.to_vec(),
            },
        ))
    }

    /// Parameter gradients for a loss gradient `dpred` (`6 × b`).
    pub fn backward(&self, cache: &ForwardCache, dpred: &[f32]) -> Result<Grads, NnError> {
        let b = cache.index.len();
        let f = self.config.feature_dim;
        let u = cache.encoder.n;
        let mut grads = self.store.zero_grads();
        let dh = self
            .head
            .backward(&self.store, &cache.h_final, dpred, b, &mut grads, true)
            .expect("input gradient requested");
        let dxs = self.lstm.backward_sequence(&self.store, &cache.lstm, &dh, &mut grads);
        let mut dfeat = vec![0f32; f * u];
        for (k, dx) in dxs.iter().enumerate() {
            for (bi, steps) in cache.index.iter().enumerate() {
                let col = steps[k];
                for r in 0..f {
                    dfeat[r * u + col] += dx[r * b + bi];
                }
            }
        }
        self.encode_backward(&cache.encoder, &dfeat, &mut grads)?;
        grads.check_finite()?;
        Ok(grads)
    }

    /// Prediction for one history of rendered frames.
    pub fn forward_window(&self, history: &[&Frame]) -> Result<[f32; NUM_JOINTS], PolicyError> {
        if history.len() != self.config.history {
            return Err(PolicyError::History {
                expected: self.config.history,
                got: history.len(),
            });
        }
        let (images, index) = dedup_frames(&[history])?;
        let (pred, _) = self.forward_images(&images, &index)?;
        Ok(std::array::from_fn(|i| pred[i]))
    }

    /// Feature vector of one rendered frame, for callers that cache
    /// per-frame encodings across steps.
    pub fn encode_frame(&self, frame: &Frame) -> Result<Vec<f32>, PolicyError> {
        if self.config.image_size != IMAGE_SIZE {
            return Err(PolicyError::Config("policy is not configured for rendered frames".into()));
        }
        Ok(self.frame_features(&frames_to_maps(&[frame]))?)
    }

    /// Prediction from a history of cached frame features.
    pub fn predict_from_features(&self, history: &[&[f32]]) -> Result<[f32; NUM_JOINTS], PolicyError> {
        let h = self.config.history;
        let f = self.config.feature_dim;
        if history.len() != h {
            return Err(PolicyError::History {
                expected: h,
                got: history.len(),
            });
        }
        let mut feats = vec![0f32; f * h];
        for (k, col) in history.iter().enumerate() {
            if col.len() != f {
                return Err(PolicyError::Config(format!("feature length {} != {f}", col.len())));
            }
            for r in 0..f {
                feats[r * h + k] = col[r];
            }
        }
        let index = vec![(0..h).collect::<Vec<_>>()];
        let (pred, _, _) = self.sequence_forward(&feats, h, &index)?;
        Ok(std::array::from_fn(|i| pred[i]))
    }

    /// Predictions for many windows. Every distinct frame is encoded once.
    pub fn predict_samples(&self, samples: &[WindowSample]) -> Result<Vec<[f32; NUM_JOINTS]>, PolicyError> {
        tune_allocator();
        const ENCODE_CHUNK: usize = 64;
        const WINDOW_CHUNK: usize = 256;
        let histories: Vec<&[&Frame]> = samples.iter().map(|s| s.history.as_slice()).collect();
        let (unique, index) = unique_frames(&histories);
        let f = self.config.feature_dim;
        let u = unique.len();
        let mut feats = vec![0f32; f * u];
        for start in (0..u).step_by(ENCODE_CHUNK) {
            let chunk = &unique[start..(start + ENCODE_CHUNK).min(u)];
            let cf = self.frame_features(&frames_to_maps(chunk))?;
            let n = chunk.len();
            for r in 0..f {
                feats[r * u + start..r * u + start + n].copy_from_slice(&cf[r * n..(r + 1) * n]);
            }
        }
        let mut out = Vec::with_capacity(samples.len());
        for idx in index.chunks(WINDOW_CHUNK) {
            for steps in idx {
                if steps.len() != self.config.history {
                    return Err(PolicyError::History {
                        expected: self.config.history,
                        got: steps.len(),
                    });
                }
            }
            let (pred, _, _) = self.sequence_forward(&feats, u, idx)?;
            let b = idx.len();
            for bi in 0..b {
                out.push(std::array::from_fn(|j| pred[j * b + bi]));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<(), PolicyError> {
        let mut meta = self.config.to_pairs();
        meta.extend_from_slice(extra);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.store, &meta)?;
        write_atomic(path, &buf)?;
        Ok(())
    }

    /// Loads a checkpoint, returning the policy and any extra metadata.
    pub fn load(path: &Path) -> Result<(Self, Vec<(String, String)>), PolicyError> {
        let bytes = fs::read(path)?;
        let (store, meta) = read_checkpoint(&bytes[..])?;
        let config = PolicyConfig::from_pairs(&meta)?;
        Ok((Self::from_store(config, store)?, meta))
    }
}

/// `[3][n][64][64]` maps for rendered frames. Each value is the ink
/// intensity `1 - byte/255`, so the white background maps to zero.
pub fn frames_to_maps(frames: &[&Frame]) -> Maps {
    let n = frames.len();
    let p = IMAGE_SIZE * IMAGE_SIZE;
    let mut m = Maps::zeros(3, n, IMAGE_SIZE, IMAGE_SIZE);
    for (ni, f) in frames.iter().enumerate() {
        let bytes = f.as_bytes();
        for c in 0..3 {
            let dst = &mut m.data[(c * n + ni) * p..][..p];
            for (pi, d) in dst.iter_mut().enumerate() {
                *d = 1.0 - bytes[pi * 3 + c] as f32 * PIXEL_SCALE;
            }
        }
    }
    m
}

/// Distinct frames (by address) in first-seen order, and for every history
/// the position of each of its frames in that list.
fn unique_frames<'a>(histories: &[&[&'a Frame]]) -> (Vec<&'a Frame>, Vec<Vec<usize>>) {
    let mut seen: HashMap<*const Frame, usize> = HashMap::new();
    let mut unique = Vec::new();
    let index = histories
        .iter()
        .map(|h| {
            h.iter()
                .map(|&f| {
                    *seen.entry(f as *const Frame).or_insert_with(|| {
                        unique.push(f);
                        unique.len() - 1
                    })
                })
                .collect()
        })
        .collect();
    (unique, index)
}

fn dedup_frames(histories: &[&[&Frame]]) -> Result<(Maps, Vec<Vec<usize>>), PolicyError> {
    let (unique, index) = unique_frames(histories);
    Ok((frames_to_maps(&unique), index))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub policy: Policy,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: u64,
}

impl TrainedPolicy {
    pub fn log_text(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for e in &self.log {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.val_mse));
        }
        s
    }
}

fn target_f32(s: &WindowSample, repr: Representation) -> [f32; NUM_JOINTS] {
    s.target(repr).map(|v| v as f32)
}

/// Mean target over `samples`, used to initialize the output bias.
pub fn mean_target(samples: &[WindowSample], repr: Representation) -> [f32; NUM_JOINTS] {
    let mut acc = [0f64; NUM_JOINTS];
    for s in samples {
        for (a, v) in acc.iter_mut().zip(s.target(repr)) {
            *a += v;
        }
    }
    acc.map(|a| (a / samples.len().max(1) as f64) as f32)
}

/// Mini-batch Adam on the final-step MSE. Returns the parameters from the
/// epoch with the lowest validation MSE.
pub fn train(config: &PolicyConfig, train_set: &[WindowSample], val_set: &[WindowSample]) -> Result<TrainedPolicy, PolicyError> {
    config.validate()?;
    tune_allocator();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(PolicyError::Empty);
    }
    for s in train_set.iter().chain(val_set) {
        if s.history.len() != config.history {
            return Err(PolicyError::History {
                expected: config.history,
                got: s.history.len(),
            });
        }
    }
    let repr = config.representation;
    let mut policy = Policy::new(config.clone())?;
    policy.set_output_bias(mean_target(train_set, repr));
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut steps = 0usize;
    let cap = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let fault = |source| PolicyError::Training { epoch, batch: bi, source };
            let histories: Vec<&[&Frame]> = batch.iter().map(|&i| train_set[i].history.as_slice()).collect();
            let (images, index) = dedup_frames(&histories)?;
            let (pred, cache) = match policy.forward_images(&images, &index) {
                Ok(v) => v,
                Err(PolicyError::Nn(e)) => return Err(fault(e)),
                Err(e) => return Err(e),
            };
            let b = batch.len();
            let mut target = vec![0f32; NUM_JOINTS * b];
            for (col, &i) in batch.iter().enumerate() {
                for (j, v) in target_f32(&train_set[i], repr).into_iter().enumerate() {
                    target[j * b + col] = v;
                }
            }
            let (loss, dpred) = mse_slices(&pred, &target).map_err(fault)?;
            let grads = policy.backward(&cache, &dpred).map_err(fault)?;
            adam_step(&mut policy.store, &grads, &adam).map_err(fault)?;
            loss_sum += loss * b as f64;
            count += b;
            steps += 1;
            let stop = steps >= cap;
            if stop || bi == order.len().div_ceil(config.batch_size) - 1 {
                let val_mse = report_mse(&policy, val_set)?.mse;
                let entry = EpochLog {
                    epoch,
                    train_mse: loss_sum / count as f64,
                    val_mse,
                };
                log::debug!("epoch {epoch}: train {:.3e} val {:.3e}", entry.train_mse, val_mse);
                log.push(entry);
                if best.as_ref().is_none_or(|(v, _, _)| val_mse < *v) {
                    best = Some((val_mse, epoch, policy.store.clone()));
                }
            }
            if stop {
                break 'epochs;
            }
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    policy.store = store;
    Ok(TrainedPolicy {
        policy,
        log,
        best_epoch,
        steps: steps as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseReport {
    /// Mean squared joint error in position space.
    pub mse: f64,
}

impl MseReport {
    /// Value in units of 10⁻³.
    pub fn scaled(&self) -> f64 {
        self.mse * 1e3
    }
}

impl fmt::Display for MseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.scaled())
    }
}

/// Mean squared error of the predicted next joint configuration.
pub fn report_mse(policy: &Policy, samples: &[WindowSample]) -> Result<MseReport, PolicyError> {
    if samples.is_empty() {
        return Err(PolicyError::Empty);
    }
    let preds = policy.predict_samples(samples)?;
    Ok(MseReport {
        mse: position_mse(policy.config.representation, samples, &preds),
    })
}

pub fn position_mse(repr: Representation, samples: &[WindowSample], preds: &[[f32; NUM_JOINTS]]) -> f64 {
    let mut acc = 0f64;
    for (s, p) in samples.iter().zip(preds) {
        for j in 0..NUM_JOINTS {
            let predicted = match repr {
                Representation::Delta => s.base_joints.0[j] + p[j] as f64,
                Representation::Absolute => p[j] as f64,
            };
            let e = predicted - s.target_absolute.0[j];
            acc += e * e;
        }
    }
    acc / (samples.len() * NUM_JOINTS) as f64
}

/// Sample ids, for checking that two runs consumed identical inputs.
pub fn sample_ids(samples: &[WindowSample]) -> Vec<SampleId> {
    samples.iter().map(|s| s.id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_windows, build_windows_tagged};
    use crate::expert::{gen_demo, ExpertConfig};

    fn tiny_config(repr: Representation) -> PolicyConfig {
        PolicyConfig {
            representation: repr,
            history: 3,
            channels: vec![2, 3, 4, 4],
            feature_dim: 6,
            hidden_dim: 5,
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn config_checks() {
        assert_eq!(PolicyConfig::default().flat_dim(), 1024);
        assert!(PolicyConfig {
            history: 0,
            ..PolicyConfig::default()
        }
        .validate()
        .is_err());
        let cfg = tiny_config(Representation::Absolute);
        assert_eq!(PolicyConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    }

    #[test]
    fn constant_history_is_finite_and_deterministic() {
        let ep = gen_demo(1, 0, &ExpertConfig::default()).unwrap();
        let p = Policy::new(tiny_config(Representation::Delta)).unwrap();
        let hist = [&ep.frames[0]; 3];
        let a = p.forward_window(&hist).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(
            a,
            Policy::new(tiny_config(Representation::Delta))
                .unwrap()
                .forward_window(&hist)
                .unwrap()
        );
        assert!(matches!(
            p.forward_window(&hist[..2]),
            Err(PolicyError::History { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn frame_order_matters() {
        let ep = gen_demo(1, 0, &ExpertConfig::default()).unwrap();
        let p = Policy::new(tiny_config(Representation::Delta)).unwrap();
        let (a, b) = (&ep.frames[0], &ep.frames[12]);
        assert_ne!(a, b);
        let x = p.forward_window(&[a, a, b]).unwrap();
        let y = p.forward_window(&[b, a, a]).unwrap();
        let diff = x.iter().zip(&y).map(|(u, v)| (u - v).abs()).fold(0f32, f32::max);
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn cached_features_match_direct_forward() {
        let ep = gen_demo(2, 1, &ExpertConfig::default()).unwrap();
        let p = Policy::new(tiny_config(Representation::Delta)).unwrap();
        let hist = [&ep.frames[3], &ep.frames[4], &ep.frames[5]];
        let feats: Vec<Vec<f32>> = hist.iter().map(|f| p.encode_frame(f).unwrap()).collect();
        let refs: Vec<&[f32]> = feats.iter().map(|v| v.as_slice()).collect();
        assert_eq!(p.predict_from_features(&refs).unwrap(), p.forward_window(&hist).unwrap());

        let samples = build_windows(&ep, 3).unwrap();
        let batch = p.predict_samples(&samples[..10]).unwrap();
        for (s, b) in samples[..10].iter().zip(&batch) {
            let single = p.forward_window(&s.history).unwrap();
            for (x, y) in single.iter().zip(b) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn delta_report_equals_delta_space_mse() {
        let ep = gen_demo(3, 0, &ExpertConfig::default()).unwrap();
        let samples = build_windows(&ep, 3).unwrap();
        let p = Policy::new(tiny_config(Representation::Delta)).unwrap();
        let preds = p.predict_samples(&samples).unwrap();
        let position = position_mse(Representation::Delta, &samples, &preds);
        let mut acc = 0f64;
        for (s, pr) in samples.iter().zip(&preds) {
            for j in 0..NUM_JOINTS {
                let e = pr[j] as f64 - s.target_delta.0[j];
                acc += e * e;
            }
        }
        assert_eq!(position, acc / (samples.len() * NUM_JOINTS) as f64);
    }

    #[test]
    fn perfect_predictor_reports_zero() {
        let ep = gen_demo(3, 1, &ExpertConfig::default()).unwrap();
        let samples = build_windows(&ep, 2).unwrap();
        for repr in [Representation::Delta, Representation::Absolute] {
            let preds: Vec<[f32; 6]> = samples.iter().map(|s| s.target(repr).map(|v| v as f32)).collect();
            // Absolute targets are f32 values; deltas may round in the last bit.
            assert!(position_mse(repr, &samples, &preds) < 1e-14);
        }
    }

    #[test]
    fn scaled_display() {
        assert_eq!(MseReport { mse: 0.00615 }.to_string(), "6.15");
        assert_eq!(MseReport { mse: 0.18908 }.to_string(), "189.08");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.abcw");
        let p = Policy::new(tiny_config(Representation::Absolute)).unwrap();
        p.save(&path, &[("best_epoch".into(), "3".into())]).unwrap();
        let (q, meta) = Policy::load(&path).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.store, p.store);
        assert_eq!(metadata::lookup(&meta, "best_epoch"), Some("3"));
    }

    #[test]
    fn training_is_deterministic() {
        let eps: Vec<_> = (0..2).map(|i| gen_demo(4, i, &ExpertConfig::default()).unwrap()).collect();
        let samples: Vec<_> = eps
            .iter()
            .enumerate()
            .flat_map(|(i, e)| build_windows_tagged(e, i, 3).unwrap())
            .collect();
        let cfg = PolicyConfig {
            epochs: 3,
            ..tiny_config(Representation::Delta)
        };
        let a = train(&cfg, &samples, &samples).unwrap();
        let b = train(&cfg, &samples, &samples).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.policy.store, b.policy.store);
        assert!(a.log.iter().all(|l| l.train_mse.is_finite() && l.val_mse.is_finite()));
        assert!(a.log_text().starts_with("epoch,train_mse,val_mse\n"));
    }

    #[test]
    fn step_cap_limits_training() {
        let ep = gen_demo(4, 0, &ExpertConfig::default()).unwrap();
        let samples = build_windows(&ep, 3).unwrap();
        let cfg = PolicyConfig {
            max_steps: Some(5),
            epochs: 10,
            ..tiny_config(Representation::Absolute)
        };
        let t = train(&cfg, &samples, &samples).unwrap();
        assert_eq!(t.steps, 5);
        assert_eq!(t.log.len(), 1);
        assert_eq!(t.policy.store.step, 5);
    }
}
