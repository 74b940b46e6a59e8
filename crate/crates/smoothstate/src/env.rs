//! Deterministic pixel POMDP: a dot accelerating inside the unit square
//! with elastic wall bounces, rendered as an anti-aliased disc. Episodes
//! collected under a uniform random policy fill a replay buffer from which
//! fixed-length observation windows are sampled. Ground-truth latent states
//! ride along for probing only; the learner never sees them.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::Error;
use crate::graph_mask::ObservationSequence;
use crate::pgm::write_pgm;
use crate::tensor::Tensor;

/// Actions: 0 coast, 1 accelerate +x, 2 accelerate -x, 3 +y, 4 -y.
pub const N_ACTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl LatentState {
    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.vx, self.vy]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EnvConfig {
    pub h: usize,
    pub w: usize,
    pub dt: f64,
    /// Velocity change per acceleration action (per unit dt).
    pub accel: f64,
    pub v_max: f64,
    /// Dot radius in pixels.
    pub radius: f64,
    /// Episode length T.
    pub episode_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { h: 28, w: 28, dt: 1.0, accel: 0.05, v_max: 0.15, radius: 3.0, episode_len: 64 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.radius < 1.0 {
            return Err(Error::Config(format!("env.radius must be >= 1, got {}", self.radius)));
        }
        if self.v_max * self.dt >= 1.0 {
            return Err(Error::Config("env.v_max * env.dt must stay below 1".into()));
        }
        if self.episode_len < 1 {
            return Err(Error::Config("env.episode_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// One dynamics step: accelerate, clamp speed, integrate, bounce.
pub fn step(cfg: &EnvConfig, state: &LatentState, action: usize) -> LatentState {
    let (ax, ay) = match action {
        0 => (0.0, 0.0),
        1 => (1.0, 0.0),
        2 => (-1.0, 0.0),
        3 => (0.0, 1.0),
        4 => (0.0, -1.0),
        other => panic!("invalid action id {other}, expected 0..{N_ACTIONS}"),
    };
    let mut vx = (state.vx + cfg.accel * ax * cfg.dt).clamp(-cfg.v_max, cfg.v_max);
    let mut vy = (state.vy + cfg.accel * ay * cfg.dt).clamp(-cfg.v_max, cfg.v_max);
    let mut x = state.x + vx * cfg.dt;
    let mut y = state.y + vy * cfg.dt;
    if x > 1.0 {
        x = 2.0 - x;
        vx = -vx;
    } else if x < 0.0 {
        x = -x;
        vx = -vx;
    }
    if y > 1.0 {
        y = 2.0 - y;
        vy = -vy;
    } else if y < 0.0 {
        y = -y;
        vy = -vy;
    }
    LatentState { x, y, vx, vy }
}

/// Renders the dot as an anti-aliased disc with peak intensity 1.0 on a
/// zero background. Pixel (row, col) samples the field at integer
/// coordinates. Intensity falls off linearly with distance so the maximum
/// sits strictly at the dot center (a flat top would make argmax ambiguous).
pub fn render(cfg: &EnvConfig, state: &LatentState) -> Tensor {
    let (h, w) = (cfg.h, cfg.w);
    let cx = state.x * w as f64;
    let cy = state.y * h as f64;
    let mut frame = Tensor::zeros(vec![1, h, w]);
    let support = cfg.radius + 0.5;
    if cy + support < 0.0 || cx + support < 0.0 {
        return frame;
    }
    let y0 = ((cy - support).floor().max(0.0)) as usize;
    let y1 = ((cy + support).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - support).floor().max(0.0)) as usize;
    let x1 = ((cx + support).ceil().min(w as f64 - 1.0)) as usize;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dist = ((px as f64 - cx).powi(2) + (py as f64 - cy).powi(2)).sqrt();
            let t = (1.0 - dist / support).clamp(0.0, 1.0);
            // Hermite falloff: smooth at peak and rim keeps the sampled
            // mass stable under subpixel motion.
            frame.data[py * w + px] = t * t * (3.0 - 2.0 * t);
        }
    }
    frame
}

/// One rollout: frames (T, 1, H, W) with aligned actions, rewards (all
/// zero; no reward model), and ground-truth latents.
#[derive(Clone, Debug)]
pub struct Episode {
    pub frames: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub latents: Vec<[f64; 4]>,
}

/// Rolls out `cfg.episode_len` steps under a uniform random policy.
/// Everything is a pure function of (cfg, rng state).
pub fn generate_episode<R: Rng>(cfg: &EnvConfig, rng: &mut R) -> Episode {
    let t = cfg.episode_len;
    let (h, w) = (cfg.h, cfg.w);
    let mut state = LatentState {
        x: rng.gen_range(0.2..0.8),
        y: rng.gen_range(0.2..0.8),
        vx: 0.0,
        vy: 0.0,
    };
    let mut frames = Tensor::zeros(vec![t, 1, h, w]);
    let mut actions = Vec::with_capacity(t);
    let mut latents = Vec::with_capacity(t);
    for i in 0..t {
        let frame = render(cfg, &state);
        frames.data[i * h * w..(i + 1) * h * w].copy_from_slice(&frame.data);
        latents.push(state.as_array());
        let action = rng.gen_range(0..N_ACTIONS);
        actions.push(action);
        state = step(cfg, &state, action);
    }
    Episode { frames, actions, rewards: vec![0.0; t], latents }
}

/// Episode storage; the oldest episode is evicted once capacity is reached.
pub struct ReplayBuffer {
    pub episodes: Vec<Episode>,
    pub capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "replay buffer capacity must be >= 1");
        ReplayBuffer { episodes: Vec::new(), capacity }
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.remove(0);
        }
        self.episodes.push(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

/// An observation window with its aligned ground-truth latents.
#[derive(Clone, Debug)]
pub struct SampledWindow {
    pub seq: ObservationSequence,
    pub latents: Vec<[f64; 4]>,
}

/// Draws B windows of length F, uniform over (episode, start). Windows
/// never cross episode boundaries.
pub fn sample_batch<R: Rng>(
    buffer: &ReplayBuffer,
    batch: usize,
    f_len: usize,
    rng: &mut R,
) -> Vec<SampledWindow> {
    assert!(!buffer.is_empty(), "sample_batch: empty replay buffer");
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let ep = &buffer.episodes[rng.gen_range(0..buffer.episodes.len())];
        let t = ep.frames.shape[0];
        assert!(t >= f_len, "sample_batch: window F={f_len} longer than episode T={t}");
        let start = rng.gen_range(0..=(t - f_len));
        let (h, w) = (ep.frames.shape[2], ep.frames.shape[3]);
        let fs = h * w;
        let frames = Tensor::new(
            vec![f_len, 1, h, w],
            ep.frames.data[start * fs..(start + f_len) * fs].to_vec(),
        );
        out.push(SampledWindow {
            seq: ObservationSequence {
                frames,
                actions: ep.actions[start..start + f_len].to_vec(),
                rewards: ep.rewards[start..start + f_len].to_vec(),
                t0: start,
            },
            latents: ep.latents[start..start + f_len].to_vec(),
        });
    }
    out
}

/// Stacks windows into (B, F, c, H, W) frames plus row-major (B, F) actions.
pub fn stack_windows(windows: &[SampledWindow]) -> (Tensor, Vec<usize>) {
    assert!(!windows.is_empty());
    let fshape = &windows[0].seq.frames.shape;
    let (f, c, h, w) = (fshape[0], fshape[1], fshape[2], fshape[3]);
    let b = windows.len();
    let mut frames = Tensor::zeros(vec![b, f, c, h, w]);
    let mut actions = Vec::with_capacity(b * f);
    let per = f * c * h * w;
    for (bi, win) in windows.iter().enumerate() {
        assert_eq!(&win.seq.frames.shape, fshape, "stack_windows: ragged windows");
        frames.data[bi * per..(bi + 1) * per].copy_from_slice(&win.seq.frames.data);
        actions.extend_from_slice(&win.seq.actions);
    }
    (frames, actions)
}

/// Dumps an episode as PGM frames plus a `trajectory.csv` of
/// step, action, x, y, vx, vy.
pub fn dump_episode(dir: &Path, episode: &Episode) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let t = episode.frames.shape[0];
    let (h, w) = (episode.frames.shape[2], episode.frames.shape[3]);
    for i in 0..t {
        let frame = Tensor::new(
            vec![h, w],
            episode.frames.data[i * h * w..(i + 1) * h * w].to_vec(),
        );
        write_pgm(&dir.join(format!("frame_{i:03}.pgm")), &frame)?;
    }
    let mut csv = fs::File::create(dir.join("trajectory.csv"))?;
    writeln!(csv, "step,action,x,y,vx,vy")?;
    for i in 0..t {
        let l = episode.latents[i];
        writeln!(csv, "{},{},{},{},{},{}", i, episode.actions[i], l[0], l[1], l[2], l[3])?;
    }
    Ok(())
}
