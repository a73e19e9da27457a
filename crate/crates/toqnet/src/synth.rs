//! Deterministic generator of labeled multi-agent trajectories.
//!
//! Each class is a scripted motion pattern whose defining property is a
//! closed temporal formula over thresholded kinematic predicates. Every
//! generated trajectory is audited against its class formula with the
//! logic evaluator; failures (e.g. from positional noise) are regenerated
//! under a fresh sub-seed, so shipped labels are always clean.
//!
//! Positions are 2-D on a 40x30 field. Kinematics use backward
//! differences: `speed[t] = |p[t] - p[t-1]|` with the first frame padded
//! from the second.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{eval, Formula, GroundTrace};

pub const FIELD_W: f64 = 40.0;
pub const FIELD_H: f64 = 30.0;
pub const SCHEMA: &str = "toqnet-dataset-v1";
pub const GENERATOR_VERSION: &str = "1";
const MAX_ATTEMPTS: u32 = 100;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config: {0}")]
    Config(String),
    #[error("class `{class}` trajectory {index}: formula still violated after {attempts} attempts")]
    ResampleExhausted {
        class: String,
        index: usize,
        attempts: u32,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("unsupported schema `{found}` (expected `{expected}`)")]
    SchemaMismatch { found: String, expected: String },
    #[error("shift by {shift} moves frame_of_interest or length out of range")]
    ShiftOutOfRange { shift: i64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Team {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityFlags {
    pub is_token: bool,
    pub is_target: bool,
    pub team: Team,
}

/// One multi-entity motion clip. `positions[t][i]` is entity `i`'s (x, y)
/// at frame `t`. Exactly one token and one target entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "T")]
    pub t_len: usize,
    #[serde(rename = "N")]
    pub n_entities: usize,
    pub positions: Vec<Vec<[f64; 2]>>,
    pub flags: Vec<EntityFlags>,
    pub foi: usize,
}

impl Trajectory {
    pub fn token_index(&self) -> usize {
        self.flags.iter().position(|f| f.is_token).expect("one token")
    }

    pub fn target_index(&self) -> usize {
        self.flags.iter().position(|f| f.is_target).expect("one target")
    }

    /// Backward-difference velocity vectors `[T][N][2]`; frame 0 padded
    /// from frame 1.
    pub fn velocities(&self) -> Vec<Vec<[f64; 2]>> {
        let (t_len, n) = (self.t_len, self.n_entities);
        let mut v = vec![vec![[0.0; 2]; n]; t_len];
        for t in 1..t_len {
            for i in 0..n {
                v[t][i] = [
                    self.positions[t][i][0] - self.positions[t - 1][i][0],
                    self.positions[t][i][1] - self.positions[t - 1][i][1],
                ];
            }
        }
        if t_len >= 2 {
            v[0] = v[1].clone();
        }
        v
    }

    /// Speed magnitudes `[T][N]`.
    pub fn speeds(&self) -> Vec<Vec<f64>> {
        self.velocities()
            .iter()
            .map(|row| row.iter().map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt()).collect())
            .collect()
    }

    /// Acceleration magnitudes `[T][N]` (backward difference of velocity,
    /// frame 0 padded).
    pub fn accels(&self) -> Vec<Vec<f64>> {
        let v = self.velocities();
        let (t_len, n) = (self.t_len, self.n_entities);
        let mut a = vec![vec![0.0; n]; t_len];
        for t in 1..t_len {
            for i in 0..n {
                let dx = v[t][i][0] - v[t - 1][i][0];
                let dy = v[t][i][1] - v[t - 1][i][1];
                a[t][i] = (dx * dx + dy * dy).sqrt();
            }
        }
        if t_len >= 2 {
            a[0] = a[1].clone();
        }
        a
    }

    /// Pairwise distances `[T][N][N]`.
    pub fn pair_dists(&self) -> Vec<Vec<Vec<f64>>> {
        let (t_len, n) = (self.t_len, self.n_entities);
        let mut d = vec![vec![vec![0.0; n]; n]; t_len];
        for t in 0..t_len {
            for i in 0..n {
                for j in 0..n {
                    let dx = self.positions[t][i][0] - self.positions[t][j][0];
                    let dy = self.positions[t][i][1] - self.positions[t][j][1];
                    d[t][i][j] = (dx * dx + dy * dy).sqrt();
                }
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrajectory {
    #[serde(flatten)]
    pub traj: Trajectory,
    pub label: usize,
    pub class_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Chase,
    Pass,
    Scatter,
    Guard,
}

impl ClassKind {
    pub const ALL: [ClassKind; 4] = [
        ClassKind::Chase,
        ClassKind::Pass,
        ClassKind::Scatter,
        ClassKind::Guard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassKind::Chase => "chase",
            ClassKind::Pass => "pass",
            ClassKind::Scatter => "scatter",
            ClassKind::Guard => "guard",
        }
    }

    pub fn from_name(s: &str) -> Option<ClassKind> {
        ClassKind::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Defining formula over the thresholded predicates of
    /// `derive_predicates`, evaluated at the frame of interest.
    pub fn formula(self) -> Formula {
        let parse = |s: &str| crate::logic::parse(s).expect("class formula parses");
        match self {
            // Target keeps moving until it is near the token.
            ClassKind::Chase => parse(
                "exists a. exists b. istarget(a) & istoken(b) & (moving(a) U near(a,b))",
            ),
            // Target dribbles the token until the token flies until a
            // non-target teammate receives it.
            ClassKind::Pass => parse(
                "exists a. exists b. istarget(a) & istoken(b) & \
                 (near(a,b) U (fast(b) U exists c. sameteam(c) & !istarget(c) & near(c,b)))",
            ),
            // Everyone starts clustered, then all pairs end up far apart.
            ClassKind::Scatter => parse(
                "(forall x. forall y. near(x,y)) & F forall x. forall y. apart(x,y)",
            ),
            // The target never moves.
            ClassKind::Guard => parse("G forall x. !istarget(x) | !moving(x)"),
        }
    }
}

impl fmt::Display for ClassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_entities: usize,
    pub t_len: usize,
    pub classes: Vec<ClassKind>,
    pub per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 2 {
            return Err(SynthError::Config("need at least 2 entities".into()));
        }
        if self.t_len < 8 {
            return Err(SynthError::Config("need at least 8 frames".into()));
        }
        if self.noise_std < 0.0 {
            return Err(SynthError::Config("noise std must be >= 0".into()));
        }
        if self.classes.is_empty() {
            return Err(SynthError::Config("class set is empty".into()));
        }
        if self.classes.contains(&ClassKind::Pass) && self.n_entities < 3 {
            return Err(SynthError::Config(
                "class `pass` needs at least 3 entities (target, token, receiver)".into(),
            ));
        }
        if self.classes.contains(&ClassKind::Scatter) && self.n_entities > 12 {
            return Err(SynthError::Config(
                "class `scatter` supports at most 12 entities (separation grid)".into(),
            ));
        }
        Ok(())
    }
}

/// Kinematic thresholds shared by the generator, the label audit, and the
/// predicate derivation. `near`/`apart` are distances, `fast`/`moving`
/// speeds per frame; all scale linearly with position units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub near: f64,
    pub apart: f64,
    pub fast: f64,
    pub moving: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            near: 3.0,
            apart: 10.0,
            fast: 1.5,
            moving: 0.75,
        }
    }
}

impl Thresholds {
    pub fn scaled(self, c: f64) -> Thresholds {
        Thresholds {
            near: self.near * c,
            apart: self.apart * c,
            fast: self.fast * c,
            moving: self.moving * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub generator_version: String,
    pub config: ScenarioConfig,
    /// Cumulative position-unit multiplier applied by `warp` scale.
    pub scale: f64,
    /// How many script attempts were discarded by the label audit.
    pub resamples: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub items: Vec<LabeledTrajectory>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    s
}

fn clamp_field(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, FIELD_W), p[1].clamp(0.0, FIELD_H)]
}

/// Random walk step with reflecting boundaries.
fn walk_step(p: [f64; 2], rng: &mut ChaCha12Rng, step_std: f64) -> [f64; 2] {
    let mut q = [
        p[0] + rng.gen_range(-1.0..1.0) * step_std * 1.732,
        p[1] + rng.gen_range(-1.0..1.0) * step_std * 1.732,
    ];
    for (c, hi) in [(0, FIELD_W), (1, FIELD_H)] {
        if q[c] < 0.0 {
            q[c] = -q[c];
        }
        if q[c] > hi {
            q[c] = 2.0 * hi - q[c];
        }
    }
    q
}

fn unit_towards(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let d = (dx * dx + dy * dy).sqrt();
    if d < 1e-9 {
        [0.0, 0.0]
    } else {
        [dx / d, dy / d]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Entity 0 is the token, entity 1 the target (team A), entity 2 a
/// teammate (team A); remaining entities alternate B/A.
fn default_flags(n: usize) -> Vec<EntityFlags> {
    (0..n)
        .map(|i| EntityFlags {
            is_token: i == 0,
            is_target: i == 1,
            team: match i {
                0 => Team::B,
                1 | 2 => Team::A,
                _ => {
                    if i % 2 == 1 {
                        Team::B
                    } else {
                        Team::A
                    }
                }
            },
        })
        .collect()
}

/// Scripted positions for one trajectory, before noise.
fn script(class: ClassKind, cfg: &ScenarioConfig, rng: &mut ChaCha12Rng) -> Vec<Vec<[f64; 2]>> {
    let (t_len, n) = (cfg.t_len, cfg.n_entities);
    let mut pos = vec![vec![[0.0; 2]; n]; t_len];
    let center = [FIELD_W / 2.0, FIELD_H / 2.0];

    // Distractor start positions anywhere on the field.
    let mut starts: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.gen_range(2.0..FIELD_W - 2.0), rng.gen_range(2.0..FIELD_H - 2.0)])
        .collect();

    match class {
        ClassKind::Chase => {
            // Token drifts; target closes at 1.4/frame until within reach,
            // then trails the token at a fixed offset.
            let token0 = [
                center[0] + rng.gen_range(-4.0..4.0),
                center[1] + rng.gen_range(-4.0..4.0),
            ];
            let drift_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let drift = [0.3 * drift_angle.cos(), 0.3 * drift_angle.sin()];
            let d0 = (1.4 * 0.55 * t_len as f64).min(16.0).max(6.5);
            let approach_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            starts[1] = clamp_field([
                token0[0] + d0 * approach_angle.cos(),
                token0[1] + d0 * approach_angle.sin(),
            ]);
            starts[0] = token0;
            for i in 0..n {
                pos[0][i] = starts[i];
            }
            let mut caught = false;
            for t in 1..t_len {
                let tok_prev = pos[t - 1][0];
                let mut tok = [tok_prev[0] + drift[0], tok_prev[1] + drift[1]];
                tok = clamp_field(tok);
                pos[t][0] = tok;
                let tgt_prev = pos[t - 1][1];
                if !caught && dist(tgt_prev, tok) < 1.5 {
                    caught = true;
                }
                pos[t][1] = if caught {
                    // Trail: stay glued near the token, slow.
                    let u = unit_towards(tok, tgt_prev);
                    clamp_field([tok[0] + u[0] * 1.0, tok[1] + u[1] * 1.0])
                } else {
                    let u = unit_towards(tgt_prev, tok);
                    clamp_field([tgt_prev[0] + u[0] * 1.4, tgt_prev[1] + u[1] * 1.4])
                };
                for i in 2..n {
                    pos[t][i] = walk_step(pos[t - 1][i], rng, 0.4);
                }
            }
        }
        ClassKind::Pass => {
            // Dribble together, then the token flies to the receiver.
            let t_launch = (0.35 * t_len as f64).floor() as usize;
            let flight_frames = ((0.3 * t_len as f64).ceil() as usize).max(2);
            let flight_dist = 3.0 * flight_frames as f64;

            let tgt0 = [
                rng.gen_range(6.0..FIELD_W - 6.0),
                rng.gen_range(6.0..FIELD_H - 6.0),
            ];
            let dribble_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let dribble = [0.9 * dribble_angle.cos(), 0.9 * dribble_angle.sin()];
            starts[1] = tgt0;
            starts[0] = clamp_field([tgt0[0] + 1.0, tgt0[1]]);
            for i in 0..n {
                pos[0][i] = starts[i];
            }
            // Receiver placed at flight distance from the launch point.
            let launch_point = [
                (tgt0[0] + 1.0 + dribble[0] * t_launch as f64).clamp(1.0, FIELD_W - 1.0),
                (tgt0[1] + dribble[1] * t_launch as f64).clamp(1.0, FIELD_H - 1.0),
            ];
            let recv = loop {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let q = [
                    launch_point[0] + flight_dist * a.cos(),
                    launch_point[1] + flight_dist * a.sin(),
                ];
                if q[0] > 1.0 && q[0] < FIELD_W - 1.0 && q[1] > 1.0 && q[1] < FIELD_H - 1.0 {
                    break q;
                }
            };
            for t in 1..t_len {
                // Target dribbles then stops.
                pos[t][1] = if t <= t_launch {
                    clamp_field([
                        pos[t - 1][1][0] + dribble[0],
                        pos[t - 1][1][1] + dribble[1],
                    ])
                } else {
                    pos[t - 1][1]
                };
                // Token follows target through t_launch, then flies.
                pos[t][0] = if t <= t_launch {
                    clamp_field([pos[t][1][0] + 1.0, pos[t][1][1]])
                } else {
                    let prev = pos[t - 1][0];
                    if dist(prev, recv) <= 3.0 {
                        prev
                    } else {
                        let u = unit_towards(prev, recv);
                        let step = 3.0f64.min(dist(prev, recv) - 1.0).max(2.0);
                        clamp_field([prev[0] + u[0] * step, prev[1] + u[1] * step])
                    }
                };
                // Receiver idles at its post with a small jitter.
                pos[t][2] = [
                    recv[0] + rng.gen_range(-0.05..0.05),
                    recv[1] + rng.gen_range(-0.05..0.05),
                ];
                for i in 3..n {
                    pos[t][i] = walk_step(pos[t - 1][i], rng, 0.4);
                }
            }
            pos[0][2] = pos[1][2];
        }
        ClassKind::Scatter => {
            // Cluster until t_break, then walk straight to separated slots.
            let t_break = (0.25 * t_len as f64).floor() as usize;
            let t_arrive = t_len - 2;
            let slots: Vec<[f64; 2]> = {
                let xs = [2.0, 14.5, 27.0, 39.5];
                let ys = [2.0, 15.0, 28.0];
                let mut s: Vec<[f64; 2]> = ys
                    .iter()
                    .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
                    .collect();
                // Deterministic per-trajectory assignment.
                for i in (1..s.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    s.swap(i, j);
                }
                s
            };
            let cluster: Vec<[f64; 2]> = (0..n)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / n as f64;
                    [center[0] + 0.9 * a.cos(), center[1] + 0.9 * a.sin()]
                })
                .collect();
            for t in 0..t_len {
                for i in 0..n {
                    pos[t][i] = if t <= t_break {
                        cluster[i]
                    } else if t >= t_arrive {
                        slots[i]
                    } else {
                        let frac = (t - t_break) as f64 / (t_arrive - t_break) as f64;
                        [
                            cluster[i][0] + frac * (slots[i][0] - cluster[i][0]),
                            cluster[i][1] + frac * (slots[i][1] - cluster[i][1]),
                        ]
                    };
                }
            }
        }
        ClassKind::Guard => {
            // Target jitters at its post; everyone else random-walks.
            let post = [
                rng.gen_range(4.0..FIELD_W - 4.0),
                rng.gen_range(4.0..FIELD_H - 4.0),
            ];
            starts[1] = post;
            for i in 0..n {
                pos[0][i] = starts[i];
            }
            for t in 1..t_len {
                pos[t][1] = [
                    post[0] + rng.gen_range(-0.05..0.05),
                    post[1] + rng.gen_range(-0.05..0.05),
                ];
                for i in (0..n).filter(|&i| i != 1) {
                    pos[t][i] = walk_step(pos[t - 1][i], rng, 0.4);
                }
            }
        }
    }
    pos
}

/// Binarized kinematic predicates for the oracle:
/// `near(x,y)` dist < near threshold (reflexively true); `apart(x,y)`
/// x = y or dist > apart threshold; `fast(x)`, `moving(x)` speed
/// thresholds; plus the entity flags `istoken`, `istarget`, `sameteam`
/// (same team as the target).
pub fn derive_predicates(tr: &Trajectory, th: &Thresholds) -> GroundTrace {
    let (t_len, n) = (tr.t_len, tr.n_entities);
    let mut g = GroundTrace::new(t_len, n);
    let d = tr.pair_dists();
    let s = tr.speeds();
    let mut near = Vec::with_capacity(t_len * n * n);
    let mut apart = Vec::with_capacity(t_len * n * n);
    let mut fast = Vec::with_capacity(t_len * n);
    let mut moving = Vec::with_capacity(t_len * n);
    for t in 0..t_len {
        for i in 0..n {
            fast.push(s[t][i] >= th.fast);
            moving.push(s[t][i] >= th.moving);
            for j in 0..n {
                near.push(d[t][i][j] < th.near);
                apart.push(i == j || d[t][i][j] > th.apart);
            }
        }
    }
    g.add_binary("near", near);
    g.add_binary("apart", apart);
    g.add_unary("fast", fast);
    g.add_unary("moving", moving);
    let target_team = tr.flags[tr.target_index()].team;
    let per_entity = |f: &dyn Fn(&EntityFlags) -> bool| -> Vec<bool> {
        let row: Vec<bool> = tr.flags.iter().map(|fl| f(fl)).collect();
        (0..t_len).flat_map(|_| row.iter().copied()).collect()
    };
    g.add_unary("istoken", per_entity(&|f| f.is_token));
    g.add_unary("istarget", per_entity(&|f| f.is_target));
    g.add_unary("sameteam", per_entity(&|f| f.team == target_team));
    g
}

/// Does `tr` satisfy `f` at its frame of interest?
pub fn satisfies(tr: &Trajectory, f: &Formula, th: &Thresholds) -> bool {
    let g = derive_predicates(tr, th);
    eval(f, &g, tr.foi, &BTreeMap::new()).unwrap_or(false)
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Dataset> {
    cfg.validate()?;
    let th = Thresholds::default();
    let mut items = Vec::with_capacity(cfg.classes.len() * cfg.per_class);
    let mut resamples = 0;
    for (label, &class) in cfg.classes.iter().enumerate() {
        for index in 0..cfg.per_class {
            let mut made = None;
            for attempt in 0..MAX_ATTEMPTS {
                let seed = sub_seed(cfg.seed, &[label as u64, index as u64, attempt as u64]);
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let mut positions = script(class, cfg, &mut rng);
                for row in positions.iter_mut().flatten() {
                    row[0] += rng.gen_range(-1.0..1.0) * cfg.noise_std * 1.732;
                    row[1] += rng.gen_range(-1.0..1.0) * cfg.noise_std * 1.732;
                }
                let traj = Trajectory {
                    t_len: cfg.t_len,
                    n_entities: cfg.n_entities,
                    positions,
                    flags: default_flags(cfg.n_entities),
                    foi: 1,
                };
                if satisfies(&traj, &class.formula(), &th) {
                    made = Some(traj);
                    break;
                }
                resamples += 1;
            }
            let traj = made.ok_or(SynthError::ResampleExhausted {
                class: class.name().to_string(),
                index,
                attempts: MAX_ATTEMPTS,
            })?;
            items.push(LabeledTrajectory {
                traj,
                label,
                class_name: class.name().to_string(),
            });
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            schema: SCHEMA.to_string(),
            generator_version: GENERATOR_VERSION.to_string(),
            config: cfg.clone(),
            scale: 1.0,
            resamples,
        },
        items,
    })
}

/// Audit every item against its class formula. Thresholds are scaled by
/// the dataset's cumulative position scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub total: usize,
    pub passed: usize,
    pub failed_indices: Vec<usize>,
}

pub fn audit(ds: &Dataset) -> AuditReport {
    let th = Thresholds::default().scaled(ds.header.scale);
    let mut failed = Vec::new();
    for (i, item) in ds.items.iter().enumerate() {
        let class = ClassKind::from_name(&item.class_name);
        let ok = match class {
            Some(c) => satisfies(&item.traj, &c.formula(), &th),
            None => false,
        };
        if !ok {
            failed.push(i);
        }
    }
    AuditReport {
        total: ds.items.len(),
        passed: ds.items.len() - failed.len(),
        failed_indices: failed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Warp {
    /// Positive: prepend that many copies of frame 0. Negative: drop
    /// leading frames (frame of interest must survive).
    Shift(i64),
    /// Repeat every frame `k` times.
    Stretch(u32),
    /// Keep every `k`-th frame (indices 0, k, 2k, ...).
    Compress(u32),
    /// Multiply all positions (hence speeds) by `c`.
    Scale(f64),
}

pub fn warp(ds: &Dataset, kind: Warp) -> Result<Dataset> {
    let mut out = ds.clone();
    match kind {
        Warp::Shift(k) => {
            for item in &mut out.items {
                let tr = &mut item.traj;
                if k >= 0 {
                    let k = k as usize;
                    let first = tr.positions[0].clone();
                    for _ in 0..k {
                        tr.positions.insert(0, first.clone());
                    }
                    tr.t_len += k;
                    tr.foi += k;
                } else {
                    let k = (-k) as usize;
                    if tr.foi < k || tr.t_len - k < 2 {
                        return Err(SynthError::ShiftOutOfRange { shift: -(k as i64) });
                    }
                    tr.positions.drain(0..k);
                    tr.t_len -= k;
                    tr.foi -= k;
                }
            }
        }
        Warp::Stretch(k) => {
            if k == 0 {
                return Err(SynthError::Config("stretch factor must be >= 1".into()));
            }
            for item in &mut out.items {
                let tr = &mut item.traj;
                tr.positions = tr
                    .positions
                    .iter()
                    .flat_map(|f| std::iter::repeat(f.clone()).take(k as usize))
                    .collect();
                tr.t_len *= k as usize;
                tr.foi *= k as usize;
            }
        }
        Warp::Compress(k) => {
            if k == 0 {
                return Err(SynthError::Config("compress factor must be >= 1".into()));
            }
            for item in &mut out.items {
                let tr = &mut item.traj;
                tr.positions = tr
                    .positions
                    .iter()
                    .step_by(k as usize)
                    .cloned()
                    .collect();
                tr.t_len = tr.positions.len();
                tr.foi /= k as usize;
            }
        }
        Warp::Scale(c) => {
            if c <= 0.0 {
                return Err(SynthError::Config("scale must be > 0".into()));
            }
            for item in &mut out.items {
                for row in item.traj.positions.iter_mut().flatten() {
                    row[0] *= c;
                    row[1] *= c;
                }
            }
            out.header.scale *= c;
        }
    }
    Ok(out)
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &ds.header).map_err(io_err)?;
    f.write_all(b"\n")?;
    for item in &ds.items {
        serde_json::to_writer(&mut f, item).map_err(io_err)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn io_err(e: serde_json::Error) -> SynthError {
    SynthError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header_line = lines
        .next()
        .ok_or(SynthError::Malformed {
            line: 1,
            msg: "empty file; expected header".into(),
        })??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| SynthError::Malformed {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
    if header.schema != SCHEMA {
        return Err(SynthError::SchemaMismatch {
            found: header.schema,
            expected: SCHEMA.to_string(),
        });
    }
    let mut items = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: LabeledTrajectory =
            serde_json::from_str(&line).map_err(|e| SynthError::Malformed {
                line: i + 2,
                msg: e.to_string(),
            })?;
        items.push(item);
    }
    Ok(Dataset { header, items })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            n_entities: 4,
            t_len: 16,
            classes: ClassKind::ALL.to_vec(),
            per_class: 5,
            noise_std: 0.1,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save(&a, &pa).unwrap();
        save(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn audit_passes_fully_with_and_without_noise() {
        let mut cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let rep = audit(&ds);
        assert_eq!(rep.passed, rep.total, "failures: {:?}", rep.failed_indices);

        cfg.noise_std = 0.0;
        let clean = generate(&cfg).unwrap();
        assert_eq!(clean.header.resamples, 0, "noise-free scripts never resample");
        let rep = audit(&clean);
        assert_eq!(rep.passed, rep.total);
    }

    #[test]
    fn class_balance_exact() {
        let ds = generate(&small_cfg()).unwrap();
        for label in 0..4 {
            assert_eq!(ds.items.iter().filter(|i| i.label == label).count(), 5);
        }
    }

    #[test]
    fn guard_target_stays_at_post() {
        let cfg = ScenarioConfig {
            classes: vec![ClassKind::Guard],
            noise_std: 0.0,
            ..small_cfg()
        };
        let ds = generate(&cfg).unwrap();
        for item in &ds.items {
            let tr = &item.traj;
            let p0 = tr.positions[1][1];
            for t in 0..tr.t_len {
                assert!(dist(tr.positions[t][1], p0) <= 0.2, "target left its post");
            }
        }
    }

    #[test]
    fn derived_predicates_trivial_cases() {
        // Two coincident, stationary entities.
        let tr = Trajectory {
            t_len: 3,
            n_entities: 2,
            positions: vec![vec![[5.0, 5.0]; 2]; 3],
            flags: default_flags(2),
            foi: 0,
        };
        let g = derive_predicates(&tr, &Thresholds::default());
        for t in 0..3 {
            assert!(g.lookup("near", t, &[0, 1]).unwrap());
            assert!(!g.lookup("fast", t, &[0]).unwrap());
            assert!(!g.lookup("moving", t, &[1]).unwrap());
            assert!(g.lookup("apart", t, &[1, 1]).unwrap(), "apart is reflexive");
            assert!(!g.lookup("apart", t, &[0, 1]).unwrap());
        }
    }

    #[test]
    fn fast_crossing_by_hand() {
        // Speeds (backward diff, frame 0 padded): 0.3, 0.3, 1.7.
        let xs = [0.0, 0.3, 2.0];
        let tr = Trajectory {
            t_len: 3,
            n_entities: 2,
            positions: xs.iter().map(|&x| vec![[x, 0.0], [10.0, 10.0]]).collect(),
            flags: default_flags(2),
            foi: 0,
        };
        let g = derive_predicates(&tr, &Thresholds::default());
        let fast: Vec<bool> = (0..3).map(|t| g.lookup("fast", t, &[0]).unwrap()).collect();
        assert_eq!(fast, vec![false, false, true]);
    }

    #[test]
    fn kinematics_pad_first_frame() {
        let tr = Trajectory {
            t_len: 3,
            n_entities: 1,
            positions: vec![vec![[0.0, 0.0]], vec![[1.0, 0.0]], vec![[3.0, 0.0]]],
            flags: vec![EntityFlags {
                is_token: true,
                is_target: true,
                team: Team::A,
            }],
            foi: 0,
        };
        let s = tr.speeds();
        assert_eq!(s[0][0], s[1][0]);
        assert_eq!(s[1][0], 1.0);
        assert_eq!(s[2][0], 2.0);
        let a = tr.accels();
        assert_eq!(a[2][0], 1.0);
        assert_eq!(a[0][0], a[1][0]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_cfg()).unwrap();
        let p = dir.path().join("ds.jsonl");
        save(&ds, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(ds, back);
        // Re-save is byte-identical.
        let p2 = dir.path().join("ds2.jsonl");
        save(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_reports_failing_line() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_cfg()).unwrap();
        let p = dir.path().join("ds.jsonl");
        save(&ds, &p).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        let keep: Vec<&str> = text.lines().take(3).collect();
        text = format!("{}\n{{truncated", keep.join("\n"));
        std::fs::write(&p, text).unwrap();
        match load(&p) {
            Err(SynthError::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected malformed-line error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_unknown_schema() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_cfg()).unwrap();
        let p = dir.path().join("ds.jsonl");
        save(&ds, &p).unwrap();
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace(SCHEMA, "toqnet-dataset-v9");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load(&p), Err(SynthError::SchemaMismatch { .. })));
    }

    #[test]
    fn shift_warp_remaps_frame_of_interest() {
        let ds = generate(&small_cfg()).unwrap();
        let shifted = warp(&ds, Warp::Shift(5)).unwrap();
        for (a, b) in ds.items.iter().zip(&shifted.items) {
            assert_eq!(b.traj.t_len, a.traj.t_len + 5);
            assert_eq!(b.traj.foi, a.traj.foi + 5);
            assert_eq!(b.traj.positions[0], b.traj.positions[5]);
            assert_eq!(&b.traj.positions[5..], &a.traj.positions[..]);
        }
        // Shifted data still satisfies its formulas: frame 0 is frozen, so
        // prepended frames show a stationary scene.
        let rep = audit(&shifted);
        assert_eq!(rep.passed, rep.total, "failures: {:?}", rep.failed_indices);

        // Negative shift past the frame of interest must fail.
        assert!(matches!(
            warp(&ds, Warp::Shift(-2)),
            Err(SynthError::ShiftOutOfRange { .. })
        ));
    }

    #[test]
    fn stretch_and_compress_invert() {
        let ds = generate(&small_cfg()).unwrap();
        let stretched = warp(&ds, Warp::Stretch(2)).unwrap();
        for (a, b) in ds.items.iter().zip(&stretched.items) {
            assert_eq!(b.traj.t_len, 2 * a.traj.t_len);
            assert_eq!(b.traj.foi, 2 * a.traj.foi);
        }
        let back = warp(&stretched, Warp::Compress(2)).unwrap();
        for (a, b) in ds.items.iter().zip(&back.items) {
            assert_eq!(b.traj.t_len, a.traj.t_len);
            assert_eq!(b.traj.positions, a.traj.positions);
        }
    }

    #[test]
    fn scale_warp_scales_positions_and_audits_clean() {
        let ds = generate(&small_cfg()).unwrap();
        let scaled = warp(&ds, Warp::Scale(2.0)).unwrap();
        assert_eq!(scaled.header.scale, 2.0);
        let a = ds.items[0].traj.positions[3][2];
        let b = scaled.items[0].traj.positions[3][2];
        assert_eq!([a[0] * 2.0, a[1] * 2.0], b);
        // Audit rescales thresholds, so labels survive exactly.
        let rep = audit(&scaled);
        assert_eq!(rep.passed, rep.total);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.n_entities = 1;
        assert!(generate(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.t_len = 4;
        assert!(generate(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.classes = vec![ClassKind::Pass];
        cfg.n_entities = 2;
        assert!(generate(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.classes = vec![ClassKind::Scatter];
        cfg.n_entities = 13;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn more_entities_still_audit_clean() {
        let cfg = ScenarioConfig {
            n_entities: 8,
            ..small_cfg()
        };
        let ds = generate(&cfg).unwrap();
        let rep = audit(&ds);
        assert_eq!(rep.passed, rep.total, "failures: {:?}", rep.failed_indices);
    }

    #[test]
    fn class_formulas_validate_against_signature() {
        let tr = Trajectory {
            t_len: 3,
            n_entities: 2,
            positions: vec![vec![[0.0, 0.0]; 2]; 3],
            flags: default_flags(2),
            foi: 0,
        };
        let g = derive_predicates(&tr, &Thresholds::default());
        let sig = g.signature();
        for c in ClassKind::ALL {
            c.formula().validate(&sig).unwrap();
        }
        // eval_all agrees with the closed-formula contract.
        for c in ClassKind::ALL {
            match crate::logic::eval_all(&c.formula(), &g).unwrap() {
                crate::logic::EvalAll::Closed(v) => assert_eq!(v.len(), 3),
                _ => panic!("class formulas are closed"),
            }
        }
    }
}
