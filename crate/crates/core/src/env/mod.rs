//! Deterministic tabletop pick-and-place world.
//!
//! Coordinates are fractions of the arena in `[0, 1]^2`. Blocks and pads
//! start on the centers of a 4x4 lattice, which line up with the 8x8 patches
//! of a 32x32 render. The agent starts on the home cell in the corner.

mod dataset;
mod store;

pub use dataset::{generate_dataset, thin_keyframes, DatasetStats, Episode, KEYFRAME_THRESHOLD, MIN_FRAMES};
pub use store::{read_episodes, write_episodes, EpisodeRecord, STORE_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::vision_codec::Image;

pub const IMAGE_SIZE: usize = 32;
pub const ACTION_DIM: usize = 3;
pub const MAX_STEPS: usize = 100;
pub const MAX_DELTA: f32 = 0.1;
pub const GRASP_RADIUS: f32 = 0.05;
pub const SUCCESS_RADIUS: f32 = 0.05;
pub const LATTICE: [f32; 4] = [0.125, 0.375, 0.625, 0.875];
/// Lattice cell the agent starts on; never holds a block or pad.
pub const HOME_CELL: usize = 0;

pub type EnvAction = [f32; ACTION_DIM];

const EXPERT_GAIN: f32 = 0.5;
const EXPERT_TOL: f32 = 0.005;

const BACKGROUND: [u8; 3] = [40, 40, 40];
const AGENT_OPEN: [u8; 3] = [255, 255, 255];
const AGENT_CLOSED: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 40],
            Color::Blue => [40, 80, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskSpec {
    /// One block onto one pad.
    #[serde(rename = "single")]
    Single,
    /// Two blocks onto two pads, in order.
    #[serde(rename = "long")]
    LongHorizon,
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskSpec::Single => "single",
            TaskSpec::LongHorizon => "long",
        })
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TaskSpec::Single),
            "long" => Ok(TaskSpec::LongHorizon),
            other => Err(Error::invalid(format!("unknown task spec {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub pos: [f32; 2],
    pub color: Color,
    pub held: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub pos: [f32; 2],
    pub color: Color,
}

/// Put `blocks[block]` on `goals[goal]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subgoal {
    pub block: usize,
    pub goal: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub seed: u64,
    pub task: TaskSpec,
    pub agent: [f32; 2],
    pub gripper_closed: bool,
    pub blocks: Vec<Block>,
    pub goals: Vec<Goal>,
    pub subgoals: Vec<Subgoal>,
    /// Index of the first subgoal not yet achieved.
    pub stage: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f32,
    pub done: bool,
    pub success: bool,
}

fn dist_inf(a: [f32; 2], b: [f32; 2]) -> f32 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

fn dist2(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Places 2-4 blocks and 1-2 pads on distinct lattice cells away from home.
pub fn reset(task: TaskSpec, seed: u64) -> (EnvState, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<usize> = (0..16).filter(|&c| c != HOME_CELL).collect();
    cells.shuffle(&mut rng);
    let cell = |i: usize| [LATTICE[i % 4], LATTICE[i / 4]];
    let (n_blocks, n_goals) = match task {
        TaskSpec::Single => (rng.random_range(2..=4), rng.random_range(1..=2)),
        TaskSpec::LongHorizon => (rng.random_range(2..=4), 2),
    };
    let mut colors = Color::ALL;
    colors.shuffle(&mut rng);
    let mut pad_colors = Color::ALL;
    pad_colors.shuffle(&mut rng);
    let blocks: Vec<Block> =
        (0..n_blocks).map(|i| Block { pos: cell(cells[i]), color: colors[i], held: false }).collect();
    let goals: Vec<Goal> =
        (0..n_goals).map(|i| Goal { pos: cell(cells[n_blocks + i]), color: pad_colors[i] }).collect();
    let agent = cell(HOME_CELL);
    let first = Subgoal { block: rng.random_range(0..n_blocks), goal: rng.random_range(0..n_goals) };
    let mut subgoals = vec![first];
    if task == TaskSpec::LongHorizon {
        let mut second = rng.random_range(0..n_blocks - 1);
        if second >= first.block {
            second += 1;
        }
        subgoals.push(Subgoal { block: second, goal: 1 - first.goal });
    }
    let state = EnvState { seed, task, agent, gripper_closed: false, blocks, goals, subgoals, stage: 0, step: 0 };
    let instruction = state.instruction();
    (state, instruction)
}

impl EnvState {
    pub fn instruction(&self) -> String {
        self.subgoals
            .iter()
            .map(|g| {
                format!(
                    "move the {} block to the {} pad",
                    self.blocks[g.block].color.name(),
                    self.goals[g.goal].color.name()
                )
            })
            .collect::<Vec<_>>()
            .join(" then ")
    }

    pub fn held(&self) -> Option<usize> {
        self.blocks.iter().position(|b| b.held)
    }

    pub fn is_success(&self) -> bool {
        self.stage >= self.subgoals.len()
    }

    pub fn is_done(&self) -> bool {
        self.is_success() || self.step >= MAX_STEPS
    }

    fn subgoal_met(&self, g: Subgoal) -> bool {
        let b = &self.blocks[g.block];
        !b.held && dist2(b.pos, self.goals[g.goal].pos) <= SUCCESS_RADIUS
    }

    /// Applies one clipped action. Pure: the receiver is left untouched.
    pub fn step(&self, action: EnvAction) -> Result<(EnvState, StepResult)> {
        ensure!(action.iter().all(|v| v.is_finite()), "non-finite action {action:?}");
        let mut s = self.clone();
        let dx = action[0].clamp(-MAX_DELTA, MAX_DELTA);
        let dy = action[1].clamp(-MAX_DELTA, MAX_DELTA);
        let grip = action[2].clamp(-1.0, 1.0);
        s.agent = [(s.agent[0] + dx).clamp(0.0, 1.0), (s.agent[1] + dy).clamp(0.0, 1.0)];
        if let Some(h) = s.held() {
            s.blocks[h].pos = s.agent;
        }
        if grip > 0.0 {
            s.gripper_closed = true;
            if s.held().is_none() {
                let agent = s.agent;
                let pick = s
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (i, dist2(b.pos, agent)))
                    .filter(|&(_, d)| d <= GRASP_RADIUS)
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                if let Some((i, _)) = pick {
                    s.blocks[i].held = true;
                    s.blocks[i].pos = agent;
                }
            }
        } else if grip < 0.0 {
            s.gripper_closed = false;
            if let Some(h) = s.held() {
                s.blocks[h].held = false;
            }
        }
        s.step += 1;
        let mut reward = 0.0;
        while !s.is_success() && s.subgoal_met(s.subgoals[s.stage]) {
            s.stage += 1;
            reward += 1.0;
        }
        let result = StepResult { reward, done: s.is_done(), success: s.is_success() };
        Ok((s, result))
    }

    /// Joint readings used for keyframe selection.
    pub fn joints(&self) -> [f32; 3] {
        [self.agent[0], self.agent[1], if self.gripper_closed { 1.0 } else { 0.0 }]
    }
}

fn to_px(v: f32) -> i32 {
    (v * IMAGE_SIZE as f32).round() as i32
}

fn fill(img: &mut [u8], cx: i32, cy: i32, size: i32, rgb: [u8; 3], ring: bool) {
    let x0 = cx - size / 2;
    let y0 = cy - size / 2;
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            if !(0..IMAGE_SIZE as i32).contains(&x) || !(0..IMAGE_SIZE as i32).contains(&y) {
                continue;
            }
            if ring && x > x0 && x < x0 + size - 1 && y > y0 && y < y0 + size - 1 {
                continue;
            }
            let o = (y as usize * IMAGE_SIZE + x as usize) * 3;
            img[o..o + 3].copy_from_slice(&rgb);
        }
    }
}

/// 8-bit RGB rendering, row-major.
pub fn render_rgb8(state: &EnvState) -> Vec<u8> {
    let mut img: Vec<u8> = (0..IMAGE_SIZE * IMAGE_SIZE).flat_map(|_| BACKGROUND).collect();
    for g in &state.goals {
        fill(&mut img, to_px(g.pos[0]), to_px(g.pos[1]), 6, g.color.rgb(), true);
    }
    for b in state.blocks.iter().filter(|b| !b.held) {
        fill(&mut img, to_px(b.pos[0]), to_px(b.pos[1]), 4, b.color.rgb(), false);
    }
    let (ax, ay) = (to_px(state.agent[0]), to_px(state.agent[1]));
    if let Some(h) = state.held() {
        fill(&mut img, ax, ay, 4, state.blocks[h].color.rgb(), false);
    }
    let marker = if state.gripper_closed { AGENT_CLOSED } else { AGENT_OPEN };
    fill(&mut img, ax, ay, 2, marker, false);
    img
}

pub fn render(state: &EnvState) -> Image {
    Image::from_rgb8(IMAGE_SIZE, IMAGE_SIZE, &render_rgb8(state)).expect("fixed image size")
}

fn toward(err: f32) -> f32 {
    if err.abs() <= EXPERT_TOL {
        err
    } else {
        (EXPERT_GAIN * err).clamp(-MAX_DELTA, MAX_DELTA)
    }
}

/// Saturated proportional controller: approach, grip, carry, release.
pub fn scripted_expert(state: &EnvState) -> EnvAction {
    if state.is_success() {
        return [0.0, 0.0, 0.0];
    }
    let g = state.subgoals[state.stage];
    let target = &state.blocks[g.block];
    match state.held() {
        Some(h) if h == g.block => {
            let goal = state.goals[g.goal].pos;
            if dist_inf(goal, state.agent) <= EXPERT_TOL {
                [0.0, 0.0, -1.0]
            } else {
                [toward(goal[0] - state.agent[0]), toward(goal[1] - state.agent[1]), 1.0]
            }
        }
        Some(_) => [0.0, 0.0, -1.0],
        None => {
            if dist_inf(target.pos, state.agent) <= EXPERT_TOL {
                [0.0, 0.0, 1.0]
            } else {
                [toward(target.pos[0] - state.agent[0]), toward(target.pos[1] - state.agent[1]), -1.0]
            }
        }
    }
}

/// Uniform random action, used as the chance baseline.
pub fn random_action(rng: &mut impl Rng) -> EnvAction {
    [rng.random_range(-MAX_DELTA..=MAX_DELTA), rng.random_range(-MAX_DELTA..=MAX_DELTA), rng.random_range(-1.0..=1.0)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_expert(task: TaskSpec, seed: u64) -> EnvState {
        let (mut s, _) = reset(task, seed);
        while !s.is_done() {
            let a = scripted_expert(&s);
            s = s.step(a).unwrap().0;
        }
        s
    }

    #[test]
    fn reset_is_deterministic() {
        assert_eq!(reset(TaskSpec::Single, 7), reset(TaskSpec::Single, 7));
        assert_ne!(reset(TaskSpec::Single, 7).0, reset(TaskSpec::Single, 8).0);
        let (_, instr) = reset(TaskSpec::LongHorizon, 3);
        assert_eq!(instr.matches("move the").count(), 2);
        assert!(instr.contains(" then "));
        assert!("medium".parse::<TaskSpec>().is_err());
    }

    #[test]
    fn positions_in_bounds_for_many_seeds() {
        for seed in 0..1000 {
            for task in [TaskSpec::Single, TaskSpec::LongHorizon] {
                let (s, _) = reset(task, seed);
                assert!((2..=4).contains(&s.blocks.len()));
                assert!((1..=2).contains(&s.goals.len()));
                let all: Vec<[f32; 2]> =
                    s.blocks.iter().map(|b| b.pos).chain(s.goals.iter().map(|g| g.pos)).chain([s.agent]).collect();
                for p in &all {
                    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                }
                for i in 0..all.len() {
                    for j in i + 1..all.len() {
                        assert_ne!(all[i], all[j], "seed {seed}");
                    }
                }
                assert!(!s.is_success());
            }
        }
    }

    #[test]
    fn zero_action_only_advances_clock() {
        let (s, _) = reset(TaskSpec::Single, 1);
        let (t, r) = s.step([0.0, 0.0, 0.0]).unwrap();
        let mut expect = s.clone();
        expect.step = 1;
        assert_eq!(t, expect);
        assert!(!r.done);
        assert!(s.step([f32::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn actions_are_clipped() {
        let (s, _) = reset(TaskSpec::Single, 2);
        let (t, _) = s.step([5.0, -5.0, 0.0]).unwrap();
        assert!((t.agent[0] - (s.agent[0] + 0.1).min(1.0)).abs() < 1e-6);
        assert!((t.agent[1] - (s.agent[1] - 0.1).max(0.0)).abs() < 1e-6);
    }

    #[test]
    fn pick_carry_release() {
        let (mut s, _) = reset(TaskSpec::Single, 4);
        let g = s.subgoals[0];
        s.agent = s.blocks[g.block].pos;
        s = s.step([0.0, 0.0, 1.0]).unwrap().0;
        assert_eq!(s.held(), Some(g.block));
        let goal = s.goals[g.goal].pos;
        s.agent = [goal[0] - 0.03, goal[1]];
        s = s.step([0.03, 0.0, 1.0]).unwrap().0;
        assert_eq!(s.blocks[g.block].pos, s.agent);
        assert!(!s.is_success(), "held blocks do not count");
        let (s, r) = s.step([0.0, 0.0, -1.0]).unwrap();
        assert!(r.success && r.done);
        assert_eq!(s.held(), None);
    }

    #[test]
    fn expert_solves_every_seed() {
        let mut total = 0;
        for seed in 0..500 {
            let s = run_expert(TaskSpec::Single, seed);
            assert!(s.is_success(), "seed {seed}");
            assert!(s.step <= MAX_STEPS);
            total += s.step;
        }
        assert!(total as f64 / 500.0 <= 40.0, "mean length {}", total as f64 / 500.0);
        for seed in 0..100 {
            assert!(run_expert(TaskSpec::LongHorizon, seed).is_success(), "long seed {seed}");
        }
    }

    #[test]
    fn expert_actions_in_bounds_and_idle_at_goal() {
        for seed in 0..50 {
            let (mut s, _) = reset(TaskSpec::LongHorizon, seed);
            while !s.is_done() {
                let a = scripted_expert(&s);
                assert!(a[0].abs() <= MAX_DELTA && a[1].abs() <= MAX_DELTA && a[2].abs() <= 1.0);
                s = s.step(a).unwrap().0;
            }
            assert_eq!(scripted_expert(&s), [0.0, 0.0, 0.0]);
        }
        let (mut s, _) = reset(TaskSpec::Single, 9);
        let g = s.subgoals[0];
        s.blocks[g.block].held = true;
        s.agent = s.goals[g.goal].pos;
        s.blocks[g.block].pos = s.agent;
        assert_eq!(scripted_expert(&s), [0.0, 0.0, -1.0]);
    }

    #[test]
    fn render_properties() {
        let (s, _) = reset(TaskSpec::Single, 5);
        assert_eq!(render_rgb8(&s), render_rgb8(&s.clone()));
        let img = render(&s);
        assert_eq!((img.height(), img.width()), (32, 32));
        let bytes = render_rgb8(&s);
        for b in s.blocks.iter() {
            let (x, y) = (to_px(b.pos[0]) as usize, to_px(b.pos[1]) as usize);
            let o = (y * IMAGE_SIZE + x) * 3;
            assert_eq!(&bytes[o..o + 3], &b.color.rgb());
        }
        let sigs: std::collections::BTreeSet<[u8; 3]> = Color::ALL.iter().map(|c| c.rgb()).collect();
        assert_eq!(sigs.len(), 4);
        let mut moved = s.clone();
        moved.gripper_closed = true;
        assert_ne!(render_rgb8(&moved), bytes);
    }
}
