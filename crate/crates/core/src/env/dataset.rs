//! Expert demonstrations with keyframe thinning and short-episode filtering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render_rgb8, reset, scripted_expert, EnvAction, EnvState, TaskSpec, IMAGE_SIZE, MAX_DELTA};
use crate::error::{ensure, Result};
use crate::vision_codec::Image;

/// Frames whose joint readings move less than this (max-norm) are dropped.
pub const KEYFRAME_THRESHOLD: f32 = 0.01;
/// Episodes shorter than this after thinning are discarded.
pub const MIN_FRAMES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub seed: u64,
    pub task: TaskSpec,
    pub instruction: String,
    /// 8-bit RGB frames, `IMAGE_SIZE x IMAGE_SIZE`, one more than `actions`.
    pub frames: Vec<Vec<u8>>,
    pub actions: Vec<EnvAction>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn image(&self, t: usize) -> Image {
        Image::from_rgb8(IMAGE_SIZE, IMAGE_SIZE, &self.frames[t]).expect("stored frame size")
    }

    pub fn images(&self) -> Vec<Image> {
        (0..self.frames.len()).map(|t| self.image(t)).collect()
    }

    /// Agent position at every frame.
    pub fn poses(&self) -> Result<Vec<[f32; 2]>> {
        let (mut s, _) = reset(self.task, self.seed);
        let mut out = vec![s.agent];
        for &a in &self.actions {
            s = s.step(a)?.0;
            out.push(s.agent);
        }
        Ok(out)
    }

    /// Re-runs the stored actions from the initial state.
    pub fn replay(&self) -> Result<(Vec<Vec<u8>>, EnvState)> {
        simulate(self.task, self.seed, &self.actions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatasetStats {
    pub attempted: usize,
    pub filtered_short: usize,
    pub raw_frames: usize,
    pub kept_frames: usize,
}

impl DatasetStats {
    pub fn thinned_fraction(&self) -> f64 {
        1.0 - self.kept_frames as f64 / self.raw_frames.max(1) as f64
    }
}

/// Renders the trajectory produced by `actions` from `reset(task, seed)`.
pub fn simulate(task: TaskSpec, seed: u64, actions: &[EnvAction]) -> Result<(Vec<Vec<u8>>, EnvState)> {
    let (mut s, _) = reset(task, seed);
    let mut frames = vec![render_rgb8(&s)];
    for &a in actions {
        s = s.step(a)?.0;
        frames.push(render_rgb8(&s));
    }
    Ok((frames, s))
}

fn merge(a: EnvAction, b: EnvAction) -> EnvAction {
    [a[0] + b[0], a[1] + b[1], b[2]]
}

fn in_bounds(a: EnvAction) -> bool {
    a[0].abs() <= MAX_DELTA && a[1].abs() <= MAX_DELTA
}

/// Drops frames whose joint change is below `threshold`, folding the action
/// that led to a dropped frame into the next one. The first and last frames
/// always survive; a merge that would leave the action bounds is refused.
pub fn thin_keyframes(joints: &[[f32; 3]], actions: &[EnvAction], threshold: f32) -> Result<Vec<EnvAction>> {
    ensure!(joints.len() == actions.len() + 1, "{} joint readings for {} actions", joints.len(), actions.len());
    let mut out = Vec::with_capacity(actions.len());
    let mut pending: Option<EnvAction> = None;
    for t in 0..actions.len() {
        let acc = pending.map_or(actions[t], |p| merge(p, actions[t]));
        let change = (0..3).map(|j| (joints[t + 1][j] - joints[t][j]).abs()).fold(0.0, f32::max);
        let droppable = t + 1 < actions.len() && change < threshold && in_bounds(merge(acc, actions[t + 1]));
        if droppable {
            pending = Some(acc);
        } else {
            out.push(acc);
            pending = None;
        }
    }
    Ok(out)
}

fn expert_episode(task: TaskSpec, seed: u64) -> Result<(Vec<[f32; 3]>, Vec<EnvAction>)> {
    let (mut s, _) = reset(task, seed);
    let mut joints = vec![s.joints()];
    let mut actions = Vec::new();
    while !s.is_done() {
        let a = scripted_expert(&s);
        s = s.step(a)?.0;
        joints.push(s.joints());
        actions.push(a);
    }
    Ok((joints, actions))
}

/// Rolls the scripted expert until `n` episodes survive filtering. Each
/// episode is thinned and then re-simulated from its merged actions, so the
/// stored frames are exactly what the stored actions produce.
pub fn generate_dataset(n: usize, tasks: &[TaskSpec], seed: u64) -> Result<(Vec<Episode>, DatasetStats)> {
    ensure!(n > 0, "dataset size must be positive");
    ensure!(!tasks.is_empty(), "task mix must not be empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = DatasetStats::default();
    let mut episodes = Vec::with_capacity(n);
    while episodes.len() < n {
        ensure!(stats.attempted < 50 * n, "too many episodes filtered out");
        stats.attempted += 1;
        let ep_seed = rng.random::<u64>();
        let task = tasks[rng.random_range(0..tasks.len())];
        let (joints, raw) = expert_episode(task, ep_seed)?;
        let actions = thin_keyframes(&joints, &raw, KEYFRAME_THRESHOLD)?;
        let (frames, end) = simulate(task, ep_seed, &actions)?;
        stats.raw_frames += joints.len();
        stats.kept_frames += frames.len();
        if frames.len() < MIN_FRAMES {
            stats.filtered_short += 1;
            continue;
        }
        let (_, instruction) = reset(task, ep_seed);
        episodes.push(Episode {
            id: episodes.len(),
            seed: ep_seed,
            task,
            instruction,
            frames,
            actions,
            success: end.is_success(),
        });
    }
    Ok((episodes, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thinning_keeps_endpoints_and_merges() {
        let joints = [[0.0, 0.0, 0.0], [0.005, 0.0, 0.0], [0.105, 0.0, 0.0], [0.106, 0.0, 0.0], [0.107, 0.0, 0.0]];
        let actions = [[0.005, 0.0, -1.0], [0.1, 0.0, -1.0], [0.001, 0.0, 1.0], [0.001, 0.0, 1.0]];
        let out = thin_keyframes(&joints, &actions, 0.01).unwrap();
        // Frame 1 cannot merge (0.105 > 0.1); frame 3 merges into the last step.
        assert_eq!(out.len(), 3);
        assert_eq!(out[2], [0.002, 0.0, 1.0]);
        let sum: f32 = out.iter().map(|a| a[0]).sum();
        assert!((sum - 0.107).abs() < 1e-6);
    }

    #[test]
    fn thinning_never_drops_last_frame() {
        let joints = [[0.0; 3]; 4];
        let actions = [[0.0; 3]; 3];
        let out = thin_keyframes(&joints, &actions, 0.01).unwrap();
        assert_eq!(out.len(), 1);
        assert!(thin_keyframes(&joints, &actions[..1], 0.01).is_err());
    }

    #[test]
    fn dataset_is_reproducible_and_filtered() {
        let tasks = [TaskSpec::Single, TaskSpec::LongHorizon];
        let (a, stats) = generate_dataset(40, &tasks, 3).unwrap();
        let (b, _) = generate_dataset(40, &tasks, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert!(stats.thinned_fraction() > 0.0);
        for ep in &a {
            assert!(ep.frames.len() >= MIN_FRAMES);
            assert_eq!(ep.frames.len(), ep.actions.len() + 1);
            assert!(ep.success, "episode {}", ep.id);
        }
        assert!(generate_dataset(0, &tasks, 3).is_err());
    }

    #[test]
    fn thinned_episode_matches_raw_terminal_state() {
        for seed in 0..30u64 {
            let (joints, raw) = expert_episode(TaskSpec::Single, seed).unwrap();
            let thin = thin_keyframes(&joints, &raw, KEYFRAME_THRESHOLD).unwrap();
            let (_, end_raw) = simulate(TaskSpec::Single, seed, &raw).unwrap();
            let (_, end_thin) = simulate(TaskSpec::Single, seed, &thin).unwrap();
            assert!(end_thin.is_success());
            assert!((end_raw.agent[0] - end_thin.agent[0]).abs() < 1e-5);
            assert!((end_raw.agent[1] - end_thin.agent[1]).abs() < 1e-5);
            assert_eq!(end_raw.stage, end_thin.stage);
        }
    }

    #[test]
    fn replay_is_pixel_exact() {
        let (eps, _) = generate_dataset(20, &[TaskSpec::Single], 11).unwrap();
        for ep in &eps {
            assert_eq!(ep.replay().unwrap().0, ep.frames);
        }
    }
}
