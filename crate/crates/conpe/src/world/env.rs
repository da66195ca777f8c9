//! Transition dynamics, tasks, and the episode engine.
//!
//! Grid coordinates: x = column, y = row, y grows downward. Heading is in
//! degrees, 0 = +x, 90 = +y, always a multiple of 15 (the gcd of the allowed
//! rotation degrees). MoveAhead advances `stride` cells one cell at a time
//! along the octant direction (round(cos), round(sin)), stopping at the first
//! wall; Rotate turns by the domain's rotation degree; Done ends the episode.
//!
//! Reward: +1.0 on success, -0.01 per step otherwise. The step limit is
//! 4 x shortest-path length, floor 50.

use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{ConpeError, Result};

use super::expert::shortest_action_distance;
use super::map::GridMap;
use super::render::render;
use super::DomainSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveAhead,
    RotateLeft,
    RotateRight,
    Done,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::MoveAhead, Action::RotateLeft, Action::RotateRight, Action::Done];

    pub fn index(self) -> usize {
        match self {
            Action::MoveAhead => 0,
            Action::RotateLeft => 1,
            Action::RotateRight => 2,
            Action::Done => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| ConpeError::Usage(format!("action index {i} out of range")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentState {
    pub x: usize,
    pub y: usize,
    /// degrees, normalized to [0, 360)
    pub heading_deg: i32,
}

impl AgentState {
    pub fn normalized(mut self) -> Self {
        self.heading_deg = self.heading_deg.rem_euclid(360);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// reach the goal marker of the given color
    ObjectGoal { color: u32 },
    /// reach the given floor coordinate
    PointGoal { x: usize, y: usize },
}

impl Task {
    /// Success is satisfiable from a position within Chebyshev distance 1 of
    /// the target (heading does not matter); Done then completes the task.
    pub fn satisfied_at(&self, map: &GridMap, x: usize, y: usize) -> bool {
        let chebyshev = |ax: usize, ay: usize, bx: usize, by: usize| {
            let dx = (ax as i64 - bx as i64).unsigned_abs();
            let dy = (ay as i64 - by as i64).unsigned_abs();
            dx.max(dy)
        };
        match self {
            Task::ObjectGoal { color } => map
                .goal_of_color(*color)
                .is_some_and(|g| chebyshev(x, y, g.x, g.y) <= 1),
            Task::PointGoal { x: tx, y: ty } => chebyshev(x, y, *tx, *ty) <= 1,
        }
    }

    /// Policy conditioning vector: goal-color one-hot for ObjectGoal,
    /// agent-frame relative coordinates (heading-rotated, size-normalized) for
    /// PointGoal. Both are padded to [`Task::INPUT_DIM`].
    pub fn input_vector(&self, map: &GridMap, agent: &AgentState) -> Vec<f64> {
        let mut v = vec![0.0; Self::INPUT_DIM];
        match self {
            Task::ObjectGoal { color } => {
                v[*color as usize] = 1.0;
            }
            Task::PointGoal { x, y } => {
                let dx = (*x as f64 - agent.x as f64) / map.size as f64;
                let dy = (*y as f64 - agent.y as f64) / map.size as f64;
                let theta = f64::from(agent.heading_deg).to_radians();
                // rotate the world-frame delta into the agent frame
                v[0] = dx * theta.cos() + dy * theta.sin();
                v[1] = -dx * theta.sin() + dy * theta.cos();
            }
        }
        v
    }

    pub const INPUT_DIM: usize = super::N_GOAL_COLORS as usize;
}

/// Pure transition function shared by the environment and the planner.
pub fn transition(map: &GridMap, state: AgentState, action: Action, domain: &DomainSpec) -> AgentState {
    match action {
        Action::MoveAhead => {
            let theta = f64::from(state.heading_deg).to_radians();
            let dx = theta.cos().round() as i64;
            let dy = theta.sin().round() as i64;
            let mut x = state.x as i64;
            let mut y = state.y as i64;
            for _ in 0..domain.stride {
                let (nx, ny) = (x + dx, y + dy);
                if !map.in_bounds(nx, ny) || map.is_wall(nx as usize, ny as usize) {
                    break;
                }
                x = nx;
                y = ny;
            }
            AgentState { x: x as usize, y: y as usize, heading_deg: state.heading_deg }
        }
        Action::RotateLeft => AgentState {
            heading_deg: (state.heading_deg - domain.rotation_degree as i32).rem_euclid(360),
            ..state
        },
        Action::RotateRight => AgentState {
            heading_deg: (state.heading_deg + domain.rotation_degree as i32).rem_euclid(360),
            ..state
        },
        Action::Done => state,
    }
}

/// Draw (start state, task instance) pairs until the task is solvable under
/// the domain's dynamics. Physical factors (stride 2 with 90-degree turns)
/// can make particular goals unreachable from particular cells; episode
/// sampling skips those combinations rather than posing impossible tasks.
pub fn sample_episode_setup(
    map: &GridMap,
    domain: &DomainSpec,
    task_kind: &Task,
    rng: &mut crate::rng::CounterRng,
) -> Result<(AgentState, Task)> {
    const MAX_TRIES: usize = 64;
    for _ in 0..MAX_TRIES {
        let spawn = map.spawns[rng.below(map.spawns.len())];
        let heading = [0, 90, 180, 270][rng.below(4)];
        let task = match task_kind {
            Task::ObjectGoal { .. } => Task::ObjectGoal {
                color: rng.below(super::N_GOAL_COLORS as usize) as u32,
            },
            Task::PointGoal { .. } => {
                let target = map.spawns[rng.below(map.spawns.len())];
                Task::PointGoal { x: target.0, y: target.1 }
            }
        };
        let start = AgentState { x: spawn.0, y: spawn.1, heading_deg: heading };
        if super::expert::shortest_action_distance(map, domain, &task, start).is_ok() {
            return Ok((start, task));
        }
    }
    Err(ConpeError::Planner(format!(
        "no reachable episode setup found after {MAX_TRIES} tries (stride {}, rotation {})",
        domain.stride, domain.rotation_degree
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    pub shortest_path_len: usize,
    pub steps_taken: usize,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: ImageTensor,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One episode of the navigation POMDP.
#[derive(Debug, Clone)]
pub struct Env {
    map: GridMap,
    domain: DomainSpec,
    task: Task,
    state: AgentState,
    steps_taken: usize,
    done: bool,
    success: bool,
    shortest: usize,
    step_limit: usize,
}

impl Env {
    pub fn new(map: GridMap, domain: DomainSpec, task: Task, start: AgentState) -> Result<Env> {
        let start = start.normalized();
        if map.is_wall(start.x, start.y) {
            return Err(ConpeError::Usage("agent start position is a wall".into()));
        }
        let shortest = shortest_action_distance(&map, &domain, &task, start)?;
        let step_limit = (4 * shortest).max(50);
        Ok(Env {
            map,
            domain,
            task,
            state: start,
            steps_taken: 0,
            done: false,
            success: false,
            shortest,
            step_limit,
        })
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn shortest_path_len(&self) -> usize {
        self.shortest
    }

    pub fn observe(&self) -> ImageTensor {
        render(&self.map, &self.state, &self.domain)
    }

    pub fn task_input(&self) -> Vec<f64> {
        self.task.input_vector(&self.map, &self.state)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(ConpeError::Usage("step after episode end".into()));
        }
        self.state = transition(&self.map, self.state, action, &self.domain);
        self.steps_taken += 1;

        let mut reward = -0.01;
        match action {
            Action::Done => {
                self.done = true;
                if self.task.satisfied_at(&self.map, self.state.x, self.state.y) {
                    self.success = true;
                    reward = 1.0;
                }
            }
            _ => {
                if self.steps_taken >= self.step_limit {
                    self.done = true;
                }
            }
        }

        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            info: StepInfo {
                success: self.success,
                shortest_path_len: self.shortest,
                steps_taken: self.steps_taken,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_map;

    fn open_map() -> GridMap {
        // 9x9 with a fixed seed; pick a spawn with open space ahead as needed
        generate_map(2, 9).unwrap()
    }

    #[test]
    fn rotate_right_four_times_at_90_returns() {
        let map = open_map();
        let d = DomainSpec::canonical();
        let start = AgentState { x: map.spawns[0].0, y: map.spawns[0].1, heading_deg: 0 };
        let mut s = start;
        for _ in 0..4 {
            s = transition(&map, s, Action::RotateRight, &d);
        }
        assert_eq!(s, start);
    }

    #[test]
    fn move_into_wall_is_noop() {
        let map = open_map();
        let d = DomainSpec::canonical();
        // find a floor cell with a wall to its east
        let mut state = None;
        for &(x, y) in &map.spawns {
            if map.is_wall(x + 1, y) {
                state = Some(AgentState { x, y, heading_deg: 0 });
                break;
            }
        }
        let state = state.expect("no wall-adjacent floor cell");
        let after = transition(&map, state, Action::MoveAhead, &d);
        assert_eq!(after, state);
    }

    #[test]
    fn stride_two_advances_two_in_open_corridor() {
        let map = open_map();
        let d = DomainSpec { stride: 2, ..DomainSpec::canonical() };
        let mut state = None;
        for &(x, y) in &map.spawns {
            if !map.is_wall(x + 1, y) && !map.is_wall(x + 2, y) {
                state = Some(AgentState { x, y, heading_deg: 0 });
                break;
            }
        }
        let state = state.expect("no open corridor");
        let after = transition(&map, state, Action::MoveAhead, &d);
        assert_eq!((after.x, after.y), (state.x + 2, state.y));
    }

    #[test]
    fn stride_two_stops_at_wall_after_one() {
        let map = open_map();
        let d = DomainSpec { stride: 2, ..DomainSpec::canonical() };
        let mut state = None;
        for &(x, y) in &map.spawns {
            if !map.is_wall(x + 1, y) && map.is_wall(x + 2, y) {
                state = Some(AgentState { x, y, heading_deg: 0 });
                break;
            }
        }
        if let Some(state) = state {
            let after = transition(&map, state, Action::MoveAhead, &d);
            assert_eq!((after.x, after.y), (state.x + 1, state.y));
        }
    }

    #[test]
    fn collision_reward_and_done_contract() {
        let map = open_map();
        let d = DomainSpec::canonical();
        let goal = map.goals[0].clone();
        let task = Task::ObjectGoal { color: goal.color };
        let start = AgentState { x: map.spawns[0].0, y: map.spawns[0].1, heading_deg: 0 };
        let mut env = Env::new(map, d, task, start).unwrap();
        let r = env.step(Action::RotateLeft).unwrap();
        assert_eq!(r.reward, -0.01);
        assert!(!r.done);
    }

    #[test]
    fn step_after_done_is_usage_error() {
        let map = open_map();
        let d = DomainSpec::canonical();
        let task = Task::ObjectGoal { color: 0 };
        let start = AgentState { x: map.spawns[0].0, y: map.spawns[0].1, heading_deg: 0 };
        let mut env = Env::new(map, d, task, start).unwrap();
        let r = env.step(Action::Done).unwrap();
        assert!(r.done);
        assert!(matches!(env.step(Action::MoveAhead), Err(ConpeError::Usage(_))));
    }

    #[test]
    fn done_at_goal_gives_success_and_unit_reward() {
        let map = open_map();
        let d = DomainSpec::canonical();
        let goal = map.goals[1].clone();
        // find a floor cell adjacent to the goal
        let mut start = None;
        for &(x, y) in &map.spawns {
            let dx = (x as i64 - goal.x as i64).unsigned_abs();
            let dy = (y as i64 - goal.y as i64).unsigned_abs();
            if dx.max(dy) <= 1 {
                start = Some(AgentState { x, y, heading_deg: 0 });
                break;
            }
        }
        let start = start.expect("goal has no adjacent floor");
        let task = Task::ObjectGoal { color: goal.color };
        let mut env = Env::new(map, d, task, start).unwrap();
        let r = env.step(Action::Done).unwrap();
        assert!(r.done);
        assert!(r.info.success);
        assert_eq!(r.reward, 1.0);
        assert_eq!(env.shortest_path_len(), 1);
    }

    #[test]
    fn color_only_factors_leave_dynamics_unchanged() {
        let map = open_map();
        let base = DomainSpec::canonical();
        let colored = DomainSpec {
            brightness: 0.5,
            contrast: 1.8,
            saturation: 0.2,
            hue_shift: 200.0,
            ..base.clone()
        };
        let start = AgentState { x: map.spawns[0].0, y: map.spawns[0].1, heading_deg: 0 };
        let actions = [Action::MoveAhead, Action::RotateRight, Action::MoveAhead, Action::MoveAhead];
        let mut s1 = start;
        let mut s2 = start;
        for a in actions {
            s1 = transition(&map, s1, a, &base);
            s2 = transition(&map, s2, a, &colored);
            assert_eq!(s1, s2);
        }
    }
}
