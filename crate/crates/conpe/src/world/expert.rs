//! Rule-based expert: breadth-first search over the action graph.
//!
//! States are (x, y, heading). The expert returns Done as soon as the success
//! condition is satisfiable at the current position; otherwise it picks the
//! first action of a minimal action sequence, breaking ties in the order
//! MoveAhead > RotateLeft > RotateRight.

use std::collections::{HashMap, VecDeque};

use crate::error::{ConpeError, Result};

use super::env::{transition, Action, AgentState, Task};
use super::map::GridMap;
use super::DomainSpec;

const PLAN_ACTIONS: [Action; 3] = [Action::MoveAhead, Action::RotateLeft, Action::RotateRight];

/// BFS distance (in actions, excluding the final Done) from `from` to the
/// nearest state where the task is satisfiable. None if unreachable.
fn bfs_to_goal(
    map: &GridMap,
    domain: &DomainSpec,
    task: &Task,
    from: AgentState,
) -> Option<u32> {
    let from = from.normalized();
    if task.satisfied_at(map, from.x, from.y) {
        return Some(0);
    }
    let mut dist: HashMap<AgentState, u32> = HashMap::new();
    let mut queue = VecDeque::new();
    dist.insert(from, 0);
    queue.push_back(from);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        for action in PLAN_ACTIONS {
            let next = transition(map, s, action, domain).normalized();
            if dist.contains_key(&next) {
                continue;
            }
            if task.satisfied_at(map, next.x, next.y) {
                return Some(d + 1);
            }
            dist.insert(next, d + 1);
            queue.push_back(next);
        }
    }
    None
}

/// Minimal number of actions (including the final Done) to solve the task.
pub fn shortest_action_distance(
    map: &GridMap,
    domain: &DomainSpec,
    task: &Task,
    from: AgentState,
) -> Result<usize> {
    match bfs_to_goal(map, domain, task, from) {
        Some(d) => Ok(d as usize + 1),
        None => Err(ConpeError::Planner(format!(
            "goal unreachable from ({}, {}, {})",
            from.x, from.y, from.heading_deg
        ))),
    }
}

/// The expert's next action for the current state.
pub fn expert_action(
    map: &GridMap,
    agent: AgentState,
    task: &Task,
    domain: &DomainSpec,
) -> Result<Action> {
    let agent = agent.normalized();
    if task.satisfied_at(map, agent.x, agent.y) {
        return Ok(Action::Done);
    }
    let mut best: Option<(u32, Action)> = None;
    for action in PLAN_ACTIONS {
        let next = transition(map, agent, action, domain).normalized();
        if next == agent {
            continue; // blocked move cannot start a minimal sequence
        }
        if let Some(d) = bfs_to_goal(map, domain, task, next) {
            let cost = d + 1;
            // strict less-than keeps the earliest action on ties
            if best.map_or(true, |(c, _)| cost < c) {
                best = Some((cost, action));
            }
        }
    }
    match best {
        Some((_, action)) => Ok(action),
        None => Err(ConpeError::Planner(format!(
            "goal unreachable from ({}, {}, {})",
            agent.x, agent.y, agent.heading_deg
        ))),
    }
}

/// Length of the expert's full trajectory (actions including Done).
pub fn expert_path_len(
    map: &GridMap,
    domain: &DomainSpec,
    task: &Task,
    start: AgentState,
) -> Result<usize> {
    let mut state = start.normalized();
    let mut steps = 0;
    loop {
        let action = expert_action(map, state, task, domain)?;
        steps += 1;
        if action == Action::Done {
            return Ok(steps);
        }
        state = transition(map, state, action, domain).normalized();
        if steps > 10_000 {
            return Err(ConpeError::Planner("expert failed to terminate".into()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_map;

    /// Brute-force oracle: forward BFS over full action sequences (including
    /// Done as a terminal action), independent of the planner above.
    pub(crate) fn oracle_min_actions(
        map: &GridMap,
        domain: &DomainSpec,
        task: &Task,
        start: AgentState,
    ) -> Option<usize> {
        let start = start.normalized();
        let mut seen = std::collections::HashSet::new();
        let mut queue = VecDeque::new();
        seen.insert(start);
        queue.push_back((start, 0usize));
        while let Some((s, d)) = queue.pop_front() {
            // issuing Done here succeeds iff the condition holds
            if task.satisfied_at(map, s.x, s.y) {
                return Some(d + 1);
            }
            for action in [Action::MoveAhead, Action::RotateLeft, Action::RotateRight] {
                let next = transition(map, s, action, domain).normalized();
                if seen.insert(next) {
                    queue.push_back((next, d + 1));
                }
            }
        }
        None
    }

    #[test]
    fn done_when_adjacent() {
        let map = generate_map(2, 9).unwrap();
        let goal = map.goals[0].clone();
        let task = Task::ObjectGoal { color: goal.color };
        let d = DomainSpec::canonical();
        for &(x, y) in &map.spawns {
            let dx = (x as i64 - goal.x as i64).unsigned_abs();
            let dy = (y as i64 - goal.y as i64).unsigned_abs();
            if dx.max(dy) <= 1 {
                let a = expert_action(&map, AgentState { x, y, heading_deg: 0 }, &task, &d).unwrap();
                assert_eq!(a, Action::Done);
                return;
            }
        }
        panic!("no spawn adjacent to goal");
    }

    #[test]
    fn expert_matches_bruteforce_on_small_maps() {
        for seed in 0..3 {
            for size in [5, 7, 9] {
                let map = generate_map(seed, size).unwrap();
                let dspecs = [
                    DomainSpec::canonical(),
                    DomainSpec { stride: 2, rotation_degree: 45, ..DomainSpec::canonical() },
                    DomainSpec { rotation_degree: 30, ..DomainSpec::canonical() },
                ];
                for domain in &dspecs {
                    for (gi, goal) in map.goals.iter().enumerate().take(2) {
                        let task = Task::ObjectGoal { color: goal.color };
                        let start = AgentState {
                            x: map.spawns[gi % map.spawns.len()].0,
                            y: map.spawns[gi % map.spawns.len()].1,
                            heading_deg: 90,
                        };
                        let expert = expert_path_len(&map, domain, &task, start).unwrap();
                        let oracle = oracle_min_actions(&map, domain, &task, start).unwrap();
                        assert_eq!(expert, oracle, "seed {seed} size {size}");
                        assert_eq!(
                            shortest_action_distance(&map, domain, &task, start).unwrap(),
                            oracle
                        );
                    }
                }
            }
        }
    }

    /// Empty bordered room with one goal marker on the west wall.
    fn west_goal_room() -> GridMap {
        let size = 7;
        let mut walls = vec![false; size * size];
        for i in 0..size {
            walls[i] = true;
            walls[(size - 1) * size + i] = true;
            walls[i * size] = true;
            walls[i * size + size - 1] = true;
        }
        let goals = vec![crate::world::Goal { x: 0, y: 3, color: 0 }];
        GridMap::from_parts(size, walls, goals).unwrap()
    }

    #[test]
    fn tiebreak_prefers_rotate_left_when_goal_behind() {
        // agent faces east, goal is directly behind on the west wall; the
        // BFS oracle confirms left- and right-turn sequences are equal length.
        let map = west_goal_room();
        let d = DomainSpec::canonical(); // rotation 90
        let s = AgentState { x: 3, y: 3, heading_deg: 0 };
        let task = Task::ObjectGoal { color: 0 };
        let left = transition(&map, s, Action::RotateLeft, &d).normalized();
        let right = transition(&map, s, Action::RotateRight, &d).normalized();
        let dl = bfs_to_goal(&map, &d, &task, left).unwrap();
        let dr = bfs_to_goal(&map, &d, &task, right).unwrap();
        assert_eq!(dl, dr, "setup must be an exact tie");
        assert_eq!(expert_action(&map, s, &task, &d).unwrap(), Action::RotateLeft);
    }

    #[test]
    fn straight_open_path_means_move_ahead() {
        let map = west_goal_room();
        let d = DomainSpec::canonical();
        // facing the goal from 3 open cells away: (4,3) heading west
        let s = AgentState { x: 4, y: 3, heading_deg: 180 };
        let task = Task::ObjectGoal { color: 0 };
        assert_eq!(expert_action(&map, s, &task, &d).unwrap(), Action::MoveAhead);
        // oracle: 3 moves to (1,3)? (4->3->2->1) then Done from Chebyshev 1...
        // (2,3) is already within Chebyshev 2; satisfiable at (1,3) only.
        let oracle = oracle_min_actions(&map, &d, &task, s).unwrap();
        assert_eq!(expert_path_len(&map, &d, &task, s).unwrap(), oracle);
    }

    #[test]
    fn unreachable_goal_is_planner_error() {
        // wall cell with an all-wall neighbourhood: corner (0,0)
        let map = west_goal_room();
        let task = Task::PointGoal { x: 0, y: 0 };
        // (1,1) is floor and within Chebyshev 1 of (0,0), so pick a target
        // deeper in the border: none exists in a plain room; build a pocket.
        let size = 7;
        let mut walls = vec![false; size * size];
        for i in 0..size {
            walls[i] = true;
            walls[(size - 1) * size + i] = true;
            walls[i * size] = true;
            walls[i * size + size - 1] = true;
        }
        // 3x3 solid block in the south-east, target its centre
        for y in 3..6 {
            for x in 3..6 {
                walls[y * size + x] = true;
            }
        }
        let blocked = GridMap::from_parts(size, walls, vec![]).unwrap();
        let start = AgentState { x: 1, y: 1, heading_deg: 0 };
        assert!(matches!(
            expert_action(&blocked, start, &Task::PointGoal { x: 4, y: 4 }, &DomainSpec::canonical()),
            Err(ConpeError::Planner(_))
        ));
        // sanity: the plain-room task is solvable
        assert!(expert_action(&map, AgentState { x: 3, y: 3, heading_deg: 0 }, &task, &DomainSpec::canonical()).is_ok());
    }
}
