//! Map generation: bordered occupancy grids with colored goal markers.
//!
//! Interior walls are inserted one at a time from a shuffled candidate list,
//! skipping any insertion that would disconnect the floor, until roughly a
//! quarter of the interior is walled. Goals are wall cells (border or
//! interior) adjacent to floor, painted with distinct color ids; the raycaster
//! renders them as colored wall segments so they are visually identifiable.

use crate::error::{ConpeError, Result};
use crate::rng::CounterRng;

use super::N_GOAL_COLORS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Goal {
    pub x: usize,
    pub y: usize,
    pub color: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub size: usize,
    /// row-major, true = wall
    walls: Vec<bool>,
    pub goals: Vec<Goal>,
    pub spawns: Vec<(usize, usize)>,
}

impl GridMap {
    /// Assemble a map from raw parts (tests and hand-built fixtures).
    pub fn from_parts(size: usize, walls: Vec<bool>, goals: Vec<Goal>) -> Result<GridMap> {
        if walls.len() != size * size {
            return Err(ConpeError::Config("wall buffer size mismatch".into()));
        }
        let spawns = (0..size * size)
            .filter(|i| !walls[*i])
            .map(|i| (i % size, i / size))
            .collect();
        Ok(GridMap { size, walls, goals, spawns })
    }

    #[inline]
    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        self.walls[y * self.size + x]
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.size && (y as usize) < self.size
    }

    pub fn goal_of_color(&self, color: u32) -> Option<&Goal> {
        self.goals.iter().find(|g| g.color == color)
    }

    /// Color id of the goal at a wall cell, if any.
    pub fn goal_color_at(&self, x: usize, y: usize) -> Option<u32> {
        self.goals.iter().find(|g| g.x == x && g.y == y).map(|g| g.color)
    }

    pub fn floor_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.size {
            for x in 0..self.size {
                if !self.is_wall(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Interior wall density: walled interior cells / interior area.
    pub fn wall_density(&self) -> f64 {
        let interior = (self.size - 2) * (self.size - 2);
        let mut walls = 0;
        for y in 1..self.size - 1 {
            for x in 1..self.size - 1 {
                if self.is_wall(x, y) {
                    walls += 1;
                }
            }
        }
        walls as f64 / interior as f64
    }
}

fn flood_fill_count(walls: &[bool], size: usize, start: (usize, usize)) -> usize {
    let mut seen = vec![false; size * size];
    let mut stack = vec![start];
    seen[start.1 * size + start.0] = true;
    let mut count = 0;
    while let Some((x, y)) = stack.pop() {
        count += 1;
        let deltas = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)];
        for (dx, dy) in deltas {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx as usize >= size || ny as usize >= size {
                continue;
            }
            let idx = ny as usize * size + nx as usize;
            if !walls[idx] && !seen[idx] {
                seen[idx] = true;
                stack.push((nx as usize, ny as usize));
            }
        }
    }
    count
}

fn floor_connected(walls: &[bool], size: usize) -> bool {
    let total_floor = walls.iter().filter(|w| !**w).count();
    if total_floor == 0 {
        return false;
    }
    let start = walls.iter().position(|w| !*w).unwrap();
    flood_fill_count(walls, size, (start % size, start / size)) == total_floor
}

/// Deterministic map generation; `size` >= 5.
pub fn generate_map(seed: u64, size: usize) -> Result<GridMap> {
    if size < 5 {
        return Err(ConpeError::Config(format!("map size {size} < 5")));
    }
    let mut rng = CounterRng::from_path(seed, "world/map");
    let mut walls = vec![false; size * size];
    for i in 0..size {
        walls[i] = true; // top
        walls[(size - 1) * size + i] = true; // bottom
        walls[i * size] = true; // left
        walls[i * size + size - 1] = true; // right
    }

    // interior walls: shuffled candidates, connectivity-preserving insertion
    let interior = (size - 2) * (size - 2);
    let target = (interior as f64 * 0.25).round() as usize;
    let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(interior);
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            candidates.push((x, y));
        }
    }
    rng.shuffle(&mut candidates);
    let mut placed = 0;
    for (x, y) in candidates {
        if placed >= target {
            break;
        }
        walls[y * size + x] = true;
        if floor_connected(&walls, size) {
            placed += 1;
        } else {
            walls[y * size + x] = false;
        }
    }

    // goals: wall cells adjacent to floor, preferring mutual separation
    let mut goal_candidates: Vec<(usize, usize)> = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if !walls[y * size + x] {
                continue;
            }
            let deltas = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)];
            let touches_floor = deltas.iter().any(|(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0
                    && ny >= 0
                    && (nx as usize) < size
                    && (ny as usize) < size
                    && !walls[ny as usize * size + nx as usize]
            });
            if touches_floor {
                goal_candidates.push((x, y));
            }
        }
    }
    rng.shuffle(&mut goal_candidates);
    let mut goals: Vec<Goal> = Vec::new();
    let min_sep = (size / 3).max(2);
    for sep in (1..=min_sep).rev() {
        for &(x, y) in &goal_candidates {
            if goals.len() as u32 >= N_GOAL_COLORS {
                break;
            }
            let far = goals.iter().all(|g| {
                let dx = (g.x as i64 - x as i64).unsigned_abs();
                let dy = (g.y as i64 - y as i64).unsigned_abs();
                dx.max(dy) >= sep as u64
            });
            let taken = goals.iter().any(|g| g.x == x && g.y == y);
            if far && !taken {
                goals.push(Goal { x, y, color: goals.len() as u32 });
            }
        }
        if goals.len() as u32 >= N_GOAL_COLORS {
            break;
        }
    }
    if goals.len() as u32 != N_GOAL_COLORS {
        return Err(ConpeError::Config(format!(
            "map generation could not place {N_GOAL_COLORS} goals (seed {seed}, size {size})"
        )));
    }

    let spawns: Vec<(usize, usize)> = (0..size * size)
        .filter(|i| !walls[*i])
        .map(|i| (i % size, i / size))
        .collect();

    let map = GridMap { size, walls, goals, spawns };

    // generation postconditions
    if !floor_connected(&map.walls, size) {
        return Err(ConpeError::Config("generated floor not connected".into()));
    }
    for g in &map.goals {
        let deltas = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)];
        let reachable = deltas.iter().any(|(dx, dy)| {
            let (nx, ny) = (g.x as i64 + dx, g.y as i64 + dy);
            map.in_bounds(nx, ny) && !map.is_wall(nx as usize, ny as usize)
        });
        if !reachable {
            return Err(ConpeError::Config("goal not adjacent to floor".into()));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_map(1, 9).unwrap();
        let b = generate_map(1, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_rejected() {
        assert!(matches!(generate_map(0, 4), Err(ConpeError::Config(_))));
    }

    #[test]
    fn flood_fill_reaches_every_goal_from_every_spawn() {
        for seed in 0..6 {
            let map = generate_map(seed, 9).unwrap();
            // floor is connected, so reaching a goal from one spawn means all
            let total_floor = map.spawns.len();
            for &spawn in map.spawns.iter().take(3) {
                assert_eq!(
                    flood_fill_count(&map.walls, map.size, spawn),
                    total_floor
                );
            }
            for g in &map.goals {
                let deltas = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)];
                assert!(deltas.iter().any(|(dx, dy)| {
                    let (nx, ny) = (g.x as i64 + dx, g.y as i64 + dy);
                    map.in_bounds(nx, ny) && !map.is_wall(nx as usize, ny as usize)
                }));
            }
        }
    }

    #[test]
    fn wall_density_in_bounds() {
        // exhaustive cell count over several seeds and sizes
        for seed in 0..8 {
            for size in [5, 7, 9, 11] {
                let map = generate_map(seed, size).unwrap();
                let density = map.wall_density();
                assert!(
                    (0.1..=0.4).contains(&density),
                    "seed {seed} size {size}: density {density}"
                );
            }
        }
    }

    #[test]
    fn goals_have_distinct_colors() {
        let map = generate_map(3, 9).unwrap();
        let mut colors: Vec<u32> = map.goals.iter().map(|g| g.color).collect();
        colors.sort_unstable();
        assert_eq!(colors, vec![0, 1, 2, 3]);
    }
}
