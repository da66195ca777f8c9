//! Single-bounce raycast renderer and the color-jitter pipeline.
//!
//! One ray per image column (DDA over the occupancy grid), floor/ceiling
//! gradients, per-style wall palettes, goal cells drawn in their goal color.
//! Pitch shifts the horizon row; fov sets the camera plane half-width.
//!
//! Color transform, applied after raycasting and shared verbatim with the
//! augmentation-driven contrast task:
//!   1. brightness: v <- v * b
//!   2. contrast:   v <- mean + c * (v - mean), mean = per-image mean over all
//!      channels (computed after brightness)
//!   3. saturation: v <- luma + s * (v - luma), luma = Rec. 601 weights
//!      (0.299, 0.587, 0.114) per pixel
//!   4. hue:        RGB -> HSV, h <- (h + shift) mod 360, HSV -> RGB
//!   5. clamp to [0, 1]

use crate::encoder::ImageTensor;

use super::env::AgentState;
use super::map::GridMap;
use super::DomainSpec;

pub const RENDER_SIZE: usize = 64;

/// Per-style (ceiling, floor, wall x-side, wall y-side) base colors.
const STYLE_PALETTES: [[[f32; 3]; 4]; 5] = [
    // stone
    [[0.55, 0.60, 0.70], [0.35, 0.33, 0.30], [0.52, 0.50, 0.48], [0.40, 0.38, 0.36]],
    // brick
    [[0.60, 0.65, 0.75], [0.30, 0.25, 0.22], [0.62, 0.30, 0.24], [0.48, 0.22, 0.18]],
    // moss
    [[0.50, 0.62, 0.60], [0.25, 0.30, 0.22], [0.30, 0.52, 0.28], [0.22, 0.40, 0.20]],
    // slate
    [[0.45, 0.48, 0.55], [0.28, 0.28, 0.32], [0.35, 0.38, 0.45], [0.26, 0.28, 0.34]],
    // sand
    [[0.70, 0.68, 0.55], [0.45, 0.40, 0.28], [0.72, 0.64, 0.42], [0.58, 0.50, 0.32]],
];

const GOAL_COLORS: [[f32; 3]; 4] = [
    [0.85, 0.12, 0.12], // red
    [0.10, 0.75, 0.15], // green
    [0.12, 0.25, 0.85], // blue
    [0.88, 0.80, 0.10], // yellow
];

/// Ground-truth side information produced while rendering a frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameInfo {
    /// goal color ids hit by at least one ray
    pub visible_goal_colors: Vec<u32>,
}

struct Hit {
    dist: f64,
    x_side: bool,
    cell: (usize, usize),
}

fn cast_ray(map: &GridMap, ox: f64, oy: f64, dx: f64, dy: f64) -> Hit {
    // standard DDA; the border is walled so a hit always occurs
    let mut cx = ox.floor() as i64;
    let mut cy = oy.floor() as i64;
    let delta_x = if dx == 0.0 { f64::INFINITY } else { (1.0 / dx).abs() };
    let delta_y = if dy == 0.0 { f64::INFINITY } else { (1.0 / dy).abs() };
    let (step_x, mut side_x) = if dx < 0.0 {
        (-1i64, (ox - cx as f64) * delta_x)
    } else {
        (1i64, (cx as f64 + 1.0 - ox) * delta_x)
    };
    let (step_y, mut side_y) = if dy < 0.0 {
        (-1i64, (oy - cy as f64) * delta_y)
    } else {
        (1i64, (cy as f64 + 1.0 - oy) * delta_y)
    };
    loop {
        let x_side = side_x < side_y;
        if x_side {
            side_x += delta_x;
            cx += step_x;
        } else {
            side_y += delta_y;
            cy += step_y;
        }
        if !map.in_bounds(cx, cy) {
            // defensive: border walls should terminate first
            let dist = if x_side { side_x - delta_x } else { side_y - delta_y };
            return Hit { dist: dist.max(1e-6), x_side, cell: (0, 0) };
        }
        if map.is_wall(cx as usize, cy as usize) {
            let dist = if x_side { side_x - delta_x } else { side_y - delta_y };
            return Hit {
                dist: dist.max(1e-6),
                x_side,
                cell: (cx as usize, cy as usize),
            };
        }
    }
}

/// Raycast an egocentric frame and report which goals were visible.
pub fn render_with_info(map: &GridMap, agent: &AgentState, domain: &DomainSpec) -> (ImageTensor, FrameInfo) {
    let w = RENDER_SIZE;
    let h = RENDER_SIZE;
    let theta = (f64::from(agent.heading_deg)).to_radians();
    let (dir_x, dir_y) = (theta.cos(), theta.sin());
    let half = (domain.fov / 2.0).tan();
    let (plane_x, plane_y) = (-dir_y * half, dir_x * half);
    let (ox, oy) = (agent.x as f64 + 0.5, agent.y as f64 + 0.5);

    // horizon row shifted by pitch; positive pitch looks down -> horizon rises
    let horizon = (h as f64 / 2.0) * (1.0 - domain.camera_pitch.tan());
    let horizon = horizon.clamp(h as f64 * 0.1, h as f64 * 0.9);

    let style = &STYLE_PALETTES[domain.texture_style as usize];
    let mut pixels = vec![0.0f32; w * h * 3];
    let mut info = FrameInfo::default();

    for col in 0..w {
        let camera_x = (2.0 * (col as f64 + 0.5)) / w as f64 - 1.0;
        let rx = dir_x + plane_x * camera_x;
        let ry = dir_y + plane_y * camera_x;
        let hit = cast_ray(map, ox, oy, rx, ry);
        // project onto view direction for a perpendicular distance
        let norm = (rx * rx + ry * ry).sqrt();
        let perp = (hit.dist * (rx * dir_x + ry * dir_y) / norm).max(1e-6);

        let wall_px = (h as f64 / perp).min(h as f64 * 4.0);
        let top = horizon - wall_px / 2.0;
        let bottom = horizon + wall_px / 2.0;

        let goal_color = map.goal_color_at(hit.cell.0, hit.cell.1);
        if let Some(c) = goal_color {
            if !info.visible_goal_colors.contains(&c) {
                info.visible_goal_colors.push(c);
            }
        }
        let base = match goal_color {
            Some(c) => GOAL_COLORS[c as usize],
            None => {
                if hit.x_side {
                    style[2]
                } else {
                    style[3]
                }
            }
        };
        let shade = (1.0 / (1.0 + 0.18 * perp)) as f32;
        let side_shade = if hit.x_side { 1.0 } else { 0.82 };

        for row in 0..h {
            let rf = row as f64;
            let px = &mut pixels[(row * w + col) * 3..(row * w + col) * 3 + 3];
            if rf < top {
                // ceiling gradient toward the horizon
                let t = ((horizon - rf) / horizon.max(1.0)).clamp(0.0, 1.0) as f32;
                for c in 0..3 {
                    px[c] = style[0][c] * (0.45 + 0.55 * t);
                }
            } else if rf >= bottom {
                // floor gradient away from the horizon
                let t = ((rf - horizon) / (h as f64 - horizon).max(1.0)).clamp(0.0, 1.0) as f32;
                for c in 0..3 {
                    px[c] = style[1][c] * (0.35 + 0.65 * t);
                }
            } else {
                for c in 0..3 {
                    px[c] = base[c] * shade * side_shade;
                }
            }
        }
    }
    info.visible_goal_colors.sort_unstable();

    let raw = ImageTensor { height: h, width: w, pixels };
    let jittered = apply_color_jitter(
        &raw,
        domain.brightness,
        domain.contrast,
        domain.saturation,
        domain.hue_shift,
    );
    (jittered, info)
}

/// Raycast an egocentric frame under the given domain factors.
pub fn render(map: &GridMap, agent: &AgentState, domain: &DomainSpec) -> ImageTensor {
    render_with_info(map, agent, domain).0
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r1, g1, b1) = match hp as i64 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r1 + m, g1 + m, b1 + m)
}

/// The documented color transform; identical math for the renderer and the
/// augmentation-driven contrast task.
pub fn apply_color_jitter(
    image: &ImageTensor,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue_shift: f64,
) -> ImageTensor {
    let mut vals: Vec<f64> = image.pixels.iter().map(|&p| f64::from(p) * brightness).collect();

    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    for v in &mut vals {
        *v = mean + contrast * (*v - mean);
    }

    for px in vals.chunks_mut(3) {
        let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = luma + saturation * (*v - luma);
        }
    }

    if hue_shift != 0.0 {
        for px in vals.chunks_mut(3) {
            let (h, s, v) = rgb_to_hsv(px[0].max(0.0), px[1].max(0.0), px[2].max(0.0));
            let (r, g, b) = hsv_to_rgb((h + hue_shift).rem_euclid(360.0), s, v);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    }

    ImageTensor {
        height: image.height,
        width: image.width,
        pixels: vals.iter().map(|&v| (v.clamp(0.0, 1.0)) as f32).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_map, AgentState};

    fn setup() -> (GridMap, AgentState) {
        let map = generate_map(1, 9).unwrap();
        let spawn = map.spawns[0];
        (map.clone(), AgentState { x: spawn.0, y: spawn.1, heading_deg: 0 })
    }

    #[test]
    fn render_is_deterministic() {
        let (map, agent) = setup();
        let d = DomainSpec::canonical();
        let a = render(&map, &agent, &d);
        let b = render(&map, &agent, &d);
        assert_eq!(a, b);
        assert_eq!(a.height, RENDER_SIZE);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_brightness_blacks_out() {
        let (map, agent) = setup();
        // range-override hook: construct the spec directly, skipping validate
        let d = DomainSpec { brightness: 0.0, ..DomainSpec::canonical() };
        let frame = render(&map, &agent, &d);
        assert!(frame.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hue_360_is_periodic() {
        let (map, agent) = setup();
        let base = DomainSpec::canonical();
        let shifted = DomainSpec { hue_shift: 360.0, ..base.clone() };
        let a = render(&map, &agent, &base);
        let b = render(&map, &agent, &shifted);
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn fov_changes_frame() {
        let (map, agent) = setup();
        let narrow = DomainSpec { fov: 0.6, ..DomainSpec::canonical() };
        let wide = DomainSpec { fov: 1.9, ..DomainSpec::canonical() };
        assert_ne!(render(&map, &agent, &narrow), render(&map, &agent, &wide));
    }

    #[test]
    fn pitch_moves_horizon() {
        let (map, agent) = setup();
        let up = DomainSpec { camera_pitch: -0.3, ..DomainSpec::canonical() };
        let down = DomainSpec { camera_pitch: 0.3, ..DomainSpec::canonical() };
        assert_ne!(render(&map, &agent, &up), render(&map, &agent, &down));
    }

    #[test]
    fn jitter_identity_is_identity() {
        let (map, agent) = setup();
        let frame = render(&map, &agent, &DomainSpec::canonical());
        let same = apply_color_jitter(&frame, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(frame, same);
    }

    #[test]
    fn jitter_composition_matches_domain_render() {
        // render with neutral color factors then jitter == render with the
        // color factors in the DomainSpec
        let (map, agent) = setup();
        let neutral = DomainSpec { texture_style: 2, ..DomainSpec::canonical() };
        let colored = DomainSpec {
            brightness: 1.2,
            contrast: 1.5,
            saturation: 0.4,
            hue_shift: 120.0,
            ..neutral.clone()
        };
        let raw = render(&map, &agent, &neutral);
        let jittered = apply_color_jitter(&raw, 1.2, 1.5, 0.4, 120.0);
        let direct = render(&map, &agent, &colored);
        for (x, y) in jittered.pixels.iter().zip(&direct.pixels) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (0.9, 0.1, 0.3), (0.5, 0.5, 0.5), (0.0, 0.0, 0.0)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12);
            assert!((g - g2).abs() < 1e-12);
            assert!((b - b2).abs() < 1e-12);
        }
    }
}
