//! Procedural egocentric grid-navigation environment.
//!
//! A domain is one full assignment of the nine domain factors; it fixes the
//! observation function (raycast geometry + color transform) and, for the
//! physical factors, the transition dynamics (stride, rotation granularity).

mod dataset;
mod env;
mod expert;
mod map;
mod render;

pub use dataset::{
    collect_aligned_episodes, collect_episodes, DatasetManifest, Episode, EpisodeDataset,
    SemanticsBlock,
};
pub use env::{
    sample_episode_setup, transition, Action, AgentState, Env, StepInfo, StepResult, Task,
};
pub use expert::{expert_action, expert_path_len, shortest_action_distance};
pub use map::{generate_map, Goal, GridMap};
pub use render::{apply_color_jitter, render, render_with_info, FrameInfo, RENDER_SIZE};

use serde::{Deserialize, Serialize};

use crate::error::{ConpeError, Result};
use crate::rng::CounterRng;

pub const N_GOAL_COLORS: u32 = 4;
pub const N_STYLES: u32 = 5;

/// One assignment of all domain-factor values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// camera field of view, radians
    pub fov: f64,
    /// camera pitch, radians (positive looks down)
    pub camera_pitch: f64,
    /// cells advanced per MoveAhead
    pub stride: u32,
    /// degrees turned per Rotate
    pub rotation_degree: u32,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// degrees, [0, 360)
    pub hue_shift: f64,
    pub texture_style: u32,
}

impl DomainSpec {
    /// Neutral observation function: identity color transform, mid fov.
    pub fn canonical() -> Self {
        DomainSpec {
            fov: 1.2,
            camera_pitch: 0.0,
            stride: 1,
            rotation_degree: 90,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue_shift: 0.0,
            texture_style: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.fov >= 0.5 && self.fov <= 2.0, "fov in [0.5, 2.0]"),
            (
                self.camera_pitch >= -0.3 && self.camera_pitch <= 0.3,
                "camera_pitch in [-0.3, 0.3]",
            ),
            (self.stride == 1 || self.stride == 2, "stride in {1, 2}"),
            (
                matches!(self.rotation_degree, 30 | 45 | 90),
                "rotation_degree in {30, 45, 90}",
            ),
            (
                self.brightness >= 0.3 && self.brightness <= 1.5,
                "brightness in [0.3, 1.5]",
            ),
            (self.contrast >= 0.5 && self.contrast <= 2.0, "contrast in [0.5, 2.0]"),
            (
                self.saturation >= 0.0 && self.saturation <= 2.0,
                "saturation in [0.0, 2.0]",
            ),
            (
                self.hue_shift >= 0.0 && self.hue_shift < 360.0,
                "hue_shift in [0, 360)",
            ),
            (self.texture_style < N_STYLES, "texture_style in {0..4}"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(ConpeError::Config(format!("domain factor out of range: {what}")));
            }
        }
        Ok(())
    }

    /// Flat key-value record (all values as f64).
    pub fn to_record(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("fov", self.fov),
            ("camera_pitch", self.camera_pitch),
            ("stride", f64::from(self.stride)),
            ("rotation_degree", f64::from(self.rotation_degree)),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue_shift", self.hue_shift),
            ("texture_style", f64::from(self.texture_style)),
        ]
    }

    pub fn from_record(record: &[(&str, f64)]) -> Result<Self> {
        let mut spec = DomainSpec::canonical();
        for (key, value) in record {
            match *key {
                "fov" => spec.fov = *value,
                "camera_pitch" => spec.camera_pitch = *value,
                "stride" => spec.stride = *value as u32,
                "rotation_degree" => spec.rotation_degree = *value as u32,
                "brightness" => spec.brightness = *value,
                "contrast" => spec.contrast = *value,
                "saturation" => spec.saturation = *value,
                "hue_shift" => spec.hue_shift = *value,
                "texture_style" => spec.texture_style = *value as u32,
                other => {
                    return Err(ConpeError::Config(format!("unknown domain factor key {other}")))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// The nine per-factor prompts plus the pooled timestep prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorId {
    Fov,
    CameraPitch,
    Stride,
    RotationDegree,
    Brightness,
    Contrast,
    Saturation,
    HueShift,
    TextureStyle,
    Timestep,
}

impl FactorId {
    pub const ALL: [FactorId; 10] = [
        FactorId::Fov,
        FactorId::CameraPitch,
        FactorId::Stride,
        FactorId::RotationDegree,
        FactorId::Brightness,
        FactorId::Contrast,
        FactorId::Saturation,
        FactorId::HueShift,
        FactorId::TextureStyle,
        FactorId::Timestep,
    ];

    pub fn code(self) -> u32 {
        match self {
            FactorId::Fov => 0,
            FactorId::CameraPitch => 1,
            FactorId::Stride => 2,
            FactorId::RotationDegree => 3,
            FactorId::Brightness => 4,
            FactorId::Contrast => 5,
            FactorId::Saturation => 6,
            FactorId::HueShift => 7,
            FactorId::TextureStyle => 8,
            FactorId::Timestep => 9,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        FactorId::ALL
            .iter()
            .copied()
            .find(|f| f.code() == code)
            .ok_or_else(|| ConpeError::Validation(format!("unknown factor code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            FactorId::Fov => "fov",
            FactorId::CameraPitch => "camera_pitch",
            FactorId::Stride => "stride",
            FactorId::RotationDegree => "rotation_degree",
            FactorId::Brightness => "brightness",
            FactorId::Contrast => "contrast",
            FactorId::Saturation => "saturation",
            FactorId::HueShift => "hue_shift",
            FactorId::TextureStyle => "texture_style",
            FactorId::Timestep => "timestep",
        }
    }

    /// True for the color-transform factors handled by augmentation-driven
    /// contrast; physical factors use behavior-driven contrast.
    pub fn is_color(self) -> bool {
        matches!(
            self,
            FactorId::Brightness | FactorId::Contrast | FactorId::Saturation | FactorId::HueShift
        )
    }
}

/// Per-factor sampling bounds. Continuous factors carry an interval, discrete
/// factors a choice set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorRanges {
    pub fov: (f64, f64),
    pub camera_pitch: (f64, f64),
    pub stride: Vec<u32>,
    pub rotation_degree: Vec<u32>,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue_shift: (f64, f64),
    pub texture_style: Vec<u32>,
}

impl FactorRanges {
    /// The declared global bounds of every factor.
    pub fn full() -> Self {
        FactorRanges {
            fov: (0.5, 2.0),
            camera_pitch: (-0.3, 0.3),
            stride: vec![1, 2],
            rotation_degree: vec![30, 45, 90],
            brightness: (0.3, 1.5),
            contrast: (0.5, 2.0),
            saturation: (0.0, 2.0),
            hue_shift: (0.0, 360.0),
            texture_style: vec![0, 1, 2, 3, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let full = FactorRanges::full();
        let within = |r: (f64, f64), b: (f64, f64), what: &str| -> Result<()> {
            if r.0 > r.1 || r.0 < b.0 || r.1 > b.1 {
                return Err(ConpeError::Config(format!(
                    "range {what} [{}, {}] outside global bounds [{}, {}]",
                    r.0, r.1, b.0, b.1
                )));
            }
            Ok(())
        };
        within(self.fov, full.fov, "fov")?;
        within(self.camera_pitch, full.camera_pitch, "camera_pitch")?;
        within(self.brightness, full.brightness, "brightness")?;
        within(self.contrast, full.contrast, "contrast")?;
        within(self.saturation, full.saturation, "saturation")?;
        within(self.hue_shift, full.hue_shift, "hue_shift")?;
        for s in &self.stride {
            if !full.stride.contains(s) {
                return Err(ConpeError::Config(format!("stride {s} not allowed")));
            }
        }
        for r in &self.rotation_degree {
            if !full.rotation_degree.contains(r) {
                return Err(ConpeError::Config(format!("rotation_degree {r} not allowed")));
            }
        }
        for t in &self.texture_style {
            if !full.texture_style.contains(t) {
                return Err(ConpeError::Config(format!("texture_style {t} not allowed")));
            }
        }
        if self.stride.is_empty() || self.rotation_degree.is_empty() || self.texture_style.is_empty()
        {
            return Err(ConpeError::Config("discrete factor choice sets must be nonempty".into()));
        }
        Ok(())
    }

    pub(crate) fn draw(&self, rng: &mut CounterRng) -> DomainSpec {
        DomainSpec {
            fov: rng.uniform_in(self.fov.0, self.fov.1),
            camera_pitch: rng.uniform_in(self.camera_pitch.0, self.camera_pitch.1),
            stride: self.stride[rng.below(self.stride.len())],
            rotation_degree: self.rotation_degree[rng.below(self.rotation_degree.len())],
            brightness: rng.uniform_in(self.brightness.0, self.brightness.1),
            contrast: rng.uniform_in(self.contrast.0, self.contrast.1),
            saturation: rng.uniform_in(self.saturation.0, self.saturation.1),
            hue_shift: {
                let h = rng.uniform_in(self.hue_shift.0, self.hue_shift.1);
                if h >= 360.0 {
                    0.0
                } else {
                    h
                }
            },
            texture_style: self.texture_style[rng.below(self.texture_style.len())],
        }
    }
}

/// Draw `n` domains, each factor independently uniform within `ranges`.
pub fn sample_domains(seed: u64, ranges: &FactorRanges, n: usize) -> Result<Vec<DomainSpec>> {
    ranges.validate()?;
    let mut rng = CounterRng::from_path(seed, "world/domains");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let spec = ranges.draw(&mut rng);
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_domains_deterministic() {
        let r = FactorRanges::full();
        let a = sample_domains(42, &r, 8).unwrap();
        let b = sample_domains(42, &r, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for d in &a {
            d.validate().unwrap();
        }
    }

    #[test]
    fn sample_domains_empty() {
        let r = FactorRanges::full();
        assert!(sample_domains(1, &r, 0).unwrap().is_empty());
    }

    #[test]
    fn degenerate_ranges_give_point() {
        let mut r = FactorRanges::full();
        r.fov = (1.0, 1.0);
        r.camera_pitch = (0.1, 0.1);
        r.stride = vec![2];
        r.rotation_degree = vec![45];
        r.brightness = (0.8, 0.8);
        r.contrast = (1.0, 1.0);
        r.saturation = (1.0, 1.0);
        r.hue_shift = (90.0, 90.0);
        r.texture_style = vec![3];
        let ds = sample_domains(9, &r, 5).unwrap();
        assert_eq!(ds.len(), 5);
        for d in &ds {
            assert_eq!(d, &ds[0]);
            assert_eq!(d.fov, 1.0);
            assert_eq!(d.stride, 2);
            assert_eq!(d.texture_style, 3);
        }
    }

    #[test]
    fn out_of_bounds_ranges_rejected() {
        let mut r = FactorRanges::full();
        r.brightness = (0.0, 1.0);
        assert!(sample_domains(1, &r, 1).is_err());
    }

    #[test]
    fn record_roundtrip() {
        let d = sample_domains(3, &FactorRanges::full(), 1).unwrap().remove(0);
        let rec = d.to_record();
        let back = DomainSpec::from_record(
            &rec.iter().map(|(k, v)| (*k, *v)).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(d, back);
    }
}
