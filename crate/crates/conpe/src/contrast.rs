//! Positive/negative observation pairs for the three contrast tasks.
//!
//! behavior:     P(o, o') = 1 iff the expert actions match; positives are
//!               additionally required to span two distinct domains.
//! augmentation: P(o, o') = 1 iff o' = AUG(o) under the renderer's color
//!               transform with per-pair sampled parameters.
//! timestep:     P(o, o') = 1 iff |t - t'| <= k (boundary inclusive);
//!               positives span two distinct domains.
//!
//! Negatives violate the defining predicate and are drawn 50/50 from
//! same-domain and cross-domain frame pairs, so a prompt cannot separate the
//! batch on domain identity alone.

use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{ConpeError, Result};
use crate::rng::CounterRng;
use crate::world::{apply_color_jitter, EpisodeDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    Behavior,
    Augmentation,
    Timestep,
}

/// Color-jitter parameter ranges for the augmentation contrast; must stay
/// within the DomainSpec color-factor bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRanges {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue_shift: (f64, f64),
}

impl Default for AugRanges {
    fn default() -> Self {
        AugRanges {
            brightness: (0.3, 1.5),
            contrast: (0.5, 2.0),
            saturation: (0.0, 2.0),
            hue_shift: (0.0, 360.0),
        }
    }
}

impl AugRanges {
    pub fn validate(&self) -> Result<()> {
        let full = crate::world::FactorRanges::full();
        let within = |r: (f64, f64), b: (f64, f64), what: &str| -> Result<()> {
            if r.0 > r.1 || r.0 < b.0 || r.1 > b.1 {
                return Err(ConpeError::Config(format!("augmentation range {what} out of bounds")));
            }
            Ok(())
        };
        within(self.brightness, full.brightness, "brightness")?;
        within(self.contrast, full.contrast, "contrast")?;
        within(self.saturation, full.saturation, "saturation")?;
        within(self.hue_shift, full.hue_shift, "hue_shift")?;
        Ok(())
    }

    fn draw(&self, rng: &mut CounterRng) -> AugParams {
        AugParams {
            brightness: rng.uniform_in(self.brightness.0, self.brightness.1),
            contrast: rng.uniform_in(self.contrast.0, self.contrast.1),
            saturation: rng.uniform_in(self.saturation.0, self.saturation.1),
            hue_shift: rng.uniform_in(self.hue_shift.0, self.hue_shift.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

impl AugParams {
    pub fn apply(&self, image: &ImageTensor) -> ImageTensor {
        apply_color_jitter(image, self.brightness, self.contrast, self.saturation, self.hue_shift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub episode: usize,
    pub t: usize,
}

/// Where a pair came from; enough to re-evaluate its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub kind: ContrastKind,
    pub a: FrameRef,
    pub b: FrameRef,
    pub domain_a: u32,
    pub domain_b: u32,
    /// augmentation parameters applied to frame b (augmentation kind only)
    pub aug: Option<AugParams>,
    /// window parameter for the timestep kind
    pub timestep_k: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct ContrastPair {
    pub a: ImageTensor,
    pub b: ImageTensor,
    pub label: u8,
    pub provenance: PairProvenance,
}

#[derive(Debug, Clone)]
pub struct ContrastBatch {
    pub pairs: Vec<ContrastPair>,
    /// index of the unique positive pair
    pub positive_index: usize,
}

impl ContrastBatch {
    pub fn check_invariants(&self) -> Result<()> {
        if self.pairs.len() < 2 {
            return Err(ConpeError::Validation("batch needs m >= 2".into()));
        }
        let positives = self.pairs.iter().filter(|p| p.label == 1).count();
        if positives != 1 || self.pairs[self.positive_index].label != 1 {
            return Err(ConpeError::Validation(format!(
                "batch must hold exactly one positive, found {positives}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub kind: ContrastKind,
    /// batch size m
    pub m: usize,
    /// timestep window
    pub timestep_k: u32,
    pub aug: AugRanges,
    pub seed: u64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            kind: ContrastKind::Behavior,
            m: 64,
            timestep_k: 3,
            aug: AugRanges::default(),
            seed: 0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(ConpeError::Config("batch size m must be >= 2".into()));
        }
        self.aug.validate()
    }
}

/// A sampling view over a dataset for one contrast kind. Positive candidates
/// are enumerated eagerly (the enumeration is itself a tested quantity);
/// negatives are rejection-sampled on demand.
pub struct PairStream<'d> {
    dataset: &'d EpisodeDataset,
    kind: ContrastKind,
    positives: Vec<PairProvenance>,
    frames: Vec<FrameRef>,
    timestep_k: u32,
    aug: AugRanges,
}

fn all_frames(dataset: &EpisodeDataset) -> Vec<FrameRef> {
    let mut out = Vec::with_capacity(dataset.total_frames());
    for (ei, ep) in dataset.episodes.iter().enumerate() {
        for t in 0..ep.len() {
            out.push(FrameRef { episode: ei, t });
        }
    }
    out
}

/// Behavior-driven pairs: positives are cross-domain frame pairs sharing the
/// expert action.
pub fn behavior_pairs(dataset: &EpisodeDataset) -> Result<PairStream<'_>> {
    if dataset.episodes.len() < 2 {
        return Err(ConpeError::InsufficientData(
            "behavior contrast needs at least 2 episodes".into(),
        ));
    }
    let frames = all_frames(dataset);
    let mut positives = Vec::new();
    for (i, fa) in frames.iter().enumerate() {
        for fb in frames.iter().skip(i + 1) {
            let ea = &dataset.episodes[fa.episode];
            let eb = &dataset.episodes[fb.episode];
            if ea.domain_id == eb.domain_id {
                continue;
            }
            if ea.actions[fa.t] == eb.actions[fb.t] {
                positives.push(PairProvenance {
                    kind: ContrastKind::Behavior,
                    a: *fa,
                    b: *fb,
                    domain_a: ea.domain_id,
                    domain_b: eb.domain_id,
                    aug: None,
                    timestep_k: None,
                });
            }
        }
    }
    if positives.is_empty() {
        return Err(ConpeError::InsufficientData(
            "no cross-domain equal-action pairs in dataset".into(),
        ));
    }
    Ok(PairStream {
        dataset,
        kind: ContrastKind::Behavior,
        positives,
        frames,
        timestep_k: 0,
        aug: AugRanges::default(),
    })
}

/// Augmentation-driven pairs: each frame yields one positive (o, AUG(o)) with
/// parameters drawn per frame from `aug`.
pub fn augmentation_pairs<'d>(
    dataset: &'d EpisodeDataset,
    aug: &AugRanges,
    seed: u64,
) -> Result<PairStream<'d>> {
    aug.validate()?;
    let frames = all_frames(dataset);
    if frames.is_empty() {
        return Err(ConpeError::InsufficientData("dataset has no frames".into()));
    }
    let mut rng = CounterRng::from_path(seed, "contrast/aug-params");
    let positives = frames
        .iter()
        .map(|f| {
            let ep = &dataset.episodes[f.episode];
            PairProvenance {
                kind: ContrastKind::Augmentation,
                a: *f,
                b: *f,
                domain_a: ep.domain_id,
                domain_b: ep.domain_id,
                aug: Some(aug.draw(&mut rng)),
                timestep_k: None,
            }
        })
        .collect();
    Ok(PairStream {
        dataset,
        kind: ContrastKind::Augmentation,
        positives,
        frames,
        timestep_k: 0,
        aug: aug.clone(),
    })
}

/// Timestep-driven pairs: positives are cross-domain pairs within the window
/// |t - t'| <= k (inclusive).
pub fn timestep_pairs(dataset: &EpisodeDataset, k: u32) -> Result<PairStream<'_>> {
    if dataset.episodes.len() < 2 {
        return Err(ConpeError::InsufficientData(
            "timestep contrast needs at least 2 episodes".into(),
        ));
    }
    let frames = all_frames(dataset);
    let mut positives = Vec::new();
    for (i, fa) in frames.iter().enumerate() {
        for fb in frames.iter().skip(i + 1) {
            let ea = &dataset.episodes[fa.episode];
            let eb = &dataset.episodes[fb.episode];
            if ea.domain_id == eb.domain_id {
                continue;
            }
            let ta = i64::from(ea.timesteps[fa.t]);
            let tb = i64::from(eb.timesteps[fb.t]);
            if (ta - tb).abs() <= i64::from(k) {
                positives.push(PairProvenance {
                    kind: ContrastKind::Timestep,
                    a: *fa,
                    b: *fb,
                    domain_a: ea.domain_id,
                    domain_b: eb.domain_id,
                    aug: None,
                    timestep_k: Some(k),
                });
            }
        }
    }
    if positives.is_empty() {
        return Err(ConpeError::InsufficientData(
            "no cross-domain pairs within the timestep window".into(),
        ));
    }
    Ok(PairStream {
        dataset,
        kind: ContrastKind::Timestep,
        positives,
        frames,
        timestep_k: k,
        aug: AugRanges::default(),
    })
}

impl<'d> PairStream<'d> {
    pub fn kind(&self) -> ContrastKind {
        self.kind
    }

    /// Number of enumerated positive candidates.
    pub fn positive_count(&self) -> usize {
        self.positives.len()
    }

    pub fn positive_provenances(&self) -> &[PairProvenance] {
        &self.positives
    }

    pub fn dataset(&self) -> &'d EpisodeDataset {
        self.dataset
    }

    fn frame_image(&self, f: FrameRef) -> Result<ImageTensor> {
        self.dataset.episodes[f.episode].frame_image(f.t)
    }

    fn materialize(&self, prov: &PairProvenance, label: u8) -> Result<ContrastPair> {
        let a = self.frame_image(prov.a)?;
        let b_raw = self.frame_image(prov.b)?;
        let b = match &prov.aug {
            Some(aug) => aug.apply(&b_raw),
            None => b_raw,
        };
        Ok(ContrastPair { a, b, label, provenance: prov.clone() })
    }

    /// Predicate violated + domain-class coin flip (same vs cross domain).
    /// Negatives never pair frames of one episode: adjacent frames are
    /// near-identical, and such pairs make the discrimination task carry no
    /// learnable signal.
    fn sample_negative(&self, rng: &mut CounterRng) -> Result<ContrastPair> {
        let want_cross = rng.coin();
        for relax in [false, true] {
            for _ in 0..256 {
                let fa = self.frames[rng.below(self.frames.len())];
                let fb = self.frames[rng.below(self.frames.len())];
                if fa.episode == fb.episode {
                    continue;
                }
                let ea = &self.dataset.episodes[fa.episode];
                let eb = &self.dataset.episodes[fb.episode];
                let cross = ea.domain_id != eb.domain_id;
                if !relax && cross != want_cross {
                    continue;
                }
                let violated = match self.kind {
                    ContrastKind::Behavior => ea.actions[fa.t] != eb.actions[fb.t],
                    ContrastKind::Timestep => {
                        let ta = i64::from(ea.timesteps[fa.t]);
                        let tb = i64::from(eb.timesteps[fb.t]);
                        (ta - tb).abs() > i64::from(self.timestep_k)
                    }
                    // AUG of a different frame: violated by construction
                    ContrastKind::Augmentation => true,
                };
                if !violated {
                    continue;
                }
                let aug = match self.kind {
                    ContrastKind::Augmentation => Some(self.aug.draw(rng)),
                    _ => None,
                };
                let prov = PairProvenance {
                    kind: self.kind,
                    a: fa,
                    b: fb,
                    domain_a: ea.domain_id,
                    domain_b: eb.domain_id,
                    aug,
                    timestep_k: (self.kind == ContrastKind::Timestep).then_some(self.timestep_k),
                };
                return self.materialize(&prov, 0);
            }
        }
        Err(ConpeError::InsufficientData(format!(
            "could not sample a negative pair for {:?}",
            self.kind
        )))
    }
}

/// Draw one positive and m-1 negatives; the positive lands at a random index.
pub fn build_batch(stream: &PairStream<'_>, m: usize, seed: u64) -> Result<ContrastBatch> {
    if m < 2 {
        return Err(ConpeError::Usage(format!("batch size m = {m} < 2")));
    }
    let mut rng = CounterRng::from_path(seed, "contrast/batch");
    let prov = &stream.positives[rng.below(stream.positives.len())];
    let positive = stream.materialize(prov, 1)?;
    let mut pairs = Vec::with_capacity(m);
    for _ in 0..m - 1 {
        pairs.push(stream.sample_negative(&mut rng)?);
    }
    let positive_index = rng.below(m);
    pairs.insert(positive_index, positive);
    let batch = ContrastBatch { pairs, positive_index };
    batch.check_invariants()?;
    Ok(batch)
}

/// Re-evaluate the defining predicate from stored provenance.
pub fn reevaluate_label(dataset: &EpisodeDataset, prov: &PairProvenance) -> u8 {
    let ea = &dataset.episodes[prov.a.episode];
    let eb = &dataset.episodes[prov.b.episode];
    let positive = match prov.kind {
        ContrastKind::Behavior => ea.actions[prov.a.t] == eb.actions[prov.b.t],
        ContrastKind::Timestep => {
            let k = i64::from(prov.timestep_k.unwrap_or(0));
            (i64::from(ea.timesteps[prov.a.t]) - i64::from(eb.timesteps[prov.b.t])).abs() <= k
        }
        // o' = AUG(o) holds exactly when b is the same source frame
        ContrastKind::Augmentation => prov.a == prov.b,
    };
    u8::from(positive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{collect_episodes, generate_map, DomainSpec, Task};

    fn toy_dataset(n_domains: usize, eps_per_domain: usize) -> EpisodeDataset {
        let map = generate_map(1, 9).unwrap();
        let domains: Vec<DomainSpec> = (0..n_domains)
            .map(|i| DomainSpec {
                brightness: 0.8 + 0.2 * i as f64,
                ..DomainSpec::canonical()
            })
            .collect();
        collect_episodes(&[map], &domains, &Task::ObjectGoal { color: 0 }, eps_per_domain, 3, false)
            .unwrap()
    }

    #[test]
    fn behavior_positive_count_matches_enumeration() {
        let ds = toy_dataset(2, 1);
        let stream = behavior_pairs(&ds).unwrap();
        // oracle: exhaustive scan over all frame pairs
        let mut expected = 0usize;
        let frames = all_frames(&ds);
        for (i, fa) in frames.iter().enumerate() {
            for fb in frames.iter().skip(i + 1) {
                let ea = &ds.episodes[fa.episode];
                let eb = &ds.episodes[fb.episode];
                if ea.domain_id != eb.domain_id && ea.actions[fa.t] == eb.actions[fb.t] {
                    expected += 1;
                }
            }
        }
        assert!(expected > 0);
        assert_eq!(stream.positive_count(), expected);
        for p in stream.positive_provenances() {
            assert_ne!(p.domain_a, p.domain_b, "positive must span domains");
            assert_eq!(reevaluate_label(&ds, p), 1);
        }
    }

    #[test]
    fn timestep_window_is_inclusive_and_counts_match() {
        let ds = toy_dataset(2, 1);
        let stream = timestep_pairs(&ds, 3).unwrap();
        for p in stream.positive_provenances() {
            let ta = i64::from(ds.episodes[p.a.episode].timesteps[p.a.t]);
            let tb = i64::from(ds.episodes[p.b.episode].timesteps[p.b.t]);
            assert!((ta - tb).abs() <= 3);
            assert_ne!(p.domain_a, p.domain_b);
        }
        let count_oracle = {
            let frames = all_frames(&ds);
            let mut c = 0usize;
            for (i, fa) in frames.iter().enumerate() {
                for fb in frames.iter().skip(i + 1) {
                    let ea = &ds.episodes[fa.episode];
                    let eb = &ds.episodes[fb.episode];
                    if ea.domain_id != eb.domain_id
                        && (i64::from(ea.timesteps[fa.t]) - i64::from(eb.timesteps[fb.t])).abs() <= 3
                    {
                        c += 1;
                    }
                }
            }
            c
        };
        assert_eq!(stream.positive_count(), count_oracle);
        // boundary arithmetic: t=5 vs t'=8 is in-window, t'=9 is out
        assert!((5i64 - 8).abs() <= 3);
        assert!((5i64 - 9).abs() > 3);
    }

    #[test]
    fn augmentation_identity_gives_byte_equal_pair() {
        let ds = toy_dataset(1, 2);
        let aug = AugRanges {
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue_shift: (0.0, 0.0),
        };
        let stream = augmentation_pairs(&ds, &aug, 5).unwrap();
        let batch = build_batch(&stream, 2, 9).unwrap();
        let pos = &batch.pairs[batch.positive_index];
        assert_eq!(pos.a, pos.b);
    }

    #[test]
    fn augmentation_labels_follow_definition() {
        let ds = toy_dataset(2, 1);
        let stream = augmentation_pairs(&ds, &AugRanges::default(), 5).unwrap();
        let batch = build_batch(&stream, 4, 21).unwrap();
        for (i, pair) in batch.pairs.iter().enumerate() {
            let expected = reevaluate_label(&ds, &pair.provenance);
            assert_eq!(pair.label, expected);
            if i == batch.positive_index {
                assert_eq!(pair.label, 1);
                assert_eq!(pair.provenance.a, pair.provenance.b);
            } else {
                assert_ne!(pair.provenance.a, pair.provenance.b);
            }
        }
    }

    #[test]
    fn batches_hold_exactly_one_positive() {
        let ds = toy_dataset(3, 2);
        let stream = behavior_pairs(&ds).unwrap();
        for seed in 0..50 {
            let batch = build_batch(&stream, 6, seed).unwrap();
            batch.check_invariants().unwrap();
            let positives = batch.pairs.iter().filter(|p| p.label == 1).count();
            assert_eq!(positives, 1);
            for p in &batch.pairs {
                assert_eq!(p.label, reevaluate_label(&ds, &p.provenance));
            }
        }
    }

    #[test]
    fn build_batch_deterministic() {
        let ds = toy_dataset(2, 2);
        let stream = timestep_pairs(&ds, 3).unwrap();
        let a = build_batch(&stream, 4, 17).unwrap();
        let b = build_batch(&stream, 4, 17).unwrap();
        assert_eq!(a.positive_index, b.positive_index);
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(x.provenance, y.provenance);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn m2_batch_is_one_pos_one_neg() {
        let ds = toy_dataset(2, 1);
        let stream = behavior_pairs(&ds).unwrap();
        let batch = build_batch(&stream, 2, 3).unwrap();
        assert_eq!(batch.pairs.len(), 2);
        let labels: Vec<u8> = batch.pairs.iter().map(|p| p.label).collect();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 1);
    }

    #[test]
    fn single_episode_is_insufficient_for_behavior() {
        let ds = toy_dataset(1, 1);
        assert!(matches!(
            behavior_pairs(&ds),
            Err(ConpeError::InsufficientData(_))
        ));
    }

    #[test]
    fn aug_cross_check_against_renderer() {
        // AUG applied to a neutrally-colored rendered frame equals rendering
        // with the same color factors in the DomainSpec
        use crate::world::{render, AgentState};
        let map = generate_map(1, 9).unwrap();
        let agent = AgentState { x: map.spawns[0].0, y: map.spawns[0].1, heading_deg: 90 };
        let neutral = DomainSpec::canonical();
        let aug = AugParams { brightness: 1.3, contrast: 0.7, saturation: 1.6, hue_shift: 45.0 };
        let colored = DomainSpec {
            brightness: aug.brightness,
            contrast: aug.contrast,
            saturation: aug.saturation,
            hue_shift: aug.hue_shift,
            ..neutral.clone()
        };
        let base = render(&map, &agent, &neutral);
        let augmented = aug.apply(&base);
        let direct = render(&map, &agent, &colored);
        for (x, y) in augmented.pixels.iter().zip(&direct.pixels) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_domain_mix_is_roughly_even() {
        let ds = toy_dataset(2, 3);
        let stream = behavior_pairs(&ds).unwrap();
        let mut same = 0usize;
        let mut cross = 0usize;
        for seed in 0..120 {
            let batch = build_batch(&stream, 3, seed).unwrap();
            for (i, p) in batch.pairs.iter().enumerate() {
                if i == batch.positive_index {
                    continue;
                }
                if p.provenance.domain_a == p.provenance.domain_b {
                    same += 1;
                } else {
                    cross += 1;
                }
            }
        }
        let total = (same + cross) as f64;
        let ratio = same as f64 / total;
        assert!((0.3..0.7).contains(&ratio), "same-domain ratio {ratio}");
    }
}
