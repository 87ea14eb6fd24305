//! Synthetic classification data with injected, independently controllable
//! shortcut cues.
//!
//! Every split is a pure function of `(config, seed)`. Labels are balanced
//! (`label = index mod K`), and the cue class of every shortcut is assigned
//! at split level so that empirical co-occurrence rates hit their targets
//! exactly up to rounding: a training split with `correlation = c` has
//! `round(c * n)` matching cues, and a broken OOD cue has its offset from the
//! label cycled through `0..K`, giving a co-occurrence of `1/K`.

mod image;
mod io;
mod text;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MimuError, Result};
use crate::hashing::mix_seed;

pub use image::{glyph_bitmap, object_mask, MAX_CLASSES, PALETTE};
pub use io::{bundle_hash, load_bundle, load_manifest, save_bundle, BundleManifest, SplitLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutKind {
    BackgroundColor,
    WatermarkGlyph,
    ShortcutToken,
}

impl ShortcutKind {
    /// Letter used in OOD variant names (`rand_b`, `rand_w`, `rand_t`).
    pub fn group(self) -> char {
        match self {
            ShortcutKind::BackgroundColor => 'b',
            ShortcutKind::WatermarkGlyph => 'w',
            ShortcutKind::ShortcutToken => 't',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShortcutKind::BackgroundColor => "background_color",
            ShortcutKind::WatermarkGlyph => "watermark_glyph",
            ShortcutKind::ShortcutToken => "shortcut_token",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Fixed,
    #[default]
    Randomized,
}

/// Documentation only; never read by the generators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Strong,
    #[default]
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortcutSpec {
    pub kind: ShortcutKind,
    /// Probability that the cue matches the label in train/dev.
    pub correlation: f64,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub strength: Strength,
    /// Distinguishes several cues of the same kind (second watermark, ...).
    #[serde(default)]
    pub slot: usize,
}

impl ShortcutSpec {
    pub fn new(kind: ShortcutKind, correlation: f64) -> Self {
        let strength = match kind {
            ShortcutKind::BackgroundColor => Strength::Strong,
            _ => Strength::Weak,
        };
        ShortcutSpec {
            kind,
            correlation,
            placement: Placement::Randomized,
            strength,
            slot: 0,
        }
    }

    pub fn with_slot(mut self, slot: usize) -> Self {
        self.slot = slot;
        self
    }

    pub fn label(&self) -> String {
        if self.slot == 0 {
            self.kind.name().to_string()
        } else {
            format!("{}#{}", self.kind.name(), self.slot)
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.correlation) || self.correlation.is_nan() {
            return Err(MimuError::config(
                format!("data.shortcuts[{index}].correlation"),
                format!("{} is outside [0, 1]", self.correlation),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Object side length range (inclusive) in pixels.
    pub object_min: usize,
    pub object_max: usize,
    /// Uniform per-pixel noise amplitude.
    pub noise: u8,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            object_min: 13,
            object_max: 17,
            noise: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSpec {
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Probability of inserting a lone signal token of another class.
    pub distractor_rate: f64,
}

impl Default for TextSpec {
    fn default() -> Self {
        TextSpec {
            seq_len: 32,
            vocab_size: 64,
            distractor_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub modality: Modality,
    pub num_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub ood_size: usize,
    pub image: ImageSpec,
    pub text: TextSpec,
    pub shortcuts: Vec<ShortcutSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::two_shortcut_image(4, 0.95)
    }
}

impl DatasetConfig {
    /// Strong background plus weak watermark on 32x32 images.
    pub fn two_shortcut_image(num_classes: usize, correlation: f64) -> Self {
        DatasetConfig {
            modality: Modality::Image,
            num_classes,
            train_size: 1200,
            dev_size: 400,
            ood_size: 400,
            image: ImageSpec::default(),
            text: TextSpec::default(),
            shortcuts: vec![
                ShortcutSpec::new(ShortcutKind::BackgroundColor, correlation),
                ShortcutSpec::new(ShortcutKind::WatermarkGlyph, correlation),
            ],
        }
    }

    pub fn text(num_classes: usize, correlation: f64) -> Self {
        DatasetConfig {
            modality: Modality::Text,
            num_classes,
            train_size: 1200,
            dev_size: 400,
            ood_size: 400,
            image: ImageSpec::default(),
            text: TextSpec::default(),
            shortcuts: vec![ShortcutSpec::new(ShortcutKind::ShortcutToken, correlation)],
        }
    }

    pub fn input_shape(&self) -> InputShape {
        match self.modality {
            Modality::Image => InputShape::Image {
                height: self.image.height,
                width: self.image.width,
                channels: self.image.channels,
                patch: self.image.patch,
            },
            Modality::Text => InputShape::Tokens {
                seq_len: self.text.seq_len,
                vocab_size: self.text.vocab_size,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MimuError::config(
                "data.num_classes",
                format!("need at least 2 classes, got {}", self.num_classes),
            ));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.ood_size == 0 {
            return Err(MimuError::config("data.*_size", "split sizes must be positive"));
        }
        if self.shortcuts.is_empty() {
            return Err(MimuError::config("data.shortcuts", "at least one shortcut is required"));
        }
        for (i, s) in self.shortcuts.iter().enumerate() {
            s.validate(i)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.shortcuts {
            if !seen.insert((s.kind, s.slot)) {
                return Err(MimuError::config(
                    "data.shortcuts",
                    format!("duplicate shortcut {}", s.label()),
                ));
            }
        }
        match self.modality {
            Modality::Image => image::validate(self),
            Modality::Text => text::validate(self),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum InputShape {
    Image {
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
    },
    Tokens {
        seq_len: usize,
        vocab_size: usize,
    },
}

impl InputShape {
    pub fn feature_len(&self) -> usize {
        match *self {
            InputShape::Image {
                height,
                width,
                channels,
                ..
            } => height * width * channels,
            InputShape::Tokens { seq_len, .. } => seq_len,
        }
    }

    /// Model sequence length `l`: tokens, or patches plus a class token.
    pub fn seq_len(&self) -> usize {
        match *self {
            InputShape::Image {
                height,
                width,
                patch,
                ..
            } => (height / patch) * (width / patch) + 1,
            InputShape::Tokens { seq_len, .. } => seq_len,
        }
    }
}

/// Model input. Images are row-major `H x W x C`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Features {
    Tokens(Vec<u16>),
    Image(Vec<u8>),
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "at")]
pub enum CueLocation {
    /// Covers every pixel outside the object.
    Background,
    Pixels { region: Region },
    Token { position: usize },
}

/// Audit annotation of one injected cue. Never fed to a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueRecord {
    pub kind: ShortcutKind,
    pub slot: usize,
    pub cue_class: usize,
    pub location: CueLocation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub features: Features,
    pub label: usize,
    pub cues: Vec<CueRecord>,
    /// Object bounding box for images, signal token positions for text.
    pub object: Option<Region>,
}

impl Example {
    pub fn cue(&self, kind: ShortcutKind, slot: usize) -> Option<&CueRecord> {
        self.cues.iter().find(|c| c.kind == kind && c.slot == slot)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub num_classes: usize,
    pub input: InputShape,
    pub shortcuts: Vec<ShortcutSpec>,
    pub seed: u64,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub meta: BundleMeta,
    pub train: Vec<Example>,
    pub dev_iid: Vec<Example>,
    pub ood_variants: BTreeMap<String, Vec<Example>>,
}

impl DatasetBundle {
    /// All evaluation splits: `dev` first, then OOD variants by name.
    pub fn eval_splits(&self) -> Vec<(&str, &[Example])> {
        let mut out: Vec<(&str, &[Example])> = vec![("dev", &self.dev_iid)];
        out.extend(self.ood_variants.iter().map(|(k, v)| (k.as_str(), v.as_slice())));
        out
    }
}

/// Generates an image bundle. Rejects text configs.
pub fn gen_image_dataset(config: &DatasetConfig, seed: u64) -> Result<DatasetBundle> {
    if config.modality != Modality::Image {
        return Err(MimuError::config("data.modality", "expected `image`"));
    }
    generate(config, seed)
}

/// Generates a token bundle. Rejects image configs.
pub fn gen_text_dataset(config: &DatasetConfig, seed: u64) -> Result<DatasetBundle> {
    if config.modality != Modality::Text {
        return Err(MimuError::config("data.modality", "expected `text`"));
    }
    generate(config, seed)
}

/// Dispatches on the config's modality.
pub fn generate(config: &DatasetConfig, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    let k = config.num_classes;

    let train = gen_split(config, seed, SplitId::Train, config.train_size, &[])?;
    let dev_iid = gen_split(config, seed, SplitId::Dev, config.dev_size, &[])?;

    let mut ood_variants = BTreeMap::new();
    for (name, groups) in ood_variant_groups(&config.shortcuts) {
        let split = gen_split(config, seed, SplitId::Ood, config.ood_size, &groups)?;
        ood_variants.insert(name, split);
    }

    Ok(DatasetBundle {
        meta: BundleMeta {
            num_classes: k,
            input: config.input_shape(),
            shortcuts: config.shortcuts.clone(),
            seed,
            config: config.clone(),
        },
        train,
        dev_iid,
        ood_variants,
    })
}

/// One variant per cue group plus, with two or more groups, one that breaks
/// all of them (`rand_bw`).
pub fn ood_variant_groups(shortcuts: &[ShortcutSpec]) -> Vec<(String, Vec<char>)> {
    let mut groups: Vec<char> = shortcuts.iter().map(|s| s.kind.group()).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut out: Vec<(String, Vec<char>)> = groups
        .iter()
        .map(|g| (format!("rand_{g}"), vec![*g]))
        .collect();
    if groups.len() > 1 {
        let all: String = groups.iter().collect();
        out.push((format!("rand_{all}"), groups.clone()));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SplitId {
    Train = 1,
    Dev = 2,
    Ood = 3,
}

/// Per-example generator; identical for every OOD variant so variants differ
/// only in their cue classes.
pub(crate) fn example_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, &[split, index as u64, 0xE1]))
}

/// Cue classes for one shortcut over a whole split.
fn assign_cues(
    labels: &[usize],
    k: usize,
    correlation: f64,
    broken: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = labels.len();
    let mut offsets = vec![0usize; n];
    if broken {
        for (i, o) in offsets.iter_mut().enumerate() {
            *o = i % k;
        }
        offsets.shuffle(rng);
    } else {
        let matched = (correlation * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for &i in &order[matched.min(n)..] {
            offsets[i] = rng.gen_range(1..k);
        }
    }
    labels
        .iter()
        .zip(&offsets)
        .map(|(&y, &o)| (y + o) % k)
        .collect()
}

fn gen_split(
    config: &DatasetConfig,
    seed: u64,
    split: SplitId,
    n: usize,
    broken_groups: &[char],
) -> Result<Vec<Example>> {
    let k = config.num_classes;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let split_code = split as u64;

    let cue_classes: Vec<Vec<usize>> = config
        .shortcuts
        .iter()
        .map(|s| {
            let broken = broken_groups.contains(&s.kind.group());
            let tag = mix_seed(
                seed,
                &[split_code, s.kind as u64, s.slot as u64, broken as u64],
            );
            let mut rng = ChaCha8Rng::seed_from_u64(tag);
            assign_cues(&labels, k, s.correlation, broken, &mut rng)
        })
        .collect();

    (0..n)
        .map(|i| {
            let mut rng = example_rng(seed, split_code, i);
            let cues: Vec<usize> = cue_classes.iter().map(|c| c[i]).collect();
            match config.modality {
                Modality::Image => image::render_example(config, labels[i], &cues, &mut rng),
                Modality::Text => text::render_example(config, labels[i], &cues, &mut rng),
            }
        })
        .collect()
}

/// Fraction of examples whose cue class for `shortcut` equals the label.
pub fn audit_cooccurrence(split: &[Example], shortcut: &ShortcutSpec) -> Result<f64> {
    if split.is_empty() {
        return Err(MimuError::InvalidInput(format!(
            "cannot audit `{}` on an empty split",
            shortcut.label()
        )));
    }
    let mut hits = 0usize;
    for (i, ex) in split.iter().enumerate() {
        let cue = ex
            .cue(shortcut.kind, shortcut.slot)
            .ok_or_else(|| MimuError::MissingCue {
                index: i,
                kind: shortcut.label(),
            })?;
        if cue.cue_class == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / split.len() as f64)
}

pub fn label_histogram(split: &[Example], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for ex in split {
        h[ex.label] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_image(corr: f64) -> DatasetConfig {
        let mut c = DatasetConfig::two_shortcut_image(4, corr);
        c.train_size = 200;
        c.dev_size = 80;
        c.ood_size = 80;
        c
    }

    #[test]
    fn full_correlation_matches_every_label() {
        let b = gen_image_dataset(&small_image(1.0), 3).unwrap();
        for ex in &b.train {
            for c in &ex.cues {
                assert_eq!(c.cue_class, ex.label);
            }
        }
        for s in &b.meta.shortcuts {
            assert_eq!(audit_cooccurrence(&b.train, s).unwrap(), 1.0);
        }
    }

    #[test]
    fn rand_w_cooccurrence_near_chance() {
        let mut cfg = small_image(0.95);
        cfg.train_size = 400;
        cfg.ood_size = 400;
        let b = gen_image_dataset(&cfg, 7).unwrap();
        let wm = &b.meta.shortcuts[1];
        let rate = audit_cooccurrence(&b.ood_variants["rand_w"], wm).unwrap();
        assert!((0.20..=0.30).contains(&rate), "rate {rate}");
        // unbroken background keeps the training correlation
        let bg = &b.meta.shortcuts[0];
        let rate = audit_cooccurrence(&b.ood_variants["rand_w"], bg).unwrap();
        assert!(rate >= 0.92, "rate {rate}");
    }

    #[test]
    fn variants_are_named_by_group() {
        let b = gen_image_dataset(&small_image(0.9), 1).unwrap();
        let names: Vec<&str> = b.ood_variants.keys().map(|s| s.as_str()).collect();
        assert_eq!(names, ["rand_b", "rand_bw", "rand_w"]);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small_image(0.9);
        assert_eq!(gen_image_dataset(&cfg, 11).unwrap(), gen_image_dataset(&cfg, 11).unwrap());
        assert_ne!(
            gen_image_dataset(&cfg, 11).unwrap().train,
            gen_image_dataset(&cfg, 12).unwrap().train
        );
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_image(0.9);
        c.num_classes = 1;
        assert!(matches!(generate(&c, 0), Err(MimuError::Config { .. })));

        let mut c = small_image(0.9);
        c.image.patch = 7;
        assert!(matches!(generate(&c, 0), Err(MimuError::Config { .. })));

        let mut c = small_image(0.9);
        c.shortcuts[0].correlation = 1.3;
        match generate(&c, 0) {
            Err(MimuError::Config { key, .. }) => assert!(key.contains("correlation")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn audit_errors() {
        let spec = ShortcutSpec::new(ShortcutKind::WatermarkGlyph, 1.0);
        assert!(audit_cooccurrence(&[], &spec).is_err());

        let b = gen_text_dataset(&DatasetConfig::text(3, 0.9), 0).unwrap();
        match audit_cooccurrence(&b.train, &spec) {
            Err(MimuError::MissingCue { kind, .. }) => assert_eq!(kind, "watermark_glyph"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn modality_mismatch_is_rejected() {
        assert!(gen_text_dataset(&small_image(0.9), 0).is_err());
        assert!(gen_image_dataset(&DatasetConfig::text(3, 0.9), 0).is_err());
    }
}
