//! Token renderer. The label is carried by a pair of class-specific signal
//! tokens; shortcut tokens are single tokens whose class follows the
//! configured correlation.
//!
//! Vocabulary layout: `[0, 2K)` signal tokens (two per class), then `K`
//! shortcut tokens per shortcut slot, then filler.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CueLocation, CueRecord, DatasetConfig, Example, Features, Placement, ShortcutKind};
use crate::error::{MimuError, Result};

pub fn signal_tokens(class: usize) -> [u16; 2] {
    [(2 * class) as u16, (2 * class + 1) as u16]
}

pub fn shortcut_token(num_classes: usize, slot: usize, class: usize) -> u16 {
    (2 * num_classes + slot * num_classes + class) as u16
}

fn slots(config: &DatasetConfig) -> usize {
    config
        .shortcuts
        .iter()
        .map(|s| s.slot + 1)
        .max()
        .unwrap_or(0)
}

fn filler_start(config: &DatasetConfig) -> usize {
    2 * config.num_classes + slots(config) * config.num_classes
}

pub(super) fn validate(config: &DatasetConfig) -> Result<()> {
    let k = config.num_classes;
    let t = &config.text;
    for s in &config.shortcuts {
        if s.kind != ShortcutKind::ShortcutToken {
            return Err(MimuError::config(
                "data.shortcuts",
                format!("{} cues require image modality", s.kind.name()),
            ));
        }
    }
    let reserved = filler_start(config);
    if t.vocab_size < reserved + k || t.vocab_size > u16::MAX as usize {
        return Err(MimuError::config(
            "data.text.vocab_size",
            format!(
                "{} tokens cannot hold {} signal, {} shortcut and {} filler tokens disjointly",
                t.vocab_size,
                2 * k,
                reserved - 2 * k,
                k
            ),
        ));
    }
    if t.seq_len < 4 + config.shortcuts.len() {
        return Err(MimuError::config("data.text.seq_len", "sequence too short for the motif"));
    }
    if !(0.0..=1.0).contains(&t.distractor_rate) {
        return Err(MimuError::config("data.text.distractor_rate", "must lie in [0, 1]"));
    }
    Ok(())
}

pub(super) fn render_example(
    config: &DatasetConfig,
    label: usize,
    cue_classes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let k = config.num_classes;
    let t = &config.text;
    let l = t.seq_len;
    let filler = filler_start(config) as u16..t.vocab_size as u16;

    let mut tokens: Vec<u16> = (0..l).map(|_| rng.gen_range(filler.clone())).collect();

    // Fixed-placement shortcuts occupy the first positions.
    let fixed: Vec<usize> = config
        .shortcuts
        .iter()
        .filter(|s| s.placement == Placement::Fixed)
        .map(|s| s.slot)
        .collect();
    let mut free: Vec<usize> = (0..l).filter(|p| !fixed.contains(p)).collect();
    free.shuffle(rng);
    let mut free = free.into_iter();

    let pair = signal_tokens(label);
    let p0 = free.next().expect("validated length");
    let p1 = free.next().expect("validated length");
    tokens[p0] = pair[0];
    tokens[p1] = pair[1];

    let distract = rng.gen_bool(t.distractor_rate);
    let other = (label + rng.gen_range(1..k)) % k;
    let which = rng.gen_range(0..2usize);
    let pd = free.next().expect("validated length");
    if distract {
        tokens[pd] = signal_tokens(other)[which];
    }

    let mut cues = Vec::with_capacity(config.shortcuts.len());
    for (s, &class) in config.shortcuts.iter().zip(cue_classes) {
        let pos = match s.placement {
            Placement::Fixed => s.slot,
            Placement::Randomized => free.next().expect("validated length"),
        };
        tokens[pos] = shortcut_token(k, s.slot, class);
        cues.push(CueRecord {
            kind: s.kind,
            slot: s.slot,
            cue_class: class,
            location: CueLocation::Token { position: pos },
        });
    }

    Ok(Example {
        features: Features::Tokens(tokens),
        label,
        cues,
        object: None,
    })
}
