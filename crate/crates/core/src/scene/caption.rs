use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SceneSample, BACKGROUND};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// A tokenized caption together with the position of the word naming each
/// ground-truth label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub template_id: usize,
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
    /// GT label (sprite id or `background`) -> token position.
    pub positions: BTreeMap<String, usize>,
}

struct Template {
    prefix: &'static [&'static str],
    joiner: &'static [&'static str],
    ground: &'static [&'static str],
    empty_prefix: &'static [&'static str],
}

const TEMPLATES: &[Template] = &[
    Template {
        prefix: &["a", "photo", "of", "a"],
        joiner: &["and", "a"],
        ground: &["on", "a"],
        empty_prefix: &["a", "photo", "of", "a"],
    },
    Template {
        prefix: &["an", "image", "of", "a"],
        joiner: &["with", "a"],
        ground: &["on", "a"],
        empty_prefix: &["an", "image", "of", "a"],
    },
    Template {
        prefix: &["a", "picture", "of", "the"],
        joiner: &["next", "to", "the"],
        ground: &["on", "the"],
        empty_prefix: &["a", "picture", "of", "the"],
    },
    Template {
        prefix: &["the", "photo", "of", "a"],
        joiner: &["and", "a"],
        ground: &["over", "a"],
        empty_prefix: &["the", "photo", "of", "a"],
    },
];

pub const NUM_TEMPLATES: usize = TEMPLATES.len();

/// Fills template `template_id` with each sprite's class word and the
/// background texture word, e.g. "a photo of a circle and a square on a
/// stripes background".
pub fn caption_for(scene: &SceneSample, template_id: usize, vocab: &Vocabulary) -> Result<Caption> {
    let words: Vec<(Option<&str>, &str)> = {
        let t = TEMPLATES
            .get(template_id)
            .ok_or_else(|| Error::Config(format!("template id {template_id} >= {NUM_TEMPLATES}")))?;
        let mut out: Vec<(Option<&str>, &str)> = Vec::new();
        if scene.sprites.is_empty() {
            out.extend(t.empty_prefix.iter().map(|w| (None, *w)));
        } else {
            out.extend(t.prefix.iter().map(|w| (None, *w)));
            for (k, s) in scene.sprites.iter().enumerate() {
                if k > 0 {
                    out.extend(t.joiner.iter().map(|w| (None, *w)));
                }
                out.push((Some(s.sprite_id.as_str()), s.class_word.as_str()));
            }
            out.extend(t.ground.iter().map(|w| (None, *w)));
        }
        out.push((Some(BACKGROUND), scene.background.texture.word()));
        out.push((None, "background"));
        out
    };
    let mut caption = Caption { template_id, ..Default::default() };
    for (pos, (label, word)) in words.into_iter().enumerate() {
        caption.tokens.push(vocab.id(word)?);
        caption.words.push(word.to_string());
        if let Some(l) = label {
            caption.positions.insert(l.to_string(), pos);
        }
    }
    Ok(caption)
}

impl Caption {
    /// Replaces the word at each label's position, e.g. to swap class words
    /// for `[vk]` placeholders.
    pub fn with_substitutions(&self, subs: &BTreeMap<String, String>, vocab: &Vocabulary) -> Result<Caption> {
        let mut out = self.clone();
        for (label, word) in subs {
            let &pos = self
                .positions
                .get(label)
                .ok_or_else(|| Error::Config(format!("caption has no label `{label}`")))?;
            out.tokens[pos] = vocab.id(word)?;
            out.words[pos] = word.clone();
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}
