//! Stories, datasets, the ShapeStories generator, the Pororo-SV on-disk
//! layout and discriminative candidate sets.

mod batch;
mod discriminative;
mod pororo;
mod shapes;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{CaptionerTargets, StoryBatch};
pub use discriminative::{
    build_discriminative_sets, DiscriminativeSet, DiscriminativeSets, FrameRef,
};
pub use pororo::{export_pororo_sv, load_pororo_sv, LoadOptions, PORORO_SPLIT_SIZES};
pub use shapes::{
    generate_shape_stories, generate_shape_story_splits, render_caption, Action, Actor, Character,
    Place, Scene, Slot, SynthConfig, ROSTER,
};
pub use vocab::{pad_to, tokenize, Vocab, BOS, EOS, PAD, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// RGB frame stored as bytes; [`Frame::unit_values`] maps to [-1, 1] in CHW
/// order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    /// Row-major HWC bytes.
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let rgb = color
            .iter()
            .copied()
            .cycle()
            .take((width * height * 3) as usize)
            .collect();
        Self { width, height, rgb }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// CHW floats in [-1, 1].
    pub fn unit_values(&self) -> Vec<f32> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut out = vec![0f32; 3 * w * h];
        for c in 0..3 {
            for p in 0..w * h {
                out[c * w * h + p] = self.rgb[p * 3 + c] as f32 / 127.5 - 1.0;
            }
        }
        out
    }

    /// Inverse of [`Frame::unit_values`] with rounding and clamping.
    pub fn from_unit_values(width: u32, height: u32, chw: &[f32]) -> Self {
        let (w, h) = (width as usize, height as usize);
        let mut rgb = vec![0u8; 3 * w * h];
        for c in 0..3 {
            for p in 0..w * h {
                let v = ((chw[c * w * h + p].clamp(-1.0, 1.0) + 1.0) * 127.5).round();
                rgb[p * 3 + c] = v as u8;
            }
        }
        Self { width, height, rgb }
    }
}

/// T aligned (caption, frame, character-label) triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Story {
    pub id: String,
    pub frames: Vec<Frame>,
    /// Unpadded token ids, each caption non-empty.
    pub captions: Vec<Vec<u32>>,
    /// One 0/1 vector over the character roster per frame.
    pub char_labels: Vec<Vec<u8>>,
}

impl Story {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, num_chars: usize) -> Result<()> {
        let bad = |reason: String| Error::DataIntegrity {
            story_id: self.id.clone(),
            reason,
        };
        let t = self.frames.len();
        if t == 0 {
            return Err(bad("story has no frames".into()));
        }
        if self.captions.len() != t || self.char_labels.len() != t {
            return Err(bad(format!(
                "{} frames, {} captions, {} label vectors",
                t,
                self.captions.len(),
                self.char_labels.len()
            )));
        }
        if let Some(k) = self.captions.iter().position(|c| c.is_empty()) {
            return Err(bad(format!("caption {k} is empty")));
        }
        if let Some(k) = self.char_labels.iter().position(|l| l.len() != num_chars) {
            return Err(bad(format!(
                "label vector {k} does not have {num_chars} entries"
            )));
        }
        let (w, h) = (self.frames[0].width, self.frames[0].height);
        if self.frames.iter().any(|f| f.width != w || f.height != h) {
            return Err(bad("frames differ in size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoryDataset {
    pub stories: Vec<Story>,
    pub split: Split,
    pub vocab: Vocab,
    pub char_names: Vec<String>,
    pub max_caption_len: usize,
}

impl StoryDataset {
    pub fn len(&self) -> usize {
        self.stories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stories.is_empty()
    }

    pub fn num_chars(&self) -> usize {
        self.char_names.len()
    }

    pub fn story_len(&self) -> usize {
        self.stories.first().map_or(0, Story::len)
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.stories
            .first()
            .map_or((0, 0), |s| (s.frames[0].width, s.frames[0].height))
    }

    /// Checks every story and that all captions use in-vocabulary ids.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_chars();
        let v = self.vocab.len() as u32;
        let t = self.story_len();
        let size = self.image_size();
        let mut seen = HashSet::new();
        for s in &self.stories {
            s.validate(c)?;
            if s.len() != t || (s.frames[0].width, s.frames[0].height) != size {
                return Err(Error::DataIntegrity {
                    story_id: s.id.clone(),
                    reason: "story length or frame size differs from the rest of the dataset"
                        .into(),
                });
            }
            if let Some(&bad) = s.captions.iter().flatten().find(|&&id| id >= v) {
                return Err(Error::Lookup {
                    id: bad,
                    vocab_size: v as usize,
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DataIntegrity {
                    story_id: s.id.clone(),
                    reason: "duplicate story id".into(),
                });
            }
        }
        Ok(())
    }

    pub fn caption_text(&self, story: usize, frame: usize) -> String {
        self.vocab.decode(&self.stories[story].captions[frame])
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> StoryDataset {
        StoryDataset {
            stories: self.stories[range].to_vec(),
            ..self.clone_empty()
        }
    }

    pub fn clone_empty(&self) -> StoryDataset {
        StoryDataset {
            stories: Vec::new(),
            split: self.split,
            vocab: self.vocab.clone(),
            char_names: self.char_names.clone(),
            max_caption_len: self.max_caption_len,
        }
    }
}

/// Train/val/test datasets sharing one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDatasets {
    pub train: StoryDataset,
    pub val: StoryDataset,
    pub test: StoryDataset,
}

impl SplitDatasets {
    pub fn get(&self, split: Split) -> &StoryDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoryDataset> {
        [&self.train, &self.val, &self.test].into_iter()
    }

    /// Story ids must not be shared between splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ds in self.iter() {
            for s in &ds.stories {
                if !seen.insert(s.id.as_str()) {
                    return Err(Error::DataIntegrity {
                        story_id: s.id.clone(),
                        reason: "story id appears in more than one split".into(),
                    });
                }
            }
        }
        Ok(())
    }
}
