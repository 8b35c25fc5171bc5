use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Frame, StoryDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FrameRef {
    pub story: usize,
    pub frame: usize,
}

/// Ground-truth final frame plus character-matched negatives, shuffled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminativeSet {
    pub story_id: String,
    pub target: FrameRef,
    pub negatives: Vec<FrameRef>,
    /// Candidate order after shuffling: `candidates[i]` is the i-th shown frame.
    pub candidates: Vec<FrameRef>,
    /// Position of `target` within `candidates`.
    pub answer_index: usize,
}

impl DiscriminativeSet {
    pub fn candidate_frames<'a>(&self, ds: &'a StoryDataset) -> Vec<&'a Frame> {
        self.candidates
            .iter()
            .map(|r| &ds.stories[r.story].frames[r.frame])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminativeSets {
    pub sets: Vec<DiscriminativeSet>,
    /// Stories whose final frame had too few eligible negatives.
    pub skipped: Vec<String>,
}

impl DiscriminativeSets {
    pub fn skip_rate(&self) -> f64 {
        let total = self.sets.len() + self.skipped.len();
        if total == 0 {
            0.0
        } else {
            self.skipped.len() as f64 / total as f64
        }
    }
}

/// For every story, sample `num_negatives` distinct frames from *other*
/// stories whose label vector equals the story's final-frame labels. Stories
/// without enough such frames are skipped and reported.
pub fn build_discriminative_sets(
    ds: &StoryDataset,
    num_negatives: usize,
    seed: u64,
) -> DiscriminativeSets {
    let mut by_label: HashMap<&[u8], Vec<FrameRef>> = HashMap::new();
    for (si, s) in ds.stories.iter().enumerate() {
        for (fi, l) in s.char_labels.iter().enumerate() {
            by_label.entry(l.as_slice()).or_default().push(FrameRef {
                story: si,
                frame: fi,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::new();
    let mut skipped = Vec::new();
    for (si, s) in ds.stories.iter().enumerate() {
        let Some(last) = s.char_labels.len().checked_sub(1) else {
            skipped.push(s.id.clone());
            continue;
        };
        let eligible: Vec<FrameRef> = by_label[s.char_labels[last].as_slice()]
            .iter()
            .copied()
            .filter(|r| r.story != si)
            .collect();
        if eligible.len() < num_negatives {
            skipped.push(s.id.clone());
            continue;
        }
        let negatives: Vec<FrameRef> = index::sample(&mut rng, eligible.len(), num_negatives)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        let target = FrameRef {
            story: si,
            frame: last,
        };
        let mut candidates = vec![target];
        candidates.extend(&negatives);
        candidates.shuffle(&mut rng);
        let answer_index = candidates.iter().position(|&c| c == target).unwrap();
        sets.push(DiscriminativeSet {
            story_id: s.id.clone(),
            target,
            negatives,
            candidates,
            answer_index,
        });
    }
    DiscriminativeSets { sets, skipped }
}
