//! ShapeStories: a deterministic cartoon-story corpus of colored shapes.
//!
//! Every frame is a pure function of its caption ([`render_caption`]), so the
//! caption is recoverable from pixels and the character labels are exact.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, Split, SplitDatasets, Story, StoryDataset, Vocab};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Bar,
    Pillar,
    Star,
}

#[derive(Clone, Copy, Debug)]
pub struct Character {
    pub color_word: &'static str,
    pub shape_word: &'static str,
    pub color: [u8; 3],
    pub glyph: Glyph,
    /// Relative sampling weight; the roster is long-tailed.
    pub weight: f64,
}

impl Character {
    pub fn name(&self) -> String {
        format!("{} {}", self.color_word, self.shape_word)
    }
}

pub const ROSTER: [Character; 9] = [
    Character {
        color_word: "red",
        shape_word: "circle",
        color: [230, 40, 40],
        glyph: Glyph::Circle,
        weight: 1.0,
    },
    Character {
        color_word: "blue",
        shape_word: "square",
        color: [40, 80, 240],
        glyph: Glyph::Square,
        weight: 0.8,
    },
    Character {
        color_word: "green",
        shape_word: "triangle",
        color: [40, 200, 60],
        glyph: Glyph::Triangle,
        weight: 0.62,
    },
    Character {
        color_word: "yellow",
        shape_word: "diamond",
        color: [240, 220, 40],
        glyph: Glyph::Diamond,
        weight: 0.48,
    },
    Character {
        color_word: "magenta",
        shape_word: "cross",
        color: [220, 60, 220],
        glyph: Glyph::Cross,
        weight: 0.37,
    },
    Character {
        color_word: "cyan",
        shape_word: "ring",
        color: [40, 220, 230],
        glyph: Glyph::Ring,
        weight: 0.29,
    },
    Character {
        color_word: "orange",
        shape_word: "bar",
        color: [250, 140, 30],
        glyph: Glyph::Bar,
        weight: 0.22,
    },
    Character {
        color_word: "white",
        shape_word: "pillar",
        color: [245, 245, 245],
        glyph: Glyph::Pillar,
        weight: 0.17,
    },
    Character {
        color_word: "purple",
        shape_word: "star",
        color: [150, 70, 210],
        glyph: Glyph::Star,
        weight: 0.13,
    },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Jumps,
    Stands,
    Sits,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Jumps, Action::Stands, Action::Sits];

    pub fn word(self) -> &'static str {
        match self {
            Action::Jumps => "jumps",
            Action::Stands => "stands",
            Action::Sits => "sits",
        }
    }

    fn row(self) -> u32 {
        match self {
            Action::Jumps => 1,
            Action::Stands => 2,
            Action::Sits => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Left,
    Middle,
    Right,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Left, Slot::Middle, Slot::Right];

    pub fn phrase(self) -> [&'static str; 3] {
        match self {
            Slot::Left => ["on", "the", "left"],
            Slot::Middle => ["in", "the", "middle"],
            Slot::Right => ["on", "the", "right"],
        }
    }

    fn column(self) -> u32 {
        match self {
            Slot::Left => 0,
            Slot::Middle => 1,
            Slot::Right => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Place {
    Park,
    House,
    Sea,
    Snow,
    Night,
}

impl Place {
    pub const ALL: [Place; 5] = [
        Place::Park,
        Place::House,
        Place::Sea,
        Place::Snow,
        Place::Night,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Place::Park => "park",
            Place::House => "house",
            Place::Sea => "sea",
            Place::Snow => "snow",
            Place::Night => "night",
        }
    }

    pub fn background(self) -> [u8; 3] {
        match self {
            Place::Park => [34, 80, 34],
            Place::House => [96, 64, 40],
            Place::Sea => [24, 48, 96],
            Place::Snow => [170, 180, 190],
            Place::Night => [16, 16, 28],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Actor {
    pub character: usize,
    pub action: Action,
    pub slot: Slot,
}

/// Everything a frame depicts; bijective with its caption text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub place: Place,
    pub actors: Vec<Actor>,
}

impl Scene {
    pub fn caption(&self) -> String {
        let mut words: Vec<&str> = Vec::new();
        for (i, a) in self.actors.iter().enumerate() {
            if i > 0 {
                words.push("and");
            }
            let c = &ROSTER[a.character];
            words.extend([c.color_word, c.shape_word, a.action.word()]);
            words.extend(a.slot.phrase());
        }
        words.extend(["in", "the", self.place.word()]);
        words.join(" ")
    }

    pub fn parse(text: &str) -> Result<Scene> {
        let toks = super::tokenize(text);
        let err = |m: &str| Error::Domain(format!("not a ShapeStories caption ({m}): `{text}`"));
        let mut i = 0;
        let mut actors = Vec::new();
        loop {
            let t = toks.get(i..i + 6).ok_or_else(|| err("truncated actor"))?;
            let character = ROSTER
                .iter()
                .position(|c| c.color_word == t[0] && c.shape_word == t[1])
                .ok_or_else(|| err("unknown character"))?;
            let action = Action::ALL
                .into_iter()
                .find(|a| a.word() == t[2])
                .ok_or_else(|| err("unknown action"))?;
            let slot = Slot::ALL
                .into_iter()
                .find(|s| s.phrase() == [t[3].as_str(), t[4].as_str(), t[5].as_str()])
                .ok_or_else(|| err("unknown position"))?;
            actors.push(Actor {
                character,
                action,
                slot,
            });
            i += 6;
            if toks.get(i).map(String::as_str) == Some("and") {
                i += 1;
                continue;
            }
            break;
        }
        let tail = toks.get(i..).unwrap_or_default();
        if tail.len() != 3 || tail[0] != "in" || tail[1] != "the" {
            return Err(err("missing place"));
        }
        let place = Place::ALL
            .into_iter()
            .find(|p| p.word() == tail[2])
            .ok_or_else(|| err("unknown place"))?;
        Ok(Scene { place, actors })
    }

    pub fn labels(&self) -> Vec<u8> {
        let mut l = vec![0u8; ROSTER.len()];
        for a in &self.actors {
            l[a.character] = 1;
        }
        l
    }

    pub fn render(&self, width: u32, height: u32) -> Frame {
        let mut f = Frame::filled(width, height, self.place.background());
        let r = (width.min(height) / 8).max(2) as i64;
        let thick = (r / 4).max(1);
        for a in &self.actors {
            let c = &ROSTER[a.character];
            let cx = ((2 * a.slot.column() + 1) * width / 6) as i64;
            let cy = (a.action.row() * height / 4) as i64;
            for dy in -r..=r {
                for dx in -r..=r {
                    if !covers(c.glyph, dx, dy, r, thick) {
                        continue;
                    }
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && (x as u32) < width && (y as u32) < height {
                        f.put(x as u32, y as u32, c.color);
                    }
                }
            }
        }
        f
    }
}

fn covers(g: Glyph, dx: i64, dy: i64, r: i64, t: i64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d2 = dx * dx + dy * dy;
    match g {
        Glyph::Circle => d2 <= r * r,
        Glyph::Square => ax < r && ay < r,
        Glyph::Triangle => 2 * ax <= dy + r,
        Glyph::Diamond => ax + ay <= r,
        Glyph::Cross => (ax <= t && ay <= r) || (ay <= t && ax <= r),
        Glyph::Ring => d2 <= r * r && d2 >= (r - t - 1) * (r - t - 1),
        Glyph::Bar => ay <= t && ax <= r,
        Glyph::Pillar => ax <= t && ay <= r,
        Glyph::Star => (ax - ay).abs() <= t / 2 && ax <= r,
    }
}

/// Re-render a frame from caption text alone.
pub fn render_caption(text: &str, width: u32, height: u32) -> Result<Frame> {
    Ok(Scene::parse(text)?.render(width, height))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_stories: usize,
    pub story_len: usize,
    pub image_size: u32,
    pub max_caption_len: usize,
    /// Fractions for train and val; test takes the remainder.
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Largest number of distinct characters in one story.
    pub max_cast: usize,
    pub two_actor_prob: f64,
    /// Probability that a character seen in the previous frame keeps its slot.
    pub keep_slot_prob: f64,
    pub exec: Exec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_stories: 2000,
            story_len: 5,
            image_size: 32,
            max_caption_len: 24,
            train_fraction: 0.8,
            val_fraction: 0.1,
            max_cast: 3,
            two_actor_prob: 0.5,
            keep_slot_prob: 0.6,
            exec: Exec::Parallel,
        }
    }
}

impl SynthConfig {
    fn check(&self) -> Result<()> {
        if self.num_stories < 1 {
            return Err(Error::config("num_stories must be at least 1"));
        }
        if self.story_len < 1 {
            return Err(Error::config("story length T must be at least 1"));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size must be at least 8"));
        }
        if self.max_caption_len < 16 {
            return Err(Error::config(
                "max_caption_len must be at least 16 to hold a two-character caption",
            ));
        }
        if !(0.0..=1.0).contains(&self.train_fraction)
            || !(0.0..=1.0).contains(&self.val_fraction)
            || self.train_fraction + self.val_fraction > 1.0
        {
            return Err(Error::config(
                "split fractions must lie in [0,1] and sum to at most 1",
            ));
        }
        if self.max_cast < 1 {
            return Err(Error::config("max_cast must be at least 1"));
        }
        Ok(())
    }
}

/// The full ShapeStories vocabulary, independent of which stories are drawn.
pub fn shape_vocab() -> Vocab {
    let mut words: Vec<&str> = Vec::new();
    for c in &ROSTER {
        words.extend([c.color_word, c.shape_word]);
    }
    words.extend(Action::ALL.map(Action::word));
    for s in Slot::ALL {
        words.extend(s.phrase());
    }
    words.push("and");
    words.extend(Place::ALL.map(Place::word));
    let mut words: Vec<String> = words.into_iter().map(String::from).collect();
    words.sort();
    words.dedup();
    Vocab::new(words)
}

fn weighted_cast(rng: &mut ChaCha8Rng, size: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..ROSTER.len()).collect();
    let mut cast = Vec::with_capacity(size);
    for _ in 0..size.min(pool.len()) {
        let total: f64 = pool.iter().map(|&i| ROSTER[i].weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (j, &i) in pool.iter().enumerate() {
            u -= ROSTER[i].weight;
            if u <= 0.0 {
                pick = j;
                break;
            }
        }
        cast.push(pool.remove(pick));
    }
    cast
}

fn story_scenes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Scene> {
    let place = *Place::ALL.choose(rng).unwrap();
    let cast_size = rng.random_range(1..=cfg.max_cast.min(ROSTER.len()));
    let cast = weighted_cast(rng, cast_size);
    let mut scenes: Vec<Scene> = Vec::with_capacity(cfg.story_len);
    for _ in 0..cfg.story_len {
        let n = if cast.len() >= 2 && rng.random::<f64>() < cfg.two_actor_prob {
            2
        } else {
            1
        };
        let mut members: Vec<usize> = cast.clone();
        let mut chosen = Vec::with_capacity(n);
        for _ in 0..n {
            let j = rng.random_range(0..members.len());
            chosen.push(members.remove(j));
        }
        let mut free: Vec<Slot> = Slot::ALL.to_vec();
        let mut actors = Vec::with_capacity(n);
        for ch in chosen {
            let prev = scenes
                .last()
                .and_then(|s| s.actors.iter().find(|a| a.character == ch))
                .map(|a| a.slot);
            let slot = match prev {
                Some(p) if free.contains(&p) && rng.random::<f64>() < cfg.keep_slot_prob => p,
                _ => *free.choose(rng).unwrap(),
            };
            free.retain(|&s| s != slot);
            let action = *Action::ALL.choose(rng).unwrap();
            actors.push(Actor {
                character: ch,
                action,
                slot,
            });
        }
        scenes.push(Scene { place, actors });
    }
    scenes
}

fn make_story(cfg: &SynthConfig, vocab: &Vocab, seed: u64, index: usize) -> Result<Story> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let scenes = story_scenes(cfg, &mut rng);
    let mut captions = Vec::with_capacity(scenes.len());
    for s in &scenes {
        captions.push(vocab.encode(&s.caption(), cfg.max_caption_len)?);
    }
    Ok(Story {
        id: format!("ss{index:06}"),
        frames: scenes
            .iter()
            .map(|s| s.render(cfg.image_size, cfg.image_size))
            .collect(),
        captions,
        char_labels: scenes.iter().map(Scene::labels).collect(),
    })
}

fn char_names() -> Vec<String> {
    ROSTER.iter().map(Character::name).collect()
}

fn build(
    cfg: &SynthConfig,
    seed: u64,
    range: std::ops::Range<usize>,
    split: Split,
) -> Result<StoryDataset> {
    let vocab = shape_vocab();
    let start = range.start;
    let stories = par::try_map_range(cfg.exec, range.len(), |i| {
        make_story(cfg, &vocab, seed, start + i)
    })?;
    Ok(StoryDataset {
        stories,
        split,
        vocab,
        char_names: char_names(),
        max_caption_len: cfg.max_caption_len,
    })
}

/// `cfg.num_stories` stories as one training-split dataset.
pub fn generate_shape_stories(cfg: &SynthConfig, seed: u64) -> Result<StoryDataset> {
    cfg.check()?;
    build(cfg, seed, 0..cfg.num_stories, Split::Train)
}

/// `cfg.num_stories` stories divided into disjoint train/val/test splits.
pub fn generate_shape_story_splits(cfg: &SynthConfig, seed: u64) -> Result<SplitDatasets> {
    cfg.check()?;
    let n = cfg.num_stories;
    let n_train = (n as f64 * cfg.train_fraction).round() as usize;
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - n_train);
    Ok(SplitDatasets {
        train: build(cfg, seed, 0..n_train, Split::Train)?,
        val: build(cfg, seed, n_train..n_train + n_val, Split::Val)?,
        test: build(cfg, seed, n_train + n_val..n, Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            num_stories: n,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_shape_stories(&small(20), 7).unwrap();
        let b = generate_shape_stories(&small(20), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_shape_stories(&small(20), 8).unwrap();
        assert_ne!(a.stories, c.stories);
    }

    #[test]
    fn counts_and_validity() {
        let ds = generate_shape_stories(&small(100), 1).unwrap();
        assert_eq!(ds.len(), 100);
        assert!(ds.stories.iter().all(|s| s.len() == 5));
        ds.validate().unwrap();
    }

    #[test]
    fn sequential_and_parallel_generation_match() {
        let mut cfg = small(30);
        let a = generate_shape_stories(&cfg, 3).unwrap();
        cfg.exec = Exec::Sequential;
        assert_eq!(a, generate_shape_stories(&cfg, 3).unwrap());
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(matches!(
            generate_shape_stories(&small(0), 1),
            Err(Error::Config(_))
        ));
        let cfg = SynthConfig {
            story_len: 0,
            ..small(3)
        };
        assert!(matches!(
            generate_shape_stories(&cfg, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn caption_parse_round_trip() {
        let s = Scene {
            place: Place::Sea,
            actors: vec![
                Actor {
                    character: 8,
                    action: Action::Sits,
                    slot: Slot::Left,
                },
                Actor {
                    character: 0,
                    action: Action::Jumps,
                    slot: Slot::Middle,
                },
            ],
        };
        let text = s.caption();
        assert_eq!(
            text,
            "purple star sits on the left and red circle jumps in the middle in the sea"
        );
        assert_eq!(Scene::parse(&text).unwrap(), s);
        assert!(Scene::parse("red circle jumps").is_err());
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        let r = 4;
        let masks: Vec<Vec<bool>> = ROSTER
            .iter()
            .map(|c| {
                (-r..=r)
                    .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
                    .map(|(dx, dy)| covers(c.glyph, dx, dy, r, 1))
                    .collect()
            })
            .collect();
        for i in 0..masks.len() {
            assert!(masks[i].iter().filter(|&&b| b).count() >= 5);
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j], "glyphs {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let sp = generate_shape_story_splits(&small(50), 2).unwrap();
        assert_eq!(sp.train.len() + sp.val.len() + sp.test.len(), 50);
        sp.check_disjoint().unwrap();
        assert_eq!(sp.train.vocab, sp.test.vocab);
    }
}
