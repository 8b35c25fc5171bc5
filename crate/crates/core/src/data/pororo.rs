//! Pororo-SV on-disk layout:
//!
//! ```text
//! <root>/frames/<story_id>/<k>.png     k = 0..T-1
//! <root>/captions.jsonl                {"story_id": .., "captions": [T strings]}
//! <root>/labels.jsonl                  {"story_id": .., "labels": [T 0/1 vectors]}
//! <root>/splits.json                   {"train": [ids], "val": [ids], "test": [ids]}
//! <root>/characters.json               optional ordered character names
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Frame, Split, SplitDatasets, Story, StoryDataset, Vocab};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Reference split sizes of the real dataset (train, val, test).
pub const PORORO_SPLIT_SIZES: (usize, usize, usize) = (10191, 2334, 2208);

const DEFAULT_CHARACTERS: [&str; 9] = [
    "pororo", "loopy", "crong", "eddy", "poby", "petty", "tongtong", "rody", "harry",
];

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub image_size: u32,
    pub max_caption_len: usize,
    pub exec: Exec,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            image_size: 32,
            max_caption_len: 24,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    story_id: String,
    captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    story_id: String,
    labels: Vec<Vec<u8>>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

fn load_frame(path: &Path, size: u32) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() != size || img.height() != size {
        image::imageops::resize(&img, size, size, FilterType::Triangle)
    } else {
        img
    };
    Ok(Frame {
        width: size,
        height: size,
        rgb: img.into_raw(),
    })
}

pub fn load_pororo_sv(root: &Path, split: Split, opts: &LoadOptions) -> Result<StoryDataset> {
    let splits_path = root.join("splits.json");
    let captions_path = root.join("captions.jsonl");
    let labels_path = root.join("labels.jsonl");
    if ![
        &splits_path,
        &captions_path,
        &labels_path,
        &root.join("frames"),
    ]
    .iter()
    .any(|p| p.exists())
    {
        return Err(Error::DataIntegrity {
            story_id: "<none>".into(),
            reason: format!("nothing to load under {}", root.display()),
        });
    }
    if !splits_path.exists() {
        return Err(Error::config(format!(
            "missing split file {}",
            splits_path.display()
        )));
    }
    let splits: HashMap<String, Vec<String>> = serde_json::from_slice(&fs::read(&splits_path)?)
        .map_err(|e| Error::config(format!("{}: {e}", splits_path.display())))?;
    let mut ids = splits
        .get(split.as_str())
        .cloned()
        .ok_or_else(|| Error::config(format!("split `{split}` not listed in splits.json")))?;
    ids.sort();

    let captions: Vec<CaptionRecord> = read_jsonl(&captions_path)?;
    let labels: Vec<LabelRecord> = read_jsonl(&labels_path)?;
    let vocab = Vocab::from_corpus(
        captions
            .iter()
            .flat_map(|r| r.captions.iter().map(String::as_str)),
    );
    let captions: HashMap<String, Vec<String>> = captions
        .into_iter()
        .map(|r| (r.story_id, r.captions))
        .collect();
    let labels: HashMap<String, Vec<Vec<u8>>> =
        labels.into_iter().map(|r| (r.story_id, r.labels)).collect();
    let char_names: Vec<String> = match fs::read(root.join("characters.json")) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => DEFAULT_CHARACTERS.iter().map(|s| s.to_string()).collect(),
    };

    let stories = par::try_map_range(opts.exec, ids.len(), |i| {
        let id = &ids[i];
        let integrity = |reason: String| Error::DataIntegrity {
            story_id: id.clone(),
            reason,
        };
        let caps = captions
            .get(id)
            .ok_or_else(|| integrity("no captions record".into()))?;
        let labs = labels
            .get(id)
            .ok_or_else(|| integrity("no labels record".into()))?;
        let dir = root.join("frames").join(id);
        let n_frames = fs::read_dir(&dir)
            .map_err(|e| integrity(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
            .count();
        if n_frames != caps.len() || labs.len() != caps.len() {
            return Err(integrity(format!(
                "{} frames, {} captions, {} label vectors",
                n_frames,
                caps.len(),
                labs.len()
            )));
        }
        let frames = (0..caps.len())
            .map(|k| {
                let p = dir.join(format!("{k}.png"));
                load_frame(&p, opts.image_size)
                    .map_err(|e| integrity(format!("frame {}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let caption_ids = caps
            .iter()
            .map(|c| vocab.encode(c, opts.max_caption_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Story {
            id: id.clone(),
            frames,
            captions: caption_ids,
            char_labels: labs.clone(),
        })
    })?;

    if stories.is_empty() {
        return Err(Error::DataIntegrity {
            story_id: "<none>".into(),
            reason: format!("split `{split}` is empty"),
        });
    }
    let ds = StoryDataset {
        stories,
        split,
        vocab,
        char_names,
        max_caption_len: opts.max_caption_len,
    };
    ds.validate()?;
    Ok(ds)
}

fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let img: RgbImage =
        ImageBuffer::<Rgb<u8>, _>::from_raw(frame.width, frame.height, frame.rgb.clone())
            .ok_or_else(|| Error::shape("frame buffer does not match its dimensions"))?;
    img.save(path)?;
    Ok(())
}

/// Write all three splits in the layout above.
pub fn export_pororo_sv(splits: &SplitDatasets, root: &Path, exec: Exec) -> Result<()> {
    fs::create_dir_all(root.join("frames"))?;
    let mut cap_out = fs::File::create(root.join("captions.jsonl"))?;
    let mut lab_out = fs::File::create(root.join("labels.jsonl"))?;
    let mut split_ids: HashMap<&str, Vec<&str>> = HashMap::new();
    for ds in splits.iter() {
        split_ids.insert(
            ds.split.as_str(),
            ds.stories.iter().map(|s| s.id.as_str()).collect(),
        );
        for (si, s) in ds.stories.iter().enumerate() {
            let rec = CaptionRecord {
                story_id: s.id.clone(),
                captions: (0..s.len()).map(|k| ds.caption_text(si, k)).collect(),
            };
            writeln!(cap_out, "{}", serde_json::to_string(&rec)?)?;
            let rec = LabelRecord {
                story_id: s.id.clone(),
                labels: s.char_labels.clone(),
            };
            writeln!(lab_out, "{}", serde_json::to_string(&rec)?)?;
        }
        par::try_map_range(exec, ds.stories.len(), |si| -> Result<()> {
            let s = &ds.stories[si];
            let dir = root.join("frames").join(&s.id);
            fs::create_dir_all(&dir)?;
            for (k, f) in s.frames.iter().enumerate() {
                save_frame(f, &dir.join(format!("{k}.png")))?;
            }
            Ok(())
        })?;
    }
    let mut ordered = serde_json::Map::new();
    for split in Split::ALL {
        let ids = split_ids.remove(split.as_str()).unwrap_or_default();
        ordered.insert(split.as_str().into(), serde_json::json!(ids));
    }
    fs::write(
        root.join("splits.json"),
        serde_json::to_vec_pretty(&ordered)?,
    )?;
    fs::write(
        root.join("characters.json"),
        serde_json::to_vec(&splits.train.char_names)?,
    )?;
    Ok(())
}
