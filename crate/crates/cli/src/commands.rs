use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use storyviz::captioner::{load_captioner, pretrain_captioner as fit_captioner, Captioner};
use storyviz::data::{
    export_pororo_sv, generate_shape_story_splits, load_pororo_sv, Frame, LoadOptions, Scene, Split, Story,
    StoryDataset, Vocab,
};
use storyviz::eval::{
    full_report, load_classifier, load_damsm, r_precision, train_char_classifier, train_h_damsm, MetricModels,
    R_PRECISION_RUNS,
};
use storyviz::generator::{save_story_grid, tensor_to_frames, Generator};
use storyviz::nn::{DType, ParamStore};
use storyviz::training::{self, generate_stories, load_generator, Trainer, TrainPaths};

use crate::config::RunConfig;

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    fn snapshot(&self, which: &str) -> PathBuf {
        self.models().join(format!("{which}.svz"))
    }
    fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    fn latest(&self) -> PathBuf {
        TrainPaths { out_dir: self.train() }.latest()
    }
    fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    fn generate(&self) -> PathBuf {
        self.root.join("generate")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("cannot write {}", path.display()))
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<StoryDataset> {
    let dir = Layout::new(cfg).data();
    if !dir.join("splits.json").exists() {
        bail!(
            "no dataset under {}; generate it first: storyviz gen-data --out-dir {}",
            dir.display(),
            cfg.out_dir.display()
        );
    }
    let opts = LoadOptions {
        image_size: cfg.data.image_size,
        max_caption_len: cfg.data.max_caption_len,
        exec: cfg.exec,
    };
    load_pororo_sv(&dir, split, &opts).with_context(|| format!("loading the {split} split"))
}

/// Train and val splits, with the config bound to their vocabulary.
fn load_train_val(cfg: &mut RunConfig) -> Result<(StoryDataset, StoryDataset)> {
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    cfg.bind_dataset(train.vocab.len(), train.num_chars());
    Ok((train, val))
}

fn require_snapshot(cfg: &RunConfig, which: &str) -> Result<PathBuf> {
    let p = Layout::new(cfg).snapshot(which);
    if !p.exists() {
        bail!(
            "missing {which} snapshot at {}; pretrain {which} first: storyviz pretrain {which} --out-dir {}",
            p.display(),
            cfg.out_dir.display()
        );
    }
    Ok(p)
}

fn captioner(cfg: &RunConfig, vocab: &Vocab) -> Result<(ParamStore, Captioner)> {
    let p = require_snapshot(cfg, "captioner")?;
    load_captioner(&p, &cfg.captioner, vocab).with_context(|| format!("loading {}", p.display()))
}

/// SHA-256 over every file below `dir`, in sorted relative-path order.
pub fn tree_checksum(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, base, out)?;
            } else {
                out.push(p.strip_prefix(base)?.to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update(fs::read(dir.join(&f))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = Layout::new(cfg).data();
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let splits = generate_shape_story_splits(&cfg.data, cfg.seed)?;
    splits.check_disjoint()?;
    export_pororo_sv(&splits, &dir, cfg.exec)?;
    let sum = tree_checksum(&dir)?;
    println!(
        "dataset: {} train / {} val / {} test stories at {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        dir.display()
    );
    println!("checksum {sum}");
    Ok(())
}

pub fn pretrain_captioner(mut cfg: RunConfig) -> Result<()> {
    let (train, val) = load_train_val(&mut cfg)?;
    let (store, cap, report) = fit_captioner(&train, &val, &cfg.captioner, &cfg.pretrain.captioner)?;
    let l = Layout::new(&cfg);
    cap.snapshot(&store, &train.vocab)?.save(&l.snapshot("captioner"))?;
    write_json(&l.models().join("captioner_report.json"), &report)?;
    println!(
        "captioner: {} epochs, val token accuracy {:.2}%",
        report.epochs_run,
        100.0 * report.val_token_accuracy
    );
    Ok(())
}

pub fn pretrain_classifier(mut cfg: RunConfig) -> Result<()> {
    let (train, val) = load_train_val(&mut cfg)?;
    let (store, clf, report) = train_char_classifier(&train, &val, &cfg.classifier, &cfg.pretrain.classifier)?;
    let l = Layout::new(&cfg);
    clf.snapshot(&store)?.save(&l.snapshot("classifier"))?;
    write_json(&l.models().join("classifier_report.json"), &report)?;
    println!(
        "classifier: held-out micro-F1 {:.2}, exact match {:.2}",
        report.held_out.micro_f1, report.held_out.exact_match
    );
    Ok(())
}

#[derive(Serialize)]
struct DamsmSummary {
    losses: storyviz::eval::DamsmReport,
    /// Ground-truth R-precision on val (needs at least 100 val stories).
    ground_truth_r_precision: Option<(f64, f64)>,
}

pub fn pretrain_damsm(mut cfg: RunConfig) -> Result<()> {
    let (train, val) = load_train_val(&mut cfg)?;
    let (store, model, losses) = train_h_damsm(&train, &cfg.damsm, &cfg.pretrain.damsm)?;
    let l = Layout::new(&cfg);
    model.snapshot(&store, &train.vocab.hash())?.save(&l.snapshot("damsm"))?;
    let mut visual = Vec::new();
    let mut text = Vec::new();
    let stories: Vec<&Story> = val.stories.iter().collect();
    for chunk in stories.chunks(32) {
        let b = storyviz::data::StoryBatch::from_stories(chunk, cfg.damsm.max_caption_len, DType::F32)?;
        let (v, t) = model.story_embeddings(&b.images, &b.tokens, &b.mask)?;
        visual.extend(v);
        text.extend(t);
    }
    let gt = r_precision(&visual, &text, R_PRECISION_RUNS, cfg.eval.seed, cfg.exec).ok();
    write_json(
        &l.models().join("damsm_report.json"),
        &DamsmSummary {
            losses,
            ground_truth_r_precision: gt,
        },
    )?;
    match gt {
        Some((m, s)) => println!("damsm: ground-truth R-precision {m:.2} ± {s:.2}"),
        None => println!("damsm: trained (val split too small for R-precision)"),
    }
    Ok(())
}

pub fn train(mut cfg: RunConfig, resume: bool) -> Result<()> {
    let (train, val) = load_train_val(&mut cfg)?;
    let cap = captioner(&cfg, &train.vocab)?;
    let classifier = match require_snapshot(&cfg, "classifier") {
        Ok(p) => Some(load_classifier(&p, &cfg.classifier)?),
        Err(_) => {
            eprintln!("note: no classifier snapshot; per-epoch validation F1 is skipped");
            None
        }
    };
    let l = Layout::new(&cfg);
    let paths = TrainPaths { out_dir: l.train() };
    let vocab_hash = train.vocab.hash();
    let (mut tr, start_epoch) = if resume {
        let p = l.latest();
        if !p.exists() {
            bail!("nothing to resume: {} does not exist", p.display());
        }
        Trainer::load_checkpoint(&p, &cfg.model, cap, &vocab_hash)?
    } else {
        if paths.loss_log().exists() {
            fs::remove_dir_all(l.train())?;
        }
        (Trainer::new(&cfg.model, &cfg.train, cap, &vocab_hash)?, 0)
    };
    write_json(&l.train().join("run_config.json"), &cfg)?;
    let started = std::time::Instant::now();
    let summary = training::train(
        &mut tr,
        &train,
        Some(&val),
        classifier.as_ref().map(|(_, c)| c),
        &paths,
        start_epoch,
        |r| {
            if r.step % 50 == 0 {
                eprintln!(
                    "step {:>6}  kl {:.4}  g_adv {:.4}  dual {:.4}  d_img {:.4}  d_story {:.4}  char {:.4}  ({:.1}s)",
                    r.step,
                    r.l_kl,
                    r.l_g_adv,
                    r.l_dual,
                    r.l_d_img,
                    r.l_d_story,
                    r.l_char,
                    started.elapsed().as_secs_f64()
                );
            }
        },
    )?;
    write_json(&l.train().join("summary.json"), &summary)?;
    println!(
        "trained {} steps in {:.1}s; latest checkpoint {}",
        summary.steps,
        started.elapsed().as_secs_f64(),
        l.latest().display()
    );
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> Result<PathBuf> {
    let p = given.unwrap_or_else(|| Layout::new(cfg).latest());
    if !p.exists() {
        bail!(
            "no checkpoint at {}; train first: storyviz train --out-dir {}",
            p.display(),
            cfg.out_dir.display()
        );
    }
    Ok(p)
}

pub fn eval(mut cfg: RunConfig, checkpoint: Option<PathBuf>, untrained: bool, limit: Option<usize>) -> Result<()> {
    let ds = load_split(&cfg, cfg.eval.split)?;
    cfg.bind_dataset(ds.vocab.len(), ds.num_chars());
    let ds = match limit {
        Some(n) => ds.subset(0..n.min(ds.len())),
        None => ds,
    };
    let (_, cap) = captioner(&cfg, &ds.vocab)?;
    let (_, clf) = load_classifier(&require_snapshot(&cfg, "classifier")?, &cfg.classifier)?;
    let (_, damsm) = load_damsm(&require_snapshot(&cfg, "damsm")?, &cfg.damsm, &ds.vocab.hash())?;
    let (label, gen_store, gen) = if untrained {
        let mut store = ParamStore::new(DType::F32, cfg.train.seed.wrapping_mul(4).wrapping_add(1));
        let gen = Generator::new(&mut store.root(), &cfg.model)?;
        ("untrained".to_string(), store, gen)
    } else {
        let p = checkpoint_path(&cfg, checkpoint)?;
        let (store, gen, _) = load_generator(&p, &cfg.model).with_context(|| format!("loading {}", p.display()))?;
        (p.display().to_string(), store, gen)
    };
    let _keep = gen_store;
    let models = MetricModels {
        classifier: Some(&clf),
        captioner: Some(&cap),
        damsm: Some(&damsm),
    };
    let split = cfg.eval.split.as_str();
    let (report, dump) = full_report(&gen, &cfg.model, &ds, &models, (&label, split), cfg.eval.seed, cfg.exec)?;
    let l = Layout::new(&cfg);
    let tag = if untrained { format!("{split}_untrained") } else { split.to_string() };
    let report_path = l.eval().join(format!("report_{tag}.json"));
    write_json(&report_path, &report)?;
    let mut f = fs::File::create(l.eval().join(format!("predictions_{tag}.jsonl")))?;
    for d in &dump {
        writeln!(f, "{}", serde_json::to_string(d)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("report written to {}", report_path.display());
    Ok(())
}

/// Caption blocks separated by blank lines.
fn read_caption_file(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut stories = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() {
            if !cur.is_empty() {
                stories.push(std::mem::take(&mut cur));
            }
        } else if !line.starts_with('#') {
            cur.push(line.to_string());
        }
    }
    if !cur.is_empty() {
        stories.push(cur);
    }
    Ok(stories)
}

pub fn generate(mut cfg: RunConfig, captions: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let ds = load_split(&cfg, Split::Train)?;
    cfg.bind_dataset(ds.vocab.len(), ds.num_chars());
    let p = checkpoint_path(&cfg, checkpoint)?;
    let (_store, gen, _) = load_generator(&p, &cfg.model)?;
    let t = cfg.model.story_len;
    let size = cfg.data.image_size;
    let blocks = read_caption_file(captions)?;
    if blocks.is_empty() {
        bail!("{} holds no captions", captions.display());
    }
    let out = Layout::new(&cfg).generate();
    fs::create_dir_all(&out)?;
    for (i, block) in blocks.iter().enumerate() {
        if block.len() != t {
            bail!("story {} in {} has {} captions, the model expects {t}", i + 1, captions.display(), block.len());
        }
        // Parseable ShapeStories captions get a rendered ground-truth row.
        let scenes: Vec<Option<Scene>> = block.iter().map(|c| Scene::parse(c).ok()).collect();
        let story = Story {
            id: format!("generate_{i:03}"),
            frames: scenes
                .iter()
                .map(|s| s.as_ref().map_or_else(|| Frame::filled(size, size, [0; 3]), |s| s.render(size, size)))
                .collect(),
            captions: block
                .iter()
                .map(|c| ds.vocab.encode(c, cfg.model.max_caption_len))
                .collect::<storyviz::Result<_>>()
                .with_context(|| format!("story {}", i + 1))?,
            char_labels: scenes
                .iter()
                .map(|s| s.as_ref().map_or_else(|| vec![0; cfg.model.num_chars], Scene::labels))
                .collect(),
        };
        let output = generate_stories(&gen, &cfg.model, &[&story], cfg.seed.wrapping_add(i as u64))?;
        let mut rows = Vec::new();
        if scenes.iter().all(Option::is_some) {
            rows.push(story.frames.clone());
        }
        rows.extend(tensor_to_frames(&output.images)?);
        let path = out.join(format!("story_{i:03}.png"));
        save_story_grid(&rows, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}
