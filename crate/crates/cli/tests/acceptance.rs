//! One pass/fail line per acceptance criterion.
//!
//! Criteria 1-8 reuse the core integration tests. Criterion 9 checks the
//! recorded desk run in `tests/data/desk_run.json`; set
//! `STORYVIZ_ACCEPT_FULL=1` to redo that run (about 80 minutes on one core,
//! metric-model pretraining included) and check the fresh record instead, or
//! `STORYVIZ_ACCEPT_RECORD=<out-dir>` to rewrite the record from a finished
//! run of the same commands.
//! Criterion 10 drives the binary through the whole pipeline.

#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use storyviz::eval::MetricReport;

#[path = "../../core/tests/contracts.rs"]
mod contracts;
#[path = "../../core/tests/gradients.rs"]
mod gradients;
#[path = "../../core/tests/oracles.rs"]
mod oracles;
#[path = "../../core/tests/training.rs"]
mod training;

type Check = (&'static str, fn());

fn run_checks(checks: &[Check]) -> Result<String, String> {
    let mut failed = Vec::new();
    for (name, f) in checks {
        if std::panic::catch_unwind(f).is_err() {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(format!("{} checks", checks.len()))
    } else {
        Err(format!("failed: {}", failed.join(", ")))
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_storyviz"))
}

fn storyviz(out: &Path, args: &[&str]) -> Result<String, String> {
    let o = bin()
        .args(["--preset", "desk", "--seed", "7", "--out-dir"])
        .arg(out)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`storyviz {}` exited with {}: {}",
            args.join(" "),
            o.status,
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

/// Strict parse: every field present, nothing extra, rates in range.
fn read_report(path: &Path) -> Result<MetricReport, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let r: MetricReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let back = serde_json::to_value(&r).map_err(|e| e.to_string())?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if back != raw {
        return Err("report has fields outside the schema".into());
    }
    if !r.rates_in_range() {
        return Err("a rate lies outside [0, 100]".into());
    }
    if r.per_character_f1.is_empty() || r.metadata.stories == 0 {
        return Err("report is empty".into());
    }
    Ok(r)
}

#[derive(Debug, Serialize, Deserialize)]
struct Scores {
    char_f1: f64,
    bleu2: f64,
}

/// What a desk run leaves behind, reduced to the quantities criterion 9 checks.
#[derive(Debug, Serialize, Deserialize)]
struct DeskRecord {
    stories: usize,
    steps: usize,
    nonfinite_records: usize,
    /// From the start of training to the last evaluation report.
    wall_seconds: u64,
    trained: Scores,
    untrained: Scores,
}

fn mtime(p: &Path) -> Result<SystemTime, String> {
    fs::metadata(p)
        .and_then(|m| m.modified())
        .map_err(|e| format!("{}: {e}", p.display()))
}

fn desk_record(out: &Path) -> Result<DeskRecord, String> {
    let log = fs::read_to_string(out.join("train/losses.jsonl")).map_err(|e| e.to_string())?;
    let mut steps = 0;
    let mut nonfinite = 0;
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        steps += 1;
        // JSON has no NaN or infinity; serde writes them as null.
        let ok = v
            .as_object()
            .is_some_and(|m| m.values().all(|x| x.as_f64().is_some_and(f64::is_finite)));
        nonfinite += usize::from(!ok);
    }
    let trained = read_report(&out.join("eval/report_val.json"))?;
    let untrained_path = out.join("eval/report_val_untrained.json");
    let untrained = read_report(&untrained_path)?;
    let start = mtime(&out.join("train/run_config.json"))?;
    let end = mtime(&untrained_path)?;
    let splits: Value = serde_json::from_str(
        &fs::read_to_string(out.join("data/splits.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let stories = ["train", "val", "test"]
        .iter()
        .map(|k| splits[k].as_array().map_or(0, Vec::len))
        .sum();
    Ok(DeskRecord {
        stories,
        steps,
        nonfinite_records: nonfinite,
        wall_seconds: end.duration_since(start).map_err(|e| e.to_string())?.as_secs(),
        trained: Scores {
            char_f1: trained.char_f1,
            bleu2: trained.bleu2,
        },
        untrained: Scores {
            char_f1: untrained.char_f1,
            bleu2: untrained.bleu2,
        },
    })
}

fn desk_pipeline(out: &Path) -> Result<(), String> {
    storyviz(out, &["gen-data"])?;
    for which in ["classifier", "damsm", "captioner"] {
        storyviz(out, &["pretrain", which])?;
    }
    storyviz(out, &["train", "--max-steps", "2000"])?;
    storyviz(out, &["eval", "--split", "val"])?;
    storyviz(out, &["eval", "--split", "val", "--untrained"])?;
    Ok(())
}

fn recorded_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/desk_run.json")
}

fn criterion_9() -> Result<String, String> {
    let (rec, source) = if std::env::var_os("STORYVIZ_ACCEPT_FULL").is_some() {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        desk_pipeline(dir.path())?;
        (desk_record(dir.path())?, "fresh run")
    } else if let Some(dir) = std::env::var_os("STORYVIZ_ACCEPT_RECORD") {
        // Refresh the committed record from a finished run directory.
        let rec = desk_record(Path::new(&dir))?;
        let text = serde_json::to_string_pretty(&rec).map_err(|e| e.to_string())?;
        fs::write(recorded_path(), text + "\n").map_err(|e| e.to_string())?;
        (rec, "recorded run")
    } else {
        let text = fs::read_to_string(recorded_path()).map_err(|e| e.to_string())?;
        let rec: DeskRecord = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        (rec, "recorded run")
    };
    let gap = rec.trained.char_f1 - rec.untrained.char_f1;
    let summary = format!(
        "{source}: {} stories, {} steps, {} non-finite, {:.0} min, char F1 {:.2} vs {:.2} (gap {gap:.2}), BLEU-2 {:.2} vs {:.2}",
        rec.stories,
        rec.steps,
        rec.nonfinite_records,
        rec.wall_seconds as f64 / 60.0,
        rec.trained.char_f1,
        rec.untrained.char_f1,
        rec.trained.bleu2,
        rec.untrained.bleu2,
    );
    let ok = rec.steps >= 2000
        && rec.nonfinite_records == 0
        && rec.wall_seconds <= 3600
        && gap >= 10.0
        && rec.trained.bleu2 > rec.untrained.bleu2;
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn criterion_10() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path();
    // 1000 stories leave the 100 validation stories R-precision needs.
    storyviz(out, &["gen-data", "--num-stories", "1000"])?;
    for which in ["classifier", "damsm", "captioner"] {
        storyviz(out, &["pretrain", which, "--epochs", "1"])?;
    }
    storyviz(out, &["train", "--max-steps", "300"])?;
    storyviz(out, &["eval", "--split", "val"])?;
    let r = read_report(&out.join("eval/report_val.json"))?;
    Ok(format!(
        "exit 0, report over {} stories, char F1 {:.2}, BLEU-2 {:.2}, R-precision {:.2}",
        r.metadata.stories, r.char_f1, r.bleu2, r.r_precision_mean
    ))
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, Box<dyn Fn() -> Result<String, String>>)> = vec![
        (
            "analytic loss oracles",
            Box::new(|| {
                run_checks(&[
                    ("kl", oracles::kl_matches_closed_form),
                    ("adversarial", oracles::adversarial_losses_at_half_are_log_two),
                    ("dual", oracles::dual_loss_of_uniform_is_log_v),
                ])
            }),
        ),
        (
            "gradient checks",
            Box::new(|| {
                run_checks(&[
                    ("kl", gradients::kl_gradient),
                    ("adversarial", gradients::adversarial_generator_gradient),
                    ("dual", gradients::dual_gradient),
                    ("char bce", gradients::char_bce_gradient),
                ])
            }),
        ),
        (
            "attention normalisation",
            Box::new(|| {
                run_checks(&[
                    ("attention pool", contracts::attention_pool_normalises),
                    ("word attention", contracts::region_word_attention_normalises),
                    ("copy transform", contracts::copy_transform_normalises),
                ])
            }),
        ),
        (
            "recurrence contracts",
            Box::new(|| {
                run_checks(&[
                    ("context causal", contracts::context_encoder_is_causal),
                    ("context restore", contracts::context_memory_restore_continues_identically),
                    ("captioner frames", contracts::captioner_is_causal_across_frames),
                    ("captioner words", contracts::captioner_is_causal_within_a_caption),
                    ("captioner restore", contracts::captioner_memory_restore_continues_identically),
                ])
            }),
        ),
        (
            "freeze contracts",
            Box::new(|| run_checks(&[("100 steps", training::metric_models_stay_frozen)])),
        ),
        (
            "metric oracles",
            Box::new(|| {
                run_checks(&[
                    ("micro F1", oracles::micro_f1_matches_brute_force),
                    ("BLEU", oracles::bleu_of_identical_corpus_is_100),
                    ("discriminative", oracles::discriminative_chance_rates),
                    ("R-precision", oracles::r_precision_chance_and_identity),
                ])
            }),
        ),
        (
            "schedule conformance",
            Box::new(|| {
                run_checks(&[
                    ("2 G per D", training::generator_updates_per_discriminator_update),
                    ("lr and checkpoints", training::paper_schedule_halves_lr_and_checkpoints_every_ten),
                ])
            }),
        ),
        (
            "determinism",
            Box::new(|| {
                run_checks(&[
                    ("50-step loss log", training::same_seed_same_loss_log),
                    ("generation from checkpoint", training::checkpoint_reproduces_generation),
                ])
            }),
        ),
        ("end-to-end desk run", Box::new(criterion_9)),
        ("pipeline integrity", Box::new(criterion_10)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = check();
        let secs = t.elapsed().as_secs_f64();
        let (verdict, msg) = match &res {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        // Straight to stdout so the lines survive libtest's output capture.
        let _ = writeln!(
            std::io::stdout(),
            "criterion {:>2} {verdict} {name} ({msg}; {secs:.0}s)",
            i + 1
        );
        if res.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
