//! Evaluating a directory of generated videos against their targets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::codec::{read_givvid, read_pnm_dir, Video};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalEmbedders, MetricReport};

/// Seed of the proxy embedders used by `eval`.
pub const EVAL_EMBEDDER_SEED: u64 = 0;

/// Reads `<id>.givvid` files and `<id>/` frame directories.
pub fn load_video_set(dir: &Path) -> Result<BTreeMap<String, Video>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (id, array) = if path.is_dir() {
            (path.file_name(), read_pnm_dir(&path)?)
        } else if path.extension().is_some_and(|e| e == "givvid") {
            (path.file_stem(), read_givvid(&path)?)
        } else {
            continue;
        };
        let id = id.and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.insert(id, array.into_video(&path)?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct PromptLine {
    id: String,
    prompt: String,
}

/// Reads `{"id": .., "prompt": ..}` lines; extra fields are ignored, so a
/// dataset manifest works too.
pub fn load_prompts(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PromptLine =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.insert(p.id, p.prompt);
    }
    Ok(out)
}

/// Pairs the sets by id and computes the metric report. Any id missing from
/// one of the three inputs is an error naming all such ids.
pub fn eval_sets(
    gen: &BTreeMap<String, Video>,
    target: &BTreeMap<String, Video>,
    prompts: &BTreeMap<String, String>,
) -> Result<MetricReport> {
    let ids: BTreeSet<&String> = gen.keys().chain(target.keys()).collect();
    let unmatched: Vec<String> = ids
        .iter()
        .filter(|id| !(gen.contains_key(**id) && target.contains_key(**id) && prompts.contains_key(**id)))
        .map(|id| id.to_string())
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::contract(
            "eval",
            format!("unmatched ids: {}", unmatched.join(", ")),
        ));
    }
    if gen.is_empty() {
        return Err(Error::contract("eval", "no videos to evaluate"));
    }
    let first = gen.values().next().expect("non-empty");
    let embedders = EvalEmbedders::new(EVAL_EMBEDDER_SEED, first.height(), first.width())?;
    let g: Vec<Video> = gen.values().cloned().collect();
    let t: Vec<Video> = target.values().cloned().collect();
    let p: Vec<String> = gen.keys().map(|id| prompts[id].clone()).collect();
    evaluate(&g, &t, &p, &embedders)
}

/// `eval` over directories; writes `report.json` and `report.txt` into
/// `out` when given.
pub fn eval_dirs(gen: &Path, target: &Path, prompts: &Path, out: Option<&Path>) -> Result<MetricReport> {
    let report = eval_sets(&load_video_set(gen)?, &load_video_set(target)?, &load_prompts(prompts)?)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.json", report.to_json_line() + "\n"),
            ("report.txt", report.table()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(report)
}
