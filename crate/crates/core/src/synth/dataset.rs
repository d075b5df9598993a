//! Writing and checking synthetic datasets.
//!
//! A dataset directory holds `manifest.jsonl` (one [`ManifestRecord`] per
//! line) and a `records/<id>/` folder per record with `GIVVID1` files for the
//! target, condition video, reference images and the full mask sequence.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{random_scene, run_pipeline, PipelineOutput, PipelineStages, SceneSpec};
use crate::codec::{
    decode, encode, latent_shape, read_givvid, write_givvid, CodecConfig, CodecMode, GivvidArray, Mask, Video,
};
use crate::conditioning::Quintuple;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub codec: CodecConfig,
    /// Scenes tried per record before giving up.
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 9,
            codec: CodecConfig::desk(),
            max_attempts: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        latent_shape(self.frames, self.height, self.width, &self.codec)?;
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// A file inside the dataset directory and the SHA-256 of its bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub target: FileRef,
    pub cond: FileRef,
    pub refs: Vec<FileRef>,
    pub mask: FileRef,
    pub prompt: String,
    pub n: usize,
    pub seed: u64,
    pub scene_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// One generated record before it is written.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub id: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub output: PipelineOutput,
}

impl SynthRecord {
    /// The training record; only the first mask frame is kept.
    pub fn quintuple(&self) -> Quintuple {
        let o = &self.output;
        Quintuple {
            prompt: o.prompt.clone(),
            refs: vec![o.reference.clone()],
            mask: first_frame(&o.track),
            cond: o.cond.clone(),
            target: o.target.clone(),
        }
    }
}

fn first_frame(m: &Mask) -> Mask {
    Mask::new(1, m.height(), m.width(), m.frame(0).to_vec()).expect("one mask frame")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seed of attempt `attempt` for record `index` of a dataset seeded with
/// `seed`. Independent of how many records are generated or in what order.
pub fn record_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    let mut h = Sha256::new();
    for v in [seed, index, attempt] {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn record_id(index: u64) -> String {
    format!("rec-{index:06}")
}

/// Generates record `index`, drawing new scenes while the pipeline reports a
/// skip.
pub fn generate_record(cfg: &SynthConfig, seed: u64, index: u64, stages: &PipelineStages<'_>) -> Result<SynthRecord> {
    let id = record_id(index);
    for attempt in 0..cfg.max_attempts as u64 {
        let rs = record_seed(seed, index, attempt);
        let spec = random_scene(&mut ChaCha8Rng::seed_from_u64(rs), cfg.height, cfg.width, cfg.frames);
        match run_pipeline(&spec, stages) {
            Ok(output) => {
                return Ok(SynthRecord {
                    id,
                    seed: rs,
                    spec,
                    output,
                })
            }
            Err(Error::Skip(_)) => continue,
            Err(e) => {
                return Err(Error::Record {
                    id,
                    source: Box::new(e),
                })
            }
        }
    }
    Err(Error::Record {
        id,
        source: Box::new(Error::Skip(format!("no usable scene in {} attempts", cfg.max_attempts))),
    })
}

fn tag(id: &str, e: Error) -> Error {
    match e {
        Error::Record { .. } => e,
        other => Error::Record {
            id: id.to_string(),
            source: Box::new(other),
        },
    }
}

fn put(root: &Path, rel: String, array: &GivvidArray) -> Result<FileRef> {
    let path = root.join(&rel);
    write_givvid(&path, array)?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(FileRef {
        path: rel,
        sha256: sha256_hex(&bytes),
    })
}

fn write_record(root: &Path, rec: &SynthRecord) -> Result<ManifestRecord> {
    let rel = format!("records/{}", rec.id);
    let dir = root.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let o = &rec.output;
    let scene = serde_json::to_vec(&rec.spec).expect("scene serializes");
    Ok(ManifestRecord {
        id: rec.id.clone(),
        target: put(root, format!("{rel}/target.givvid"), &(&o.target).into())?,
        cond: put(root, format!("{rel}/cond.givvid"), &(&o.cond).into())?,
        refs: vec![put(root, format!("{rel}/ref0.givvid"), &(&o.reference).into())?],
        mask: put(root, format!("{rel}/mask.givvid"), &(&o.track).into())?,
        prompt: o.prompt.clone(),
        n: 1,
        seed: rec.seed,
        scene_hash: sha256_hex(&scene),
    })
}

/// Generates `count` records into `out_dir` and writes the manifest.
pub fn build_dataset(count: usize, seed: u64, out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stages = PipelineStages::oracle();
    let mut manifest = Manifest::default();
    for index in 0..count as u64 {
        let rec = generate_record(cfg, seed, index, &stages)?;
        let entry = write_record(out_dir, &rec).map_err(|e| tag(&rec.id, e))?;
        manifest.records.push(entry);
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn fetch(root: &Path, f: &FileRef) -> Result<GivvidArray> {
    let path = root.join(&f.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let got = sha256_hex(&bytes);
    if got != f.sha256 {
        return Err(Error::format(
            &path,
            format!("sha256 {got} does not match manifest {}", f.sha256),
        ));
    }
    read_givvid(&path)
}

/// Loads a record as a training quintuple plus its full mask sequence.
pub fn load_record(root: &Path, rec: &ManifestRecord) -> Result<(Quintuple, Mask)> {
    let load = || -> Result<(Quintuple, Mask)> {
        let target = fetch(root, &rec.target)?.into_video(&root.join(&rec.target.path))?;
        let cond = fetch(root, &rec.cond)?.into_video(&root.join(&rec.cond.path))?;
        let track = fetch(root, &rec.mask)?.into_mask(&root.join(&rec.mask.path))?;
        let refs = rec
            .refs
            .iter()
            .map(|f| fetch(root, f)?.into_video(&root.join(&f.path)))
            .collect::<Result<Vec<Video>>>()?;
        if rec.n != refs.len() {
            return Err(Error::contract(
                "manifest",
                format!("n={} but {} reference files", rec.n, refs.len()),
            ));
        }
        if track.frames() != target.frames() {
            return Err(Error::dims(
                "manifest",
                &[track.frames(), 1, track.height(), track.width()],
                &[target.frames(), 3, target.height(), target.width()],
            ));
        }
        let q = Quintuple {
            prompt: rec.prompt.clone(),
            refs,
            mask: first_frame(&track),
            cond,
            target,
        };
        q.validate()?;
        Ok((q, track))
    };
    load().map_err(|e| tag(&rec.id, e))
}

/// Reads the manifest in `root` and checks every record: unique ids, file
/// hashes, shapes, codec divisibility, binary masks and (for the lossless
/// codec) an exact encode/decode round trip of the target.
pub fn validate_manifest(root: &Path, codec: &CodecConfig) -> Result<Manifest> {
    let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
    let mut ids = HashSet::new();
    for rec in &manifest.records {
        if !ids.insert(rec.id.clone()) {
            return Err(Error::format(
                root.join(MANIFEST_FILE),
                format!("duplicate id {}", rec.id),
            ));
        }
        let check = || -> Result<()> {
            let (q, track) = load_record(root, rec)?;
            latent_shape(q.target.frames(), q.target.height(), q.target.width(), codec)?;
            if track.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::contract("manifest", "mask is not binary"));
            }
            if codec.mode == CodecMode::LosslessPacking && decode(&encode(&q.target, codec)?, codec)? != q.target {
                return Err(Error::contract(
                    "manifest",
                    "target does not survive the codec round trip",
                ));
            }
            Ok(())
        };
        check().map_err(|e| tag(&rec.id, e))?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            height: 16,
            width: 16,
            frames: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(0, 1, dir.path(), &small()).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(), "");
        assert!(validate_manifest(dir.path(), &small().codec)
            .unwrap()
            .records
            .is_empty());
    }

    #[test]
    fn fixed_seed_reproduces_hashes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = build_dataset(3, 9, a.path(), &small()).unwrap();
        let mb = build_dataset(3, 9, b.path(), &small()).unwrap();
        assert_eq!(ma, mb);
        let m = validate_manifest(a.path(), &small().codec).unwrap();
        assert_eq!(m, ma);
        let (q, track) = load_record(a.path(), &m.records[1]).unwrap();
        assert_eq!(track.frames(), 5);
        assert_eq!(q.mask.data(), track.frame(0));
    }

    #[test]
    fn tampered_file_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(2, 4, dir.path(), &small()).unwrap();
        let path = dir.path().join(&m.records[1].cond.path);
        let mut bytes = fs::read(&path).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&path, bytes).unwrap();
        match validate_manifest(dir.path(), &small().codec) {
            Err(Error::Record { id, source }) => {
                assert_eq!(id, "rec-000001");
                assert!(matches!(*source, Error::Format { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_divisibility_is_rejected_up_front() {
        let cfg = SynthConfig { frames: 4, ..small() };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(1, 0, dir.path(), &cfg),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn record_seeds_differ_by_index_and_attempt() {
        let s = record_seed(1, 0, 0);
        assert_ne!(s, record_seed(1, 1, 0));
        assert_ne!(s, record_seed(1, 0, 1));
        assert_ne!(s, record_seed(2, 0, 0));
        assert_eq!(s, record_seed(1, 0, 0));
    }
}
