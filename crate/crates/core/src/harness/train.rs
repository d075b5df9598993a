//! The training loop, its checkpoints and resumption.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{encode, latent_shape, CodecConfig, CodecMode};
use crate::conditioning::{ConditionBundle, Quintuple};
use crate::diffusion::{add_noise, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::GivTransformer;
use crate::sampler::initial_noise;
use crate::synth::{load_record, validate_manifest};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointRecord, Tape};

use super::config::RunConfig;
use super::optim::AdamW;

pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const LAST_CHECKPOINT: &str = "last.givckpt";
pub const GRAD_DUMP_FILE: &str = "grad_dump.txt";

const STATE_RECORD: &str = "@train.state";
const CODEC_RECORD: &str = "@codec.config";
const SCHEDULE_META: &str = "@schedule.meta";
const SCHEDULE_VALUES: &str = "@schedule.alpha_bar";
const MOMENT1: &str = "@adam.m.";
const MOMENT2: &str = "@adam.v.";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:06}.givckpt")
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    /// The run seed; together with `step` it fixes every random draw of
    /// the following steps.
    pub seed: u64,
    pub model: GivTransformer<f32>,
    pub optimizer: AdamW,
    pub last_loss: f64,
    pub best_loss: f64,
}

/// A loaded `GIVCKPT1` file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub codec: CodecConfig,
    pub schedule: NoiseSchedule,
    pub state: TrainState,
}

// u64 values travel through f32 records as four exact 16-bit pieces.
fn split_u64(v: u64) -> [f32; 4] {
    std::array::from_fn(|i| ((v >> (16 * i)) & 0xffff) as f32)
}

fn join_u64(parts: &[f32]) -> Option<u64> {
    let mut v = 0u64;
    for (i, &p) in parts.iter().enumerate().take(4) {
        if !(0.0..65536.0).contains(&p) || p.fract() != 0.0 {
            return None;
        }
        v |= (p as u64) << (16 * i);
    }
    Some(v)
}

impl Checkpoint {
    pub fn to_records(&self) -> Vec<CheckpointRecord> {
        let s = &self.state;
        let mut recs = s.model.to_records();
        let mut state = Vec::with_capacity(20);
        for v in [
            s.step,
            s.seed,
            s.optimizer.t,
            s.last_loss.to_bits(),
            s.best_loss.to_bits(),
        ] {
            state.extend(split_u64(v));
        }
        recs.push(CheckpointRecord::new(STATE_RECORD, vec![state.len()], state));
        let c = &self.codec;
        let mut codec = vec![
            c.spatial_factor as f32,
            c.temporal_factor as f32,
            c.channels as f32,
            match c.mode {
                CodecMode::LosslessPacking => 0.0,
                CodecMode::Projected => 1.0,
            },
        ];
        codec.extend(split_u64(c.projection_seed));
        recs.push(CheckpointRecord::new(CODEC_RECORD, vec![codec.len()], codec));
        let tag = self.schedule.kind().map_or(-1.0, ScheduleKind::tag);
        recs.push(CheckpointRecord::new(
            SCHEDULE_META,
            vec![2],
            vec![self.schedule.steps() as f32, tag],
        ));
        // ᾱ as an f32 pair (hi, lo) so custom schedules survive to ~48 bits.
        let ab = self.schedule.alpha_bars();
        let hi: Vec<f32> = ab.iter().map(|&v| v as f32).collect();
        let lo: Vec<f32> = ab.iter().zip(&hi).map(|(&v, &h)| (v - h as f64) as f32).collect();
        recs.push(CheckpointRecord::new(
            SCHEDULE_VALUES,
            vec![2, ab.len()],
            [hi, lo].concat(),
        ));
        for (i, (_, name, _)) in s.model.params().iter().enumerate() {
            let n = s.optimizer.m[i].len();
            recs.push(CheckpointRecord::new(
                format!("{MOMENT1}{name}"),
                vec![n],
                s.optimizer.m[i].clone(),
            ));
            recs.push(CheckpointRecord::new(
                format!("{MOMENT2}{name}"),
                vec![n],
                s.optimizer.v[i].clone(),
            ));
        }
        recs
    }

    pub fn from_records(records: &[CheckpointRecord], optimizer: super::optim::AdamWConfig) -> Result<Self> {
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::contract("checkpoint", format!("missing record {name}")))
        };
        let bad = |what: &str| Error::contract("checkpoint", format!("malformed {what} record"));
        let model = GivTransformer::from_records(records)?;

        let st = &find(STATE_RECORD)?.data;
        if st.len() != 20 {
            return Err(bad("training state"));
        }
        let word = |i: usize| join_u64(&st[4 * i..4 * i + 4]).ok_or_else(|| bad("training state"));
        let (step, seed, t) = (word(0)?, word(1)?, word(2)?);
        let last_loss = f64::from_bits(word(3)?);
        let best_loss = f64::from_bits(word(4)?);

        let c = &find(CODEC_RECORD)?.data;
        if c.len() != 8 {
            return Err(bad("codec"));
        }
        let codec = CodecConfig {
            spatial_factor: c[0] as usize,
            temporal_factor: c[1] as usize,
            channels: c[2] as usize,
            mode: match c[3] as i64 {
                0 => CodecMode::LosslessPacking,
                1 => CodecMode::Projected,
                _ => return Err(bad("codec")),
            },
            projection_seed: join_u64(&c[4..]).ok_or_else(|| bad("codec"))?,
        };
        codec.validate()?;

        let meta = &find(SCHEDULE_META)?.data;
        let values = find(SCHEDULE_VALUES)?;
        if meta.len() != 2 || values.dims.len() != 2 || values.dims[0] != 2 || values.dims[1] != meta[0] as usize {
            return Err(bad("schedule"));
        }
        let steps = meta[0] as usize;
        let schedule = match ScheduleKind::from_tag(meta[1]) {
            Some(kind) if meta[1] >= 0.0 => crate::diffusion::make_schedule(steps, kind)?,
            _ => {
                let (hi, lo) = values.data.split_at(steps);
                let ab = hi.iter().zip(lo).map(|(&h, &l)| h as f64 + l as f64).collect();
                NoiseSchedule::from_alpha_bar(None, ab)?
            }
        };

        let mut opt = AdamW::new(optimizer, model.params());
        opt.t = t;
        for (i, (_, name, p)) in model.params().iter().enumerate() {
            for (prefix, slot) in [(MOMENT1, &mut opt.m[i]), (MOMENT2, &mut opt.v[i])] {
                let r = find(&format!("{prefix}{name}"))?;
                if r.data.len() != p.numel() {
                    return Err(bad("optimizer moment"));
                }
                slot.copy_from_slice(&r.data);
            }
        }
        Ok(Self {
            codec,
            schedule,
            state: TrainState {
                step,
                seed,
                model,
                optimizer: opt,
                last_loss,
                best_loss,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_records())
    }

    /// Loads a checkpoint; the optimizer hyperparameters come from the
    /// caller because only the moments are stored.
    pub fn load(path: &Path, optimizer: super::optim::AdamWConfig) -> Result<Self> {
        Self::from_records(&read_checkpoint(path)?, optimizer)
    }
}

/// Drives optimization over an in-memory set of quintuples.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a [Quintuple],
    schedule: NoiseSchedule,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    /// A fresh zero-initialized model.
    pub fn new(cfg: &'a RunConfig, data: &'a [Quintuple]) -> Result<Self> {
        let model = GivTransformer::new(cfg.model, cfg.seed)?;
        let optimizer = AdamW::new(cfg.optimizer, model.params());
        let state = TrainState {
            step: 0,
            seed: cfg.seed,
            model,
            optimizer,
            last_loss: f64::NAN,
            best_loss: f64::INFINITY,
        };
        Self::with_state(cfg, data, state)
    }

    /// Continues from a checkpoint written by a run with the same config.
    pub fn resume(cfg: &'a RunConfig, data: &'a [Quintuple], ckpt: Checkpoint) -> Result<Self> {
        if ckpt.codec != cfg.codec {
            return Err(Error::Config("checkpoint codec differs from the run config".into()));
        }
        if *ckpt.state.model.config() != cfg.model {
            return Err(Error::Config("checkpoint model differs from the run config".into()));
        }
        if ckpt.state.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {}, config has {}",
                ckpt.state.seed, cfg.seed
            )));
        }
        if ckpt.schedule != cfg.schedule.build()? {
            return Err(Error::Config(
                "checkpoint noise schedule differs from the run config".into(),
            ));
        }
        Self::with_state(cfg, data, ckpt.state)
    }

    fn with_state(cfg: &'a RunConfig, data: &'a [Quintuple], state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::contract("train", "dataset is empty"));
        }
        let m = &cfg.model;
        for (i, q) in data.iter().enumerate() {
            q.validate()?;
            let s = latent_shape(q.target.frames(), q.target.height(), q.target.width(), &cfg.codec)?;
            if (s.height, s.width) != (m.latent_height, m.latent_width) {
                return Err(Error::Config(format!(
                    "record {i}: latent grid {}x{} but the model expects {}x{}",
                    s.height, s.width, m.latent_height, m.latent_width
                )));
            }
            if s.frames + q.refs.len() > m.max_frames {
                return Err(Error::Config(format!(
                    "record {i}: {} latent frames plus {} references exceed max_frames {}",
                    s.frames,
                    q.refs.len(),
                    m.max_frames
                )));
            }
        }
        Ok(Self {
            cfg,
            data,
            schedule: cfg.schedule.build()?,
            state,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            codec: self.cfg.codec,
            schedule: self.schedule.clone(),
            state: self.state.clone(),
        }
    }

    /// Generator for the random draws of one step.
    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(step);
        rng
    }

    /// Runs one optimizer step and returns the mean batch loss. Gradients
    /// are accumulated sample by sample in batch order.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step + 1;
        let draw = if self.cfg.train.fixed_batch { 1 } else { step };
        let batch = self.cfg.train.batch_size;
        let mut rng = self.step_rng(draw);
        let mut total = 0.0;
        self.state.model.params_mut().zero_grads();
        for b in 0..batch {
            let q = &self.data[rng.random_range(0..self.data.len())];
            let sample = (draw - 1) * batch as u64 + b as u64;
            let presence = self.cfg.dropout.draw(&mut self.cfg.dropout.rng_for(sample));
            let bundle = ConditionBundle::encode(q, &self.cfg.codec, presence)?;
            let z0 = encode(&q.target, &self.cfg.codec)?;
            let t = rng.random_range(1..=self.schedule.steps());
            let eps = initial_noise(z0.dims(), &mut rng);
            let z_t = add_noise(&z0, &eps, t, &self.schedule)?;
            let input = bundle.input(&z_t)?;
            let mut tape = Tape::new();
            let loss = self
                .state
                .model
                .loss(&mut tape, &input, bundle.n(), t, &bundle.tokens, &eps)?;
            total += tape.data(loss)[0] as f64;
            tape.backward_into(loss, self.state.model.params_mut())?;
        }
        let loss = total / batch as f64;
        let grad_norm = self.state.model.params().grad_norm() / batch as f64;
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite { step, grad_norm });
        }
        self.state
            .optimizer
            .step(self.state.model.params_mut(), 1.0 / batch as f64)?;
        self.state.model.params_mut().zero_grads();
        self.state.step = step;
        self.state.last_loss = loss;
        self.state.best_loss = self.state.best_loss.min(loss);
        Ok(loss)
    }

    /// Per-tensor gradient norms of the current accumulation, one line each.
    pub fn grad_dump(&self) -> String {
        let mut out = String::new();
        for (_, name, p) in self.state.model.params().iter() {
            let norm = p
                .grad()
                .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt());
            match norm {
                Some(n) => out.push_str(&format!("{name} {n:e}\n")),
                None => out.push_str(&format!("{name} none\n")),
            }
        }
        out
    }

    /// Trains until `max_steps`, writing the loss curve and checkpoints into
    /// `out` when given. `on_step` sees every `(step, loss)`.
    pub fn run(&mut self, out: Option<&Path>, on_step: &mut dyn FnMut(u64, f64)) -> Result<Vec<(u64, f64)>> {
        let mut curve = Vec::new();
        let mut log = match out {
            Some(dir) => Some(LossLog::open(dir, self.state.step > 0)?),
            None => None,
        };
        while self.state.step < self.cfg.train.max_steps {
            let loss = match self.step() {
                Ok(l) => l,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = out {
                        let path = dir.join(GRAD_DUMP_FILE);
                        fs::write(&path, self.grad_dump()).map_err(|err| Error::io(&path, err))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let step = self.state.step;
            curve.push((step, loss));
            on_step(step, loss);
            if let (Some(dir), Some(log)) = (out, log.as_mut()) {
                log.push(step, loss)?;
                let every = self.cfg.train.checkpoint_every;
                if every > 0 && step.is_multiple_of(every) {
                    log.flush()?;
                    self.checkpoint().save(&dir.join(checkpoint_name(step)))?;
                }
            }
        }
        if let (Some(dir), Some(log)) = (out, log.as_mut()) {
            log.flush()?;
            self.checkpoint().save(&dir.join(LAST_CHECKPOINT))?;
        }
        Ok(curve)
    }
}

struct LossLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl LossLog {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let path = dir.join(LOSS_FILE);
        let exists = path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            w: BufWriter::new(file),
            path,
        };
        if !(append && exists) {
            writeln!(log.w, "step,loss").map_err(|e| Error::io(&log.path, e))?;
        }
        Ok(log)
    }

    fn push(&mut self, step: u64, loss: f64) -> Result<()> {
        writeln!(self.w, "{step},{loss}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Loads every record of a validated dataset directory.
pub fn load_dataset(dir: &Path, codec: &CodecConfig) -> Result<Vec<Quintuple>> {
    let manifest = validate_manifest(dir, codec)?;
    manifest
        .records
        .iter()
        .map(|r| load_record(dir, r).map(|(q, _)| q))
        .collect()
}

/// Full training run from a dataset directory into `out`, optionally
/// resuming from a checkpoint. Writes the resolved config, the loss curve
/// and checkpoints.
pub fn train_dir(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<TrainState> {
    cfg.validate()?;
    cfg.check_paths()?;
    if !data_dir.is_dir() {
        return Err(Error::Config(format!(
            "data directory {} does not exist",
            data_dir.display()
        )));
    }
    let data = load_dataset(data_dir, &cfg.codec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut resolved = cfg.clone();
    resolved.paths.data = Some(data_dir.to_path_buf());
    resolved.paths.out = Some(out.to_path_buf());
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, resolved.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &data, Checkpoint::load(p, cfg.optimizer)?)?,
        None => Trainer::new(cfg, &data)?,
    };
    trainer.run(Some(out), on_step)?;
    Ok(trainer.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_record, PipelineStages, SynthConfig};

    fn tiny_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::desk(seed);
        cfg.model = ModelConfig {
            depth: 1,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            time_dim: 8,
            latent_height: 8,
            latent_width: 8,
            ..ModelConfig::default()
        };
        cfg.schedule.steps = 100;
        cfg.guidance.steps = 10;
        cfg.train.batch_size = 2;
        cfg.train.max_steps = 6;
        cfg.train.checkpoint_every = 3;
        cfg
    }

    fn tiny_data(count: u64) -> Vec<Quintuple> {
        let synth = SynthConfig {
            height: 16,
            width: 16,
            frames: 5,
            ..SynthConfig::default()
        };
        (0..count)
            .map(|i| {
                generate_record(&synth, 11, i, &PipelineStages::oracle())
                    .unwrap()
                    .quintuple()
            })
            .collect()
    }

    #[test]
    fn u64_pieces_round_trip() {
        for v in [
            0u64,
            1,
            65535,
            65536,
            u64::MAX,
            0x0123_4567_89ab_cdef,
            0.37f64.to_bits(),
        ] {
            assert_eq!(join_u64(&split_u64(v)), Some(v));
        }
        assert_eq!(join_u64(&[0.5, 0.0, 0.0, 0.0]), None);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = tiny_config(1);
        cfg.optimizer.lr = 0.0;
        let data = tiny_data(2);
        let mut tr = Trainer::new(&cfg, &data).unwrap();
        let before = tr.state.model.params().flatten();
        tr.run(None, &mut |_, _| {}).unwrap();
        assert_eq!(tr.state.step, 6);
        let after = tr.state.model.params().flatten();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let mut cfg = tiny_config(2);
        cfg.train.max_steps = 13;
        let data = tiny_data(3);
        let mut full = Trainer::new(&cfg, &data).unwrap();
        let full_curve = full.run(None, &mut |_, _| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = cfg.clone();
        first.train.max_steps = 3;
        let mut tr = Trainer::new(&first, &data).unwrap();
        tr.run(Some(dir.path()), &mut |_, _| {}).unwrap();
        let ckpt = Checkpoint::load(&dir.path().join(checkpoint_name(3)), cfg.optimizer).unwrap();
        assert_eq!(ckpt.state, tr.state);
        let mut resumed = Trainer::resume(&cfg, &data, ckpt).unwrap();
        let tail = resumed.run(Some(dir.path()), &mut |_, _| {}).unwrap();

        assert_eq!(tail.len(), 10);
        for ((s1, l1), (s2, l2)) in tail.iter().zip(&full_curve[3..]) {
            assert_eq!(s1, s2);
            assert_eq!(l1.to_bits(), l2.to_bits(), "step {s1}");
        }
        assert_eq!(resumed.state, full.state);

        let csv = fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss");
        assert_eq!(lines.len(), 14);
        assert!(lines[13].starts_with("13,"));
    }

    #[test]
    fn resume_rejects_foreign_checkpoint() {
        let cfg = tiny_config(3);
        let data = tiny_data(1);
        let ckpt = Trainer::new(&cfg, &data).unwrap().checkpoint();
        let other = tiny_config(4);
        assert!(matches!(Trainer::resume(&other, &data, ckpt), Err(Error::Config(_))));
    }

    #[test]
    fn custom_schedule_survives_checkpoint() {
        let cfg = tiny_config(5);
        let data = tiny_data(1);
        let mut ckpt = Trainer::new(&cfg, &data).unwrap().checkpoint();
        ckpt.schedule = NoiseSchedule::from_betas(&[0.01, 0.02, 0.3]).unwrap();
        let back = Checkpoint::from_records(&ckpt.to_records(), cfg.optimizer).unwrap();
        for (a, b) in back.schedule.alpha_bars().iter().zip(ckpt.schedule.alpha_bars()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(back.schedule.kind(), None);
    }

    #[test]
    fn mismatched_latent_grid_is_a_config_error() {
        let mut cfg = tiny_config(6);
        cfg.model.latent_height = 4;
        let data = tiny_data(1);
        assert!(matches!(Trainer::new(&cfg, &data), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_batch_repeats_the_first_draw() {
        let mut cfg = tiny_config(7);
        cfg.train.fixed_batch = true;
        cfg.optimizer.lr = 0.0;
        let data = tiny_data(4);
        let mut tr = Trainer::new(&cfg, &data).unwrap();
        let a = tr.step().unwrap();
        let b = tr.step().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
