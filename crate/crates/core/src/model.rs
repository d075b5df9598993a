//! Diffusion transformer with full attention over prompt and latent tokens.
//!
//! Every latent cell of every frame (reference frames first, then video
//! frames) is one token carrying `2c` channels. Prompt bytes are prepended as
//! extra tokens. The timestep enters as a sinusoidal embedding passed through
//! a small MLP and added to every latent token. Only the video-frame tokens
//! are projected back to `c` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::LatentBlock;
use crate::error::{Error, Result};
use crate::tensor::{CheckpointRecord, Element, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Latent channels `c`; the input projection takes `2c`.
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub max_prompt_tokens: usize,
    pub vocab_size: usize,
    /// Latent cells per token along each spatial axis. Only 1 is supported.
    pub patch: usize,
    /// Upper bound on `n + f`.
    pub max_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    /// Learned frame, spatial and prompt position encodings.
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 24,
            depth: 4,
            width: 128,
            heads: 4,
            max_prompt_tokens: 32,
            vocab_size: 256,
            patch: 1,
            max_frames: 8,
            latent_height: 16,
            latent_width: 16,
            mlp_ratio: 4,
            time_dim: 64,
            positional: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.channels == 0 {
            return bad("model depth, width, heads and channels must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.patch != 1 {
            return bad(format!("patch size {} unsupported, only 1", self.patch));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim {} must be even and at least 2", self.time_dim));
        }
        if self.max_frames == 0 || self.latent_height == 0 || self.latent_width == 0 || self.mlp_ratio == 0 {
            return bad("frame, latent and MLP sizes must be positive".into());
        }
        if self.vocab_size == 0 || self.max_prompt_tokens == 0 {
            return bad("vocabulary and prompt length must be positive".into());
        }
        Ok(())
    }

    fn to_record(self) -> Vec<f32> {
        [
            self.channels,
            self.depth,
            self.width,
            self.heads,
            self.max_prompt_tokens,
            self.vocab_size,
            self.patch,
            self.max_frames,
            self.latent_height,
            self.latent_width,
            self.mlp_ratio,
            self.time_dim,
            self.positional as usize,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    fn from_record(v: &[f32]) -> Option<Self> {
        if v.len() != 13 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return None;
        }
        let u = |i: usize| v[i] as usize;
        Some(Self {
            channels: u(0),
            depth: u(1),
            width: u(2),
            heads: u(3),
            max_prompt_tokens: u(4),
            vocab_size: u(5),
            patch: u(6),
            max_frames: u(7),
            latent_height: u(8),
            latent_width: u(9),
            mlp_ratio: u(10),
            time_dim: u(11),
            positional: u(12) != 0,
        })
    }
}

/// Name of the checkpoint record holding the model configuration.
pub const CONFIG_RECORD: &str = "@model.config";

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    w_in: ParamId,
    b_in: ParamId,
    pos_frame: ParamId,
    pos_space: ParamId,
    pos_prompt: ParamId,
    tok: ParamId,
    t1_w: ParamId,
    t1_b: ParamId,
    t2_w: ParamId,
    t2_b: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Widens a `[c, d]` input projection to `[2c, d]`; the new rows are zero.
pub fn expand_input_layer<T: Element>(base: &Tensor<T>) -> Result<Tensor<T>> {
    if base.rank() != 2 {
        return Err(Error::contract(
            "expand_input_layer",
            format!("expected a matrix, got {:?}", base.shape()),
        ));
    }
    let (c, d) = (base.shape()[0], base.shape()[1]);
    let mut data = base.data().to_vec();
    data.resize(2 * c * d, T::zero());
    Tensor::new(vec![2 * c, d], data)
}

/// The denoiser `ε_Θ(z_input, t, prompt)`.
#[derive(Clone, Debug)]
pub struct GivTransformer<T: Element = f32> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
}

// Parameter ids follow from the config, so they need no comparison.
impl<T: Element> PartialEq for GivTransformer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

impl<T: Element> GivTransformer<T> {
    /// Random initialization. The base `[c, d]` input projection is drawn
    /// first and then widened with zero rows for the condition channels.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (c, d) = (cfg.channels, cfg.width);
        let hidden = d * cfg.mlp_ratio;
        let mut p = ParamStore::new();
        let lin = 1.0 / (d as f64).sqrt();
        let resid = lin / (2.0 * cfg.depth as f64).sqrt();
        let base_in = init.normal::<T>(&[c, d], 1.0 / (c as f64).sqrt());
        let w_in = p.insert("input.weight", expand_input_layer(&base_in)?)?;
        let b_in = p.insert("input.bias", Tensor::zeros(&[d]))?;
        let pos_frame = p.insert("pos.frame", init.normal(&[cfg.max_frames, d], 0.02))?;
        let pos_space = p.insert(
            "pos.space",
            init.normal(&[cfg.latent_height * cfg.latent_width, d], 0.02),
        )?;
        let pos_prompt = p.insert("pos.prompt", init.normal(&[cfg.max_prompt_tokens, d], 0.02))?;
        let tok = p.insert("prompt.embedding", init.normal(&[cfg.vocab_size, d], 0.02))?;
        let t1_w = p.insert(
            "time.fc1.weight",
            init.normal(&[cfg.time_dim, d], 1.0 / (cfg.time_dim as f64).sqrt()),
        )?;
        let t1_b = p.insert("time.fc1.bias", Tensor::zeros(&[d]))?;
        let t2_w = p.insert("time.fc2.weight", init.normal(&[d, d], lin))?;
        let t2_b = p.insert("time.fc2.bias", Tensor::zeros(&[d]))?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = |s: &str| format!("block{i}.{s}");
            blocks.push(BlockIds {
                ln1_g: p.insert(name("ln1.gain"), Tensor::ones(&[d]))?,
                ln1_b: p.insert(name("ln1.bias"), Tensor::zeros(&[d]))?,
                wq: p.insert(name("attn.q.weight"), init.normal(&[d, d], lin))?,
                bq: p.insert(name("attn.q.bias"), Tensor::zeros(&[d]))?,
                wk: p.insert(name("attn.k.weight"), init.normal(&[d, d], lin))?,
                bk: p.insert(name("attn.k.bias"), Tensor::zeros(&[d]))?,
                wv: p.insert(name("attn.v.weight"), init.normal(&[d, d], lin))?,
                bv: p.insert(name("attn.v.bias"), Tensor::zeros(&[d]))?,
                wo: p.insert(name("attn.out.weight"), init.normal(&[d, d], resid))?,
                bo: p.insert(name("attn.out.bias"), Tensor::zeros(&[d]))?,
                ln2_g: p.insert(name("ln2.gain"), Tensor::ones(&[d]))?,
                ln2_b: p.insert(name("ln2.bias"), Tensor::zeros(&[d]))?,
                w1: p.insert(name("mlp.fc1.weight"), init.normal(&[d, hidden], lin))?,
                b1: p.insert(name("mlp.fc1.bias"), Tensor::zeros(&[hidden]))?,
                w2: p.insert(
                    name("mlp.fc2.weight"),
                    init.normal(&[hidden, d], resid * (d as f64 / hidden as f64).sqrt()),
                )?,
                b2: p.insert(name("mlp.fc2.bias"), Tensor::zeros(&[d]))?,
            });
        }
        let lnf_g = p.insert("final.ln.gain", Tensor::ones(&[d]))?;
        let lnf_b = p.insert("final.ln.bias", Tensor::zeros(&[d]))?;
        let w_out = p.insert("output.weight", init.normal(&[d, c], lin))?;
        let b_out = p.insert("output.bias", Tensor::zeros(&[c]))?;
        Ok(Self {
            cfg,
            params: p,
            ids: Ids {
                w_in,
                b_in,
                pos_frame,
                pos_space,
                pos_prompt,
                tok,
                t1_w,
                t1_b,
                t2_w,
                t2_b,
                blocks,
                lnf_g,
                lnf_b,
                w_out,
                b_out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// The `[2c, d]` input projection.
    pub fn input_weight(&self) -> &Tensor<T> {
        self.params.get(self.ids.w_in)
    }

    /// Turns learned positions on or off without touching parameters.
    pub fn set_positional(&mut self, on: bool) {
        self.cfg.positional = on;
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Element>(&self) -> GivTransformer<U> {
        GivTransformer {
            cfg: self.cfg,
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    fn check_inputs(&self, z: &LatentBlock, n_ref: usize, tokens: &[usize]) -> Result<()> {
        let cfg = &self.cfg;
        if tokens.len() > cfg.max_prompt_tokens {
            return Err(Error::contract(
                "forward",
                format!("prompt has {} tokens, limit is {}", tokens.len(), cfg.max_prompt_tokens),
            ));
        }
        let want = [z.frames(), 2 * cfg.channels, cfg.latent_height, cfg.latent_width];
        if z.dims() != want {
            return Err(Error::dims("forward", &want, &z.dims()));
        }
        if n_ref >= z.frames() || z.frames() > cfg.max_frames {
            return Err(Error::contract(
                "forward",
                format!(
                    "{} frames with {n_ref} references: need at least one video frame and at most {}",
                    z.frames(),
                    cfg.max_frames
                ),
            ));
        }
        Ok(())
    }

    /// Records the forward pass and returns the `[f·h·w, c]` prediction for
    /// the video-frame tokens, rows in frame, row, column order.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        z_input: &LatentBlock,
        n_ref: usize,
        t: usize,
        tokens: &[usize],
    ) -> Result<Var> {
        self.check_inputs(z_input, n_ref, tokens)?;
        let cfg = &self.cfg;
        let c = cfg.channels;
        let frames = z_input.frames();
        let hw = cfg.latent_height * cfg.latent_width;
        let n_lat = frames * hw;
        let p = |tape: &mut Tape<T>, id: ParamId| tape.param(&self.params, id);

        let cells = tokens_from_latent::<T>(z_input);
        let x_in = tape.constant(Tensor::new(vec![n_lat, 2 * c], cells)?);
        let (w_in, b_in) = (p(tape, self.ids.w_in), p(tape, self.ids.b_in));
        let x = tape.matmul(x_in, w_in)?;
        let mut x = tape.add_row(x, b_in)?;
        if cfg.positional {
            let frame_ids: Vec<usize> = (0..n_lat).map(|i| i / hw).collect();
            let space_ids: Vec<usize> = (0..n_lat).map(|i| i % hw).collect();
            let table = p(tape, self.ids.pos_frame);
            let pf = tape.embedding(table, &frame_ids)?;
            let table = p(tape, self.ids.pos_space);
            let ps = tape.embedding(table, &space_ids)?;
            x = tape.add(x, pf)?;
            x = tape.add(x, ps)?;
        }
        let temb = self.time_embedding(tape, t)?;
        x = tape.add_row(x, temb)?;

        let n_prompt = tokens.len();
        if n_prompt > 0 {
            let table = p(tape, self.ids.tok);
            let mut e = tape.embedding(table, tokens)?;
            if cfg.positional {
                let table = p(tape, self.ids.pos_prompt);
                let ids: Vec<usize> = (0..n_prompt).collect();
                let pp = tape.embedding(table, &ids)?;
                e = tape.add(e, pp)?;
            }
            x = tape.concat_rows(&[e, x])?;
        }

        for b in &self.ids.blocks {
            x = self.block(tape, x, b)?;
        }
        let (g, bb) = (p(tape, self.ids.lnf_g), p(tape, self.ids.lnf_b));
        let x = tape.layer_norm(x, g, bb, LN_EPS)?;
        let start = n_prompt + n_ref * hw;
        let video = tape.slice_rows(x, start, n_prompt + n_lat)?;
        let (w, b) = (p(tape, self.ids.w_out), p(tape, self.ids.b_out));
        let out = tape.matmul(video, w)?;
        let out = tape.add_row(out, b)?;
        debug_assert_eq!(tape.shape(out), &[(frames - n_ref) * hw, c]);
        Ok(out)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (tape.param(&self.params, w), tape.param(&self.params, b));
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, ids: &BlockIds) -> Result<Var> {
        let (g, b) = (tape.param(&self.params, ids.ln1_g), tape.param(&self.params, ids.ln1_b));
        let h = tape.layer_norm(x, g, b, LN_EPS)?;
        let q = self.linear(tape, h, ids.wq, ids.bq)?;
        let k = self.linear(tape, h, ids.wk, ids.bk)?;
        let v = self.linear(tape, h, ids.wv, ids.bv)?;
        let o = tape.attention(q, k, v, self.cfg.heads)?;
        let o = self.linear(tape, o, ids.wo, ids.bo)?;
        let x = tape.add(x, o)?;

        let (g, b) = (tape.param(&self.params, ids.ln2_g), tape.param(&self.params, ids.ln2_b));
        let h = tape.layer_norm(x, g, b, LN_EPS)?;
        let h = self.linear(tape, h, ids.w1, ids.b1)?;
        let h = tape.gelu(h);
        let h = self.linear(tape, h, ids.w2, ids.b2)?;
        tape.add(x, h)
    }

    fn time_embedding(&self, tape: &mut Tape<T>, t: usize) -> Result<Var> {
        let s = tape.constant(Tensor::new(vec![1, self.cfg.time_dim], sinusoid(t, self.cfg.time_dim))?);
        let h = self.linear(tape, s, self.ids.t1_w, self.ids.t1_b)?;
        let h = tape.silu(h);
        self.linear(tape, h, self.ids.t2_w, self.ids.t2_b)
    }

    /// Scalar denoising loss on the video-frame tokens.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        z_input: &LatentBlock,
        n_ref: usize,
        t: usize,
        tokens: &[usize],
        eps: &LatentBlock,
    ) -> Result<Var> {
        let pred = self.forward(tape, z_input, n_ref, t, tokens)?;
        let want = [
            z_input.frames() - n_ref,
            self.cfg.channels,
            self.cfg.latent_height,
            self.cfg.latent_width,
        ];
        if eps.dims() != want {
            return Err(Error::dims("loss", &want, &eps.dims()));
        }
        tape.mse(pred, &tokens_from_latent::<T>(eps))
    }

    /// Runs the model and returns `ε` as an `f × c × h × w` block.
    pub fn predict(&self, z_input: &LatentBlock, n_ref: usize, t: usize, tokens: &[usize]) -> Result<LatentBlock> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, z_input, n_ref, t, tokens)?;
        let data: Vec<f32> = tape.data(out).iter().map(|v| v.as_f64() as f32).collect();
        latent_from_tokens(
            &data,
            z_input.frames() - n_ref,
            self.cfg.channels,
            self.cfg.latent_height,
            self.cfg.latent_width,
        )
    }
}

impl GivTransformer<f32> {
    /// Configuration record followed by one record per parameter.
    pub fn to_records(&self) -> Vec<CheckpointRecord> {
        let mut out = vec![CheckpointRecord::new(CONFIG_RECORD, vec![13], self.cfg.to_record())];
        for (_, name, t) in self.params.iter() {
            out.push(CheckpointRecord::new(name, t.shape().to_vec(), t.data().to_vec()));
        }
        out
    }

    /// Rebuilds a model from checkpoint records, checking every shape against
    /// the stored configuration. Records whose names start with `@` other
    /// than the configuration are ignored.
    pub fn from_records(records: &[CheckpointRecord]) -> Result<Self> {
        let cfg_rec = records
            .iter()
            .find(|r| r.name == CONFIG_RECORD)
            .ok_or_else(|| Error::contract("checkpoint", "missing model configuration record"))?;
        let cfg = ModelConfig::from_record(&cfg_rec.data)
            .ok_or_else(|| Error::contract("checkpoint", "malformed model configuration record"))?;
        let mut model = Self::new(cfg, 0)?;
        let mut seen = 0;
        for r in records.iter().filter(|r| !r.name.starts_with('@')) {
            let id = model
                .params
                .id_of(&r.name)
                .ok_or_else(|| Error::contract("checkpoint", format!("unknown parameter {}", r.name)))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != r.dims.as_slice() {
                return Err(Error::dims("checkpoint", slot.shape(), &r.dims));
            }
            slot.data_mut().copy_from_slice(&r.data);
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::contract(
                "checkpoint",
                format!("found {seen} of {} parameters", model.params.len()),
            ));
        }
        Ok(model)
    }
}

/// `[sin(t·ω_0), .., sin(t·ω_{k-1}), cos(t·ω_0), ..]` with
/// `ω_i = 10000^(-i/k)` and `k = dim / 2`.
pub fn sinusoid<T: Element>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * w;
        out[i] = T::from_f64_lossy(a.sin());
        out[half + i] = T::from_f64_lossy(a.cos());
    }
    out
}

/// `F × C × h × w` to channel-last `[F·h·w, C]`.
pub fn tokens_from_latent<T: Element>(z: &LatentBlock) -> Vec<T> {
    let [f, c, h, w] = z.dims();
    let plane = h * w;
    let mut out = vec![T::zero(); z.data().len()];
    for fr in 0..f {
        let src = z.frame(fr);
        for ch in 0..c {
            for p in 0..plane {
                out[(fr * plane + p) * c + ch] = T::from_f64_lossy(src[ch * plane + p] as f64);
            }
        }
    }
    out
}

/// Inverse of [`tokens_from_latent`].
pub fn latent_from_tokens(tokens: &[f32], frames: usize, c: usize, h: usize, w: usize) -> Result<LatentBlock> {
    let plane = h * w;
    let mut out = vec![0.0f32; tokens.len()];
    if tokens.len() != frames * c * plane {
        return Err(Error::dims("latent_from_tokens", &[frames * plane, c], &[tokens.len()]));
    }
    for fr in 0..frames {
        for p in 0..plane {
            for ch in 0..c {
                out[(fr * c + ch) * plane + p] = tokens[(fr * plane + p) * c + ch];
            }
        }
    }
    LatentBlock::new(frames, c, h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 3,
            depth: 1,
            width: 8,
            heads: 2,
            max_prompt_tokens: 4,
            vocab_size: 16,
            patch: 1,
            max_frames: 4,
            latent_height: 2,
            latent_width: 2,
            mlp_ratio: 2,
            time_dim: 4,
            positional: true,
        }
    }

    fn random_latent(f: usize, c: usize, h: usize, w: usize, seed: u64) -> LatentBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = f * c * h * w;
        LatentBlock::new(f, c, h, w, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn desk_parameter_count_is_pinned() {
        let m = GivTransformer::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.param_count(), 898_200);
    }

    #[test]
    fn expansion_appends_zero_rows() {
        let base = Tensor::<f32>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let e = expand_input_layer(&base).unwrap();
        assert_eq!(e.shape(), &[4, 3]);
        assert_eq!(&e.data()[..6], base.data());
        assert!(e.data()[6..].iter().all(|&v| v == 0.0));
        let m = GivTransformer::<f32>::new(tiny(), 3).unwrap();
        assert!(m.input_weight().data()[3 * 8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_for_any_reference_count() {
        let m = GivTransformer::<f32>::new(tiny(), 1).unwrap();
        for n in 0..3 {
            let z = random_latent(n + 1, 6, 2, 2, n as u64);
            let out = m.predict(&z, n, 10, &[1, 2]).unwrap();
            assert_eq!(out.dims(), [1, 3, 2, 2]);
        }
    }

    #[test]
    fn rejects_long_prompts_and_bad_shapes() {
        let m = GivTransformer::<f32>::new(tiny(), 1).unwrap();
        let z = random_latent(2, 6, 2, 2, 0);
        assert!(matches!(m.predict(&z, 1, 1, &[0; 5]), Err(Error::Contract { .. })));
        assert!(m.predict(&z, 2, 1, &[]).is_err());
        assert!(m.predict(&random_latent(2, 5, 2, 2, 0), 1, 1, &[]).is_err());
    }

    #[test]
    fn zero_init_ignores_condition_half() {
        let m = GivTransformer::<f32>::new(tiny(), 7).unwrap();
        let base = random_latent(3, 6, 2, 2, 1);
        let a = m.predict(&base, 1, 500, &[3]).unwrap();
        let mut other = base.clone();
        for f in 0..3 {
            for ch in 3..6 {
                for y in 0..2 {
                    for x in 0..2 {
                        other.set(f, ch, y, x, (f * 7 + ch + y + x) as f32 * 0.3 - 2.0);
                    }
                }
            }
        }
        let b = m.predict(&other, 1, 500, &[3]).unwrap();
        assert_eq!(a, b);
        // the target half does matter
        let mut moved = base.clone();
        moved.set(2, 0, 0, 0, 5.0);
        assert_ne!(m.predict(&moved, 1, 500, &[3]).unwrap(), a);
    }

    #[test]
    fn reference_permutation_without_positions() {
        let mut m = GivTransformer::<f64>::new(tiny(), 2).unwrap();
        m.set_positional(false);
        let z = random_latent(3, 6, 2, 2, 9);
        let swapped = z.frames_slice(1..2).concat_frames(&z.frames_slice(0..1)).unwrap();
        let swapped = swapped.concat_frames(&z.frames_slice(2..3)).unwrap();
        let a = m.predict(&z, 2, 40, &[1]).unwrap();
        let b = m.predict(&swapped, 2, 40, &[1]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        m.set_positional(true);
        assert_ne!(
            m.predict(&z, 2, 40, &[1]).unwrap(),
            m.predict(&swapped, 2, 40, &[1]).unwrap()
        );
    }

    #[test]
    fn checkpoint_records_round_trip() {
        let m = GivTransformer::<f32>::new(tiny(), 5).unwrap();
        let recs = m.to_records();
        assert_eq!(recs[0].name, CONFIG_RECORD);
        let back = GivTransformer::from_records(&recs).unwrap();
        assert_eq!(back.params().flatten(), m.params().flatten());
        assert_eq!(back.config(), m.config());
        let mut broken = recs.clone();
        broken[1].dims = vec![broken[1].data.len()];
        assert!(GivTransformer::from_records(&broken).is_err());
    }

    #[test]
    fn token_layout_round_trip() {
        let z = random_latent(2, 3, 2, 3, 4);
        let t = tokens_from_latent::<f32>(&z);
        assert_eq!(t[(6 + 4) * 3 + 2], z.get(1, 2, 1, 1));
        assert_eq!(latent_from_tokens(&t, 2, 3, 2, 3).unwrap(), z);
    }

    #[test]
    fn sinusoid_values() {
        let s = sinusoid::<f64>(3, 4);
        assert!((s[0] - 3f64.sin()).abs() < 1e-15);
        assert!((s[1] - (3.0f64 * 0.01).sin()).abs() < 1e-15);
        assert!((s[2] - 3f64.cos()).abs() < 1e-15);
    }
}
