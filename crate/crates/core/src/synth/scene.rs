use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the offset `(dx, dy)` from the center lies inside a sprite of
    /// half-extent `r`. Triangles point up.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }
}

/// Center path: `p(k) = p0 + v·k + a·sin(2π·freq·k + phase)` per axis, in
/// pixels with `k` the frame index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub amp_x: f64,
    pub amp_y: f64,
    pub freq: f64,
    pub phase: f64,
}

impl Trajectory {
    pub fn position(&self, k: usize) -> (f64, f64) {
        let k = k as f64;
        let s = (std::f64::consts::TAU * self.freq * k + self.phase).sin();
        (
            self.x0 + self.vx * k + self.amp_x * s,
            self.y0 + self.vy * k + self.amp_y * s,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: ShapeKind,
    pub color: Color,
    /// Half-extent in pixels: circle radius, half the square side, half the
    /// triangle height.
    pub size: f64,
    pub trajectory: Trajectory,
    /// Higher values are painted later, on top.
    pub z: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    /// Linear blend from `from` to `to` across the width (or height).
    Gradient {
        from: [f32; 3],
        to: [f32; 3],
        horizontal: bool,
    },
    /// Bilinear value noise on a lattice of `cell`-pixel squares, per channel,
    /// in `[low, high]`.
    Noise {
        seed: u64,
        low: f32,
        high: f32,
        cell: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Background,
    pub sprites: Vec<Sprite>,
    pub target: usize,
}

impl SceneSpec {
    /// Checks the scene and the target visibility rule: at least a quarter of
    /// the target's area is on the canvas in frame 0.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::contract("scene", "canvas and frame count must be positive"));
        }
        if self.target >= self.sprites.len() {
            return Err(Error::contract(
                "scene",
                format!("target {} out of {} sprites", self.target, self.sprites.len()),
            ));
        }
        for s in &self.sprites {
            if !(s.size.is_finite() && s.size > 0.0) {
                return Err(Error::contract("scene", format!("sprite size {}", s.size)));
            }
        }
        let total = support_size(self, self.target, 0);
        let on_canvas = support_on_canvas(self, self.target, 0);
        if (on_canvas as f64) < 0.25 * total as f64 {
            return Err(Error::Skip(format!(
                "target only {on_canvas}/{total} pixels on canvas in frame 0"
            )));
        }
        Ok(())
    }
}

/// Integer pixel range covering a sprite's support around `c`.
fn span(c: f64, r: f64) -> std::ops::RangeInclusive<i64> {
    (c - r).floor() as i64..=(c + r).ceil() as i64
}

/// Number of integer points inside sprite `idx` at frame `k`, ignoring the
/// canvas edges.
pub(crate) fn support_size(spec: &SceneSpec, idx: usize, k: usize) -> usize {
    let s = &spec.sprites[idx];
    let (cx, cy) = s.trajectory.position(k);
    let mut n = 0;
    for y in span(cy, s.size) {
        for x in span(cx, s.size) {
            n += s.shape.contains(x as f64 - cx, y as f64 - cy, s.size) as usize;
        }
    }
    n
}

fn support_on_canvas(spec: &SceneSpec, idx: usize, k: usize) -> usize {
    let s = &spec.sprites[idx];
    let (cx, cy) = s.trajectory.position(k);
    let mut n = 0;
    for y in span(cy, s.size).filter(|&y| y >= 0 && y < spec.height as i64) {
        for x in span(cx, s.size).filter(|&x| x >= 0 && x < spec.width as i64) {
            n += s.shape.contains(x as f64 - cx, y as f64 - cy, s.size) as usize;
        }
    }
    n
}

/// Topmost sprite at each pixel of frame `k`, with sprite `skip` left out.
pub(crate) fn owners_frame(spec: &SceneSpec, k: usize, skip: Option<usize>) -> Vec<Option<usize>> {
    let (h, w) = (spec.height, spec.width);
    let mut owners = vec![None; h * w];
    let mut order: Vec<usize> = (0..spec.sprites.len()).filter(|&i| Some(i) != skip).collect();
    order.sort_by_key(|&i| (spec.sprites[i].z, i));
    for i in order {
        let s = &spec.sprites[i];
        let (cx, cy) = s.trajectory.position(k);
        for y in span(cy, s.size).filter(|&y| y >= 0 && y < h as i64) {
            for x in span(cx, s.size).filter(|&x| x >= 0 && x < w as i64) {
                if s.shape.contains(x as f64 - cx, y as f64 - cy, s.size) {
                    owners[y as usize * w + x as usize] = Some(i);
                }
            }
        }
    }
    owners
}

fn lattice(seed: u64, ch: usize, rows: usize, cols: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ch as u64);
    (0..rows * cols).map(|_| rng.random::<f32>()).collect()
}

/// Snaps to the nearest multiple of 1/256. On that lattice the codec's
/// pixel-to-latent map and its inverse are exact.
fn snap(v: f32) -> f32 {
    (v * 256.0).round() / 256.0
}

/// Background as a single `3 × H × W` frame.
pub(crate) fn background_frame(spec: &SceneSpec) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let mut out = vec![0.0f32; 3 * h * w];
    match &spec.background {
        Background::Gradient { from, to, horizontal } => {
            let n = if *horizontal { w } else { h };
            let denom = (n.max(2) - 1) as f32;
            for y in 0..h {
                for x in 0..w {
                    let t = if *horizontal { x } else { y } as f32 / denom;
                    for ch in 0..3 {
                        out[(ch * h + y) * w + x] = snap(from[ch] + (to[ch] - from[ch]) * t);
                    }
                }
            }
        }
        Background::Noise { seed, low, high, cell } => {
            let cell = (*cell).max(1);
            let (rows, cols) = (h / cell + 2, w / cell + 2);
            for ch in 0..3 {
                let grid = lattice(*seed, ch, rows, cols);
                for y in 0..h {
                    let (gy, fy) = (y / cell, (y % cell) as f32 / cell as f32);
                    for x in 0..w {
                        let (gx, fx) = (x / cell, (x % cell) as f32 / cell as f32);
                        let at = |r: usize, c: usize| grid[r * cols + c];
                        let top = at(gy, gx) + (at(gy, gx + 1) - at(gy, gx)) * fx;
                        let bottom = at(gy + 1, gx) + (at(gy + 1, gx + 1) - at(gy + 1, gx)) * fx;
                        let v = top + (bottom - top) * fy;
                        out[(ch * h + y) * w + x] = snap(low + (high - low) * v);
                    }
                }
            }
        }
    }
    out
}

/// Renders every frame, leaving out sprite `skip`.
pub(crate) fn compose(spec: &SceneSpec, skip: Option<usize>) -> Video {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let bg = background_frame(spec);
    let mut data = Vec::with_capacity(spec.frames * 3 * plane);
    for k in 0..spec.frames {
        let mut frame = bg.clone();
        for (p, owner) in owners_frame(spec, k, skip).into_iter().enumerate() {
            if let Some(i) = owner {
                let rgb = spec.sprites[i].color.rgb();
                for ch in 0..3 {
                    frame[ch * plane + p] = rgb[ch];
                }
            }
        }
        data.extend_from_slice(&frame);
    }
    Video::new(spec.frames, h, w, data).expect("frame-sized buffer")
}

/// `stays still` when no frame is 2 px or more from the start; otherwise the
/// dominant direction of the net displacement.
pub(crate) fn motion_clause(t: &Trajectory, frames: usize) -> &'static str {
    let p0 = t.position(0);
    let dist = |p: (f64, f64)| ((p.0 - p0.0).powi(2) + (p.1 - p0.1).powi(2)).sqrt();
    let max = (0..frames).map(|k| dist(t.position(k))).fold(0.0, f64::max);
    if max < 2.0 {
        return "stays still";
    }
    let end = t.position(frames - 1);
    let (dx, dy) = (end.0 - p0.0, end.1 - p0.1);
    if dist(end) < 2.0 {
        "wobbles"
    } else if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            "moves right"
        } else {
            "moves left"
        }
    } else if dy > 0.0 {
        "moves down"
    } else {
        "moves up"
    }
}

/// A random scene with one to three sprites of distinct colors. Sizes and
/// speeds scale with the smaller canvas side relative to 32 px.
pub fn random_scene(rng: &mut impl Rng, height: usize, width: usize, frames: usize) -> SceneSpec {
    let scale = height.min(width) as f64 / 32.0;
    let background = if rng.random_bool(0.5) {
        let mut c = || [0; 3].map(|_| 0.2 + 0.6 * rng.random::<f32>());
        Background::Gradient {
            from: c(),
            to: c(),
            horizontal: rng.random_bool(0.5),
        }
    } else {
        Background::Noise {
            seed: rng.random(),
            low: 0.25,
            high: 0.75,
            cell: 8,
        }
    };
    let count = rng.random_range(1..=3);
    let mut colors = Color::ALL.to_vec();
    colors.shuffle(rng);
    let mut z: Vec<i32> = (0..count as i32).collect();
    z.shuffle(rng);
    let sprites = (0..count)
        .map(|i| {
            let size = rng.random_range(3.0..6.0) * scale;
            let speed = 1.2 * scale;
            Sprite {
                shape: ShapeKind::ALL[rng.random_range(0..3)],
                color: colors[i],
                size,
                trajectory: Trajectory {
                    x0: rng.random_range(size..width as f64 - size),
                    y0: rng.random_range(size..height as f64 - size),
                    vx: rng.random_range(-speed..speed),
                    vy: rng.random_range(-speed..speed),
                    amp_x: rng.random_range(0.0..2.0) * scale,
                    amp_y: rng.random_range(0.0..2.0) * scale,
                    freq: rng.random_range(0.05..0.25),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                },
                z: z[i],
            }
        })
        .collect();
    SceneSpec {
        height,
        width,
        frames,
        background,
        sprites,
        target: rng.random_range(0..count),
    }
}
