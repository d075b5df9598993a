//! Synthetic recognize-track-erase data.
//!
//! Scenes of flat-colored sprites over a background are rasterized exactly,
//! so every stage (caption, detect, track, erase) has a deterministic oracle.
//! The stages sit behind traits so a learned backend can replace any of them.

mod dataset;
mod scene;

pub use dataset::{
    build_dataset, generate_record, load_record, record_id, record_seed, validate_manifest, FileRef, Manifest,
    ManifestRecord, SynthConfig, SynthRecord, MANIFEST_FILE,
};
pub use scene::{random_scene, Background, Color, SceneSpec, ShapeKind, Sprite, Trajectory};

use crate::codec::{Mask, Video};
use crate::error::{Error, Result};

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    /// Tight box around the nonzero pixels of one mask plane.
    pub fn of_plane(plane: &[f32], width: usize) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for (i, &v) in plane.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let (y, x) = (i / width, i % width);
            b = Some(match b {
                None => BBox {
                    x0: x,
                    y0: y,
                    x1: x,
                    y1: y,
                },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            });
        }
        b
    }
}

/// Picks the instance to edit and describes it. Returns the instance word and
/// the prompt.
pub trait Captioner {
    fn caption(&self, spec: &SceneSpec) -> Result<(String, String)>;
}

/// Locates the instance in the first frame.
pub trait Detector {
    fn detect(&self, first_frame: &Video, instance: &str, spec: &SceneSpec) -> Result<BBox>;
}

/// Follows the detected instance through the video as a binary mask.
pub trait Tracker {
    fn track(&self, video: &Video, bbox: &BBox, spec: &SceneSpec) -> Result<Mask>;
}

/// Removes the tracked instance from the video.
pub trait Eraser {
    fn erase(&self, video: &Video, mask: &Mask, spec: &SceneSpec) -> Result<Video>;
}

/// Exact implementation of every stage, computed from the scene description.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl Captioner for Oracle {
    fn caption(&self, spec: &SceneSpec) -> Result<(String, String)> {
        Ok(oracle_caption(spec))
    }
}

impl Detector for Oracle {
    fn detect(&self, first_frame: &Video, instance: &str, spec: &SceneSpec) -> Result<BBox> {
        oracle_detect(first_frame, instance, spec)
    }
}

impl Tracker for Oracle {
    fn track(&self, video: &Video, bbox: &BBox, spec: &SceneSpec) -> Result<Mask> {
        oracle_track(video, bbox, spec)
    }
}

impl Eraser for Oracle {
    fn erase(&self, _video: &Video, _mask: &Mask, spec: &SceneSpec) -> Result<Video> {
        Ok(oracle_erase(spec))
    }
}

/// The four replaceable stages.
pub struct PipelineStages<'a> {
    pub captioner: &'a dyn Captioner,
    pub detector: &'a dyn Detector,
    pub tracker: &'a dyn Tracker,
    pub eraser: &'a dyn Eraser,
}

impl PipelineStages<'static> {
    pub fn oracle() -> Self {
        Self {
            captioner: &Oracle,
            detector: &Oracle,
            tracker: &Oracle,
            eraser: &Oracle,
        }
    }
}

/// Everything the pipeline produces for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub instance: String,
    pub prompt: String,
    pub bbox: BBox,
    pub target: Video,
    pub track: Mask,
    pub cond: Video,
    pub reference: Video,
}

/// Renders the scene with hard alpha, sprites painted in ascending z-order.
pub fn render_scene(spec: &SceneSpec) -> Video {
    scene::compose(spec, None)
}

/// Instance word and templated prompt. The motion clause compares the
/// trajectory against a 2-pixel displacement threshold.
pub fn oracle_caption(spec: &SceneSpec) -> (String, String) {
    let s = &spec.sprites[spec.target];
    let motion = scene::motion_clause(&s.trajectory, spec.frames);
    let word = s.shape.word().to_string();
    let prompt = format!("a {} {} {}", s.color.name(), word, motion);
    (word, prompt)
}

fn check_frame(op: &'static str, v: &Video, spec: &SceneSpec) -> Result<()> {
    if (v.height(), v.width()) != (spec.height, spec.width) {
        return Err(Error::dims(op, &[v.height(), v.width()], &[spec.height, spec.width]));
    }
    Ok(())
}

/// Tight box of the instance's visible pixels in the first frame. A fully
/// hidden instance is a pipeline skip.
pub fn oracle_detect(first_frame: &Video, instance: &str, spec: &SceneSpec) -> Result<BBox> {
    check_frame("oracle_detect", first_frame, spec)?;
    let target = spec
        .sprites
        .get(spec.target)
        .ok_or_else(|| Error::contract("oracle_detect", "no target sprite"))?;
    if target.shape.word() != instance {
        return Err(Error::contract(
            "oracle_detect",
            format!("instance {instance:?} is not the designated {}", target.shape.word()),
        ));
    }
    let owners = scene::owners_frame(spec, 0, None);
    let plane: Vec<f32> = owners.iter().map(|&o| (o == Some(spec.target)) as u8 as f32).collect();
    BBox::of_plane(&plane, spec.width).ok_or_else(|| Error::Skip("target hidden in frame 0".into()))
}

/// Per-frame mask of the pixels where the instance is the topmost sprite.
pub fn oracle_track(video: &Video, bbox: &BBox, spec: &SceneSpec) -> Result<Mask> {
    check_frame("oracle_track", video, spec)?;
    let plane = spec.height * spec.width;
    let mut mask = Mask::zeros(spec.frames, spec.height, spec.width);
    for k in 0..spec.frames {
        let owners = scene::owners_frame(spec, k, None);
        for (dst, o) in mask.data_mut()[k * plane..(k + 1) * plane].iter_mut().zip(owners) {
            *dst = (o == Some(spec.target)) as u8 as f32;
        }
    }
    if BBox::of_plane(mask.frame(0), spec.width).as_ref() != Some(bbox) {
        return Err(Error::contract(
            "oracle_track",
            "first-frame mask disagrees with the detected box",
        ));
    }
    Ok(mask)
}

/// The scene re-rendered without the target sprite.
pub fn oracle_erase(spec: &SceneSpec) -> Video {
    scene::compose(spec, Some(spec.target))
}

/// Share of the target's full support visible at frame `k`.
fn visible_fraction(spec: &SceneSpec, mask: &Mask, k: usize) -> f64 {
    let total = scene::support_size(spec, spec.target, k);
    if total == 0 {
        return 0.0;
    }
    mask.frame(k).iter().filter(|&&v| v != 0.0).count() as f64 / total as f64
}

/// Crop of the target from the first frame where at least 95% of it is
/// visible, placed on neutral gray, padded to a square and resized (nearest
/// neighbor) to the video size.
pub fn reference_image(video: &Video, mask: &Mask, spec: &SceneSpec) -> Result<Video> {
    let k = (0..spec.frames)
        .find(|&k| visible_fraction(spec, mask, k) >= 0.95)
        .ok_or_else(|| Error::Skip("target never clear".into()))?;
    let (h, w) = (spec.height, spec.width);
    let plane = mask.frame(k);
    let b = BBox::of_plane(plane, w).expect("a clear frame has visible pixels");
    let side = b.width().max(b.height());
    // top-left of the square crop in frame coordinates, may be negative
    let ox = b.x0 as isize - ((side - b.width()) / 2) as isize;
    let oy = b.y0 as isize - ((side - b.height()) / 2) as isize;
    let mut out = Video::filled(1, h, w, 0.5);
    for y in 0..h {
        let sy = oy + (y * side / h) as isize;
        for x in 0..w {
            let sx = ox + (x * side / w) as isize;
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            if plane[sy * w + sx] == 0.0 {
                continue;
            }
            for ch in 0..3 {
                out.set(0, ch, y, x, video.get(k, ch, sy, sx));
            }
        }
    }
    Ok(out)
}

/// Runs caption, detect, track, erase and reference extraction on one scene.
/// Scenes that violate the visibility rules come back as [`Error::Skip`].
pub fn run_pipeline(spec: &SceneSpec, stages: &PipelineStages<'_>) -> Result<PipelineOutput> {
    spec.validate()?;
    let target = render_scene(spec);
    let (instance, prompt) = stages.captioner.caption(spec)?;
    let bbox = stages.detector.detect(&target.frame_video(0), &instance, spec)?;
    let track = stages.tracker.track(&target, &bbox, spec)?;
    let cond = stages.eraser.erase(&target, &track, spec)?;
    let reference = reference_image(&target, &track, spec)?;
    Ok(PipelineOutput {
        instance,
        prompt,
        bbox,
        target,
        track,
        cond,
        reference,
    })
}
