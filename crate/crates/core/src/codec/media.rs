use crate::error::{Error, Result};

fn check_len(what: &str, dims: &[usize], len: usize) -> Result<()> {
    let want: usize = dims.iter().product();
    if want != len {
        return Err(Error::contract(
            "media",
            format!("{what} {dims:?} needs {want} values, got {len}"),
        ));
    }
    Ok(())
}

/// RGB video, `F × 3 × H × W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_len("video", &[frames, 3, height, width], data.len())?;
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![value; frames * 3 * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, frame: usize, ch: usize, y: usize, x: usize) -> usize {
        ((frame * 3 + ch) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, frame: usize, ch: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(frame, ch, y, x)]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, ch: usize, y: usize, x: usize, v: f32) {
        let i = self.index(frame, ch, y, x);
        self.data[i] = v;
    }

    /// One frame as `3 × H × W`.
    pub fn frame(&self, k: usize) -> &[f32] {
        let n = 3 * self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    /// A single-frame video holding frame `k`.
    pub fn frame_video(&self, k: usize) -> Video {
        Video {
            frames: 1,
            height: self.height,
            width: self.width,
            data: self.frame(k).to_vec(),
        }
    }
}

/// Binary mask sequence, `F × 1 × H × W`. A value of 1 marks the target
/// region.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_len("mask", &[frames, 1, height, width], data.len())?;
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn get(&self, frame: usize, y: usize, x: usize) -> f32 {
        self.data[(frame * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, y: usize, x: usize, v: f32) {
        self.data[(frame * self.height + y) * self.width + x] = v;
    }

    /// Fraction of pixels equal to 1 in frame `k`.
    pub fn coverage(&self, k: usize) -> f64 {
        let f = self.frame(k);
        f.iter().filter(|&&v| v >= 0.5).count() as f64 / f.len() as f64
    }
}

/// Latent block `f × c × h × w`. Zero frames is a valid, empty block.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBlock {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentBlock {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_len("latent", &[frames, channels, height, width], data.len())?;
        Ok(Self {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(f, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(f, c, y, x);
        self.data[i] = v;
    }

    /// Latent frame `k` as `c × h × w`.
    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.channels * self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    /// Frames `range` as a new block.
    pub fn frames_slice(&self, range: std::ops::Range<usize>) -> LatentBlock {
        let n = self.channels * self.height * self.width;
        LatentBlock {
            frames: range.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data[range.start * n..range.end * n].to_vec(),
        }
    }

    /// Appends the frames of `other` along the frame axis.
    pub fn concat_frames(&self, other: &LatentBlock) -> Result<LatentBlock> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(Error::dims("concat_frames", &self.dims(), &other.dims()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(LatentBlock {
            frames: self.frames + other.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_latent_block() {
        let z = LatentBlock::zeros(0, 4, 2, 2);
        assert!(z.data().is_empty());
        let w = LatentBlock::zeros(2, 4, 2, 2);
        assert_eq!(z.concat_frames(&w).unwrap().frames(), 2);
    }

    #[test]
    fn concat_checks_cells() {
        let a = LatentBlock::zeros(1, 4, 2, 2);
        let b = LatentBlock::zeros(1, 4, 2, 3);
        assert!(matches!(a.concat_frames(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn video_indexing() {
        let mut v = Video::filled(2, 3, 4, 0.0);
        v.set(1, 2, 2, 3, 1.0);
        assert_eq!(*v.data().last().unwrap(), 1.0);
        assert_eq!(v.frame_video(1).get(0, 2, 2, 3), 1.0);
        assert!(Video::new(1, 2, 2, vec![0.0; 11]).is_err());
    }

    #[test]
    fn mask_coverage() {
        let mut m = Mask::zeros(1, 2, 2);
        m.set(0, 1, 1, 1.0);
        assert_eq!(m.coverage(0), 0.25);
    }
}
