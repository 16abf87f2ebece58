//! Deterministic synthetic bi-temporal scene generator with ground-truth
//! change masks, nuisance-change injection, and inference-time degradations.
//!
//! A sample is a pre/post RGB pair plus a binary mask that marks exactly the
//! footprints of inserted/deleted/recolored objects. Nuisance events
//! (brightness/contrast shift, background texture re-draw, mild global blur)
//! alter pixels but never the mask — the sparse-true-change-amid-nuisance
//! regime the gate has to learn to filter.

use crate::imageio::{self, Image, ImageError};
use crate::par::par_map;
use crate::rng::CounterRng;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const BLUR_LEVELS: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.02, 0.05, 0.1, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradeKind {
    GaussianBlur,
    GaussianNoise,
}

impl DegradeKind {
    pub fn name(&self) -> &'static str {
        match self {
            DegradeKind::GaussianBlur => "gaussian_blur",
            DegradeKind::GaussianNoise => "gaussian_noise",
        }
    }
    pub fn levels(&self) -> &'static [f64; 5] {
        match self {
            DegradeKind::GaussianBlur => &BLUR_LEVELS,
            DegradeKind::GaussianNoise => &NOISE_LEVELS,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DegradeSpec {
    pub kind: DegradeKind,
    /// Blur: σ in pixels. Noise: σ in intensity units. 0 = identity.
    pub level: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn parse(s: &str) -> Option<Difficulty> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Some(Difficulty::Easy),
            "hard" => Some(Difficulty::Hard),
            _ => None,
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One bi-temporal pair. `pre`/`post` are planar `[3, H, W]` in [0, 1];
/// `mask` is `[H, W]` with 1 = changed.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub width: usize,
    pub height: usize,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub mask: Vec<u8>,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed derived from the corpus seed and a global sample index,
/// so parallel and serial generation agree bitwise.
pub fn sample_seed(corpus_seed: u64, index: u64) -> u64 {
    splitmix(corpus_seed ^ splitmix(index.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Event {
    Static,
    Insert,
    Delete,
    Recolor,
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    color_post: [f64; 3],
    event: Event,
}

impl Object {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        match self.shape {
            Shape::Rect => dx.abs() <= self.rx && dy.abs() <= self.ry,
            Shape::Ellipse => (dx / self.rx).powi(2) + (dy / self.ry).powi(2) <= 1.0,
        }
    }
}

fn draw_object(img: &mut [f64], h: usize, w: usize, obj: &Object, color: &[f64; 3]) {
    let x0 = ((obj.cx - obj.rx).floor().max(0.0)) as usize;
    let x1 = (((obj.cx + obj.rx).ceil()) as usize).min(w);
    let y0 = ((obj.cy - obj.ry).floor().max(0.0)) as usize;
    let y1 = (((obj.cy + obj.ry).ceil()) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            if obj.covers(x, y) {
                for c in 0..3 {
                    img[c * h * w + y * w + x] = color[c];
                }
            }
        }
    }
}

/// Bilinearly upsampled low-resolution random field, one plane per channel.
fn background(rng: &mut CounterRng, h: usize, w: usize) -> Vec<f64> {
    const G: usize = 5;
    let grid: Vec<f64> = (0..3 * G * G).map(|_| rng.uniform(0.15, 0.85)).collect();
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            let gy = y as f64 / h as f64 * (G - 1) as f64;
            let y0 = gy.floor() as usize;
            let y1 = (y0 + 1).min(G - 1);
            let fy = gy - y0 as f64;
            for x in 0..w {
                let gx = x as f64 / w as f64 * (G - 1) as f64;
                let x0 = gx.floor() as usize;
                let x1 = (x0 + 1).min(G - 1);
                let fx = gx - x0 as f64;
                let g = |yy: usize, xx: usize| grid[c * G * G + yy * G + xx];
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                img[c * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    img
}

fn clamp_all(img: &mut [f64]) {
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Normalized 1-D Gaussian taps of radius ceil(3σ).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn reflect(i: i64, n: i64) -> usize {
    // symmetric (half-sample) reflection, valid for any offset < n
    let i = if i < 0 { -i - 1 } else { i };
    let i = if i >= n { 2 * n - i - 1 } else { i };
    i.clamp(0, n - 1) as usize
}

/// Separable Gaussian blur with reflect padding, in place.
pub fn blur(img: &mut [f64], channels: usize, h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for c in 0..channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        // horizontal
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let xx = reflect(x as i64 + j as i64 - radius, w as i64);
                    acc += kv * plane[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let yy = reflect(y as i64 + j as i64 - radius, h as i64);
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

/// Inference-time degradation. Level 0 is the bitwise identity.
pub fn degrade(img: &mut [f64], channels: usize, h: usize, w: usize, spec: DegradeSpec, seed: u64) {
    assert!(spec.level >= 0.0, "degradation level must be nonnegative");
    if spec.level == 0.0 {
        return;
    }
    match spec.kind {
        DegradeKind::GaussianBlur => blur(img, channels, h, w, spec.level),
        DegradeKind::GaussianNoise => {
            let mut rng = CounterRng::with_stream(seed, 0xD06);
            for v in img.iter_mut() {
                *v = (*v + spec.level * rng.gaussian()).clamp(0.0, 1.0);
            }
        }
    }
}

/// Generation knobs beyond difficulty; the defaults are what `generate` uses.
#[derive(Clone, Copy, Debug)]
pub struct GenOptions {
    /// Inject nuisance events (brightness/contrast, texture re-draw, blur).
    pub nuisance: bool,
    /// Allow change events. Off → mask is all-zero by construction.
    pub events: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            nuisance: true,
            events: true,
        }
    }
}

/// Generate one sample from its per-sample seed.
///
/// Scene content and nuisance injection draw from independent RNG streams of
/// the same seed, so toggling nuisance leaves the scene (and mask) unchanged.
pub fn generate_one(
    seed: u64,
    h: usize,
    w: usize,
    difficulty: Difficulty,
    opt: GenOptions,
) -> SamplePair {
    assert!(h >= 32 && w >= 32, "degenerate extents (min 32x32)");
    let mut scene = CounterRng::with_stream(seed, 0);
    let mut nui = CounterRng::with_stream(seed, 1);
    let hw = h * w;

    let base = background(&mut scene, h, w);
    let texture_amp = 0.04;
    let mut texture: Vec<f64> = (0..3 * hw)
        .map(|_| scene.uniform(-texture_amp, texture_amp))
        .collect();

    // Propose objects until the changed fraction lands in the target band
    // (easy mode only; the band is the class-imbalance regime of interest).
    let (lo, hi) = match difficulty {
        Difficulty::Easy => (0.03, 0.25),
        Difficulty::Hard => (0.005, 0.35),
    };
    let mut objects = Vec::new();
    let mut mask = vec![0u8; hw];
    for _attempt in 0..64 {
        objects.clear();
        let n_obj = 1 + scene.below(4) as usize;
        for _ in 0..n_obj {
            let shape = if scene.below(2) == 0 {
                Shape::Rect
            } else {
                Shape::Ellipse
            };
            let rx = scene.uniform(0.10, 0.22) * w as f64;
            let ry = scene.uniform(0.10, 0.22) * h as f64;
            let cx = scene.uniform(0.15, 0.85) * w as f64;
            let cy = scene.uniform(0.15, 0.85) * h as f64;
            let color = [scene.next_f64(), scene.next_f64(), scene.next_f64()];
            let mut color_post = color;
            let event = if !opt.events {
                Event::Static
            } else {
                match scene.below(4) {
                    0 => Event::Static,
                    1 => Event::Insert,
                    2 => Event::Delete,
                    _ => Event::Recolor,
                }
            };
            if event == Event::Recolor {
                loop {
                    color_post = [scene.next_f64(), scene.next_f64(), scene.next_f64()];
                    let dist: f64 = color
                        .iter()
                        .zip(&color_post)
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    if dist > 0.3 {
                        break;
                    }
                }
            }
            objects.push(Object {
                shape,
                cx,
                cy,
                rx: rx.max(2.0),
                ry: ry.max(2.0),
                color,
                color_post,
                event,
            });
        }
        mask.iter_mut().for_each(|m| *m = 0);
        for obj in &objects {
            if obj.event == Event::Static {
                continue;
            }
            let x0 = ((obj.cx - obj.rx).floor().max(0.0)) as usize;
            let x1 = (((obj.cx + obj.rx).ceil()) as usize).min(w);
            let y0 = ((obj.cy - obj.ry).floor().max(0.0)) as usize;
            let y1 = (((obj.cy + obj.ry).ceil()) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if obj.covers(x, y) {
                        mask[y * w + x] = 1;
                    }
                }
            }
        }
        if !opt.events {
            break;
        }
        let frac = mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / hw as f64;
        if frac >= lo && frac <= hi {
            break;
        }
    }

    let compose = |texture: &[f64], epoch_post: bool| -> Vec<f64> {
        let mut img = base.clone();
        for (v, t) in img.iter_mut().zip(texture) {
            *v = (*v + t).clamp(0.0, 1.0);
        }
        for obj in &objects {
            let present = match obj.event {
                Event::Static | Event::Recolor => true,
                Event::Insert => epoch_post,
                Event::Delete => !epoch_post,
            };
            if present {
                let color = if epoch_post && obj.event == Event::Recolor {
                    &obj.color_post
                } else {
                    &obj.color
                };
                draw_object(&mut img, h, w, obj, color);
            }
        }
        img
    };

    let mut pre = compose(&texture, false);
    // Hard mode re-draws the background texture between epochs (nuisance).
    if opt.nuisance && difficulty == Difficulty::Hard {
        for t in texture.iter_mut() {
            *t = nui.uniform(-texture_amp, texture_amp);
        }
    }
    let mut post = compose(&texture, true);

    if opt.nuisance {
        let (b_amp, c_lo, c_hi) = match difficulty {
            Difficulty::Easy => (0.08, 0.92, 1.08),
            Difficulty::Hard => (0.15, 0.82, 1.18),
        };
        let b = nui.uniform(-b_amp, b_amp);
        let c = nui.uniform(c_lo, c_hi);
        for v in post.iter_mut() {
            *v = ((*v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
        }
        if difficulty == Difficulty::Hard {
            // mild global blur on one epoch
            let sigma = nui.uniform(0.3, 0.8);
            let target = if nui.below(2) == 0 { &mut pre } else { &mut post };
            blur(target, 3, h, w, sigma);
        }
    }
    clamp_all(&mut pre);
    clamp_all(&mut post);

    SamplePair {
        width: w,
        height: h,
        pre,
        post,
        mask,
        seed,
    }
}

/// Generate `n` samples; parallel across indices, bitwise equal to serial.
pub fn generate(seed: u64, n: usize, h: usize, w: usize, difficulty: Difficulty) -> Vec<SamplePair> {
    par_map(n, |i| {
        generate_one(
            sample_seed(seed, i as u64),
            h,
            w,
            difficulty,
            GenOptions::default(),
        )
    })
}

pub fn planar_to_image(data: &[f64], h: usize, w: usize) -> Image {
    assert_eq!(data.len(), 3 * h * w);
    let mut img = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (data[c * h * w + y * w + x] * 255.0).round().clamp(0.0, 255.0);
                img.data[(y * w + x) * 3 + c] = v as u8;
            }
        }
    }
    img
}

pub fn mask_to_image(mask: &[u8], h: usize, w: usize) -> Image {
    assert_eq!(mask.len(), h * w);
    Image {
        width: w,
        height: h,
        channels: 1,
        data: mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect(),
    }
}

/// Planar `[3, H, W]` f32 in [0,1] from an interleaved RGB image.
pub fn image_to_planar(img: &Image) -> Vec<f32> {
    assert_eq!(img.channels, 3);
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[c * h * w + y * w + x] = img.data[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    out
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub counts: [usize; 3],
    pub difficulty: Difficulty,
}

/// Write a full corpus as `root/{split}/{pre,post,mask}/NNNNNN.{ppm,pgm}` plus
/// a per-split `manifest.txt` of `index seed difficulty` lines. Sample seeds
/// are derived from a global index, so splits never overlap.
pub fn write_dataset(spec: &DatasetSpec) -> Result<(), ImageError> {
    let mut global = 0u64;
    for (si, split) in SPLITS.iter().enumerate() {
        let n = spec.counts[si];
        let dir = spec.root.join(split);
        for sub in ["pre", "post", "mask"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let seeds: Vec<u64> = (0..n).map(|i| sample_seed(spec.seed, global + i as u64)).collect();
        global += n as u64;
        let samples = par_map(n, |i| {
            generate_one(
                seeds[i],
                spec.height,
                spec.width,
                spec.difficulty,
                GenOptions::default(),
            )
        });
        let mut manifest = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let name = format!("{i:06}");
            imageio::write(
                &dir.join("pre").join(format!("{name}.ppm")),
                &planar_to_image(&s.pre, spec.height, spec.width),
            )?;
            imageio::write(
                &dir.join("post").join(format!("{name}.ppm")),
                &planar_to_image(&s.post, spec.height, spec.width),
            )?;
            imageio::write(
                &dir.join("mask").join(format!("{name}.pgm")),
                &mask_to_image(&s.mask, spec.height, spec.width),
            )?;
            writeln!(manifest, "{i} {} {}", s.seed, spec.difficulty)?;
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
    }
    Ok(())
}

/// One split of an on-disk corpus.
pub struct Dataset {
    pub dir: PathBuf,
    pub indices: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

/// Loaded sample in model form: planar f32 streams plus the binary mask.
pub struct LoadedSample {
    pub pre: Vec<f32>,
    pub post: Vec<f32>,
    pub mask: Vec<u8>,
}

impl SamplePair {
    /// Model-ready form, quantized through 8 bits exactly as the on-disk
    /// pipeline would be.
    pub fn loaded(&self) -> LoadedSample {
        let q = |v: &f64| (v * 255.0).round().clamp(0.0, 255.0) as f32 / 255.0;
        LoadedSample {
            pre: self.pre.iter().map(q).collect(),
            post: self.post.iter().map(q).collect(),
            mask: self.mask.clone(),
        }
    }
}

impl Dataset {
    pub fn open(root: &Path, split: &str) -> Result<Dataset, ImageError> {
        let dir = root.join(split);
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut indices = Vec::new();
        for line in manifest.lines() {
            let idx: usize = line
                .split_whitespace()
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| ImageError::Format(format!("bad manifest line: {line}")))?;
            indices.push(idx);
        }
        if indices.is_empty() {
            return Err(ImageError::Format(format!(
                "empty manifest in {}",
                dir.display()
            )));
        }
        let probe = imageio::read(&dir.join("pre").join(format!("{:06}.ppm", indices[0])))?;
        Ok(Dataset {
            dir,
            indices,
            width: probe.width,
            height: probe.height,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<LoadedSample, ImageError> {
        let name = format!("{:06}", self.indices[i]);
        let pre = imageio::read(&self.dir.join("pre").join(format!("{name}.ppm")))?;
        let post = imageio::read(&self.dir.join("post").join(format!("{name}.ppm")))?;
        let mask = imageio::read(&self.dir.join("mask").join(format!("{name}.pgm")))?;
        if pre.width != self.width
            || pre.height != self.height
            || post.width != self.width
            || post.height != self.height
            || mask.width != self.width
            || mask.height != self.height
        {
            return Err(ImageError::Format(format!("shape mismatch in sample {name}")));
        }
        Ok(LoadedSample {
            pre: image_to_planar(&pre),
            post: image_to_planar(&post),
            mask: imageio::to_binary_mask(&mask),
        })
    }
}
