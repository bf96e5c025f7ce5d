//! Images, augmentation, and the procedural datasets.
//!
//! Pixels live in [−1, 1]; files hold 8-bit RGB with `x = byte/127.5 − 1`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, ImageError, Result};
use crate::tensor::Tensor;

/// File name of a dataset manifest inside its directory.
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[3, H, W]` in [−1, 1].
    pub pixels: Tensor<f32>,
    pub label: Option<usize>,
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl ImageSample {
    pub fn new(pixels: Tensor<f32>, label: Option<usize>) -> Result<Self> {
        match pixels.shape() {
            [3, _, _] => Ok(ImageSample { pixels, label }),
            s => Err(Error::shape(format!("image must be [3, H, W], got {s:?}"))),
        }
    }

    /// Builds a sample from interleaved RGB bytes.
    pub fn from_rgb_bytes(width: usize, height: usize, rgb: &[u8], label: Option<usize>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::shape("RGB buffer length does not match dimensions"));
        }
        let plane = width * height;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, px) in rgb.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = byte_to_unit(px[c]);
            }
        }
        Self::new(Tensor::new(&[3, height, width], data, false)?, label)
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb_bytes(&self) -> Vec<u8> {
        let plane = self.width() * self.height();
        let d = self.pixels.data();
        (0..plane)
            .flat_map(|p| (0..3).map(move |c| unit_to_byte(d[c * plane + p])))
            .collect()
    }

    fn map_channels(&self, f: impl Fn(usize) -> usize) -> ImageSample {
        let plane = self.width() * self.height();
        let d = self.pixels.data();
        let mut out = vec![0.0; d.len()];
        for c in 0..3 {
            out[c * plane..(c + 1) * plane].copy_from_slice(&d[f(c) * plane..(f(c) + 1) * plane]);
        }
        ImageSample {
            pixels: Tensor::new(self.pixels.shape(), out, false).expect("same shape"),
            label: self.label,
        }
    }
}

pub fn load_image(path: &Path) -> Result<ImageSample> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Image(ImageError::Missing(path.to_path_buf())),
        _ => Error::io(path, e),
    })?;
    let corrupt = |e: png::DecodingError| {
        Error::Image(ImageError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(ImageError::NotRgb {
            path: path.to_path_buf(),
            found: format!("{:?} at {:?}", info.color_type, info.bit_depth),
        }));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h * 3)];
    let frame = reader.next_frame(&mut buf).map_err(corrupt)?;
    buf.truncate(frame.buffer_size());
    ImageSample::from_rgb_bytes(w, h, &buf, None)
}

pub fn save_image(sample: &ImageSample, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), sample.width() as u32, sample.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(&sample.to_rgb_bytes()).map_err(io)?;
    writer.finish().map_err(io)
}

/// The five non-identity orderings of the RGB axes.
pub const CHANNEL_SWAPS: [[usize; 3]; 5] = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Output channel `c` takes input channel `perm[c]`.
pub fn permute_channels(img: &ImageSample, perm: [usize; 3]) -> ImageSample {
    img.map_channels(|c| perm[c])
}

pub fn colour_swap<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R) -> ImageSample {
    let perm = CHANNEL_SWAPS[rng.random_range(0..CHANNEL_SWAPS.len())];
    permute_channels(img, perm)
}

pub fn distinct_colours(img: &ImageSample) -> usize {
    img.to_rgb_bytes()
        .chunks(3)
        .map(|p| [p[0], p[1], p[2]])
        .collect::<HashSet<_>>()
        .len()
}

/// Sets one colour axis to 255 everywhere, trying axes in random order and
/// accepting the first whose result keeps the number of distinct 8-bit
/// colours unchanged. Returns the input when no axis qualifies.
pub fn colour_shift<R: Rng + ?Sized>(img: &ImageSample, rng: &mut R) -> ImageSample {
    let bytes = img.to_rgb_bytes();
    let before = distinct_colours(img);
    let mut order = [0usize, 1, 2];
    order.shuffle(rng);
    for c in order {
        let after = bytes
            .chunks(3)
            .map(|p| {
                let mut q = [p[0], p[1], p[2]];
                q[c] = 255;
                q
            })
            .collect::<HashSet<_>>()
            .len();
        if after == before {
            let plane = img.width() * img.height();
            let mut out = img.clone();
            out.pixels.data_mut()[c * plane..(c + 1) * plane].fill(1.0);
            return out;
        }
    }
    img.clone()
}

pub fn hflip(img: &ImageSample) -> ImageSample {
    let w = img.width();
    let mut out = img.clone();
    for row in out.pixels.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub enable_swap: bool,
    pub enable_shift: bool,
    pub enable_hflip: bool,
    pub p_swap: f64,
    pub p_shift: f64,
    pub p_hflip: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            enable_swap: true,
            enable_shift: true,
            enable_hflip: true,
            p_swap: 0.5,
            p_shift: 0.5,
            p_hflip: 0.5,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        AugmentationPolicy {
            enable_swap: false,
            enable_shift: false,
            enable_hflip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_swap, self.p_shift, self.p_hflip] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Swap, then shift, then flip; each enabled transform fires independently.
pub fn apply_augmentation<R: Rng + ?Sized>(img: &ImageSample, policy: &AugmentationPolicy, rng: &mut R) -> ImageSample {
    let mut out = img.clone();
    if policy.enable_swap && rng.random::<f64>() < policy.p_swap {
        out = colour_swap(&out, rng);
    }
    if policy.enable_shift && rng.random::<f64>() < policy.p_shift {
        out = colour_shift(&out, rng);
    }
    if policy.enable_hflip && rng.random::<f64>() < policy.p_hflip {
        out = hflip(&out);
    }
    out
}

/// Stacks same-sized samples into `[B, 3, H, W]`.
pub fn stack_images(samples: &[&ImageSample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
    let shape = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.pixels.numel());
    for s in samples {
        if s.pixels.shape() != shape.as_slice() {
            return Err(Error::shape("images in a batch differ in size"));
        }
        data.extend_from_slice(s.pixels.data());
    }
    Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data, false)
}

/// Splits a `[B, 3, H, W]` batch back into samples.
pub fn unstack_images(batch: &Tensor<f32>) -> Result<Vec<ImageSample>> {
    let [b, c, h, w] = *batch.shape() else {
        return Err(Error::shape("expected [B, C, H, W]"));
    };
    batch
        .data()
        .chunks(c * h * w)
        .take(b)
        .map(|d| ImageSample::new(Tensor::new(&[c, h, w], d.to_vec(), false)?, None))
        .collect()
}

struct Canvas {
    size: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn white(size: usize) -> Self {
        Canvas {
            size,
            rgb: vec![255; size * size * 3],
        }
    }

    /// Paints every pixel whose centre (in unit coordinates) satisfies `inside`.
    fn fill(&mut self, colour: [u8; 3], inside: impl Fn(f64, f64) -> bool) {
        let s = self.size as f64;
        for y in 0..self.size {
            for x in 0..self.size {
                if inside((x as f64 + 0.5) / s, (y as f64 + 0.5) / s) {
                    self.rgb[(y * self.size + x) * 3..][..3].copy_from_slice(&colour);
                }
            }
        }
    }

    fn into_sample(self, label: Option<usize>) -> ImageSample {
        ImageSample::from_rgb_bytes(self.size, self.size, &self.rgb, label).expect("canvas is consistent")
    }
}

/// A colour with at least one channel well below white.
fn ink<R: Rng + ?Sized>(rng: &mut R, max: u8) -> [u8; 3] {
    let mut c = [rng.random_range(0..=max), rng.random_range(0..=max), rng.random_range(0..=max)];
    let dark = rng.random_range(0..3);
    c[dark] = c[dark].min(max / 2);
    c
}

/// Garment-like silhouettes (rounded torso, two sleeve lobes, neck cut-out)
/// in a random solid colour on a pure white background.
pub fn synth_substrates<R: Rng + ?Sized>(count: usize, size: usize, rng: &mut R) -> Result<Vec<ImageSample>> {
    if size < 8 {
        return Err(Error::shape(format!("substrate size {size} too small")));
    }
    (0..count)
        .map(|_| {
            let mut canvas = Canvas::white(size);
            let colour = ink(rng, 230);
            let sc = rng.random_range(0.7..1.0);
            let cx = 0.5 + rng.random_range(-0.08..0.08);
            let cy = 0.55 + rng.random_range(-0.06..0.06);
            let (hw, hh, r) = (0.22 * sc, 0.3 * sc, 0.06 * sc);
            let torso = move |x: f64, y: f64| {
                let dx = ((x - cx).abs() - (hw - r)).max(0.0);
                let dy = ((y - cy).abs() - (hh - r)).max(0.0);
                dx * dx + dy * dy <= r * r
            };
            let sleeve = move |x: f64, y: f64, side: f64| {
                let ex = (x - (cx + side * 0.27 * sc)) / (0.12 * sc);
                let ey = (y - (cy - 0.17 * sc)) / (0.08 * sc);
                ex * ex + ey * ey <= 1.0
            };
            let neck = move |x: f64, y: f64| {
                let dx = x - cx;
                let dy = y - (cy - hh);
                dx * dx + dy * dy <= (0.07 * sc) * (0.07 * sc)
            };
            canvas.fill(colour, |x, y| (torso(x, y) || sleeve(x, y, -1.0) || sleeve(x, y, 1.0)) && !neck(x, y));
            if rng.random::<bool>() {
                let band = ink(rng, 230);
                let by = cy + rng.random_range(-0.15..0.15) * sc;
                let bh = rng.random_range(0.03..0.08) * sc;
                canvas.fill(band, |x, y| torso(x, y) && !neck(x, y) && (y - by).abs() <= bh);
            }
            Ok(canvas.into_sample(None))
        })
        .collect()
}

/// Names of the built-in shape classes, in label order.
pub const SHAPE_CLASSES: [&str; 8] = [
    "disc",
    "square",
    "triangle",
    "cross",
    "ring",
    "diamond",
    "horizontal-stripes",
    "vertical-stripes",
];

fn shape_contains(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match class {
        0 => d <= r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => {
            // apex up; base at +0.8r
            let t = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        3 => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        4 => d <= r && d >= 0.55 * r,
        5 => dx.abs() + dy.abs() <= r,
        6 | 7 => {
            let along = if class == 6 { dy } else { dx };
            let band = ((along + r) / (0.4 * r)).floor() as i64;
            dx.abs() <= r && dy.abs() <= r && band % 2 == 0
        }
        _ => false,
    }
}

/// `count_per_class` images of each of the first `n_total` shape classes,
/// with jittered colour, position (±15%) and scale (±25%) on white.
pub fn synth_labeled_shapes<R: Rng + ?Sized>(
    count_per_class: usize,
    n_total: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<ImageSample>> {
    if n_total > SHAPE_CLASSES.len() {
        return Err(Error::shape(format!(
            "only {} shape classes exist, {n_total} requested",
            SHAPE_CLASSES.len()
        )));
    }
    if size < 8 {
        return Err(Error::shape(format!("image size {size} too small")));
    }
    let mut out = Vec::with_capacity(count_per_class * n_total);
    for class in 0..n_total {
        for _ in 0..count_per_class {
            let mut canvas = Canvas::white(size);
            let colour = ink(rng, 200);
            let cx = 0.5 + rng.random_range(-0.15..=0.15);
            let cy = 0.5 + rng.random_range(-0.15..=0.15);
            let r = 0.28 * rng.random_range(0.75..=1.25);
            canvas.fill(colour, |x, y| shape_contains(class, x - cx, y - cy, r));
            out.push(canvas.into_sample(Some(class)));
        }
    }
    Ok(out)
}

/// One manifest row: a path relative to the manifest's directory and an
/// optional label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<usize>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = match e.label {
            Some(l) => format!("{}\t{l}\n", e.path.display()),
            None => format!("{}\n", e.path.display()),
        };
        w.write_all(line.as_bytes()).map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let rel = parts.next().unwrap_or_default();
        let label = match parts.next() {
            Some(l) => Some(l.trim().parse().map_err(|_| {
                Error::Config(format!("{}:{}: bad label {l:?}", path.display(), i + 1))
            })?),
            None => None,
        };
        if parts.next().is_some() {
            return Err(Error::Config(format!("{}:{}: too many columns", path.display(), i + 1)));
        }
        out.push(ManifestEntry {
            path: PathBuf::from(rel),
            label,
        });
    }
    Ok(out)
}

/// Resolves a dataset location: either a manifest file or a directory that
/// contains [`MANIFEST_NAME`].
pub fn manifest_path(location: &Path) -> PathBuf {
    if location.is_dir() {
        location.join(MANIFEST_NAME)
    } else {
        location.to_path_buf()
    }
}

pub fn load_dataset(location: &Path) -> Result<Vec<ImageSample>> {
    let manifest = manifest_path(location);
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    read_manifest(&manifest)?
        .into_iter()
        .map(|e| {
            let mut s = load_image(&root.join(&e.path))?;
            s.label = e.label;
            Ok(s)
        })
        .collect()
}

/// Writes samples as `NNNNN.png` plus a manifest into `dir`.
pub fn write_dataset(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = PathBuf::from(format!("{i:05}.png"));
        save_image(s, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            label: s.label,
        });
    }
    write_manifest(&dir.join(MANIFEST_NAME), &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn solid(w: usize, h: usize, px: [u8; 3]) -> ImageSample {
        let rgb: Vec<u8> = (0..w * h).flat_map(|_| px).collect();
        ImageSample::from_rgb_bytes(w, h, &rgb, None).unwrap()
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 5 * 7).map(|i| ((i * 37 % 101) as f32 / 50.5) - 1.0).collect();
        let s = ImageSample::new(Tensor::new(&[3, 5, 7], data, false).unwrap(), None).unwrap();
        let p = dir.path().join("x.png");
        save_image(&s, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in s.pixels.data().iter().zip(back.pixels.data()) {
            assert!((a - b).abs() <= 1.0 / 127.5);
        }
    }

    #[test]
    fn white_png_maps_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        save_image(&solid(4, 4, [255, 255, 255]), &p).unwrap();
        assert!(load_image(&p).unwrap().pixels.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn image_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_image(&missing), Err(Error::Image(ImageError::Missing(_)))));

        let grey = dir.path().join("g.png");
        {
            let f = File::create(&grey).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 64, 128, 255]).unwrap();
        }
        assert!(matches!(load_image(&grey), Err(Error::Image(ImageError::NotRgb { .. }))));

        let junk = dir.path().join("j.png");
        std::fs::write(&junk, b"definitely not a png").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::Image(ImageError::Corrupt { .. }))));
    }

    #[test]
    fn swap_fixes_grey_and_inverts() {
        let mut r = rng(1);
        let g = solid(3, 3, [90, 90, 90]);
        assert_eq!(colour_swap(&g, &mut r), g);
        let red = solid(2, 2, [200, 0, 0]);
        let swapped = colour_swap(&red, &mut r);
        assert!(CHANNEL_SWAPS.iter().any(|&p| permute_channels(&red, p) == swapped));
        for p in CHANNEL_SWAPS {
            let mut inv = [0; 3];
            for (c, &src) in p.iter().enumerate() {
                inv[src] = c;
            }
            assert_eq!(permute_channels(&permute_channels(&red, p), inv), red);
        }
    }

    #[test]
    fn shift_acceptance_rule() {
        let two = ImageSample::from_rgb_bytes(2, 1, &[10, 0, 0, 20, 0, 0], None).unwrap();
        let shifted = colour_shift(&two, &mut rng(2));
        assert_eq!(distinct_colours(&shifted), 2);
        assert_ne!(shifted, two);

        // G → 255 would merge the pixels; R and B are fine.
        let clash = ImageSample::from_rgb_bytes(2, 1, &[10, 0, 0, 10, 255, 0], None).unwrap();
        for seed in 0..20 {
            let out = colour_shift(&clash, &mut rng(seed));
            assert_eq!(distinct_colours(&out), 2);
            let b = out.to_rgb_bytes();
            assert!(b[0] == 255 || b[2] == 255);
        }

        // Every axis collides: unchanged.
        let stuck = ImageSample::from_rgb_bytes(
            3,
            1,
            &[0, 5, 5, 5, 0, 5, 5, 5, 0].iter().zip([255u8; 9]).map(|(a, _)| *a).collect::<Vec<_>>(),
            None,
        )
        .unwrap();
        let stuck2 = ImageSample::from_rgb_bytes(
            6,
            1,
            &[0, 5, 5, 255, 5, 5, 5, 0, 5, 5, 255, 5, 5, 5, 0, 5, 5, 255],
            None,
        )
        .unwrap();
        assert_eq!(distinct_colours(&colour_shift(&stuck, &mut rng(3))), 3);
        assert_eq!(colour_shift(&stuck2, &mut rng(3)), stuck2);

        let one = solid(3, 3, [1, 2, 3]);
        assert_eq!(distinct_colours(&colour_shift(&one, &mut rng(4))), 1);
    }

    #[test]
    fn flip_examples() {
        let mut rgb = Vec::new();
        for _y in 0..2 {
            for x in 0..4 {
                let v = if x < 2 { 0 } else { 255 };
                rgb.extend([v, v, v]);
            }
        }
        let img = ImageSample::from_rgb_bytes(4, 2, &rgb, None).unwrap();
        let f = hflip(&img);
        let b = f.to_rgb_bytes();
        assert_eq!(b[0], 255);
        assert_eq!(b[3 * 3], 0);
        assert_eq!(hflip(&f), img);

        let col_sums = |s: &ImageSample| -> Vec<f32> {
            (0..s.width())
                .map(|x| (0..s.height()).map(|y| s.pixels.data()[y * s.width() + x]).sum())
                .collect()
        };
        let mut rev = col_sums(&img);
        rev.reverse();
        assert_eq!(col_sums(&f), rev);
    }

    #[test]
    fn augmentation_edge_policies() {
        let img = synth_substrates(1, 64, &mut rng(5)).unwrap().remove(0);
        let zero = AugmentationPolicy {
            p_swap: 0.0,
            p_shift: 0.0,
            p_hflip: 0.0,
            ..AugmentationPolicy::default()
        };
        assert_eq!(apply_augmentation(&img, &zero, &mut rng(6)), img);
        let flip = AugmentationPolicy {
            enable_hflip: true,
            p_hflip: 1.0,
            ..AugmentationPolicy::none()
        };
        assert_eq!(apply_augmentation(&img, &flip, &mut rng(7)), hflip(&img));
        assert!(AugmentationPolicy { p_swap: 1.5, ..zero }.validate().is_err());
    }

    #[test]
    fn substrates_have_white_background() {
        let subs = synth_substrates(50, 64, &mut rng(8)).unwrap();
        for s in &subs {
            let b = s.to_rgb_bytes();
            let white = b.chunks(3).filter(|p| p == &[255, 255, 255]).count();
            assert!(white as f64 >= 0.2 * 64.0 * 64.0);
            assert!(white < 64 * 64);
        }
        let other = synth_substrates(50, 64, &mut rng(9)).unwrap();
        assert_ne!(subs, other);
    }

    #[test]
    fn shapes_are_balanced_and_deterministic() {
        let a = synth_labeled_shapes(5, 8, 32, &mut rng(10)).unwrap();
        let b = synth_labeled_shapes(5, 8, 32, &mut rng(10)).unwrap();
        assert_eq!(a, b);
        for c in 0..8 {
            assert_eq!(a.iter().filter(|s| s.label == Some(c)).count(), 5);
        }
        assert!(synth_labeled_shapes(1, 9, 32, &mut rng(10)).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_labeled_shapes(2, 3, 16, &mut rng(11)).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "00000.png\t0");
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
    }
}
