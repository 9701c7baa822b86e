//! Dataset types, the procedural synthetic generator, and image I/O.
//!
//! Images are 3×128×64 RGB in [0,1]. On disk the naming convention is
//! `<identity>_<camera>_<index>.png` (or `.ppm`); labels live in the
//! filename, there is no sidecar manifest.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::extractor::{INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled image.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Tensor<Real>,
    pub identity: u32,
    pub camera: u32,
    /// Set by the synthetic generator on heavily occluded renders.
    pub occluded: bool,
}

/// Sample collection with identity-level split tags. An identity is
/// always wholly inside one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    splits: BTreeMap<u32, Split>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        let mut splits = BTreeMap::new();
        for s in &samples {
            splits.entry(s.identity).or_insert(Split::Train);
        }
        Dataset { samples, splits }
    }

    pub fn identities(&self) -> Vec<u32> {
        self.splits.keys().copied().collect()
    }

    pub fn split_of(&self, identity: u32) -> Option<Split> {
        self.splits.get(&identity).copied()
    }

    pub fn set_split(&mut self, identity: u32, split: Split) {
        self.splits.insert(identity, split);
    }

    /// Deterministically partitions identities into train/val/test.
    pub fn assign_splits(&mut self, train_frac: f64, val_frac: f64, seed: u64) {
        let mut ids = self.identities();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates with the dataset-local stream
        for i in (1..ids.len()).rev() {
            let j = rng.gen_range(0..=i);
            ids.swap(i, j);
        }
        let n = ids.len();
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = ((n as f64) * val_frac).round() as usize;
        for (pos, id) in ids.into_iter().enumerate() {
            let split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            self.splits.insert(id, split);
        }
    }

    /// Sample indices belonging to a split, in storage order.
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| self.splits.get(&s.identity) == Some(&split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Sorted camera ids present in the dataset.
    pub fn cameras(&self) -> Vec<u32> {
        let mut cams: Vec<u32> = self.samples.iter().map(|s| s.camera).collect();
        cams.sort_unstable();
        cams.dedup();
        cams
    }
}

/// Parameters of the procedural generator. Each identity is a triple of
/// band colors (top/middle/bottom of the body); each camera applies its
/// own color tint; `outlier_fraction` of each identity's images get
/// occlusion rectangles that emulate hard positive cases.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub identities: usize,
    pub images_per_camera: usize,
    pub cameras: usize,
    pub tint_strength: f64,
    pub jitter: usize,
    pub noise: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            identities: 20,
            images_per_camera: 3,
            cameras: 2,
            tint_strength: 0.15,
            jitter: 3,
            noise: 0.03,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.images_per_camera == 0 || self.cameras < 2 {
            return Err(Error::Precondition(
                "need at least 1 identity, 1 image per camera and 2 cameras".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Precondition(format!(
                "outlier_fraction {} outside [0,1]",
                self.outlier_fraction
            )));
        }
        Ok(())
    }
}

const BODY_TOP: usize = 14;
const BODY_BOTTOM: usize = 114;
const BODY_LEFT: usize = 14;
const BODY_RIGHT: usize = 50;

/// Renders the dataset described by `spec`. Bit-identical for equal specs.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // per-camera RGB gains
    let tints: Vec<[f64; 3]> = (0..spec.cameras)
        .map(|_| {
            [
                1.0 + rng.gen_range(-spec.tint_strength..=spec.tint_strength),
                1.0 + rng.gen_range(-spec.tint_strength..=spec.tint_strength),
                1.0 + rng.gen_range(-spec.tint_strength..=spec.tint_strength),
            ]
        })
        .collect();

    let mut samples = Vec::new();
    for identity in 0..spec.identities as u32 {
        // three body-band colors, kept away from the gray background
        let bands: [[f64; 3]; 3] = std::array::from_fn(|_| {
            std::array::from_fn(|_| rng.gen_range(0.05..0.95))
        });
        let n_images = spec.images_per_camera * spec.cameras;
        let n_occluded = (spec.outlier_fraction * n_images as f64).round() as usize;
        let mut occlusion_order: Vec<usize> = (0..n_images).collect();
        for i in (1..occlusion_order.len()).rev() {
            let j = rng.gen_range(0..=i);
            occlusion_order.swap(i, j);
        }
        let occluded_set: Vec<usize> = occlusion_order.into_iter().take(n_occluded).collect();

        let mut image_counter = 0usize;
        for camera in 0..spec.cameras as u32 {
            for _ in 0..spec.images_per_camera {
                let occluded = occluded_set.contains(&image_counter);
                let dx = if spec.jitter > 0 {
                    rng.gen_range(-(spec.jitter as i64)..=spec.jitter as i64)
                } else {
                    0
                };
                let dy = if spec.jitter > 0 {
                    rng.gen_range(-(spec.jitter as i64)..=spec.jitter as i64)
                } else {
                    0
                };
                let mut pixels = vec![0.45f64; INPUT_CHANNELS * INPUT_HEIGHT * INPUT_WIDTH];
                render_body(&mut pixels, &bands, dy, dx);
                if occluded {
                    let n_rects = rng.gen_range(2..=3);
                    for _ in 0..n_rects {
                        let r0 = rng.gen_range(BODY_TOP..BODY_BOTTOM - 12);
                        let c0 = rng.gen_range(BODY_LEFT..BODY_RIGHT - 8);
                        let rh = rng.gen_range(12..30.min(BODY_BOTTOM - r0));
                        let cw = rng.gen_range(8..16.min(BODY_RIGHT - c0).max(9));
                        let shade = rng.gen_range(0.0..0.2);
                        for r in r0..r0 + rh {
                            for c in c0..c0 + cw {
                                for ch in 0..INPUT_CHANNELS {
                                    pixels[ch * INPUT_HEIGHT * INPUT_WIDTH + r * INPUT_WIDTH + c] =
                                        shade;
                                }
                            }
                        }
                    }
                }
                // camera tint + pixel noise, then clamp
                let tint = &tints[camera as usize];
                for ch in 0..INPUT_CHANNELS {
                    for i in 0..INPUT_HEIGHT * INPUT_WIDTH {
                        let idx = ch * INPUT_HEIGHT * INPUT_WIDTH + i;
                        let mut v = pixels[idx] * tint[ch];
                        if spec.noise > 0.0 {
                            v += rng.gen_range(-spec.noise..=spec.noise);
                        }
                        pixels[idx] = v.clamp(0.0, 1.0);
                    }
                }
                samples.push(ImageSample {
                    pixels: Tensor::from_vec(
                        &[INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH],
                        pixels,
                    )?,
                    identity,
                    camera,
                    occluded,
                });
                image_counter += 1;
            }
        }
    }
    Ok(Dataset::new(samples))
}

fn render_body(pixels: &mut [f64], bands: &[[f64; 3]; 3], dy: i64, dx: i64) {
    let band_height = (BODY_BOTTOM - BODY_TOP) / 3;
    for (bi, color) in bands.iter().enumerate() {
        let r_start = BODY_TOP + bi * band_height;
        let r_end = if bi == 2 { BODY_BOTTOM } else { r_start + band_height };
        for r in r_start..r_end {
            let rr = r as i64 + dy;
            if rr < 0 || rr >= INPUT_HEIGHT as i64 {
                continue;
            }
            for c in BODY_LEFT..BODY_RIGHT {
                let cc = c as i64 + dx;
                if cc < 0 || cc >= INPUT_WIDTH as i64 {
                    continue;
                }
                for ch in 0..INPUT_CHANNELS {
                    pixels[ch * INPUT_HEIGHT * INPUT_WIDTH
                        + rr as usize * INPUT_WIDTH
                        + cc as usize] = color[ch];
                }
            }
        }
    }
}

/// Writes every sample as `<identity>_<camera>_<index>.png` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut counters: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for s in &dataset.samples {
        let idx = counters.entry((s.identity, s.camera)).or_insert(0);
        let name = format!("{:04}_{}_{:02}.png", s.identity, s.camera, idx);
        *idx += 1;
        let mut buf = image::RgbImage::new(INPUT_WIDTH as u32, INPUT_HEIGHT as u32);
        let d = s.pixels.data();
        for r in 0..INPUT_HEIGHT {
            for c in 0..INPUT_WIDTH {
                let px: [u8; 3] = std::array::from_fn(|ch| {
                    (d[ch * INPUT_HEIGHT * INPUT_WIDTH + r * INPUT_WIDTH + c] * 255.0)
                        .round()
                        .clamp(0.0, 255.0) as u8
                });
                buf.put_pixel(c as u32, r as u32, image::Rgb(px));
            }
        }
        buf.save(dir.join(name))?;
    }
    Ok(())
}

/// Decoded RGB image of arbitrary resolution, values in [0,1].
struct RawImage {
    width: usize,
    height: usize,
    /// channel-major, row-major within channel
    data: Vec<f64>,
}

fn decode_png(path: &Path) -> Result<RawImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * w * h + y as usize * w + x as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(RawImage { width: w, height: h, data })
}

fn decode_ppm(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(Error::Format(format!("unsupported ppm magic {magic}")));
    }
    let w: usize = token()?.parse().map_err(|_| Error::Format("bad ppm width".into()))?;
    let h: usize = token()?.parse().map_err(|_| Error::Format("bad ppm height".into()))?;
    let maxval: usize = token()?.parse().map_err(|_| Error::Format("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported ppm maxval {maxval}")));
    }
    pos += 1; // single whitespace after header
    if bytes.len() < pos + 3 * w * h {
        return Err(Error::Format("truncated ppm payload".into()));
    }
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[ch * w * h + y * w + x] =
                    bytes[pos + 3 * (y * w + x) + ch] as f64 / 255.0;
            }
        }
    }
    Ok(RawImage { width: w, height: h, data })
}

fn resample_bilinear(raw: &RawImage) -> Tensor<Real> {
    let (sw, sh) = (raw.width, raw.height);
    let mut out = vec![0.0; INPUT_CHANNELS * INPUT_HEIGHT * INPUT_WIDTH];
    for ch in 0..INPUT_CHANNELS {
        for r in 0..INPUT_HEIGHT {
            for c in 0..INPUT_WIDTH {
                // map the output pixel center into source coordinates
                let sy = ((r as f64 + 0.5) * sh as f64 / INPUT_HEIGHT as f64 - 0.5)
                    .clamp(0.0, (sh - 1) as f64);
                let sx = ((c as f64 + 0.5) * sw as f64 / INPUT_WIDTH as f64 - 0.5)
                    .clamp(0.0, (sw - 1) as f64);
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(sh - 1);
                let x1 = (x0 + 1).min(sw - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let at = |y: usize, x: usize| raw.data[ch * sw * sh + y * sw + x];
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                out[ch * INPUT_HEIGHT * INPUT_WIDTH + r * INPUT_WIDTH + c] = v;
            }
        }
    }
    Tensor::from_vec(&[INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH], out).expect("fixed shape")
}

fn parse_name(stem: &str) -> Option<(u32, u32)> {
    let mut parts = stem.split('_');
    let identity = parts.next()?.parse().ok()?;
    let camera = parts.next()?.parse().ok()?;
    let _index: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((identity, camera))
}

/// Loads all PNG/PPM images under `root`. Malformed filenames and
/// undecodable files are skipped and reported in the warning list.
pub fn load_dataset(root: &Path) -> Result<(Dataset, Vec<String>)> {
    let mut entries: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    entries.sort();
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for path in entries {
        let ext = match path.extension().and_then(|e| e.to_str()) {
            Some(e) => e.to_ascii_lowercase(),
            None => continue,
        };
        if ext != "png" && ext != "ppm" {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let (identity, camera) = match parse_name(stem) {
            Some(lbl) => lbl,
            None => {
                warnings.push(format!("skipped malformed filename: {}", path.display()));
                continue;
            }
        };
        let raw = if ext == "png" { decode_png(&path) } else { decode_ppm(&path) };
        let raw = match raw {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("failed to decode {}: {e}", path.display()));
                continue;
            }
        };
        samples.push(ImageSample {
            pixels: resample_bilinear(&raw),
            identity,
            camera,
            occluded: false,
        });
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable images under {}",
            root.display()
        )));
    }
    Ok((Dataset::new(samples), warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts() {
        let spec = SynthSpec {
            identities: 10,
            images_per_camera: 3,
            cameras: 2,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.samples.len(), 60);
        assert_eq!(ds.identities().len(), 10);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SynthSpec { identities: 3, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.pixels.data(), sb.pixels.data());
        }
    }

    #[test]
    fn zero_jitter_makes_same_camera_images_identical() {
        let spec = SynthSpec {
            identities: 2,
            images_per_camera: 3,
            cameras: 2,
            tint_strength: 0.0,
            jitter: 0,
            noise: 0.0,
            outlier_fraction: 0.0,
            seed: 5,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let imgs: Vec<&ImageSample> = ds
            .samples
            .iter()
            .filter(|s| s.identity == 0 && s.camera == 0)
            .collect();
        assert!(imgs.len() >= 2);
        for other in &imgs[1..] {
            assert_eq!(imgs[0].pixels.data(), other.pixels.data());
        }
    }

    #[test]
    fn outlier_fraction_is_respected_per_identity() {
        let spec = SynthSpec {
            identities: 8,
            images_per_camera: 5,
            cameras: 2,
            outlier_fraction: 0.2,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for id in ds.identities() {
            let imgs: Vec<&ImageSample> =
                ds.samples.iter().filter(|s| s.identity == id).collect();
            let occluded = imgs.iter().filter(|s| s.occluded).count();
            let expected = (0.2 * imgs.len() as f64).round() as i64;
            assert!((occluded as i64 - expected).abs() <= 1, "identity {id}: {occluded}");
        }
    }

    #[test]
    fn split_assignment_is_disjoint_by_identity() {
        let spec = SynthSpec { identities: 20, ..Default::default() };
        let mut ds = generate_synthetic(&spec).unwrap();
        ds.assign_splits(0.6, 0.2, 42);
        let mut counts = [0usize; 3];
        for id in ds.identities() {
            match ds.split_of(id).unwrap() {
                Split::Train => counts[0] += 1,
                Split::Val => counts[1] += 1,
                Split::Test => counts[2] += 1,
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), 20);
        assert_eq!(counts[0], 12);
        // every sample of one identity carries the identity's split
        for s in &ds.samples {
            assert!(ds.split_of(s.identity).is_some());
        }
    }

    #[test]
    fn filename_parse_contract() {
        assert_eq!(parse_name("0003_1_07"), Some((3, 1)));
        assert_eq!(parse_name("12_0_3"), Some((12, 0)));
        assert_eq!(parse_name("readme"), None);
        assert_eq!(parse_name("a_b_c"), None);
    }

    #[test]
    fn save_load_round_trip_preserves_labels_and_shape() {
        let spec = SynthSpec { identities: 3, images_per_camera: 2, ..Default::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let (loaded, warnings) = load_dataset(dir.path()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(loaded.samples.len(), ds.samples.len());
        let labels = |d: &Dataset| {
            let mut v: Vec<(u32, u32)> =
                d.samples.iter().map(|s| (s.identity, s.camera)).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(labels(&loaded), labels(&ds));
        for s in &loaded.samples {
            assert_eq!(s.pixels.shape(), &[3, 128, 64]);
            assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn load_resamples_other_resolutions() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(128, 256, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, 100])
        });
        img.save(dir.path().join("0001_0_00.png")).unwrap();
        let (ds, _) = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples[0].pixels.shape(), &[3, 128, 64]);
    }

    #[test]
    fn load_skips_malformed_names_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::new(4, 4);
        img.save(dir.path().join("0001_0_00.png")).unwrap();
        img.save(dir.path().join("notalabel.png")).unwrap();
        let (ds, warnings) = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn ppm_decode_works() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]);
        std::fs::write(dir.path().join("0005_1_00.ppm"), bytes).unwrap();
        let (ds, _) = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples[0].identity, 5);
        assert_eq!(ds.samples[0].camera, 1);
        assert_eq!(ds.samples[0].pixels.shape(), &[3, 128, 64]);
    }
}
