//! Synthetic rain pairs, PNG I/O and the pair manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: [&str; 3] = ["id", "rainy_path", "clean_path"];

/// Streak statistics. Ranges are inclusive `(lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainConfig {
    pub count: (usize, usize),
    /// Segment length in pixels.
    pub length: (f64, f64),
    /// Degrees from vertical.
    pub angle: (f64, f64),
    pub intensity: (f64, f64),
    /// Line width in pixels.
    pub width: f64,
    /// Motion blur length in pixels along the mean streak direction; 0 disables.
    pub blur: f64,
    pub seed: u64,
}

impl Default for RainConfig {
    fn default() -> Self {
        Self {
            count: (20, 40),
            length: (6.0, 14.0),
            angle: (-15.0, 15.0),
            intensity: (0.25, 0.6),
            width: 1.2,
            blur: 3.0,
            seed: 0,
        }
    }
}

impl RainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.count.0 <= self.count.1
            && self.length.0 <= self.length.1
            && self.length.0 >= 0.0
            && self.angle.0 <= self.angle.1
            && self.intensity.0 <= self.intensity.1
            && self.intensity.0 >= 0.0
            && self.intensity.1 <= 1.0
            && self.width > 0.0
            && self.blur >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid rain configuration {self:?}")))
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Additive streak layer `[H,W]` before clamping.
pub fn rain_layer(h: usize, w: usize, cfg: &RainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layer = vec![0.0f64; h * w];
    let n = rng.gen_range(cfg.count.0..=cfg.count.1);
    let half = cfg.width / 2.0;
    for _ in 0..n {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let len = draw(&mut rng, cfg.length);
        let ang = draw(&mut rng, cfg.angle).to_radians();
        let amp = draw(&mut rng, cfg.intensity);
        let (dy, dx) = (ang.cos(), ang.sin());
        let (y0, x0) = (cy - dy * len / 2.0, cx - dx * len / 2.0);
        let (y1, x1) = (cy + dy * len / 2.0, cx + dx * len / 2.0);
        let pad = half + 1.0;
        let ylo = (y0.min(y1) - pad).floor().max(0.0) as usize;
        let yhi = ((y0.max(y1) + pad).ceil() as usize).min(h);
        let xlo = (x0.min(x1) - pad).floor().max(0.0) as usize;
        let xhi = ((x0.max(x1) + pad).ceil() as usize).min(w);
        for py in ylo..yhi {
            for px in xlo..xhi {
                let d = segment_distance(py as f64 + 0.5, px as f64 + 0.5, (y0, x0), (y1, x1));
                let cover = (half + 0.5 - d).clamp(0.0, 1.0);
                layer[py * w + px] += amp * cover;
            }
        }
    }
    if cfg.blur > 0.0 {
        let mean = ((cfg.angle.0 + cfg.angle.1) / 2.0).to_radians();
        layer = motion_blur(&layer, h, w, cfg.blur, mean.cos(), mean.sin());
    }
    Ok(layer)
}

fn segment_distance(py: f64, px: f64, (y0, x0): (f64, f64), (y1, x1): (f64, f64)) -> f64 {
    let (vy, vx) = (y1 - y0, x1 - x0);
    let len2 = vy * vy + vx * vx;
    let t = if len2 > 0.0 {
        (((py - y0) * vy + (px - x0) * vx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((py - y0 - t * vy).powi(2) + (px - x0 - t * vx).powi(2)).sqrt()
}

/// Box blur along `(dy, dx)` with bilinear taps one pixel apart; samples
/// outside the image count as zero.
fn motion_blur(src: &[f64], h: usize, w: usize, extent: f64, dy: f64, dx: f64) -> Vec<f64> {
    let taps = extent.round().max(1.0) as usize;
    let offsets: Vec<f64> = (0..taps).map(|i| i as f64 - (taps - 1) as f64 / 2.0).collect();
    let sample = |y: f64, x: f64| -> f64 {
        let (fy, fx) = (y.floor(), x.floor());
        let (ty, tx) = (y - fy, x - fx);
        let mut acc = 0.0;
        for (oy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
            for (ox, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                let (yy, xx) = (fy + oy, fx + ox);
                if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                    acc += wy * wx * src[yy as usize * w + xx as usize];
                }
            }
        }
        acc
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = offsets.iter().map(|&o| sample(y as f64 + o * dy, x as f64 + o * dx)).sum();
            out[y * w + x] = s / taps as f64;
        }
    }
    out
}

/// `clamp(clean + streaks)` on every channel of a `[3,H,W]` image.
pub fn synthesize_rain(clean: &Tensor, cfg: &RainConfig) -> Result<Tensor> {
    let (h, w) = match clean.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("synthesize_rain", format!("expected [3,H,W], got {s:?}"))),
    };
    let layer = rain_layer(h, w, cfg)?;
    let n = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        (clean.data()[i] as f64 + layer[i % n]).clamp(0.0, 1.0) as f32
    }))
}

/// Smooth two-color gradient plus a few translucent rectangles and discs and
/// fine texture noise, in `[0,1]`.
pub fn background(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.gen(), rng.gen(), rng.gen()] };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (theta.sin(), theta.cos());
    let mut img = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = ((y as f64 / h as f64 - 0.5) * gy + (x as f64 / w as f64 - 0.5) * gx + 0.75) / 1.5;
            let u = u.clamp(0.0, 1.0);
            for k in 0..3 {
                img[y * w + x][k] = c0[k] * (1.0 - u) + c1[k] * u;
            }
        }
    }
    let shapes = rng.gen_range(2..=5);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let alpha: f64 = rng.gen_range(0.4..0.9);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(0.1..0.35) * h as f64;
        let rx = rng.gen_range(0.1..0.35) * w as f64;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                let inside = if disc {
                    ny * ny + nx * nx <= 1.0
                } else {
                    ny.abs() <= 1.0 && nx.abs() <= 1.0
                };
                if inside {
                    for k in 0..3 {
                        let p = &mut img[y * w + x][k];
                        *p = *p * (1.0 - alpha) + col[k] * alpha;
                    }
                }
            }
        }
    }
    for px in img.iter_mut() {
        let n: f64 = rng.gen_range(-0.03..0.03);
        for v in px.iter_mut() {
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }
    let n = h * w;
    Tensor::from_fn(&[3, h, w], |i| img[i % n][i / n] as f32)
}

/// 8-bit RGB PNG to `[3,H,W]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let err = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(b) => b,
        other => return Err(err(format!("expected 8-bit RGB, found {:?}", other.color()))),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (k, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + k] as f32 / 255.0
    }))
}

/// Writes `[3,H,W]` or `[1,3,H,W]`, clamped to `[0,1]` and rounded to 8 bits.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match img.shape() {
        &[3, h, w] | &[1, 3, h, w] => (h, w),
        s => return Err(Error::shape("save_image", format!("expected an RGB image, got {s:?}"))),
    };
    let d = img.data();
    let n = h * w;
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|k| (d[k * n + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[derive(Clone, Debug)]
pub struct PairedSample {
    pub id: String,
    pub rainy: Tensor,
    pub clean: Tensor,
}

pub fn load_pair(id: &str, rainy: &Path, clean: &Path) -> Result<PairedSample> {
    let r = load_image(rainy)?;
    let c = load_image(clean)?;
    if r.shape() != c.shape() {
        return Err(Error::Pairing(format!(
            "{id}: rainy {:?} and clean {:?} differ in size",
            r.shape(),
            c.shape()
        )));
    }
    Ok(PairedSample {
        id: id.to_string(),
        rainy: r,
        clean: c,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

/// Pair list; relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut rd = csv::Reader::from_path(path)?;
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Pairing(format!(
                "{}: header {header:?}, expected {MANIFEST_HEADER:?}",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let resolve = |s: &str| {
                let p = PathBuf::from(s);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                id: rec[0].to_string(),
                rainy: resolve(&rec[1]),
                clean: resolve(&rec[2]),
            });
        }
        Ok(Self { entries })
    }

    /// Writes paths relative to `path`'s directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut wr = csv::Writer::from_path(path)?;
        wr.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
            wr.write_record([e.id.clone(), rel(&e.rainy), rel(&e.clean)])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn load_all(&self) -> Result<Vec<PairedSample>> {
        self.entries.iter().map(|e| load_pair(&e.id, &e.rainy, &e.clean)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Writes `n` pairs as `clean/<id>.png`, `rainy/<id>.png` and
/// `manifest.csv` under `out_dir`. Sample `i` uses seed `cfg.seed + i`.
pub fn generate_dataset(n: usize, h: usize, w: usize, cfg: &RainConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join("clean"))?;
    fs::create_dir_all(out_dir.join("rainy"))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let seed = cfg.seed.wrapping_add(i as u64);
        let clean = background(h, w, seed ^ 0x5eed_c1ea);
        let rainy = synthesize_rain(&clean, &RainConfig { seed, ..*cfg })?;
        let id = format!("{i:04}");
        let cp = out_dir.join("clean").join(format!("{id}.png"));
        let rp = out_dir.join("rainy").join(format!("{id}.png"));
        save_image(&cp, &clean)?;
        save_image(&rp, &rainy)?;
        entries.push(ManifestEntry { id, rainy: rp, clean: cp });
    }
    let manifest = Manifest { entries };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Stacks `[3,H,W]` images into `[B,3,H,W]`.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {shape:?}", img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}

/// Sorted `*.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn inverted_ranges_are_invalid() {
        let bad = RainConfig {
            length: (9.0, 3.0),
            ..RainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(RainConfig::default().validate().is_ok());
    }

    #[test]
    fn stack_requires_equal_shapes() {
        let a = Tensor::zeros(&[3, 4, 4]);
        let b = Tensor::zeros(&[3, 4, 5]);
        assert!(stack(&[&a, &b]).is_err());
        assert_eq!(stack(&[&a, &a]).unwrap().shape(), &[2, 3, 4, 4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn composite_is_bright_and_bounded(seed in 0u64..10_000, bg in 0u64..100) {
            let clean = background(24, 24, bg);
            prop_assert!(clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let rainy = synthesize_rain(&clean, &RainConfig { seed, ..RainConfig::default() }).unwrap();
            for (r, c) in rainy.data().iter().zip(clean.data()) {
                prop_assert!((0.0..=1.0).contains(r));
                prop_assert!(r >= c);
            }
        }
    }
}
