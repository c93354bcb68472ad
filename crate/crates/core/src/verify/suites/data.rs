use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::data::{
    background, generate_dataset, list_pngs, load_image, load_pair, rain_layer, save_image, synthesize_rain, Manifest, RainConfig,
};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::verify::{Measure, Recorder};

/// Scratch directory removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Result<Self> {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let dir = std::env::temp_dir().join(format!("prism-{tag}-{}-{nanos}", std::process::id()));
        fs::create_dir_all(&dir)?;
        Ok(Self(dir))
    }

    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

pub(crate) fn data(r: &mut Recorder) {
    let cfg = RainConfig::default();

    r.check("data.rain_config_validated", || {
        let bad = [
            RainConfig { count: (5, 2), ..cfg },
            RainConfig {
                length: (-1.0, 3.0),
                ..cfg
            },
            RainConfig {
                angle: (10.0, -10.0),
                ..cfg
            },
            RainConfig {
                intensity: (0.2, 1.5),
                ..cfg
            },
            RainConfig { width: 0.0, ..cfg },
            RainConfig { blur: -1.0, ..cfg },
        ];
        Ok(Measure::truth(
            cfg.validate().is_ok() && bad.iter().all(|c| rain_layer(8, 8, c).is_err()),
        ))
    });
    r.check("data.composite_in_unit_range", || {
        let heavy = RainConfig {
            count: (200, 200),
            intensity: (0.9, 1.0),
            seed: 3,
            ..cfg
        };
        let clean = Tensor::full(&[3, 32, 32], 0.9);
        let rainy = synthesize_rain(&clean, &heavy)?;
        let outside = rainy.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        let saturated = rainy.data().iter().filter(|&&v| v == 1.0).count();
        Ok(Measure::truth(outside == 0 && saturated > 0).note(format!("{saturated} clamped pixels")))
    });
    r.check("data.zero_streaks_exact", || {
        let none = RainConfig { count: (0, 0), ..cfg };
        let clean = background(24, 24, 4);
        let rainy = synthesize_rain(&clean, &none)?;
        Ok(Measure::within(rainy.max_abs_diff(&clean)? as f64, 0.0))
    });
    r.check("data.single_streak_support", || {
        let one = RainConfig {
            count: (1, 1),
            length: (10.0, 10.0),
            angle: (0.0, 0.0),
            intensity: (1.0, 1.0),
            width: 1.0,
            blur: 0.0,
            seed: 5,
        };
        let (h, w) = (48, 48);
        let layer = rain_layer(h, w, &one)?;
        let hits: Vec<(usize, usize)> = (0..h * w).filter(|&i| layer[i] > 0.0).map(|i| (i / w, i % w)).collect();
        let cols = hits
            .iter()
            .map(|p| p.1)
            .max()
            .zip(hits.iter().map(|p| p.1).min())
            .map(|(a, b)| a - b + 1);
        let rows = hits
            .iter()
            .map(|p| p.0)
            .max()
            .zip(hits.iter().map(|p| p.0).min())
            .map(|(a, b)| a - b + 1);
        let peak = layer.iter().copied().fold(0.0, f64::max);
        let ok = matches!((cols, rows), (Some(c), Some(r)) if c <= 2 && r <= 12) && peak <= 1.0;
        Ok(Measure::truth(ok).note(format!(
            "{} pixels over {cols:?} columns and {rows:?} rows, peak {peak:.3}",
            hits.len()
        )))
    });
    r.check("data.synthesis_deterministic", || {
        let clean = background(32, 32, 6);
        let a = synthesize_rain(&clean, &RainConfig { seed: 7, ..cfg })?;
        let b = synthesize_rain(&clean, &RainConfig { seed: 7, ..cfg })?;
        let c = synthesize_rain(&clean, &RainConfig { seed: 8, ..cfg })?;
        Ok(Measure::truth(a == b && a != c && background(32, 32, 6) == clean))
    });
    r.check("data.dataset_written", || {
        let dir = Scratch::new("data")?;
        let m = generate_dataset(8, 32, 32, &RainConfig { seed: 9, ..cfg }, dir.path())?;
        let pngs = list_pngs(&dir.path().join("clean"))?.len() + list_pngs(&dir.path().join("rainy"))?.len();
        let back = Manifest::read(&dir.path().join("manifest.csv"))?;
        let samples = back.load_all()?;
        let consistent = samples
            .iter()
            .all(|s| s.rainy.shape() == [3, 32, 32] && s.clean.shape() == [3, 32, 32]);
        let ok = pngs == 16 && m.len() == 8 && back == m && consistent;
        Ok(Measure::truth(ok).note(format!("{pngs} PNGs, {} manifest rows", back.len())))
    });
    r.check("data.png_roundtrip", || {
        let dir = Scratch::new("png")?;
        let mut img = background(13, 17, 10);
        img.data_mut()[0] = 1.0;
        img.data_mut()[1] = 0.0;
        let path = dir.path().join("x.png");
        save_image(&path, &img)?;
        let back = load_image(&path)?;
        let err = back.max_abs_diff(&img)? as f64;
        let ends = back.data()[0] == 1.0 && back.data()[1] == 0.0;
        let in_range = back.data().iter().all(|v| (0.0..=1.0).contains(v));
        Ok(Measure::within(if ends && in_range { err } else { f64::INFINITY }, 1.0 / 255.0 + 1e-6).note("endpoints exact"))
    });
    r.check("data.pair_mismatch_rejected", || {
        let dir = Scratch::new("pair")?;
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_image(&a, &background(16, 16, 11))?;
        save_image(&b, &background(16, 18, 12))?;
        let r = load_pair("p", &a, &b);
        let pairing = matches!(r, Err(crate::error::Error::Pairing(_)));
        Ok(Measure::truth(pairing).note("Pairing error on size mismatch"))
    });
    r.check("data.rain_never_darkens", || {
        let clean = background(32, 32, 20);
        let mut worst = f32::NEG_INFINITY;
        for seed in 0..10 {
            let rc = RainConfig { seed, ..cfg };
            let layer = rain_layer(32, 32, &rc)?;
            let rainy = synthesize_rain(&clean, &rc)?;
            let darker = rainy
                .data()
                .iter()
                .zip(clean.data())
                .map(|(r, c)| c - r)
                .fold(f32::NEG_INFINITY, f32::max);
            let negative = layer.iter().any(|&v| v < 0.0);
            worst = worst.max(if negative { f32::INFINITY } else { darker });
        }
        Ok(Measure::within(worst.max(0.0) as f64, 0.0).note("rainy >= clean before quantization, streak layer >= 0"))
    });
    r.check("data.dataset_pure", || {
        let (a, b) = (Scratch::new("pure-a")?, Scratch::new("pure-b")?);
        let rc = RainConfig { seed: 21, ..cfg };
        let ma = generate_dataset(3, 24, 24, &rc, a.path())?;
        let mb = generate_dataset(3, 24, 24, &rc, b.path())?;
        let mut same = ma.len() == mb.len();
        for (ea, eb) in ma.entries.iter().zip(&mb.entries) {
            same &= ea.id == eb.id && fs::read(&ea.rainy)? == fs::read(&eb.rainy)? && fs::read(&ea.clean)? == fs::read(&eb.clean)?;
        }
        Ok(Measure::truth(same).note("identical PNG bytes from two runs"))
    });
}
