//! Synthetic multi-band image time-series datasets and their on-disk
//! container.
//!
//! Each sample is an H×W×T×C₀ cube labeled by its center pixel. Per-class
//! temporal signatures are double-logistic seasonal curves; a `subtlety`
//! knob in [0, 1] shrinks the inter-class parameter gaps linearly (1 means
//! identical classes). Per-sample gain/offset perturbations obscure absolute
//! band levels so the temporal shape carries most of the class signal, and
//! border pixels mix in a neighboring class while the center pixel stays
//! pure.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::center_pixel_vector;
use crate::rng::{substream, Stream};
use crate::scalar::sigmoid;

pub const CONTAINER_VERSION: u32 = 1;
pub const TENSOR_FILE: &str = "tensors.bin";
pub const LABEL_FILE: &str = "labels.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

// ── Manifest & dataset ──────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub c0: usize,
    pub classes: usize,
    pub samples: usize,
    pub class_names: Vec<String>,
    pub band_names: Vec<String>,
    pub seed: u64,
    pub subtlety: f64,
    pub noise: f64,
    /// Default split sizes recorded at generation time.
    pub default_train: usize,
    pub default_val: usize,
    /// Set when the samples form a dense (rows, cols) grid of patches.
    pub grid: Option<(usize, usize)>,
}

impl DatasetManifest {
    pub fn cube_len(&self) -> usize {
        self.h * self.w * self.t * self.c0
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// [samples, h, w, t, c0] row-major, 32-bit.
    pub cubes: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn cube(&self, i: usize) -> &[f32] {
        let len = self.manifest.cube_len();
        &self.cubes[i * len..(i + 1) * len]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn center_vector(&self, i: usize) -> Vec<f64> {
        let m = &self.manifest;
        let cube: Vec<f64> = self.cube(i).iter().map(|&v| v as f64).collect();
        center_pixel_vector(&cube, m.h, m.w, m.t, m.c0).expect("manifest dims are odd")
    }
}

// ── Class signatures ────────────────────────────────────────────────

/// Double-logistic phenology parameters for one band of one class.
#[derive(Clone, Debug)]
pub struct BandCurve {
    pub baseline: f64,
    pub amplitude: f64,
    pub green_up: f64,
    pub senescence: f64,
    pub slope_up: f64,
    pub slope_down: f64,
}

impl BandCurve {
    pub fn value(&self, t: f64) -> f64 {
        self.baseline
            + self.amplitude
                * (sigmoid(self.slope_up * (t - self.green_up))
                    - sigmoid(self.slope_down * (t - self.senescence)))
    }
}

/// One class's curves over the reflectance bands, plus its noise knobs.
#[derive(Clone, Debug)]
pub struct ClassSignature {
    pub bands: Vec<BandCurve>,
    pub noise_level: f64,
    pub texture_scale: f64,
}

/// (baseline, amplitude) templates per band role: red, nir, blue, swir.
const BAND_ROLES: [(f64, f64); 4] = [(0.08, 0.07), (0.22, 0.38), (0.05, 0.04), (0.16, 0.12)];

/// Draw the K class signatures. Gaps between classes scale with
/// (1 − subtlety); the primary separation axis is green-up timing, assigned
/// on a deterministic spread so classes never collide by chance.
pub fn class_signatures(
    classes: usize,
    refl_bands: usize,
    t_steps: usize,
    subtlety: f64,
    seed: u64,
) -> Vec<ClassSignature> {
    let sep = 1.0 - subtlety;
    let tf = t_steps as f64;
    let mut rng = substream(seed, Stream::Sample, u64::MAX);
    let mut out = Vec::with_capacity(classes);
    for k in 0..classes {
        // Even spread over [−1, 1] with a small seeded jitter.
        let spread = if classes == 1 { 0.0 } else { 2.0 * k as f64 / (classes - 1) as f64 - 1.0 };
        let jitter = rng.gen_range(-0.12..0.12);
        let timing = spread + jitter;
        let dt_g = timing * 0.22 * tf * sep;
        let dt_s = rng.gen_range(-1.0..1.0) * 0.15 * tf * sep;
        let mut bands = Vec::with_capacity(refl_bands);
        for b in 0..refl_bands {
            let (base, amp) = BAND_ROLES[b % BAND_ROLES.len()];
            let amp_factor = 1.0 + rng.gen_range(-1.0..1.0) * 0.55 * sep;
            let base_shift = rng.gen_range(-1.0..1.0) * 0.06 * sep;
            let green_up = (0.30 * tf + dt_g).clamp(0.05 * tf, 0.70 * tf);
            let senescence = (0.68 * tf + dt_s).max(green_up + 0.12 * tf).min(0.95 * tf);
            bands.push(BandCurve {
                baseline: (base + base_shift).max(0.0),
                amplitude: (amp * amp_factor).max(0.0),
                green_up,
                senescence,
                slope_up: rng.gen_range(0.9..1.5) * 24.0 / tf,
                slope_down: rng.gen_range(0.7..1.3) * 24.0 / tf,
            });
        }
        out.push(ClassSignature { bands, noise_level: 1.0, texture_scale: 0.02 });
    }
    out
}

// ── Generation ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub classes: usize,
    pub samples: usize,
    pub subtlety: f64,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub c0: usize,
    /// Scales every noise source; 0 produces clean curves.
    pub noise: f64,
    pub default_train: usize,
    pub default_val: usize,
    /// Lay the samples out as a dense label-map grid.
    pub grid: Option<(usize, usize)>,
}

impl GenConfig {
    pub fn new(classes: usize, samples: usize, subtlety: f64, seed: u64) -> Self {
        GenConfig {
            classes,
            samples,
            subtlety,
            seed,
            h: 13,
            w: 13,
            t: 23,
            c0: 6,
            noise: 1.0,
            default_train: samples / 2,
            default_val: samples / 10,
            grid: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.subtlety) {
            return Err(Error::Config(format!("subtlety must lie in [0, 1], got {}", self.subtlety)));
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!("noise must be nonnegative, got {}", self.noise)));
        }
        if self.h % 2 == 0 || self.w % 2 == 0 {
            return Err(Error::Config(format!("patch dims must be odd, got {}×{}", self.h, self.w)));
        }
        if self.samples == 0 || self.t == 0 || self.c0 == 0 {
            return Err(Error::Config("samples, time steps and bands must be positive".into()));
        }
        if let Some((r, c)) = self.grid {
            if r * c != self.samples {
                return Err(Error::Config(format!(
                    "grid {r}×{c} does not hold {} samples",
                    self.samples
                )));
            }
        }
        Ok(())
    }
}

fn band_names(c0: usize, refl: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..refl).map(|b| format!("B{:02}", b + 1)).collect();
    if c0 > refl {
        names.push("NDVI".into());
    }
    if c0 > refl + 1 {
        names.push("EVI".into());
    }
    names
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic synthetic dataset; parallel over samples with per-sample
/// seeded substreams, so thread count never changes the output.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let refl = if cfg.c0 >= 5 { cfg.c0 - 2 } else { cfg.c0 };
    let signatures = class_signatures(cfg.classes, refl, cfg.t, cfg.subtlety, cfg.seed);

    // Labels: grid mode paints blocky class regions; otherwise per-sample draw.
    let labels: Vec<u32> = match cfg.grid {
        Some((rows, cols)) => {
            let mut rng = substream(cfg.seed, Stream::Sample, u64::MAX - 1);
            let cr = rows.div_ceil(4).max(1);
            let cc = cols.div_ceil(4).max(1);
            let coarse: Vec<u32> =
                (0..cr * cc).map(|_| rng.gen_range(0..cfg.classes) as u32).collect();
            (0..rows * cols)
                .map(|i| {
                    let (r, c) = (i / cols, i % cols);
                    coarse[(r * cr / rows) * cc + (c * cc / cols)]
                })
                .collect()
        }
        None => {
            let mut rng = substream(cfg.seed, Stream::Sample, u64::MAX - 1);
            (0..cfg.samples).map(|_| rng.gen_range(0..cfg.classes) as u32).collect()
        }
    };

    let cube_len = cfg.h * cfg.w * cfg.t * cfg.c0;
    let mut cubes = vec![0.0f32; cfg.samples * cube_len];
    cubes
        .par_chunks_mut(cube_len)
        .enumerate()
        .for_each(|(i, cube)| generate_cube(cfg, &signatures, refl, labels[i] as usize, i as u64, cube));

    Ok(Dataset {
        manifest: DatasetManifest {
            h: cfg.h,
            w: cfg.w,
            t: cfg.t,
            c0: cfg.c0,
            classes: cfg.classes,
            samples: cfg.samples,
            class_names: (0..cfg.classes).map(|k| format!("class_{k}")).collect(),
            band_names: band_names(cfg.c0, refl),
            seed: cfg.seed,
            subtlety: cfg.subtlety,
            noise: cfg.noise,
            default_train: cfg.default_train,
            default_val: cfg.default_val,
            grid: cfg.grid,
        },
        cubes,
        labels,
    })
}

fn generate_cube(
    cfg: &GenConfig,
    signatures: &[ClassSignature],
    refl: usize,
    label: usize,
    patch_id: u64,
    cube: &mut [f32],
) {
    let mut rng = substream(cfg.seed, Stream::Sample, patch_id);
    let (h, w, t, c0) = (cfg.h, cfg.w, cfg.t, cfg.c0);
    let noise = cfg.noise;
    let sig = &signatures[label];

    // A different class bleeding in from the patch border.
    let neighbor = if cfg.classes > 1 {
        let mut n = rng.gen_range(0..cfg.classes - 1);
        if n >= label {
            n += 1;
        }
        n
    } else {
        label
    };
    let nsig = &signatures[neighbor];
    let mix_strength: f64 = rng.gen_range(0.25..0.6);

    // Per-band multiplicative gain and additive offset across the whole
    // series (atmospheric-like): hides absolute levels, keeps the shape.
    let gains: Vec<f64> = (0..refl).map(|_| 1.0 + 0.12 * noise * gaussian(&mut rng)).collect();
    let offsets: Vec<f64> = (0..refl).map(|_| 0.03 * noise * gaussian(&mut rng)).collect();

    // AR(1) temporal noise per band.
    let mut temporal = vec![0.0f64; refl * t];
    for b in 0..refl {
        let mut e = 0.0;
        for tt in 0..t {
            e = 0.7 * e + 0.015 * noise * gaussian(&mut rng);
            temporal[b * t + tt] = e;
        }
    }

    // Smooth spatial texture: coarse field, bilinear upsample.
    let (ch, cw) = (h.div_ceil(4) + 1, w.div_ceil(4) + 1);
    let coarse: Vec<f64> = (0..ch * cw).map(|_| gaussian(&mut rng)).collect();
    let field = |y: usize, x: usize| -> f64 {
        let fy = y as f64 / (h - 1).max(1) as f64 * (ch - 1) as f64;
        let fx = x as f64 / (w - 1).max(1) as f64 * (cw - 1) as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(ch - 1), (x0 + 1).min(cw - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        coarse[y0 * cw + x0] * (1.0 - dy) * (1.0 - dx)
            + coarse[y0 * cw + x1] * (1.0 - dy) * dx
            + coarse[y1 * cw + x0] * dy * (1.0 - dx)
            + coarse[y1 * cw + x1] * dy * dx
    };

    let (cy, cx) = (h / 2, w / 2);
    let d_max = (((cy * cy + cx * cx) as f64).sqrt()).max(1.0);
    for y in 0..h {
        for x in 0..w {
            let d = (((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt()) / d_max;
            let mix = mix_strength * d.powf(1.5);
            let tex = field(y, x) * sig.texture_scale * noise;
            for tt in 0..t {
                let tf = tt as f64;
                let mut vals = Vec::with_capacity(c0);
                for b in 0..refl {
                    let clean = (1.0 - mix) * sig.bands[b].value(tf) + mix * nsig.bands[b].value(tf);
                    let white = 0.01 * noise * gaussian(&mut rng);
                    let v = clean * gains[b] + offsets[b] + temporal[b * t + tt] + tex + white;
                    vals.push(v.clamp(-0.2, 1.0));
                }
                if c0 > refl {
                    // Index bands from the red/nir/blue roles.
                    let red = vals[0];
                    let nir = vals[1 % refl];
                    let blue = vals[2 % refl];
                    let ndvi = (nir - red) / (nir + red).abs().max(1e-6)
                        + 0.01 * noise * gaussian(&mut rng);
                    vals.push(ndvi.clamp(-0.2, 1.0));
                    if c0 > refl + 1 {
                        let evi = 2.5 * (nir - red) / (nir + 6.0 * red - 7.5 * blue + 1.0).abs().max(1e-6)
                            + 0.01 * noise * gaussian(&mut rng);
                        vals.push(evi.clamp(-0.2, 1.0));
                    }
                }
                let base = ((y * w + x) * t + tt) * c0;
                for (b, v) in vals.into_iter().enumerate() {
                    cube[base + b] = v as f32;
                }
            }
        }
    }
}

// ── Splits ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffle(rng: &mut ChaCha8Rng, items: &mut [usize]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Seeded, class-stratified split; disjoint and exhaustive (remainder is the
/// test set). Falls back to an unstratified split with a warning when the
/// per-class allocation is infeasible.
pub fn split(labels: &[u32], classes: usize, train_n: usize, val_n: usize, seed: u64) -> Result<SplitIndices> {
    let n = labels.len();
    if train_n + val_n > n {
        return Err(Error::Config(format!(
            "split sizes {train_n}+{val_n} exceed {n} samples"
        )));
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if (l as usize) >= classes {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        per_class[l as usize].push(i);
    }
    for (c, members) in per_class.iter_mut().enumerate() {
        let mut rng = substream(seed, Stream::Split, c as u64);
        shuffle(&mut rng, members);
    }

    // Largest-remainder allocation of train_n then val_n over the classes.
    let allocate = |want: usize, available: &[usize]| -> Option<Vec<usize>> {
        let total: usize = available.iter().sum();
        if want > total {
            return None;
        }
        let mut alloc: Vec<usize> = Vec::with_capacity(classes);
        let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(classes);
        let mut assigned = 0usize;
        for (c, &avail) in available.iter().enumerate() {
            let exact = want as f64 * avail as f64 / total.max(1) as f64;
            let base = (exact.floor() as usize).min(avail);
            alloc.push(base);
            assigned += base;
            remainders.push((exact - base as f64, c));
        }
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut cursor = 0usize;
        while assigned < want {
            let mut progressed = false;
            for _ in 0..remainders.len() {
                let c = remainders[cursor % remainders.len()].1;
                cursor += 1;
                if alloc[c] < available[c] {
                    alloc[c] += 1;
                    assigned += 1;
                    progressed = true;
                    break;
                }
            }
            if !progressed {
                return None;
            }
        }
        Some(alloc)
    };

    let sizes: Vec<usize> = per_class.iter().map(|m| m.len()).collect();
    let stratified = allocate(train_n, &sizes).and_then(|train_alloc| {
        let remaining: Vec<usize> = sizes.iter().zip(train_alloc.iter()).map(|(s, t)| s - t).collect();
        allocate(val_n, &remaining).map(|val_alloc| (train_alloc, val_alloc))
    });

    match stratified {
        Some((train_alloc, val_alloc)) => {
            let mut train = Vec::with_capacity(train_n);
            let mut val = Vec::with_capacity(val_n);
            let mut test = Vec::new();
            for c in 0..classes {
                let members = &per_class[c];
                let (t_end, v_end) = (train_alloc[c], train_alloc[c] + val_alloc[c]);
                train.extend_from_slice(&members[..t_end]);
                val.extend_from_slice(&members[t_end..v_end]);
                test.extend_from_slice(&members[v_end..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            test.sort_unstable();
            Ok(SplitIndices { train, val, test })
        }
        None => {
            log::warn!("stratified split infeasible; falling back to unstratified");
            let mut all: Vec<usize> = (0..n).collect();
            let mut rng = substream(seed, Stream::Split, 1_000_003);
            shuffle(&mut rng, &mut all);
            let mut train = all[..train_n].to_vec();
            let mut val = all[train_n..train_n + val_n].to_vec();
            let mut test = all[train_n + val_n..].to_vec();
            train.sort_unstable();
            val.sort_unstable();
            test.sort_unstable();
            Ok(SplitIndices { train, val, test })
        }
    }
}

// ── Container I/O ───────────────────────────────────────────────────

fn kv_line(out: &mut String, key: &str, value: impl std::fmt::Display) {
    out.push_str(&format!("{key} = {value}\n"));
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    let m = &ds.manifest;

    let mut manifest = String::new();
    kv_line(&mut manifest, "format", "gdsm-dataset");
    kv_line(&mut manifest, "version", CONTAINER_VERSION);
    kv_line(&mut manifest, "h", m.h);
    kv_line(&mut manifest, "w", m.w);
    kv_line(&mut manifest, "t", m.t);
    kv_line(&mut manifest, "c0", m.c0);
    kv_line(&mut manifest, "classes", m.classes);
    kv_line(&mut manifest, "samples", m.samples);
    kv_line(&mut manifest, "class_names", m.class_names.join(","));
    kv_line(&mut manifest, "band_names", m.band_names.join(","));
    kv_line(&mut manifest, "seed", m.seed);
    kv_line(&mut manifest, "subtlety", format!("{:.6}", m.subtlety));
    kv_line(&mut manifest, "noise", format!("{:.6}", m.noise));
    kv_line(&mut manifest, "default_train", m.default_train);
    kv_line(&mut manifest, "default_val", m.default_val);
    if let Some((r, c)) = m.grid {
        kv_line(&mut manifest, "grid_rows", r);
        kv_line(&mut manifest, "grid_cols", c);
    }
    kv_line(&mut manifest, "tensor_file", TENSOR_FILE);
    kv_line(&mut manifest, "tensor_dtype", "f32le");
    kv_line(&mut manifest, "tensor_order", "sample,h,w,t,band");
    kv_line(&mut manifest, "label_file", LABEL_FILE);
    kv_line(&mut manifest, "label_dtype", "u32le");
    fs::write(path.join(MANIFEST_FILE), manifest)?;

    let mut tensor_bytes = Vec::with_capacity(ds.cubes.len() * 4);
    for v in &ds.cubes {
        tensor_bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path.join(TENSOR_FILE), tensor_bytes)?;

    let mut label_bytes = Vec::with_capacity(ds.labels.len() * 4);
    for v in &ds.labels {
        label_bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path.join(LABEL_FILE), label_bytes)?;
    Ok(())
}

/// Flat `key = value` lines; later keys win.
pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    out
}

pub fn kv_get<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
    kv.iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Corruption(format!("manifest is missing key '{key}'")))
}

fn kv_parse<T: std::str::FromStr>(kv: &[(String, String)], key: &str) -> Result<T> {
    kv_get(kv, key)?
        .parse::<T>()
        .map_err(|_| Error::Corruption(format!("manifest key '{key}' has an invalid value")))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_text = fs::read_to_string(path.join(MANIFEST_FILE))?;
    let kv = parse_kv(&manifest_text);
    if kv_get(&kv, "format")? != "gdsm-dataset" {
        return Err(Error::Corruption("not a dataset container".into()));
    }
    let version: u32 = kv_parse(&kv, "version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::Version(format!(
            "dataset container version {version} unsupported (expected {CONTAINER_VERSION})"
        )));
    }
    let manifest = DatasetManifest {
        h: kv_parse(&kv, "h")?,
        w: kv_parse(&kv, "w")?,
        t: kv_parse(&kv, "t")?,
        c0: kv_parse(&kv, "c0")?,
        classes: kv_parse(&kv, "classes")?,
        samples: kv_parse(&kv, "samples")?,
        class_names: kv_get(&kv, "class_names")?.split(',').map(str::to_string).collect(),
        band_names: kv_get(&kv, "band_names")?.split(',').map(str::to_string).collect(),
        seed: kv_parse(&kv, "seed")?,
        subtlety: kv_parse(&kv, "subtlety")?,
        noise: kv_parse(&kv, "noise")?,
        default_train: kv_parse(&kv, "default_train")?,
        default_val: kv_parse(&kv, "default_val")?,
        grid: match (kv_get(&kv, "grid_rows"), kv_get(&kv, "grid_cols")) {
            (Ok(r), Ok(c)) => Some((
                r.parse().map_err(|_| Error::Corruption("bad grid_rows".into()))?,
                c.parse().map_err(|_| Error::Corruption("bad grid_cols".into()))?,
            )),
            _ => None,
        },
    };

    let tensor_name: String = kv_get(&kv, "tensor_file")?.to_string();
    let expected_tensor = manifest.samples * manifest.cube_len() * 4;
    let mut tensor_bytes = Vec::new();
    fs::File::open(path.join(&tensor_name))?.read_to_end(&mut tensor_bytes)?;
    if tensor_bytes.len() != expected_tensor {
        return Err(Error::Corruption(format!(
            "tensor file holds {} bytes, manifest implies {expected_tensor}",
            tensor_bytes.len()
        )));
    }
    let cubes: Vec<f32> = tensor_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let label_name: String = kv_get(&kv, "label_file")?.to_string();
    let expected_labels = manifest.samples * 4;
    let mut label_bytes = Vec::new();
    fs::File::open(path.join(&label_name))?.read_to_end(&mut label_bytes)?;
    if label_bytes.len() != expected_labels {
        return Err(Error::Corruption(format!(
            "label file holds {} bytes, manifest implies {expected_labels}",
            label_bytes.len()
        )));
    }
    let labels: Vec<u32> = label_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= manifest.classes) {
        return Err(Error::Corruption(format!(
            "label {bad} out of range for {} classes",
            manifest.classes
        )));
    }

    Ok(Dataset { manifest, cubes, labels })
}

// ── Nearest-centroid baseline ───────────────────────────────────────

/// Overall accuracy (percent) of a nearest-centroid classifier fit on the
/// train split's center-pixel vectors. Generator sanity baseline.
pub fn nearest_centroid_oa(ds: &Dataset, train: &[usize], test: &[usize]) -> f64 {
    let k = ds.manifest.classes;
    let dim = ds.manifest.t * ds.manifest.c0;
    let mut centroids = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for &i in train {
        let v = ds.center_vector(i);
        let c = ds.label(i);
        counts[c] += 1;
        for (j, x) in v.iter().enumerate() {
            centroids[c * dim + j] += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..dim {
                centroids[c * dim + j] /= counts[c] as f64;
            }
        }
    }
    let mut correct = 0usize;
    for &i in test {
        let v = ds.center_vector(i);
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut d2 = 0.0;
            for j in 0..dim {
                let d = v[j] - centroids[c * dim + j];
                d2 += d * d;
            }
            if d2 < best.0 {
                best = (d2, c);
            }
        }
        if best.1 == ds.label(i) {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64 * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg() -> GenConfig {
        let mut cfg = GenConfig::new(4, 60, 0.5, 7);
        cfg.h = 5;
        cfg.w = 5;
        cfg.t = 6;
        cfg.c0 = 3;
        cfg
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let cfg = tiny_cfg();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.cubes, b.cubes);
        assert_eq!(a.labels, b.labels);
        assert!(a.cubes.iter().all(|&v| (-0.2..=1.0).contains(&v)));
        assert_eq!(a.cubes.len(), 60 * 5 * 5 * 6 * 3);
    }

    #[test]
    fn reference_dims_produce_reference_shapes() {
        let mut cfg = GenConfig::new(4, 3, 0.5, 0);
        cfg.samples = 3;
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.manifest.cube_len(), 13 * 13 * 23 * 6);
        assert_eq!(ds.manifest.band_names.len(), 6);
        assert_eq!(ds.manifest.band_names[4], "NDVI");
        assert_eq!(ds.center_vector(0).len(), 138);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.subtlety = 2.0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.classes = 1;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.h = 4;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn clean_separated_classes_are_trivially_classifiable() {
        let mut cfg = tiny_cfg();
        cfg.subtlety = 0.0;
        cfg.noise = 0.0;
        cfg.samples = 80;
        let ds = generate_synthetic(&cfg).unwrap();
        let s = split(&ds.labels, ds.manifest.classes, 40, 0, 11).unwrap();
        let oa = nearest_centroid_oa(&ds, &s.train, &s.test);
        assert_eq!(oa, 100.0);
    }

    #[test]
    fn subtlety_one_collapses_class_signatures() {
        let sigs = class_signatures(3, 2, 8, 1.0, 5);
        for b in 0..2 {
            for k in 1..3 {
                assert!((sigs[k].bands[b].green_up - sigs[0].bands[b].green_up).abs() < 1e-12);
                assert!((sigs[k].bands[b].amplitude - sigs[0].bands[b].amplitude).abs() < 1e-12);
            }
        }
        for sig in &sigs {
            for band in &sig.bands {
                assert!(band.amplitude >= 0.0);
                assert!(band.green_up < band.senescence);
            }
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let cfg = tiny_cfg();
        let ds = generate_synthetic(&cfg).unwrap();
        let s1 = split(&ds.labels, 4, 30, 12, 3).unwrap();
        let s2 = split(&ds.labels, 4, 30, 12, 3).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.train.len(), 30);
        assert_eq!(s1.val.len(), 12);
        assert_eq!(s1.test.len(), 60 - 42);
        let mut all: Vec<usize> = s1.train.iter().chain(&s1.val).chain(&s1.test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());

        // train_n = total ⇒ empty test split.
        let s3 = split(&ds.labels, 4, 60, 0, 3).unwrap();
        assert!(s3.test.is_empty());

        assert!(matches!(split(&ds.labels, 4, 59, 2, 3), Err(Error::Config(_))));
    }

    #[test]
    fn container_round_trip_is_bitwise() {
        let cfg = tiny_cfg();
        let mut small = cfg.clone();
        small.samples = 10;
        let ds = generate_synthetic(&small).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds.manifest, back.manifest);
        assert_eq!(ds.cubes, back.cubes);
        assert_eq!(ds.labels, back.labels);

        // Writing again produces identical bytes.
        let path2 = dir.path().join("ds2");
        write_dataset(&back, &path2).unwrap();
        for f in [MANIFEST_FILE, TENSOR_FILE, LABEL_FILE] {
            let a = std::fs::read(path.join(f)).unwrap();
            let b = std::fs::read(path2.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn corruption_is_detected_with_byte_counts() {
        let mut cfg = tiny_cfg();
        cfg.samples = 6;
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds");
        write_dataset(&ds, &path).unwrap();

        // Truncate the tensor file.
        let tensor_path = path.join(TENSOR_FILE);
        let bytes = std::fs::read(&tensor_path).unwrap();
        std::fs::write(&tensor_path, &bytes[..bytes.len() - 8]).unwrap();
        let err = read_dataset(&path).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Corruption(_)));
        assert!(
            msg.contains(&format!("{}", bytes.len() - 8)) && msg.contains(&format!("{}", bytes.len())),
            "{msg}"
        );

        // Restore, then corrupt the manifest dims.
        std::fs::write(&tensor_path, &bytes).unwrap();
        let manifest_path = path.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).unwrap().replace("h = 5", "h = 7");
        std::fs::write(&manifest_path, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Corruption(_))));

        // Unknown version.
        let text = std::fs::read_to_string(&manifest_path)
            .unwrap()
            .replace("h = 7", "h = 5")
            .replace("version = 1", "version = 9");
        std::fs::write(&manifest_path, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Version(_))));
    }

    #[test]
    fn centroid_baseline_degrades_with_subtlety() {
        // Sanity of the difficulty knob at small scale (the full-size check
        // runs in the acceptance suite).
        let mut oas = Vec::new();
        for &sub in &[0.0, 0.5, 0.9] {
            let mut acc = 0.0;
            for seed in 0..3u64 {
                let mut cfg = tiny_cfg();
                cfg.samples = 120;
                cfg.subtlety = sub;
                cfg.seed = seed;
                let ds = generate_synthetic(&cfg).unwrap();
                let s = split(&ds.labels, 4, 60, 0, seed).unwrap();
                acc += nearest_centroid_oa(&ds, &s.train, &s.test);
            }
            oas.push(acc / 3.0);
        }
        assert!(oas[0] >= oas[1] - 1e-9, "{oas:?}");
        assert!(oas[1] >= oas[2] - 1e-9, "{oas:?}");
    }

    #[test]
    fn grid_mode_paints_regions() {
        let mut cfg = tiny_cfg();
        cfg.samples = 100;
        cfg.grid = Some((10, 10));
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.manifest.grid, Some((10, 10)));
        // Blocky regions: at least one adjacent pair shares a class.
        let same_adjacent = (0..9).any(|r| (0..10).any(|c| ds.labels[r * 10 + c] == ds.labels[(r + 1) * 10 + c]));
        assert!(same_adjacent);
    }
}
