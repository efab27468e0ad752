//! Synthetic multi-domain shape classification data.
//!
//! Class `k` is a shape archetype rendered at a random position, scale and
//! small rotation. A domain preset then restyles the rendered silhouette
//! (palette, background texture, outline, noise, blur, contrast) without
//! moving it: the geometry stream depends only on `(seed, split, index)`,
//! the style stream additionally on the preset.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::binio::{put_f64, put_string, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DYNGDATA";
pub const VERSION: u32 = 1;
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const MAX_CLASSES: usize = 10;
pub const DEFAULT_DOMAINS: [&str; 4] = ["photo", "sketch", "cartoon", "art"];

pub const SHAPES: [&str; MAX_CLASSES] = [
    "disk", "square", "triangle", "cross", "ring", "diamond", "frame", "x_mark", "half_disk",
    "twin_dots",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Photo,
    Sketch,
    Cartoon,
    Art,
    Night,
    Fog,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Photo,
        Preset::Sketch,
        Preset::Cartoon,
        Preset::Art,
        Preset::Night,
        Preset::Fog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Photo => "photo",
            Preset::Sketch => "sketch",
            Preset::Cartoon => "cartoon",
            Preset::Art => "art",
            Preset::Night => "night",
            Preset::Fog => "fog",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::invalid(format!(
                    "unknown domain preset '{name}' (available: {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split '{s}' (expected train|val|test)"))),
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].get(c as usize).copied()
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named domain rendered with a style preset. The name feeds the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub name: String,
    pub preset: Preset,
}

impl DomainSpec {
    /// Domain named after its preset.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            preset: Preset::parse(name)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: String,
    pub split: Split,
    pub seed: u64,
    pub classes: usize,
    /// Channels, height, width.
    pub geometry: [usize; 3],
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        domain: &str,
        split: Split,
        seed: u64,
        classes: usize,
        geometry: [usize; 3],
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = geometry.iter().product::<usize>();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::dim(format!(
                "{} pixel values for {} images of {:?}",
                images.len(),
                labels.len(),
                geometry
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label: l, classes });
        }
        Ok(Self {
            domain: domain.to_string(),
            split,
            seed,
            classes,
            geometry,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.geometry.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let m = self.image_len();
        &self.images[i * m..(i + 1) * m]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Stacks the given samples into `[B×C×H×W]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let m = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * m);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.geometry;
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// New dataset holding the given samples.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self::new(&self.domain, split, self.seed, self.classes, self.geometry, images, labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.images.len() * 8 + self.len() * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.classes as u32);
        put_u64(&mut out, self.len() as u64);
        for g in self.geometry {
            put_u32(&mut out, g as u32);
        }
        put_string(&mut out, &self.domain);
        out.push(self.split.code());
        put_u64(&mut out, self.seed);
        for i in 0..self.len() {
            put_u32(&mut out, self.labels[i] as u32);
            for &v in self.image(i) {
                put_f64(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(0, "not a dataset file (bad magic)"));
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                at,
                format!("dataset version {version} unsupported (expected {VERSION})"),
            ));
        }
        let at = r.offset();
        let classes = r.u32("class count")? as usize;
        if !(2..=MAX_CLASSES).contains(&classes) {
            return Err(Error::format(at, format!("class count {classes} out of range")));
        }
        let n = r.u64("sample count")? as usize;
        let at = r.offset();
        let geometry = [r.u32("channels")? as usize, r.u32("height")? as usize, r.u32("width")? as usize];
        if geometry.contains(&0) {
            return Err(Error::format(at, format!("bad image geometry {geometry:?}")));
        }
        let domain = r.string("domain name")?;
        let at = r.offset();
        let split = Split::from_code(r.u8("split")?)
            .ok_or_else(|| Error::format(at, "bad split code"))?;
        let seed = r.u64("seed")?;
        let per = geometry.iter().product::<usize>();
        let record = 4 + 8 * per;
        if r.remaining() != n * record {
            let need = n * record;
            let off = r.offset() + (r.remaining().min(need) / record * record) as u64;
            return Err(Error::format(
                off,
                format!("{} record bytes present, {need} expected for {n} samples", r.remaining()),
            ));
        }
        let mut images = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let l = r.u32("label")? as usize;
            if l >= classes {
                return Err(Error::format(at, format!("label {l} ≥ class count {classes}")));
            }
            labels.push(l);
            images.extend(r.f64_vec(per, "pixels")?);
        }
        Self::new(&domain, split, seed, classes, geometry, images, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn split_seed(seed: u64, split: Split) -> u64 {
    rng::derive_seed(seed, split.name())
}

/// Geometry transform of one sample.
#[derive(Debug, Clone, Copy)]
struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

fn placement(seed: u64, split: Split, index: usize) -> Placement {
    let mut r = rng::indexed_stream(split_seed(seed, split), "geometry", index as u64);
    Placement {
        cx: r.random_range(11.0..21.0),
        cy: r.random_range(11.0..21.0),
        radius: r.random_range(7.0..11.0),
        angle: r.random_range(-0.35..0.35),
    }
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    let rho = (u * u + v * v).sqrt();
    let cross = |u: f64, v: f64| (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0);
    match shape {
        0 => rho <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => (0..3).all(|k| {
            let t = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            u * t.cos() + v * t.sin() <= 0.5
        }),
        3 => cross(u, v),
        4 => (0.55..=1.0).contains(&rho),
        5 => u.abs() + v.abs() <= 1.0,
        6 => {
            let m = u.abs().max(v.abs());
            (0.5..=0.9).contains(&m)
        }
        7 => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            cross(s * (u + v), s * (v - u))
        }
        8 => rho <= 1.0 && v >= -0.1,
        _ => ((u - 0.5).powi(2) + v * v).sqrt() <= 0.45 || ((u + 0.5).powi(2) + v * v).sqrt() <= 0.45,
    }
}

/// Anti-aliased silhouette coverage in `[0, 1]`, `H×W` row-major.
pub fn geometry_mask(seed: u64, split: Split, index: usize, classes: usize) -> Vec<f64> {
    let shape = index % classes;
    let p = placement(seed, split, index);
    let (s, c) = p.angle.sin_cos();
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    const SUB: usize = 3;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64 - p.cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64 - p.cy;
                    let u = (c * px + s * py) / p.radius;
                    let v = (-s * px + c * py) / p.radius;
                    // image rows grow downward; flip so shapes point up
                    hits += inside(shape, u, -v) as usize;
                }
            }
            out[y * IMAGE_SIZE + x] = hits as f64 / (SUB * SUB) as f64;
        }
    }
    out
}

type Rgb = [f64; 3];

fn random_color<R: Rng>(r: &mut R, lo: f64, hi: f64) -> Rgb {
    [r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(lo..hi)]
}

fn saturated_color<R: Rng>(r: &mut R) -> Rgb {
    let mut c = random_color(r, 0.0, 0.35);
    let k = r.random_range(0..3);
    c[k] = r.random_range(0.7..1.0);
    c
}

fn luminance(c: Rgb) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Colors with a guaranteed luminance gap so the silhouette stays visible.
fn contrasting_pair<R: Rng>(r: &mut R, fg: impl Fn(&mut R) -> Rgb, bg: impl Fn(&mut R) -> Rgb) -> (Rgb, Rgb) {
    loop {
        let (f, b) = (fg(r), bg(r));
        if (luminance(f) - luminance(b)).abs() >= 0.2 {
            return (f, b);
        }
    }
}

fn edges(alpha: &[f64]) -> Vec<f64> {
    let n = IMAGE_SIZE as isize;
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= n || y >= n {
            0.0
        } else {
            alpha[(y * n + x) as usize]
        }
    };
    let mut out = vec![0.0; alpha.len()];
    for y in 0..n {
        for x in 0..n {
            let gx = at(x + 1, y) - at(x - 1, y);
            let gy = at(x, y + 1) - at(x, y - 1);
            out[(y * n + x) as usize] = (gx * gx + gy * gy).sqrt().min(1.0);
        }
    }
    out
}

fn box_blur(img: &mut [f64]) {
    let n = IMAGE_SIZE;
    for ch in img.chunks_exact_mut(n * n) {
        let src = ch.to_vec();
        for y in 0..n {
            for x in 0..n {
                let mut s = 0.0;
                let mut k = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                            s += src[yy as usize * n + xx as usize];
                            k += 1.0;
                        }
                    }
                }
                ch[y * n + x] = s / k;
            }
        }
    }
}

/// Renders `alpha` in the preset's style into a `3×H×W` image in `[0, 1]`.
fn stylize<R: Rng>(preset: Preset, alpha: &[f64], r: &mut R) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let hw = n * n;
    let mut img = vec![0.0; CHANNELS * hw];
    let mut put = |i: usize, c: Rgb| {
        for k in 0..3 {
            img[k * hw + i] = c[k];
        }
    };
    let mix = |a: Rgb, b: Rgb, t: f64| -> Rgb { [0, 1, 2].map(|k| a[k] * (1.0 - t) + b[k] * t) };
    let noise_level;
    let mut blur = false;
    match preset {
        Preset::Photo => {
            let (fg, bg) = contrasting_pair(r, |r| random_color(r, 0.0, 1.0), |r| random_color(r, 0.1, 0.9));
            let bg2 = mix(bg, random_color(r, 0.0, 1.0), 0.4);
            let (gx, gy) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            for i in 0..hw {
                let (x, y) = ((i % n) as f64 / n as f64 - 0.5, (i / n) as f64 / n as f64 - 0.5);
                let t = (0.5 + gx * x + gy * y).clamp(0.0, 1.0);
                let shade = 1.0 - 0.25 * (x + y + 1.0) / 2.0;
                let f = fg.map(|v| v * shade);
                put(i, mix(mix(bg, bg2, t), f, alpha[i]));
            }
            noise_level = 0.03;
        }
        Preset::Sketch => {
            let e = edges(alpha);
            let paper = r.random_range(0.85..1.0);
            let ink = r.random_range(0.0..0.25);
            let hatch = r.random_range(0.45..0.75);
            let period = r.random_range(3..6);
            for i in 0..hw {
                let (x, y) = (i % n, i / n);
                let fill = if (x + y) % period == 0 { hatch } else { paper - 0.1 };
                let base = paper * (1.0 - alpha[i]) + fill * alpha[i];
                let v = base * (1.0 - e[i]) + ink * e[i];
                put(i, [v, v, v]);
            }
            noise_level = 0.02;
        }
        Preset::Cartoon => {
            let (fg, bg) = contrasting_pair(r, saturated_color, saturated_color);
            let e = edges(alpha);
            for i in 0..hw {
                let c = mix(bg, fg, alpha[i]);
                put(i, mix(c, [0.0; 3], e[i]));
            }
            noise_level = 0.0;
        }
        Preset::Art => {
            let (fg, bg) = contrasting_pair(r, |r| random_color(r, 0.0, 1.0), |r| random_color(r, 0.0, 1.0));
            let stripe = random_color(r, 0.0, 1.0);
            let (fx, fy) = (r.random_range(0.2..0.9), r.random_range(0.2..0.9));
            let ph = r.random_range(0.0..6.3);
            for i in 0..hw {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                let t = 0.5 + 0.5 * (fx * x + fy * y + ph).sin();
                let b = mix(bg, stripe, 0.5 * t);
                let f = mix(fg, stripe, 0.2 * (1.0 - t));
                put(i, mix(b, f, alpha[i]));
            }
            noise_level = 0.04;
            blur = true;
        }
        Preset::Night => {
            let (fg, bg) = contrasting_pair(
                r,
                |r| random_color(r, 0.25, 0.6),
                |r| random_color(r, 0.0, 0.12),
            );
            for i in 0..hw {
                let mut c = mix(bg, fg, alpha[i]);
                c[2] = (c[2] * 1.3 + 0.05).min(1.0);
                put(i, c);
            }
            noise_level = 0.08;
        }
        Preset::Fog => {
            let (fg, bg) = contrasting_pair(r, |r| random_color(r, 0.0, 1.0), |r| random_color(r, 0.0, 1.0));
            let haze = r.random_range(0.45..0.6);
            for i in 0..hw {
                let c = mix(bg, fg, alpha[i]);
                put(i, mix(c, [0.8; 3], haze));
            }
            noise_level = 0.03;
            blur = true;
        }
    }
    if blur {
        box_blur(&mut img);
    }
    if noise_level > 0.0 {
        for v in &mut img {
            let z: f64 = r.sample(rand_distr::StandardNormal);
            *v += noise_level * z;
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Deterministic dataset of `n` samples; sample `i` has label `i mod K`.
pub fn generate(spec: &DomainSpec, classes: usize, n: usize, seed: u64, split: Split) -> Result<DomainDataset> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::invalid(format!(
            "class count {classes} not in [2, {MAX_CLASSES}]"
        )));
    }
    if n < classes {
        return Err(Error::invalid(format!("{n} samples cannot cover {classes} classes")));
    }
    let style_seed = split_seed(seed, split);
    let mut images = Vec::with_capacity(n * CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let alpha = geometry_mask(seed, split, i, classes);
        let mut r = rng::indexed_stream(style_seed, &format!("style:{}", spec.preset.name()), i as u64);
        images.extend(stylize(spec.preset, &alpha, &mut r));
        labels.push(i % classes);
    }
    DomainDataset::new(
        &spec.name,
        split,
        seed,
        classes,
        [CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
        images,
        labels,
    )
}

/// Dataset path with its trainer role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: Split,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// `role path` per line; `#` starts a comment. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(role), Some(path), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("expected 'role path', got '{line}'"),
                });
            };
            let role = Split::parse(role).map_err(|e| Error::Parse {
                line: no + 1,
                msg: e.to_string(),
            })?;
            let p = Path::new(path);
            entries.push(ManifestEntry {
                role,
                path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::invalid(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes paths relative to `base` when possible.
    pub fn render(&self, base: &Path) -> String {
        let mut s = String::from("# role path\n");
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            s.push_str(&format!("{} {}\n", e.role, p.display()));
        }
        s
    }

    pub fn paths(&self, role: Split) -> impl Iterator<Item = &Path> {
        self.entries.iter().filter(move |e| e.role == role).map(|e| e.path.as_path())
    }
}
