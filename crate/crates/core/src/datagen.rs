//! Synthetic multi-domain text-line images.
//!
//! Each domain renders random strings from its alphabet with the built-in
//! bitmap font into a 32x128 canvas under its own visual regime, then
//! normalizes every image to zero mean and unit variance. Everything is a
//! pure function of the master seed.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::ctc::{self, LabelSeq};
use crate::error::{Error, Result};
use crate::font::{self, GLYPH_HEIGHT, GLYPH_WIDTH};
use crate::tensor::{self, Tensor};

/// Every character the recognizer knows; class `i + 1` is `ALPHABET[i]`.
pub const ALPHABET: &str = "0123456789ABCDEFGHJKLMNPRSTUVW";
pub const IMAGE_HEIGHT: usize = 32;
pub const IMAGE_WIDTH: usize = 128;
pub const SAMPLE_MAGIC: &[u8; 4] = b"ADOC";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

const SCALE: usize = 3;
const MAX_GAP: usize = 4;

pub fn class_of(c: char) -> Option<u32> {
    ALPHABET.chars().position(|a| a == c).map(|i| i as u32 + 1)
}

pub fn char_of(class: u32) -> Option<char> {
    class.checked_sub(1).and_then(|i| ALPHABET.chars().nth(i as usize))
}

pub fn label_to_string(label: &[u32]) -> String {
    label.iter().map(|&c| char_of(c).unwrap_or('?')).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Clean,
    /// Additive Gaussian pixel noise with the given standard deviation.
    Speckle(f64),
    /// A horizontal ramp between two random gray levels in `[0, 0.6]`.
    Gradient,
}

impl Background {
    fn to_text(self) -> String {
        match self {
            Background::Clean => "clean".into(),
            Background::Speckle(s) => format!("speckle:{s}"),
            Background::Gradient => "gradient".into(),
        }
    }

    fn from_text(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Background::Clean),
            "gradient" => Ok(Background::Gradient),
            _ => s
                .strip_prefix("speckle:")
                .and_then(|v| v.parse().ok())
                .map(Background::Speckle)
                .ok_or_else(|| Error::Config(format!("unknown background {s:?}"))),
        }
    }
}

/// Glyph rendering variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlyphStyle {
    Regular = 0,
    Bold = 1,
    Slanted = 2,
}

impl GlyphStyle {
    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(GlyphStyle::Regular),
            1 => Ok(GlyphStyle::Bold),
            2 => Ok(GlyphStyle::Slanted),
            _ => Err(Error::Config(format!("unknown glyph style {id}"))),
        }
    }

    /// Rendered width of one glyph in pixels.
    pub fn width(self) -> usize {
        GLYPH_WIDTH * SCALE
            + match self {
                GlyphStyle::Regular => 0,
                GlyphStyle::Bold => 1,
                GlyphStyle::Slanted => (GLYPH_HEIGHT - 1) / 2,
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub alphabet: String,
    pub style: GlyphStyle,
    pub background: Background,
    pub min_len: usize,
    pub max_len: usize,
    pub invert: bool,
    pub train_count: usize,
    pub test_count: usize,
}

impl DomainSpec {
    /// The three shipped domains.
    pub fn defaults() -> Vec<DomainSpec> {
        let digits = &ALPHABET[..10];
        vec![
            DomainSpec {
                name: "clean-digits".into(),
                alphabet: digits.into(),
                style: GlyphStyle::Regular,
                background: Background::Clean,
                min_len: 3,
                max_len: 6,
                invert: false,
                train_count: 2000,
                test_count: 400,
            },
            DomainSpec {
                name: "noisy-inverse".into(),
                alphabet: digits.into(),
                style: GlyphStyle::Regular,
                background: Background::Speckle(0.3),
                min_len: 3,
                max_len: 6,
                invert: true,
                train_count: 2000,
                test_count: 400,
            },
            DomainSpec {
                name: "mixed-glyphs".into(),
                alphabet: ALPHABET.into(),
                style: GlyphStyle::Slanted,
                background: Background::Gradient,
                min_len: 3,
                max_len: 6,
                invert: false,
                train_count: 2000,
                test_count: 400,
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::Config(format!("{}: empty alphabet", self.name)));
        }
        if let Some(c) = self.alphabet.chars().find(|&c| class_of(c).is_none()) {
            return Err(Error::Config(format!("{}: no glyph for {c:?}", self.name)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("{}: bad length range", self.name)));
        }
        let widest = self.max_len * self.style.width() + (self.max_len - 1) * MAX_GAP;
        if widest > IMAGE_WIDTH {
            return Err(Error::Config(format!(
                "{}: {} glyphs need {widest}px, canvas is {IMAGE_WIDTH}px",
                self.name, self.max_len
            )));
        }
        if let Background::Speckle(s) = self.background {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{}: bad speckle sigma", self.name)));
            }
        }
        Ok(())
    }

    fn classes(&self) -> Vec<u32> {
        self.alphabet.chars().filter_map(class_of).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, 32, 128]`, normalized.
    pub image: Tensor,
    pub label: LabelSeq,
    pub domain: u32,
    pub id: u64,
    pub seed: u64,
}

/// Mixes several words into one well-spread seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p;
        // splitmix64 finalizer
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Renders an un-normalized image and its label. Background pixels of a
/// clean, non-inverted spec are exactly 0 and ink pixels exactly 1.
pub fn render_raw(spec: &DomainSpec, seed: u64) -> Result<(Vec<f64>, LabelSeq)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = spec.classes();
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let label: Vec<u32> = (0..len).map(|_| classes[rng.gen_range(0..classes.len())]).collect();

    let gw = spec.style.width();
    let gh = GLYPH_HEIGHT * SCALE;
    let gaps: Vec<usize> = (1..len).map(|_| rng.gen_range(1..=MAX_GAP)).collect();
    let total = len * gw + gaps.iter().sum::<usize>();
    let mut x0 = rng.gen_range(0..=IMAGE_WIDTH - total);
    let mut ink = vec![false; IMAGE_HEIGHT * IMAGE_WIDTH];
    for (i, &class) in label.iter().enumerate() {
        let c = char_of(class).expect("class from alphabet");
        let bitmap = font::glyph(c).expect("validated alphabet");
        let y0 = rng.gen_range(1..=IMAGE_HEIGHT - gh - 1);
        draw_glyph(&mut ink, &bitmap, x0, y0, spec.style);
        x0 += gw + gaps.get(i).copied().unwrap_or(0);
    }

    let (lo, hi) = match spec.background {
        Background::Gradient => (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6)),
        _ => (0.0, 0.0),
    };
    let mut img: Vec<f64> = ink
        .iter()
        .enumerate()
        .map(|(i, &on)| {
            if on {
                1.0
            } else {
                let t = (i % IMAGE_WIDTH) as f64 / (IMAGE_WIDTH - 1) as f64;
                lo + (hi - lo) * t
            }
        })
        .collect();
    if spec.invert {
        img.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    if let Background::Speckle(sigma) = spec.background {
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("validated sigma");
            img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }
    let label = LabelSeq::new(label)?;
    Ok((img, label))
}

fn draw_glyph(ink: &mut [bool], bitmap: &[u8; GLYPH_HEIGHT], x0: usize, y0: usize, style: GlyphStyle) {
    for gy in 0..GLYPH_HEIGHT {
        let shear = match style {
            GlyphStyle::Slanted => (GLYPH_HEIGHT - 1 - gy) / 2,
            _ => 0,
        };
        for gx in 0..GLYPH_WIDTH {
            if !font::pixel(bitmap, gx, gy) {
                continue;
            }
            let extra = usize::from(style == GlyphStyle::Bold);
            for dy in 0..SCALE {
                for dx in 0..SCALE + extra {
                    let (x, y) = (x0 + shear + gx * SCALE + dx, y0 + gy * SCALE + dy);
                    if x < IMAGE_WIDTH && y < IMAGE_HEIGHT {
                        ink[y * IMAGE_WIDTH + x] = true;
                    }
                }
            }
        }
    }
}

/// `(x - mean) / max(std, 1e-6)` with the population standard deviation.
pub fn normalize_image(raw: &Tensor) -> Tensor {
    let (mean, var) = tensor::mean_var(raw.data());
    let std = var.sqrt().max(1e-6);
    let data = raw.data().iter().map(|v| (v - mean) / std).collect();
    Tensor::new(raw.shape().to_vec(), data).expect("same shape")
}

pub fn render_sample(spec: &DomainSpec, domain: u32, id: u64, seed: u64) -> Result<Sample> {
    let (raw, label) = render_raw(spec, seed)?;
    let (_, var) = tensor::mean_var(&raw);
    if var == 0.0 {
        return Err(Error::Contract(format!("sample {id} rendered a constant image")));
    }
    let raw = Tensor::new([1, IMAGE_HEIGHT, IMAGE_WIDTH], raw)?;
    Ok(Sample {
        image: normalize_image(&raw),
        label,
        domain,
        id,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn sample_seed(master: u64, domain: u32, split: Split, index: u64) -> u64 {
    derive_seed(&[master, domain as u64, split.tag(), index])
}

pub fn render_split(spec: &DomainSpec, domain: u32, split: Split, master: u64, timesteps: usize) -> Result<Vec<Sample>> {
    let count = match split {
        Split::Train => spec.train_count,
        Split::Test => spec.test_count,
    };
    (0..count as u64)
        .map(|i| {
            let s = render_sample(spec, domain, i, sample_seed(master, domain, split, i))?;
            ctc::check_feasible(&s.label, timesteps).map_err(|e| match e {
                Error::InfeasibleLabel {
                    label_len,
                    repeats,
                    timesteps,
                    ..
                } => Error::InfeasibleLabel {
                    label_len,
                    repeats,
                    timesteps,
                    sample: Some(i),
                },
                e => e,
            })?;
            Ok(s)
        })
        .collect()
}

pub fn encode_samples(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + samples.len() * (8 + 4 * IMAGE_HEIGHT * IMAGE_WIDTH));
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        if s.image.len() != IMAGE_HEIGHT * IMAGE_WIDTH {
            return Err(Error::Shape(format!("sample {} has {} pixels", s.id, s.image.len())));
        }
        out.extend_from_slice(&s.domain.to_le_bytes());
        out.extend_from_slice(&(s.label.len() as u32).to_le_bytes());
        for &l in s.label.iter() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt {
                offset: self.pos as u64,
                reason: format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a sample file. Sample ids are positions in the file; seeds are
/// not stored and come back as 0.
pub fn decode_samples(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != SAMPLE_MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = c.u32()?;
    if version != SAMPLE_VERSION {
        return Err(Error::Version {
            found: version,
            supported: SAMPLE_VERSION,
        });
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for id in 0..count as u64 {
        let domain = c.u32()?;
        let len = c.u32()? as usize;
        let offset = c.pos as u64;
        let label = (0..len).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let label = LabelSeq::new(label).map_err(|_| Error::Corrupt {
            offset,
            reason: "label contains blank".into(),
        })?;
        let raw = c.take(4 * IMAGE_HEIGHT * IMAGE_WIDTH)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push(Sample {
            image: Tensor::new([1, IMAGE_HEIGHT, IMAGE_WIDTH], data)?,
            label,
            domain,
            id,
            seed: 0,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Corrupt {
            offset: c.pos as u64,
            reason: "trailing bytes".into(),
        });
    }
    Ok(out)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_samples(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestDomain {
    pub spec: DomainSpec,
    pub train_file: String,
    pub test_file: String,
    pub train_sha256: String,
    pub test_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub master_seed: u64,
    pub timesteps: usize,
    pub domains: Vec<ManifestDomain>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# synthetic text-line dataset");
        let _ = writeln!(s, "version = {SAMPLE_VERSION}");
        let _ = writeln!(s, "master_seed = {}", self.master_seed);
        let _ = writeln!(s, "alphabet = {ALPHABET}");
        let _ = writeln!(s, "timesteps = {}", self.timesteps);
        let _ = writeln!(s, "domains = {}", self.domains.len());
        for (i, d) in self.domains.iter().enumerate() {
            let sp = &d.spec;
            let _ = writeln!(s, "\n[domain {i}]");
            let _ = writeln!(s, "name = {}", sp.name);
            let _ = writeln!(s, "alphabet = {}", sp.alphabet);
            let _ = writeln!(s, "style = {}", sp.style as u32);
            let _ = writeln!(s, "background = {}", sp.background.to_text());
            let _ = writeln!(s, "invert = {}", sp.invert);
            let _ = writeln!(s, "min_len = {}", sp.min_len);
            let _ = writeln!(s, "max_len = {}", sp.max_len);
            let _ = writeln!(s, "train = {}", sp.train_count);
            let _ = writeln!(s, "test = {}", sp.test_count);
            let _ = writeln!(s, "train_file = {}", d.train_file);
            let _ = writeln!(s, "test_file = {}", d.test_file);
            let _ = writeln!(s, "train_sha256 = {}", d.train_sha256);
            let _ = writeln!(s, "test_sha256 = {}", d.test_sha256);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = crate::config::KeyValues::default();
        let mut sections: Vec<crate::config::KeyValues> = Vec::new();
        for line in text.lines() {
            let t = line.trim();
            if t.starts_with("[domain") {
                sections.push(Default::default());
                continue;
            }
            let kv = crate::config::KeyValues::parse(t)?;
            match sections.last_mut() {
                Some(sec) => sec.merge(&kv),
                None => header.merge(&kv),
            }
        }
        let get = |kv: &crate::config::KeyValues, k: &str| -> Result<String> {
            kv.get(k)
                .map(str::to_owned)
                .ok_or_else(|| Error::Config(format!("manifest is missing {k}")))
        };
        let num = |kv: &crate::config::KeyValues, k: &str| -> Result<u64> {
            get(kv, k)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest field {k} is not a number")))
        };
        let version = num(&header, "version")? as u32;
        if version != SAMPLE_VERSION {
            return Err(Error::Version {
                found: version,
                supported: SAMPLE_VERSION,
            });
        }
        let domains = sections
            .iter()
            .map(|sec| {
                Ok(ManifestDomain {
                    spec: DomainSpec {
                        name: get(sec, "name")?,
                        alphabet: get(sec, "alphabet")?,
                        style: GlyphStyle::from_id(num(sec, "style")? as u32)?,
                        background: Background::from_text(&get(sec, "background")?)?,
                        invert: get(sec, "invert")? == "true",
                        min_len: num(sec, "min_len")? as usize,
                        max_len: num(sec, "max_len")? as usize,
                        train_count: num(sec, "train")? as usize,
                        test_count: num(sec, "test")? as usize,
                    },
                    train_file: get(sec, "train_file")?,
                    test_file: get(sec, "test_file")?,
                    train_sha256: get(sec, "train_sha256")?,
                    test_sha256: get(sec, "test_sha256")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if num(&header, "domains")? as usize != domains.len() {
            return Err(Error::Config("manifest domain count does not match sections".into()));
        }
        Ok(Manifest {
            master_seed: num(&header, "master_seed")?,
            timesteps: num(&header, "timesteps")? as usize,
            domains,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.spec.name == name)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Renders every split of every spec into `out_dir` and writes the manifest.
/// `timesteps` is the model's output length; every label is checked to be
/// alignable within it.
pub fn generate_dataset(specs: &[DomainSpec], out_dir: &Path, master_seed: u64, timesteps: usize) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut domains = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let mut files = Vec::new();
        for split in [Split::Train, Split::Test] {
            let samples = render_split(spec, i as u32, split, master_seed, timesteps)?;
            let bytes = encode_samples(&samples)?;
            let file = format!("{}.{}.bin", spec.name, split.name());
            write_file(&out_dir.join(&file), &bytes)?;
            files.push((file, sha256_hex(&bytes)));
        }
        let [(train_file, train_sha256), (test_file, test_sha256)]: [(String, String); 2] =
            files.try_into().expect("two splits");
        domains.push(ManifestDomain {
            spec: spec.clone(),
            train_file,
            test_file,
            train_sha256,
            test_sha256,
        });
    }
    let manifest = Manifest {
        master_seed,
        timesteps,
        domains,
    };
    write_file(&out_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// One domain's samples as loaded from disk.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub index: usize,
    pub spec: DomainSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Loads a domain's splits, verifying checksums against the manifest and
/// restoring per-sample seeds.
pub fn load_domain(dir: &Path, manifest: &Manifest, index: usize) -> Result<DomainData> {
    let d = manifest
        .domains
        .get(index)
        .ok_or_else(|| Error::Config(format!("dataset has no domain {index}")))?;
    let load = |file: &str, sha: &str, split: Split| -> Result<Vec<Sample>> {
        let path: PathBuf = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != sha {
            return Err(Error::Corrupt {
                offset: 0,
                reason: format!("{} does not match its manifest checksum", path.display()),
            });
        }
        let mut samples = decode_samples(&bytes)?;
        for s in &mut samples {
            s.seed = sample_seed(manifest.master_seed, index as u32, split, s.id);
        }
        Ok(samples)
    };
    Ok(DomainData {
        index,
        spec: d.spec.clone(),
        train: load(&d.train_file, &d.train_sha256, Split::Train)?,
        test: load(&d.test_file, &d.test_sha256, Split::Test)?,
    })
}
