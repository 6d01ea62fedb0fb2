//! On-disk formats: binary checkpoints, binary PPM images, metrics CSV,
//! and the exported synthetic corpus.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "DIVA" | u32 version | u32 entry count
//! per entry: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] | f64 values[prod(dims)]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::encoder::ImageTensor;
use crate::error::{DivaError, Result};
use crate::params::ParamSet;
use crate::synth::{self, Canvas, LabeledSet, VisualPattern};
use crate::tensor::Tensor;
use crate::trainer::MetricRow;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DIVA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DivaError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses a checkpoint; nothing is returned unless the whole buffer is valid.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| DivaError::BadMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DivaError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DivaError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("entry count")?;
    let mut params = ParamSet::new();
    for e in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| DivaError::MalformedCheckpoint(format!("entry {e}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some())
            .ok_or_else(|| DivaError::MalformedCheckpoint(format!("`{name}`: size overflow")))?;
        let raw = r.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&dims, data)
            .map_err(|e| DivaError::MalformedCheckpoint(format!("`{name}`: {e}")))?;
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(DivaError::MalformedCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    decode_checkpoint(&fs::read(path)?)
}

/// Serializes bytes as a binary P6 PPM with maxval 255.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Parses a binary P6 PPM into `(width, height, rgb bytes)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(DivaError::Ppm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        if fields.len() == 1 && fields[0] != "P6" {
            return Err(DivaError::Ppm(format!(
                "expected binary P6 magic, found `{}`",
                fields[0]
            )));
        }
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| DivaError::Ppm(format!("bad {what} `{s}`")))
    };
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(DivaError::Ppm(format!("maxval must be 255, got {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DivaError::Ppm("missing whitespace after maxval".into()));
    }
    pos += 1;
    let n = width * height * 3;
    if bytes.len() - pos != n {
        return Err(DivaError::Ppm(format!(
            "expected {n} pixel bytes for {width}x{height}, found {}",
            bytes.len() - pos
        )));
    }
    Ok((width, height, bytes[pos..].to_vec()))
}

/// Reads a PPM and maps bytes onto `[-1, 1]`. When `expect` is given the
/// image must be exactly that `(width, height)`.
pub fn read_ppm(path: &Path, expect: Option<(usize, usize)>) -> Result<ImageTensor> {
    let (w, h, rgb) = decode_ppm(&fs::read(path)?)?;
    if let Some((ew, eh)) = expect {
        if (w, h) != (ew, eh) {
            return Err(DivaError::Ppm(format!(
                "{}: image is {w}x{h}, config expects {ew}x{eh}",
                path.display()
            )));
        }
    }
    ImageTensor::from_bytes(h, w, &rgb)
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    write_atomic(
        path,
        &encode_ppm(image.width(), image.height(), &image.to_bytes()),
    )
}

pub const METRICS_HEADER: &str = "step,phase,loss,lr";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{:e},{:e}\n", r.step, r.phase, r.loss, r.lr));
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_atomic(path, metrics_csv(rows).as_bytes())
}

/// Parses a metrics CSV written by [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(DivaError::InvalidArgument(format!(
            "{}: missing `{METRICS_HEADER}` header",
            path.display()
        )));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || DivaError::InvalidArgument(format!("bad metrics row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad())?,
                phase: f[1].parse()?,
                loss: f[2].parse().map_err(|_| bad())?,
                lr: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Corpus sizes and seeds.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Directory written by `export_corpus`; generated in memory when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub train_images: usize,
    pub pairs_per_pattern: usize,
    pub labeled_images: usize,
    pub train_seed: u64,
    pub pair_seed: u64,
    pub labeled_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            dir: None,
            train_images: 512,
            pairs_per_pattern: 256,
            labeled_images: 1024,
            train_seed: 0,
            pair_seed: 1_000_000,
            labeled_seed: 2_000_000,
        }
    }
}

/// The full synthetic corpus in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<ImageTensor>,
    pub pairs: Vec<(VisualPattern, u64, ImageTensor, ImageTensor)>,
    pub labeled: LabeledSet,
}

impl Corpus {
    /// Imports from `spec.dir` when set, otherwise generates in memory.
    pub fn load(spec: &CorpusSpec, image_size: usize) -> Result<Self> {
        match &spec.dir {
            Some(dir) => import_corpus(dir, image_size),
            None => Ok(Self::generate(spec)),
        }
    }

    pub fn generate(spec: &CorpusSpec) -> Self {
        let pairs = synth::pair_set(spec.pairs_per_pattern, spec.pair_seed)
            .into_iter()
            .map(|p| {
                let (a, b) = p.images();
                (p.pattern, p.seed, a, b)
            })
            .collect();
        Corpus {
            train: synth::train_corpus(spec.train_images, spec.train_seed),
            pairs,
            labeled: LabeledSet::generate(spec.labeled_images, spec.labeled_seed),
        }
    }
}

pub const MANIFEST_HEADER: &str = "filename,split,label,seed";

fn write_canvas(dir: &Path, rel: &str, c: &Canvas) -> Result<()> {
    write_atomic(&dir.join(rel), &encode_ppm(c.size, c.size, &c.bytes))
}

/// Writes every image as PPM under `dir` plus `manifest.csv`.
pub fn export_corpus(dir: &Path, spec: &CorpusSpec) -> Result<usize> {
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut n = 0;
    for i in 0..spec.train_images {
        let seed = spec.train_seed + i as u64;
        let rel = format!("train/{i:05}.ppm");
        write_canvas(dir, &rel, &synth::gen_train_scene(seed))?;
        manifest.push_str(&format!("{rel},train,-,{seed}\n"));
        n += 1;
    }
    for i in 0..spec.labeled_images {
        let class = i % synth::NUM_CLASSES;
        let seed = spec.labeled_seed + i as u64;
        let rel = format!("labeled/{i:05}.ppm");
        write_canvas(dir, &rel, &synth::gen_labeled(class, seed))?;
        manifest.push_str(&format!("{rel},labeled,{class},{seed}\n"));
        n += 1;
    }
    for pair in synth::pair_set(spec.pairs_per_pattern, spec.pair_seed) {
        for (side, canvas) in [("a", &pair.a), ("b", &pair.b)] {
            let rel = format!("pairs/{}_{:07}_{side}.ppm", pair.pattern, pair.seed);
            write_canvas(dir, &rel, canvas)?;
            manifest.push_str(&format!(
                "{rel},pair_{side},{},{}\n",
                pair.pattern, pair.seed
            ));
            n += 1;
        }
    }
    write_atomic(&dir.join("manifest.csv"), manifest.as_bytes())?;
    Ok(n)
}

/// Loads a corpus previously written by [`export_corpus`].
pub fn import_corpus(dir: &Path, image_size: usize) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(DivaError::InvalidArgument(
            "manifest header mismatch".into(),
        ));
    }
    let mut corpus = Corpus {
        train: Vec::new(),
        pairs: Vec::new(),
        labeled: LabeledSet {
            images: Vec::new(),
            labels: Vec::new(),
            seeds: Vec::new(),
        },
    };
    let mut pending_a: Option<(VisualPattern, u64, ImageTensor)> = None;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || DivaError::InvalidArgument(format!("bad manifest row `{line}`"));
        if f.len() != 4 {
            return Err(bad());
        }
        let seed: u64 = f[3].parse().map_err(|_| bad())?;
        let img = read_ppm(&dir.join(f[0]), Some((image_size, image_size)))?;
        match f[1] {
            "train" => corpus.train.push(img),
            "labeled" => {
                corpus.labeled.images.push(img);
                corpus.labeled.labels.push(f[2].parse().map_err(|_| bad())?);
                corpus.labeled.seeds.push(seed);
            }
            "pair_a" => pending_a = Some((f[2].parse()?, seed, img)),
            "pair_b" => {
                let (p, s, a) = pending_a.take().ok_or_else(bad)?;
                if p != f[2].parse()? || s != seed {
                    return Err(bad());
                }
                corpus.pairs.push((p, s, a, img));
            }
            _ => return Err(bad()),
        }
    }
    Ok(corpus)
}
