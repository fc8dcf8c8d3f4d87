//! File formats: binary anchors / field / checkpoint containers, SGSM float
//! maps, PPM and PNG images, camera JSON and on-disk datasets.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::decoder::{DecoderSet, Mlp};
use crate::error::{Error, Result};
use crate::field::{FeatureField, FieldConfig, FEATURE_DIM};
use crate::image::Image;
use crate::math::Vec3;
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::scene::{Anchor, Origin};

pub const ANCHOR_MAGIC: &[u8; 4] = b"SGSA";
pub const FIELD_MAGIC: &[u8; 4] = b"SGSF";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"SGSW";
pub const OPTIM_MAGIC: &[u8; 4] = b"SGSO";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGSC";
pub const MAP_MAGIC: &[u8; 4] = b"SGSM";

const ANCHOR_VERSION: u32 = 1;
const FIELD_VERSION: u32 = 1;
const WEIGHTS_VERSION: u32 = 1;
const OPTIM_VERSION: u32 = 1;
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.f32(*x);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Dec { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != m {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(m)
            )));
        }
        Ok(())
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            return Err(Error::Format(format!("{}: unsupported version {v}", self.what)));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn exact_f32(v: u32, what: &str) -> Result<f32> {
    let f = v as f32;
    if f as u32 != v {
        return Err(Error::Format(format!("{what} {v} is not representable in the anchor file")));
    }
    Ok(f)
}

fn f32_to_u32(v: f32, what: &str) -> Result<u32> {
    if !(v >= 0.0) || v.fract() != 0.0 || v > 16_777_216.0 {
        return Err(Error::Format(format!("anchor {what} field holds {v}")));
    }
    Ok(v as u32)
}

/// Serializes anchors. Every anchor must carry exactly `k` offsets.
pub fn encode_anchors(anchors: &[Anchor], k: usize) -> Result<Vec<u8>> {
    let mut e = Enc::default();
    e.bytes(ANCHOR_MAGIC);
    e.u32(ANCHOR_VERSION);
    e.u32(anchors.len() as u32);
    e.u32(k as u32);
    for a in anchors {
        a.validate(k)?;
        e.f32s(&a.position);
        e.f32(exact_f32(a.level, "level")?);
        e.f32s(&a.offset_scale);
        for o in &a.offsets {
            e.f32s(o);
        }
        e.f32s(&a.f_mu);
        e.f32s(&a.f_sigma);
        e.f32(a.opacity_accum);
        e.f32(exact_f32(a.accum_steps, "accum_steps")?);
        e.f32(a.origin as u32 as f32);
    }
    Ok(e.0)
}

/// Parses an anchor file; returns the anchors and `k`.
pub fn decode_anchors(bytes: &[u8]) -> Result<(Vec<Anchor>, usize)> {
    let mut d = Dec::new(bytes, "anchor file");
    decode_anchors_from(&mut d).and_then(|r| d.finish().map(|_| r))
}

fn decode_anchors_from(d: &mut Dec<'_>) -> Result<(Vec<Anchor>, usize)> {
    d.magic(ANCHOR_MAGIC)?;
    d.version(ANCHOR_VERSION)?;
    let n = d.u32()? as usize;
    let k = d.u32()? as usize;
    if k == 0 {
        return Err(Error::Format("anchor file: k = 0".into()));
    }
    let per = 3 + 1 + 3 + 3 * k + 2 * FEATURE_DIM + 3;
    if (d.buf.len() - d.pos) / 4 < n.saturating_mul(per) {
        return Err(Error::Format(format!("anchor file: truncated, {n} anchors declared")));
    }
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        let v = d.f32s(per)?;
        let mut it = v.into_iter();
        let mut next = |m: usize| -> Vec<f32> { (&mut it).take(m).collect() };
        let position: [f32; 3] = next(3).try_into().unwrap();
        let level = f32_to_u32(next(1)[0], "level")?;
        let offset_scale: [f32; 3] = next(3).try_into().unwrap();
        let offsets = next(3 * k).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let f_mu: [f32; FEATURE_DIM] = next(FEATURE_DIM).try_into().unwrap();
        let f_sigma: [f32; FEATURE_DIM] = next(FEATURE_DIM).try_into().unwrap();
        let tail = next(3);
        let accum_steps = f32_to_u32(tail[1], "accum_steps")?;
        let origin = Origin::from_code(f32_to_u32(tail[2], "origin")?)
            .ok_or_else(|| Error::Format(format!("anchor file: unknown origin {}", tail[2])))?;
        let a = Anchor {
            position,
            level,
            offset_scale,
            offsets,
            f_mu,
            f_sigma,
            opacity_accum: tail[0],
            accum_steps,
            origin,
        };
        a.validate(k).map_err(|e| Error::Format(format!("anchor file: {e}")))?;
        anchors.push(a);
    }
    Ok((anchors, k))
}

pub fn save_anchors(path: &Path, anchors: &[Anchor], k: usize) -> Result<()> {
    atomic_write(path, &encode_anchors(anchors, k)?)
}

pub fn load_anchors(path: &Path) -> Result<(Vec<Anchor>, usize)> {
    decode_anchors(&read_file(path)?)
}

pub fn encode_field(field: &FeatureField) -> Vec<u8> {
    let c = &field.config;
    let mut e = Enc::default();
    e.bytes(FIELD_MAGIC);
    e.u32(FIELD_VERSION);
    e.u32(c.levels as u32);
    e.u32(c.features_per_level as u32);
    e.u32(c.table_size as u32);
    e.f32(c.base_resolution);
    e.f32(c.per_level_scale);
    e.f32s(&field.tables);
    e.0
}

pub fn decode_field(bytes: &[u8]) -> Result<FeatureField> {
    let mut d = Dec::new(bytes, "field file");
    let f = decode_field_from(&mut d)?;
    d.finish()?;
    Ok(f)
}

fn decode_field_from(d: &mut Dec<'_>) -> Result<FeatureField> {
    d.magic(FIELD_MAGIC)?;
    d.version(FIELD_VERSION)?;
    let config = FieldConfig {
        levels: d.u32()? as usize,
        features_per_level: d.u32()? as usize,
        table_size: d.u32()? as usize,
        base_resolution: d.f32()?,
        per_level_scale: d.f32()?,
        ..FieldConfig::default()
    };
    config.validate().map_err(|e| Error::Format(format!("field file: {e}")))?;
    let n = config.levels * config.table_size * config.features_per_level;
    let tables = d.f32s(n)?;
    Ok(FeatureField {
        config,
        tables,
        frozen: false,
    })
}

pub fn save_field(path: &Path, field: &FeatureField) -> Result<()> {
    atomic_write(path, &encode_field(field))
}

pub fn load_field(path: &Path) -> Result<FeatureField> {
    decode_field(&read_file(path)?)
}

fn encode_mlp(e: &mut Enc, m: &Mlp) {
    e.u32(m.input as u32);
    e.u32(m.hidden as u32);
    e.u32(m.output as u32);
    e.f32s(&m.w1);
    e.f32s(&m.b1);
    e.f32s(&m.w2);
    e.f32s(&m.b2);
}

fn decode_mlp(d: &mut Dec<'_>) -> Result<Mlp> {
    let (input, hidden, output) = (d.u32()? as usize, d.u32()? as usize, d.u32()? as usize);
    Ok(Mlp {
        input,
        hidden,
        output,
        w1: d.f32s(input * hidden)?,
        b1: d.f32s(hidden)?,
        w2: d.f32s(hidden * output)?,
        b2: d.f32s(output)?,
    })
}

pub fn encode_decoders(dec: &DecoderSet) -> Vec<u8> {
    let mut e = Enc::default();
    e.bytes(WEIGHTS_MAGIC);
    e.u32(WEIGHTS_VERSION);
    e.u32(dec.k as u32);
    for m in dec.heads() {
        encode_mlp(&mut e, m);
    }
    e.0
}

pub fn decode_decoders(bytes: &[u8]) -> Result<DecoderSet> {
    let mut d = Dec::new(bytes, "decoder weights");
    d.magic(WEIGHTS_MAGIC)?;
    d.version(WEIGHTS_VERSION)?;
    let k = d.u32()? as usize;
    let set = DecoderSet {
        k,
        alpha: decode_mlp(&mut d)?,
        color: decode_mlp(&mut d)?,
        rotation: decode_mlp(&mut d)?,
        scale: decode_mlp(&mut d)?,
    };
    d.finish()?;
    let widths = [1, 3, 4, 3];
    for (m, w) in set.heads().iter().zip(widths) {
        if m.input != crate::decoder::DECODER_INPUT || m.output != k * w || m.hidden != set.alpha.hidden {
            return Err(Error::Format("decoder weights: inconsistent head shapes".into()));
        }
    }
    Ok(set)
}

/// Named Adam moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub groups: BTreeMap<String, AdamState>,
}

pub fn encode_optimizer(state: &OptimizerState) -> Vec<u8> {
    let mut e = Enc::default();
    e.bytes(OPTIM_MAGIC);
    e.u32(OPTIM_VERSION);
    e.u32(state.groups.len() as u32);
    for (name, g) in &state.groups {
        e.u32(name.len() as u32);
        e.bytes(name.as_bytes());
        e.u64(g.step);
        e.u64(g.m.len() as u64);
        for v in g.m.iter().chain(&g.v) {
            e.f64(*v);
        }
    }
    e.0
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<OptimizerState> {
    let mut d = Dec::new(bytes, "optimizer state");
    d.magic(OPTIM_MAGIC)?;
    d.version(OPTIM_VERSION)?;
    let n = d.u32()?;
    let mut groups = BTreeMap::new();
    for _ in 0..n {
        let len = d.u32()? as usize;
        let name = String::from_utf8(d.take(len)?.to_vec()).map_err(|_| Error::Format("optimizer state: bad group name".into()))?;
        let step = d.u64()?;
        let m_len = d.u64()? as usize;
        if (d.buf.len() - d.pos) / 16 < m_len {
            return Err(Error::Format("optimizer state: truncated".into()));
        }
        let m = (0..m_len).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
        let v = (0..m_len).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
        groups.insert(name, AdamState { step, m, v });
    }
    d.finish()?;
    Ok(OptimizerState { groups })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub stage: Stage,
    pub iteration: usize,
    pub model: ModelConfig,
    pub field_frozen: bool,
    pub anchors: usize,
}

/// A trained model plus the optimizer state that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: usize,
    pub model: Model,
    pub optimizer: OptimizerState,
}

fn section(e: &mut Enc, tag: &[u8; 4], payload: &[u8]) {
    e.bytes(tag);
    e.u64(payload.len() as u64);
    e.bytes(payload);
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        stage: ck.stage,
        iteration: ck.iteration,
        model: ck.model.config.clone(),
        field_frozen: ck.model.field.frozen,
        anchors: ck.model.anchors.len(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut e = Enc::default();
    e.bytes(CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION);
    e.u32(json.len() as u32);
    e.bytes(&json);
    section(&mut e, ANCHOR_MAGIC, &encode_anchors(&ck.model.anchors, ck.model.config.k)?);
    section(&mut e, FIELD_MAGIC, &encode_field(&ck.model.field));
    section(&mut e, WEIGHTS_MAGIC, &encode_decoders(&ck.model.decoders));
    section(&mut e, OPTIM_MAGIC, &encode_optimizer(&ck.optimizer));
    Ok(e.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut d = Dec::new(bytes, "checkpoint");
    d.magic(CHECKPOINT_MAGIC)?;
    d.version(CHECKPOINT_VERSION)?;
    let len = d.u32()? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(d.take(len)?)?;
    let mut sections: BTreeMap<[u8; 4], &[u8]> = BTreeMap::new();
    while d.pos < d.buf.len() {
        let tag: [u8; 4] = d.take(4)?.try_into().unwrap();
        let n = usize::try_from(d.u64()?).map_err(|_| Error::Format("checkpoint: section too large".into()))?;
        sections.insert(tag, d.take(n)?);
    }
    let get = |tag: &[u8; 4]| {
        sections
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint: missing section {}", String::from_utf8_lossy(tag))))
    };
    let (anchors, k) = decode_anchors(get(ANCHOR_MAGIC)?)?;
    let mut field = decode_field(get(FIELD_MAGIC)?)?;
    field.frozen = manifest.field_frozen;
    let decoders = decode_decoders(get(WEIGHTS_MAGIC)?)?;
    let optimizer = match sections.get(OPTIM_MAGIC) {
        Some(b) => decode_optimizer(b)?,
        None => OptimizerState::default(),
    };
    let mut config = manifest.model;
    config.field.levels = field.config.levels;
    config.field.features_per_level = field.config.features_per_level;
    config.field.table_size = field.config.table_size;
    config.field.base_resolution = field.config.base_resolution;
    config.field.per_level_scale = field.config.per_level_scale;
    field.config = config.field.clone();
    if k != config.k || decoders.k != k || anchors.len() != manifest.anchors {
        return Err(Error::Format("checkpoint: sections disagree with the manifest".into()));
    }
    Ok(Checkpoint {
        stage: manifest.stage,
        iteration: manifest.iteration,
        model: Model {
            config,
            field,
            anchors,
            decoders,
        },
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

/// 16-byte header `{"SGSM", W, H, channels}` followed by little-endian f32.
pub fn encode_map(img: &Image) -> Vec<u8> {
    let mut e = Enc::default();
    e.bytes(MAP_MAGIC);
    e.u32(img.width as u32);
    e.u32(img.height as u32);
    e.u32(img.channels as u32);
    for v in &img.data {
        e.f32(*v as f32);
    }
    e.0
}

pub fn decode_map(bytes: &[u8]) -> Result<Image> {
    let mut d = Dec::new(bytes, "float map");
    d.magic(MAP_MAGIC)?;
    let (w, h, c) = (d.u32()? as usize, d.u32()? as usize, d.u32()? as usize);
    let data = d.f32s(w * h * c)?.into_iter().map(f64::from).collect();
    d.finish()?;
    Image::from_data(w, h, c, data)
}

pub fn write_map(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &encode_map(img))
}

pub fn read_map(path: &Path) -> Result<Image> {
    decode_map(&read_file(path)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_bytes(img: &Image) -> Result<Vec<u8>> {
    match img.channels {
        3 => Ok(img.data.iter().map(|v| to_u8(*v)).collect()),
        1 => Ok(img.data.iter().flat_map(|v| [to_u8(*v); 3]).collect()),
        c => Err(Error::Dimension(format!("cannot write a {c}-channel image as RGB"))),
    }
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(rgb_bytes(img)?);
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a P6 file"));
    }
    let mut num = || -> Result<usize> { token()?.parse().map_err(|_| bad("bad header number")) };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let n = w * h * 3;
    if bytes.len() < pos + n {
        return Err(bad("truncated pixel data"));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_data(w, h, 3, data)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &encode_ppm(img)?)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, rgb_bytes(img)?)
        .ok_or_else(|| Error::Dimension("image buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &encode_png(img)?)
}

/// Writes PNG or PPM depending on the extension (`.ppm` → P6, else PNG).
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => write_ppm(path, img),
        Some(e) if e.eq_ignore_ascii_case("sgsm") => write_map(path, img),
        _ => write_png(path, img),
    }
}

/// Reads an SGSM map, a P6 PPM, or any PNG (converted to RGB in `[0, 1]`).
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    if bytes.starts_with(MAP_MAGIC) {
        decode_map(&bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Image::from_data(w as usize, h as usize, 3, data)
    }
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let cams: Vec<Camera> = serde_json::from_slice(&read_file(path)?)?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn save_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    atomic_write(path, &serde_json::to_vec_pretty(cams)?)
}

/// `dataset.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub upscale_factor: u32,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

/// A scene on disk: LR cameras and images, optional HR pseudo-labels, HR
/// depth, HR ground truth and initialization points.
#[derive(Clone, Debug, Default)]
pub struct SceneDataset {
    /// Low-resolution cameras.
    pub cameras: Vec<Camera>,
    pub upscale_factor: u32,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
    pub lr_images: BTreeMap<u32, Image>,
    pub hr_pseudo: BTreeMap<u32, Image>,
    pub hr_depth: BTreeMap<u32, Image>,
    pub hr_gt: BTreeMap<u32, Image>,
    pub points: Vec<Vec3>,
}

const IMAGE_EXTS: [&str; 3] = ["sgsm", "png", "ppm"];

fn find_image(dir: &Path, id: u32) -> Option<PathBuf> {
    IMAGE_EXTS.iter().map(|e| dir.join(format!("{id}.{e}"))).find(|p| p.is_file())
}

impl SceneDataset {
    pub fn camera(&self, id: u32) -> Result<&Camera> {
        self.cameras
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("no camera with id {id}")))
    }

    pub fn hr_camera(&self, id: u32) -> Result<Camera> {
        Ok(self.camera(id)?.scaled(self.upscale_factor))
    }

    /// Checks image sizes against the cameras and the upscale factor.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.upscale_factor, 1..=16) {
            return Err(Error::InvalidInput(format!("upscale factor {}", self.upscale_factor)));
        }
        let f = self.upscale_factor as usize;
        for id in self.train.iter().chain(&self.test) {
            self.camera(*id)?;
        }
        for (maps, scale, name) in [
            (&self.lr_images, 1, "lr"),
            (&self.hr_pseudo, f, "hr_pseudo"),
            (&self.hr_depth, f, "hr_depth"),
            (&self.hr_gt, f, "hr_gt"),
        ] {
            for (id, img) in maps {
                let c = self.camera(*id)?;
                if img.width != c.width as usize * scale || img.height != c.height as usize * scale {
                    return Err(Error::Dimension(format!(
                        "{name}/{id} is {}x{}, expected {}x{}",
                        img.width,
                        img.height,
                        c.width as usize * scale,
                        c.height as usize * scale
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<SceneDataset> {
        let manifest: DatasetManifest = serde_json::from_slice(&read_file(&root.join("dataset.json"))?)?;
        let cameras = load_cameras(&root.join("cameras.json"))?;
        let points_path = root.join("points.json");
        let points: Vec<[f64; 3]> = if points_path.is_file() {
            serde_json::from_slice(&read_file(&points_path)?)?
        } else {
            Vec::new()
        };
        let mut ds = SceneDataset {
            cameras,
            upscale_factor: manifest.upscale_factor,
            train: manifest.train,
            test: manifest.test,
            points: points.into_iter().map(Vec3::from).collect(),
            ..Default::default()
        };
        let ids: Vec<u32> = ds.cameras.iter().map(|c| c.id).collect();
        for id in ids {
            for (dir, map) in [
                ("lr", &mut ds.lr_images),
                ("hr_pseudo", &mut ds.hr_pseudo),
                ("hr_depth", &mut ds.hr_depth),
                ("hr_gt", &mut ds.hr_gt),
            ] {
                if let Some(p) = find_image(&root.join(dir), id) {
                    map.insert(id, read_image(&p)?);
                }
            }
        }
        for id in &ds.train {
            if !ds.lr_images.contains_key(id) {
                return Err(Error::InvalidInput(format!("missing low-resolution image for training view {id}")));
            }
        }
        ds.validate()?;
        Ok(ds)
    }

    /// Writes every map as SGSM so reloading is lossless.
    pub fn save(&self, root: &Path) -> Result<()> {
        let manifest = DatasetManifest {
            upscale_factor: self.upscale_factor,
            train: self.train.clone(),
            test: self.test.clone(),
        };
        atomic_write(&root.join("dataset.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        save_cameras(&root.join("cameras.json"), &self.cameras)?;
        let pts: Vec<[f64; 3]> = self.points.iter().map(|p| [p.x, p.y, p.z]).collect();
        atomic_write(&root.join("points.json"), &serde_json::to_vec(&pts)?)?;
        for (dir, map) in [
            ("lr", &self.lr_images),
            ("hr_pseudo", &self.hr_pseudo),
            ("hr_depth", &self.hr_depth),
            ("hr_gt", &self.hr_gt),
        ] {
            for (id, img) in map {
                write_map(&root.join(dir).join(format!("{id}.sgsm")), img)?;
            }
        }
        Ok(())
    }
}
