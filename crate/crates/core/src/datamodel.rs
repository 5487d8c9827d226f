//! Interchange formats: LGQE1 tensor files, grounding sidecars, NDJSON
//! manifests and the validated in-memory [`Episode`].

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Most grounded objects a frame may carry.
pub const MAX_OBJECTS: usize = 10;

const MAGIC: &[u8; 5] = b"LGQE1";
const DTYPE_F32: u8 = 0x01;
const MAX_RANK: u32 = 8;

/// Serialises a tensor into LGQE1 bytes.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses LGQE1 bytes. `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail =
        |offset: usize, reason: String| Error::Format { path: path.to_path_buf(), offset: offset as u64, reason };
    let n = bytes.len();
    let prefix = n.min(MAGIC.len());
    if bytes[..prefix] != MAGIC[..prefix] {
        let at = bytes.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(0);
        return Err(fail(at, "bad magic, expected \"LGQE1\"".into()));
    }
    if n < MAGIC.len() {
        return Err(fail(n, "truncated magic".into()));
    }
    let Some(&dtype) = bytes.get(5) else {
        return Err(fail(n, "truncated header: missing dtype".into()));
    };
    if dtype != DTYPE_F32 {
        return Err(fail(5, format!("unsupported dtype 0x{dtype:02x}")));
    }
    let read_u32 = |at: usize, what: &str| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
            .ok_or_else(|| fail(n, format!("truncated header: missing {what}")))
    };
    let rank = read_u32(6, "rank")?;
    if rank > MAX_RANK {
        return Err(fail(6, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for i in 0..rank as usize {
        let at = 10 + 4 * i;
        let d = read_u32(at, &format!("dimension {i}"))? as usize;
        count = count.checked_mul(d).ok_or_else(|| fail(at, "element count overflows".into()))?;
        shape.push(d);
    }
    let header = 10 + 4 * rank as usize;
    let expected = count.checked_mul(4).ok_or_else(|| fail(header, "payload size overflows".into()))?;
    let available = n - header;
    if available < expected {
        return Err(fail(
            n,
            format!("payload truncated: expected {expected} bytes after offset {header}, found {available}"),
        ));
    }
    if available > expected {
        return Err(fail(header + expected, format!("{} trailing bytes after payload", available - expected)));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Axis-aligned box in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl From<[f32; 4]> for BoundingBox {
    fn from([x1, y1, x2, y2]: [f32; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BoundingBox> for [f32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn is_valid(&self) -> bool {
        let c = [self.x1, self.y1, self.x2, self.y2];
        c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && self.x1 < self.x2 && self.y1 < self.y2
    }
}

/// One video frame with its patch embeddings and grounding payload.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_index: usize,
    /// `[N × C]`, all-zero rows are padding tokens.
    pub patch_embeddings: Tensor,
    pub boxes: Vec<BoundingBox>,
    /// `[m × C]`
    pub roi_features: Tensor,
    /// `[m × 4]`
    pub spatial_features: Tensor,
    /// `[1 × C]`
    pub frame_feature: Tensor,
}

impl FrameRecord {
    pub fn object_count(&self) -> usize {
        self.boxes.len()
    }

    /// Frame with its grounding removed, leaving only the frame node.
    pub fn without_objects(&self) -> FrameRecord {
        let c = self.frame_feature.cols();
        FrameRecord {
            boxes: Vec::new(),
            roi_features: Tensor::zeros(vec![0, c]),
            spatial_features: Tensor::zeros(vec![0, 4]),
            ..self.clone()
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let t = self.frame_index;
        let m = self.boxes.len();
        if m > MAX_OBJECTS {
            return Err(format!("frame {t}: m exceeds {MAX_OBJECTS} ({m} boxes)"));
        }
        let c = self.frame_feature.cols();
        if self.frame_feature.rows() != 1 || c == 0 {
            return Err(format!("frame {t}: frame feature must be a single non-empty row"));
        }
        if self.patch_embeddings.rows() == 0 || self.patch_embeddings.cols() != c {
            return Err(format!(
                "frame {t}: patch embeddings are [{}x{}], expected [N x {c}] with N >= 1",
                self.patch_embeddings.rows(),
                self.patch_embeddings.cols()
            ));
        }
        if self.roi_features.rows() != m || (m > 0 && self.roi_features.cols() != c) {
            return Err(format!(
                "frame {t}: roi features are [{}x{}], expected [{m}x{c}]",
                self.roi_features.rows(),
                self.roi_features.cols()
            ));
        }
        if self.spatial_features.rows() != m || (m > 0 && self.spatial_features.cols() != 4) {
            return Err(format!(
                "frame {t}: spatial features are [{}x{}], expected [{m}x4]",
                self.spatial_features.rows(),
                self.spatial_features.cols()
            ));
        }
        if let Some(i) = self.boxes.iter().position(|b| !b.is_valid()) {
            return Err(format!("frame {t}: box {i} is not a valid normalised box with x1<x2, y1<y2"));
        }
        for (name, x) in [
            ("patch embeddings", &self.patch_embeddings),
            ("roi features", &self.roi_features),
            ("spatial features", &self.spatial_features),
            ("frame feature", &self.frame_feature),
        ] {
            if !x.is_finite() {
                return Err(format!("frame {t}: non-finite value in {name}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaMode {
    MultiChoice,
    OpenEnded,
}

/// A validated question about one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub video_id: String,
    pub frames: Vec<FrameRecord>,
    /// `[M × C_text]`, all-zero rows are padding tokens.
    pub question_tokens: Tensor,
    /// `[|A| × C_text]`
    pub answer_bank: Tensor,
    pub qa_mode: QaMode,
    pub label: usize,
    pub category: String,
}

impl Episode {
    pub fn visual_width(&self) -> usize {
        self.frames[0].frame_feature.cols()
    }

    pub fn text_width(&self) -> usize {
        self.question_tokens.cols()
    }

    /// Checks every structural invariant; errors name the episode.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|reason| Error::episode(&self.video_id, reason))
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.video_id.is_empty() {
            return Err("empty video id".into());
        }
        if self.frames.is_empty() {
            return Err("no frames".into());
        }
        if self.question_tokens.rows() == 0 || self.question_tokens.cols() == 0 {
            return Err("empty question".into());
        }
        if self.answer_bank.rows() == 0 {
            return Err("empty answer bank".into());
        }
        if self.answer_bank.cols() != self.question_tokens.cols() {
            return Err(format!(
                "answer width {} differs from question width {}",
                self.answer_bank.cols(),
                self.question_tokens.cols()
            ));
        }
        if self.label >= self.answer_bank.rows() {
            return Err(format!("label {} out of range for {} answers", self.label, self.answer_bank.rows()));
        }
        if !self.question_tokens.is_finite() || !self.answer_bank.is_finite() {
            return Err("non-finite value in question or answers".into());
        }
        let c = self.frames[0].frame_feature.cols();
        let mut prev: Option<usize> = None;
        for f in &self.frames {
            f.validate()?;
            if f.frame_feature.cols() != c {
                return Err(format!("frame {}: visual width differs from frame 0", f.frame_index));
            }
            if prev.is_some_and(|p| f.frame_index <= p) {
                return Err(format!("frame indices not strictly increasing at {}", f.frame_index));
            }
            prev = Some(f.frame_index);
        }
        Ok(())
    }
}

/// Zero-pads objects to `m_max` rows. The mask marks real objects.
pub fn pad_grounding(rec: &FrameRecord, m_max: usize) -> (FrameRecord, Vec<bool>) {
    let m = rec.object_count().min(m_max);
    let c = rec.frame_feature.cols();
    let mut roi = vec![0.0; m_max * c];
    let mut spatial = vec![0.0; m_max * 4];
    roi[..m * c].copy_from_slice(&rec.roi_features.data()[..m * c]);
    spatial[..m * 4].copy_from_slice(&rec.spatial_features.data()[..m * 4]);
    let mut mask = vec![false; m_max];
    mask[..m].iter_mut().for_each(|x| *x = true);
    let padded = FrameRecord {
        roi_features: Tensor::matrix(m_max, c, roi).expect("padded roi shape"),
        spatial_features: Tensor::matrix(m_max, 4, spatial).expect("padded spatial shape"),
        ..rec.clone()
    };
    (padded, mask)
}

/// Rows that are not entirely zero.
pub fn token_mask(t: &Tensor) -> Vec<bool> {
    t.iter_rows().map(|r| r.iter().any(|&v| v != 0.0)).collect()
}

/// One line of a dataset manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub question_file: String,
    pub answers_file: String,
    pub label: usize,
    pub qa_mode: QaMode,
    pub category: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub t: usize,
    pub embeddings_file: String,
    pub grounding_file: String,
}

/// Grounding sidecar for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingFile {
    pub boxes: Vec<BoundingBox>,
    pub roi_file: String,
    pub spatial_file: String,
    pub frame_feature_file: String,
}

/// Loads and validates the episode described by `entry`.
pub fn load_episode(entry: &ManifestEntry, base: &Path) -> Result<Episode> {
    let wrap = |e: Error| match e {
        Error::Episode { .. } => e,
        other => Error::episode(&entry.video_id, other.to_string()),
    };
    let read = |rel: &str| read_tensor(&base.join(rel)).map_err(wrap);
    let mut frames = Vec::with_capacity(entry.frames.len());
    for fe in &entry.frames {
        let gpath = base.join(&fe.grounding_file);
        let text = fs::read_to_string(&gpath).map_err(|e| wrap(Error::io(&gpath, e)))?;
        let g: GroundingFile = serde_json::from_str(&text)
            .map_err(|e| wrap(Error::Json { path: gpath.clone(), line: e.line(), reason: e.to_string() }))?;
        if g.boxes.len() > MAX_OBJECTS {
            return Err(Error::episode(
                &entry.video_id,
                format!("frame {}: m exceeds {MAX_OBJECTS} ({} boxes)", fe.t, g.boxes.len()),
            ));
        }
        let frame_feature = read(&g.frame_feature_file)?;
        let c = frame_feature.cols();
        let frame_feature = frame_feature.reshape(vec![1, c]).map_err(wrap)?;
        frames.push(FrameRecord {
            frame_index: fe.t,
            patch_embeddings: read(&fe.embeddings_file)?,
            boxes: g.boxes,
            roi_features: as_matrix(read(&g.roi_file)?, c),
            spatial_features: as_matrix(read(&g.spatial_file)?, 4),
            frame_feature,
        });
    }
    let ep = Episode {
        video_id: entry.video_id.clone(),
        frames,
        question_tokens: read(&entry.question_file)?,
        answer_bank: read(&entry.answers_file)?,
        qa_mode: entry.qa_mode,
        label: entry.label,
        category: entry.category.clone(),
    };
    ep.validate()?;
    Ok(ep)
}

/// Empty tensors are stored with whatever rank the writer chose; give them
/// a matrix view so shape checks compare like with like.
fn as_matrix(t: Tensor, cols: usize) -> Tensor {
    if t.is_empty() && t.rank() != 2 {
        Tensor::zeros(vec![0, cols])
    } else {
        t
    }
}

/// Writes every file of `ep` under `base/<video_id>/` and returns its
/// manifest entry with paths relative to `base`.
pub fn write_episode(ep: &Episode, base: &Path) -> Result<ManifestEntry> {
    let dir_rel = PathBuf::from(&ep.video_id);
    let dir = base.join(&dir_rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = |name: String| dir_rel.join(name).to_string_lossy().into_owned();
    let put = |name: &str, t: &Tensor| -> Result<String> {
        write_tensor(&dir.join(name), t)?;
        Ok(rel(name.to_string()))
    };
    let question_file = put("question.lgqe", &ep.question_tokens)?;
    let answers_file = put("answers.lgqe", &ep.answer_bank)?;
    let mut frames = Vec::with_capacity(ep.frames.len());
    for f in &ep.frames {
        let t = f.frame_index;
        let g = GroundingFile {
            boxes: f.boxes.clone(),
            roi_file: put(&format!("f{t:04}_roi.lgqe"), &f.roi_features)?,
            spatial_file: put(&format!("f{t:04}_spatial.lgqe"), &f.spatial_features)?,
            frame_feature_file: put(&format!("f{t:04}_frame.lgqe"), &f.frame_feature)?,
        };
        let gname = format!("f{t:04}_grounding.json");
        let gpath = dir.join(&gname);
        let json = serde_json::to_vec(&g).expect("grounding serialises");
        fs::write(&gpath, json).map_err(|e| Error::io(&gpath, e))?;
        frames.push(FrameEntry {
            t,
            embeddings_file: put(&format!("f{t:04}_patches.lgqe"), &f.patch_embeddings)?,
            grounding_file: rel(gname),
        });
    }
    Ok(ManifestEntry {
        video_id: ep.video_id.clone(),
        question_file,
        answers_file,
        label: ep.label,
        qa_mode: ep.qa_mode,
        category: ep.category.clone(),
        frames,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("manifest entry serialises");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Reads a manifest and loads every episode it lists, relative to the
/// manifest's directory.
pub fn load_split(manifest: &Path, exec: crate::Exec) -> Result<Vec<Episode>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    exec.map(&entries, |e| load_episode(e, base)).into_iter().collect()
}
