//! Expert-feature container.
//!
//! Layout: the 8 magic bytes `GFFEAT01`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then the payload of little-endian `f32`
//! values. Stream offsets are byte positions relative to the payload start;
//! the header carries the SHA-256 of the payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"GFFEAT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Action,
    Scene,
    Audio,
    Ocr,
    Face,
    Speech,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Object,
        Category::Action,
        Category::Scene,
        Category::Audio,
        Category::Ocr,
        Category::Face,
        Category::Speech,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Object => "object",
            Category::Action => "action",
            Category::Scene => "scene",
            Category::Audio => "audio",
            Category::Ocr => "ocr",
            Category::Face => "face",
            Category::Speech => "speech",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Video categories are pooled into chunks; the rest are averaged.
    pub fn is_chunked(self) -> bool {
        matches!(self, Category::Object | Category::Action | Category::Scene)
    }

    pub fn is_video(self) -> bool {
        self.is_chunked()
    }
}

/// Output widths of the standard extractors.
pub fn known_dim(name: &str) -> Option<usize> {
    Some(match name.to_ascii_lowercase().as_str() {
        "resnext" | "senet" => 1000,
        "i3d" => 400,
        "r2p1d" => 359,
        "s3dg" => 512,
        "scene" | "densenet" => 365,
        "audio" | "vggish" => 128,
        "ocr" => 300,
        "face" => 512,
        "speech" => 300,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertDecl {
    pub name: String,
    pub category: Category,
    pub dim: usize,
}

impl ExpertDecl {
    pub fn new(name: &str, category: Category, dim: usize) -> Self {
        ExpertDecl {
            name: name.to_string(),
            category,
            dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::input(format!("expert {} has zero width", self.name)));
        }
        if let Some(d) = known_dim(&self.name) {
            if d != self.dim {
                return Err(Error::input(format!(
                    "expert {} declared with width {} but its extractor outputs {d}",
                    self.name, self.dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub name: String,
    pub frames: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub streams: Vec<StreamRecord>,
}

/// The container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub experts: Vec<ExpertDecl>,
    pub sha256: String,
    pub videos: Vec<VideoRecord>,
}

/// One expert's frames for one video, row-major `[frames, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFeatures {
    pub name: String,
    pub category: Category,
    pub dim: usize,
    pub frames: usize,
    pub data: Vec<f32>,
    pub missing: bool,
}

impl ExpertFeatures {
    pub fn new(decl: &ExpertDecl, frames: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || data.len() != frames * decl.dim {
            return Err(Error::input(format!(
                "expert {}: {} values do not form {frames} frames of width {}",
                decl.name,
                data.len(),
                decl.dim
            )));
        }
        Ok(ExpertFeatures {
            name: decl.name.clone(),
            category: decl.category,
            dim: decl.dim,
            frames,
            data,
            missing: false,
        })
    }

    /// A single zero frame, flagged.
    pub fn missing(decl: &ExpertDecl) -> Self {
        ExpertFeatures {
            name: decl.name.clone(),
            category: decl.category,
            dim: decl.dim,
            frames: 1,
            data: vec![0.0; decl.dim],
            missing: true,
        }
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// Temporal mean.
    pub fn average(&self) -> Vec<f32> {
        let mut out = vec![0f64; self.dim];
        for k in 0..self.frames {
            for (o, &x) in out.iter_mut().zip(self.frame(k)) {
                *o += x as f64;
            }
        }
        out.iter().map(|&s| (s / self.frames as f64) as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    /// In declaration order of the set's experts.
    pub experts: Vec<ExpertFeatures>,
}

impl VideoFeatures {
    /// Concatenated temporal means, the input of the single-vector encoder.
    pub fn averaged(&self) -> Vec<f32> {
        self.experts.iter().flat_map(|e| e.average()).collect()
    }

    pub fn all_missing(&self) -> bool {
        self.experts.iter().all(|e| e.missing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub experts: Vec<ExpertDecl>,
    pub videos: BTreeMap<String, VideoFeatures>,
}

impl FeatureSet {
    pub fn new(experts: Vec<ExpertDecl>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &experts {
            e.validate()?;
            if !seen.insert(e.name.clone()) {
                return Err(Error::input(format!("expert {} declared twice", e.name)));
            }
        }
        Ok(FeatureSet {
            experts,
            videos: BTreeMap::new(),
        })
    }

    /// Adds a video from the present streams; absent experts become zero
    /// frames flagged as missing.
    pub fn insert(&mut self, video_id: &str, present: Vec<ExpertFeatures>) -> Result<()> {
        let mut by_name: BTreeMap<String, ExpertFeatures> = BTreeMap::new();
        for f in present {
            let decl = self
                .experts
                .iter()
                .find(|e| e.name == f.name)
                .ok_or_else(|| Error::input(format!("video {video_id}: undeclared expert {}", f.name)))?;
            if f.dim != decl.dim || f.data.len() != f.frames * decl.dim || f.frames == 0 {
                return Err(Error::input(format!(
                    "video {video_id}, expert {}: expected width {}, got {} values over {} frames of width {}",
                    f.name,
                    decl.dim,
                    f.data.len(),
                    f.frames,
                    f.dim
                )));
            }
            by_name.insert(f.name.clone(), f);
        }
        let experts = self
            .experts
            .iter()
            .map(|d| by_name.remove(&d.name).unwrap_or_else(|| ExpertFeatures::missing(d)))
            .collect();
        self.videos.insert(
            video_id.to_string(),
            VideoFeatures {
                video_id: video_id.to_string(),
                experts,
            },
        );
        Ok(())
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoFeatures> {
        self.videos.get(video_id)
    }

    pub fn expert_names(&self) -> Vec<String> {
        self.experts.iter().map(|e| e.name.clone()).collect()
    }

    /// Restricts to the named experts or categories, keeping declaration order.
    pub fn subset(&self, keep: &[String]) -> Result<FeatureSet> {
        let wanted = |d: &ExpertDecl| keep.iter().any(|k| *k == d.name || *k == d.category.name());
        for k in keep {
            if !self.experts.iter().any(|d| *k == d.name || *k == d.category.name()) {
                return Err(Error::input(format!("no expert or category named {k}")));
            }
        }
        let idx: Vec<usize> = (0..self.experts.len()).filter(|&i| wanted(&self.experts[i])).collect();
        Ok(FeatureSet {
            experts: idx.iter().map(|&i| self.experts[i].clone()).collect(),
            videos: self
                .videos
                .iter()
                .map(|(k, v)| {
                    let experts = idx.iter().map(|&i| v.experts[i].clone()).collect();
                    (
                        k.clone(),
                        VideoFeatures {
                            video_id: v.video_id.clone(),
                            experts,
                        },
                    )
                })
                .collect(),
        })
    }

    /// Header and payload. Missing streams are not stored.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut videos = Vec::new();
        for v in self.videos.values() {
            let mut streams = Vec::new();
            for e in v.experts.iter().filter(|e| !e.missing) {
                streams.push(StreamRecord {
                    name: e.name.clone(),
                    frames: e.frames,
                    offset: payload.len() as u64,
                });
                for x in &e.data {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
            videos.push(VideoRecord {
                video_id: v.video_id.clone(),
                streams,
            });
        }
        let manifest = FeatureManifest {
            experts: self.experts.clone(),
            sha256: hex::encode(Sha256::digest(&payload)),
            videos,
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<FeatureSet> {
        let (manifest, payload) = split_container(bytes, path)?;
        let digest = hex::encode(Sha256::digest(payload));
        if digest != manifest.sha256 {
            return Err(Error::format(path, "payload hash does not match header"));
        }
        let mut set = FeatureSet::new(manifest.experts.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        for v in &manifest.videos {
            if set.videos.contains_key(&v.video_id) {
                return Err(Error::format(path, format!("video {} listed twice", v.video_id)));
            }
            let mut present = Vec::new();
            for s in &v.streams {
                let decl = set.experts.iter().find(|d| d.name == s.name).ok_or_else(|| {
                    Error::format(path, format!("video {}: undeclared expert {}", v.video_id, s.name))
                })?;
                let len = (s.frames * decl.dim * 4) as u64;
                let end = s.offset.checked_add(len).filter(|&e| e <= payload.len() as u64);
                if s.frames == 0 || s.offset % 4 != 0 || end.is_none() {
                    return Err(Error::format(
                        path,
                        format!(
                            "video {}, expert {}: {} frames of width {} at offset {} do not fit a {}-byte payload",
                            v.video_id,
                            s.name,
                            s.frames,
                            decl.dim,
                            s.offset,
                            payload.len()
                        ),
                    ));
                }
                let raw = &payload[s.offset as usize..end.unwrap() as usize];
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                present.push(ExpertFeatures::new(decl, s.frames, data)?);
            }
            set.insert(&v.video_id, present)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        Ok(set)
    }

    pub fn read(path: &Path) -> Result<FeatureSet> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn split_container<'b>(bytes: &'b [u8], path: &Path) -> Result<(FeatureManifest, &'b [u8])> {
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature container"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let hend = 16u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::format(path, "header length exceeds file size"))? as usize;
    let manifest: FeatureManifest =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    Ok((manifest, &bytes[hend..]))
}

/// Reads only the header of a container.
pub fn read_manifest(path: &Path) -> Result<FeatureManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_container(&bytes, path)?.0)
}

/// Loads a container, optionally restricted to an expert subset.
pub fn load_features(path: &Path, experts: Option<&[String]>) -> Result<FeatureSet> {
    let set = FeatureSet::read(path)?;
    match experts {
        Some(keep) if !keep.is_empty() => set.subset(keep),
        _ => Ok(set),
    }
}
