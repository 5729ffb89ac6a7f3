//! Dataset directory: `manifest.json` plus one binary file per episode.
//!
//! Episode file layout:
//!
//! | bytes        | content                                          |
//! |--------------|--------------------------------------------------|
//! | 8            | magic `FAVLAEP1`                                 |
//! | 4            | header length `n`, u32 little-endian             |
//! | n            | UTF-8 JSON [`EpisodeHeader`]                     |
//! | rest         | f32 little-endian arrays, offsets in elements    |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::force_features::{VarianceLabelConfig, FORCE_AXES};
use crate::model::NormStats;
use crate::simsuite::TaskKind;

pub const EPISODE_MAGIC: &[u8; 8] = b"FAVLAEP1";
pub const DATASET_FORMAT: &str = "favla-dataset-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeHeader {
    pub task: TaskKind,
    pub seed: u64,
    pub frames: usize,
    pub arrays: Vec<ArrayEntry>,
}

/// One demonstration, frames at 30 Hz and the raw 200 Hz force log.
///
/// Values are held as f64 but have been rounded through f32 storage.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub task: TaskKind,
    pub seed: u64,
    /// `[frames][cameras * vision_dim]`.
    pub vision: Vec<Vec<f64>>,
    pub state: Vec<[f64; 7]>,
    /// `[frames][tau]` rows of the 30 Hz stream.
    pub history: Vec<Vec<[f64; FORCE_AXES]>>,
    pub actions: Vec<[f64; 7]>,
    pub labels: Vec<f64>,
    /// Sample `j` was taken at physics tick `3 j`.
    pub force_log: Vec<[f64; FORCE_AXES]>,
}

impl EpisodeRecord {
    pub fn frames(&self) -> usize {
        self.state.len()
    }

    /// Rounds every value through f32 so in-memory and on-disk copies agree.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        self.vision.iter_mut().flatten().for_each(r);
        self.state.iter_mut().flatten().for_each(r);
        self.history.iter_mut().flatten().flatten().for_each(r);
        self.actions.iter_mut().flatten().for_each(r);
        self.labels.iter_mut().for_each(r);
        self.force_log.iter_mut().flatten().for_each(r);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEntry {
    pub file: String,
    pub seed: u64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroppedEpisode {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub task: TaskKind,
    pub seed: u64,
    pub cameras: usize,
    pub vision_dim: usize,
    pub tau: usize,
    /// Label settings with the dataset-level sigma filled in.
    pub label: VarianceLabelConfig,
    pub noise_floor: f64,
    pub norm: NormStats,
    pub episodes: Vec<EpisodeEntry>,
    pub dropped: Vec<DroppedEpisode>,
    /// Label deciles 0, 10, ..., 100 %.
    pub label_deciles: Vec<f64>,
}

struct Writer {
    arrays: Vec<ArrayEntry>,
    data: Vec<f32>,
}

impl Writer {
    fn put<'a>(&mut self, name: &str, shape: Vec<usize>, values: impl IntoIterator<Item = &'a f64>) {
        let offset = self.data.len();
        self.data.extend(values.into_iter().map(|&v| v as f32));
        debug_assert_eq!(self.data.len() - offset, shape.iter().product::<usize>());
        self.arrays.push(ArrayEntry {
            name: name.into(),
            shape,
            offset,
        });
    }
}

pub fn write_episode(path: &Path, ep: &EpisodeRecord) -> Result<()> {
    let f = ep.frames();
    let vis = ep.vision.first().map_or(0, Vec::len);
    let tau = ep.history.first().map_or(0, Vec::len);
    let mut w = Writer {
        arrays: Vec::new(),
        data: Vec::new(),
    };
    w.put("vision", vec![f, vis], ep.vision.iter().flatten());
    w.put("state", vec![f, 7], ep.state.iter().flatten());
    w.put(
        "history",
        vec![f, tau, FORCE_AXES],
        ep.history.iter().flatten().flatten(),
    );
    w.put("actions", vec![f, 7], ep.actions.iter().flatten());
    w.put("labels", vec![f], ep.labels.iter());
    w.put(
        "force_log",
        vec![ep.force_log.len(), FORCE_AXES],
        ep.force_log.iter().flatten(),
    );
    let header = serde_json::to_vec(&EpisodeHeader {
        task: ep.task,
        seed: ep.seed,
        frames: f,
        arrays: w.arrays,
    })?;
    let mut bytes = Vec::with_capacity(12 + header.len() + 4 * w.data.len());
    bytes.extend_from_slice(EPISODE_MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in &w.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_episode(path: &Path) -> Result<EpisodeRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::format(path, r.to_string());
    if bytes.len() < 12 || &bytes[..8] != EPISODE_MAGIC {
        return Err(bad("missing episode magic"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + n;
    if bytes.len() < body || (bytes.len() - body) % 4 != 0 {
        return Err(bad("truncated episode file"));
    }
    let header: EpisodeHeader =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(&format!("header: {e}")))?;
    let data: Vec<f64> = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let get = |name: &str, rank: usize| -> Result<(&[usize], &[f64])> {
        let a = header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| bad(&format!("missing array '{name}'")))?;
        let len: usize = a.shape.iter().product();
        if a.shape.len() != rank || a.offset + len > data.len() {
            return Err(bad(&format!("array '{name}' out of bounds")));
        }
        Ok((&a.shape, &data[a.offset..a.offset + len]))
    };
    let f = header.frames;
    let rows7 = |name: &str| -> Result<Vec<[f64; 7]>> {
        let (shape, v) = get(name, 2)?;
        if shape != [f, 7] {
            return Err(bad(&format!("array '{name}' has shape {shape:?}")));
        }
        Ok(v.chunks_exact(7).map(|c| c.try_into().expect("7")).collect())
    };
    let (vshape, vdata) = get("vision", 2)?;
    if vshape[0] != f || vshape[1] == 0 {
        return Err(bad("vision shape"));
    }
    let vision = vdata.chunks_exact(vshape[1]).map(<[f64]>::to_vec).collect();
    let (hshape, hdata) = get("history", 3)?;
    if hshape[0] != f || hshape[2] != FORCE_AXES || hshape[1] == 0 {
        return Err(bad("history shape"));
    }
    let history = hdata
        .chunks_exact(hshape[1] * FORCE_AXES)
        .map(|w| {
            w.chunks_exact(FORCE_AXES)
                .map(|r| r.try_into().expect("6"))
                .collect()
        })
        .collect();
    let (lshape, labels) = get("labels", 1)?;
    if lshape[0] != f {
        return Err(bad("labels shape"));
    }
    let (fshape, fdata) = get("force_log", 2)?;
    if fshape[1] != FORCE_AXES {
        return Err(bad("force_log shape"));
    }
    Ok(EpisodeRecord {
        task: header.task,
        seed: header.seed,
        vision,
        state: rows7("state")?,
        history,
        actions: rows7("actions")?,
        labels: labels.to_vec(),
        force_log: fdata
            .chunks_exact(FORCE_AXES)
            .map(|r| r.try_into().expect("6"))
            .collect(),
    })
}

pub fn episode_file_name(index: usize, seed: u64) -> String {
    format!("episode_{index:04}_seed{seed}.bin")
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::format(&path, format!("unsupported format '{}'", m.format)));
    }
    Ok(m)
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = read_manifest(dir)?;
        let episodes = manifest
            .episodes
            .iter()
            .map(|e| read_episode(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        for (e, ep) in manifest.episodes.iter().zip(&episodes) {
            if ep.frames() != e.frames || ep.seed != e.seed {
                return Err(Error::format(
                    &dir.join(&e.file),
                    "episode does not match its manifest entry",
                ));
            }
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            episodes,
        })
    }
}
