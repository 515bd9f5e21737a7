//! Waveform files, manifests, checkpoints and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hdformer_core::numerics::{ParamStore, Tensor};
use hdformer_core::signal::{SignalRecord, Source};

use crate::error::{CliError, Result};

pub const WAVEFORM_MAGIC: &[u8; 4] = b"PPG1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "#version=1";

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Encodes samples as the 16-byte `PPG1` header followed by little-endian f32 values.
pub fn encode_waveform(fs_hz: u32, samples: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * samples.len());
    out.extend_from_slice(WAVEFORM_MAGIC);
    out.extend_from_slice(&fs_hz.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

/// Decodes a waveform file into `(fs, samples)`.
pub fn decode_waveform(bytes: &[u8]) -> Result<(u32, Vec<f64>)> {
    if bytes.len() < 16 || &bytes[..4] != WAVEFORM_MAGIC {
        return Err(CliError::Data("not a PPG1 waveform file".into()));
    }
    let fs_hz = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != n.saturating_mul(4) {
        return Err(CliError::Data(format!(
            "waveform declares {n} samples but carries {} bytes",
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((fs_hz, samples))
}

pub fn write_waveform(path: &Path, fs_hz: u32, samples: &[f64]) -> Result<()> {
    write_atomic(path, &encode_waveform(fs_hz, samples))
}

pub fn read_waveform(path: &Path) -> Result<(u32, Vec<f64>)> {
    decode_waveform(&read(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub subject_id: String,
    pub label: u8,
    pub fs: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Extra `#key=value` lines after the version header.
    pub comments: Vec<(String, String)>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for (k, v) in &self.comments {
            out.push_str(&format!("#{k}={v}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.path.display(), e.subject_id, e.label, e.fs));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(CliError::Data(format!("manifest must start with `{MANIFEST_HEADER}`")));
        }
        let mut m = Manifest::default();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some((k, v)) = c.split_once('=') {
                    m.comments.push((k.trim().into(), v.trim().into()));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [path, subject, label, fs_hz] = fields[..] else {
                return Err(CliError::Data(format!(
                    "manifest line {lineno}: expected path,subject_id,label,fs"
                )));
            };
            if subject.is_empty() {
                return Err(CliError::Data(format!("manifest line {lineno}: empty subject_id")));
            }
            let label = match label {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(CliError::Data(format!(
                        "manifest line {lineno}: label `{other}` is not 0 or 1"
                    )))
                }
            };
            let fs_hz: u32 = fs_hz
                .parse()
                .ok()
                .filter(|&f| f > 0)
                .ok_or_else(|| CliError::Data(format!("manifest line {lineno}: invalid fs `{fs_hz}`")))?;
            m.entries.push(ManifestEntry {
                path: path.into(),
                subject_id: subject.into(),
                label,
                fs: fs_hz,
            });
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Manifest::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }

    /// Loads every listed record; a header/manifest `fs` mismatch is a data error.
    pub fn load_records(&self, manifest_path: &Path) -> Result<Vec<SignalRecord>> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        self.entries
            .iter()
            .map(|e| {
                let path = base.join(&e.path);
                let (fs_hz, samples) = read_waveform(&path)?;
                if fs_hz != e.fs {
                    return Err(CliError::Data(format!(
                        "{}: header fs {fs_hz} differs from manifest fs {}",
                        path.display(),
                        e.fs
                    )));
                }
                Ok(SignalRecord::new(e.subject_id.clone(), samples, fs_hz as f64, e.label, Source::File)?)
            })
            .collect()
    }
}

/// Float width of checkpointed parameter data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

/// Serialises every parameter as a named array after a versioned header
/// carrying free-form metadata (the model configuration).
pub fn encode_checkpoint(metadata: &str, params: &ParamStore, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype as u8);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Data("checkpoint string is not UTF-8".into()))
    }
}

/// Returns the metadata string and the parameters in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(CliError::Data("not an HDCK checkpoint".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CliError::Data(format!("unsupported checkpoint version {version}")));
    }
    let metadata = c.string()?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = c.string()?;
        let width = match c.take(1)?[0] {
            0 => 8,
            1 => 4,
            other => return Err(CliError::Data(format!("parameter {name}: unknown dtype {other}"))),
        };
        let ndims = c.u32()? as usize;
        let shape = (0..ndims).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| CliError::Data(format!("parameter {name}: shape overflow")))?;
        let raw = c.take(numel.checked_mul(width).ok_or_else(|| CliError::Data("checkpoint is truncated".into()))?)?;
        let data: Vec<f64> = if width == 8 {
            raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
        } else {
            raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect()
        };
        if store.id(&name).is_some() {
            return Err(CliError::Data(format!("duplicate parameter {name}")));
        }
        store.add(&name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(CliError::Data("trailing bytes after checkpoint".into()));
    }
    Ok((metadata, store))
}

pub fn write_checkpoint(path: &Path, metadata: &str, params: &ParamStore, dtype: DType) -> Result<()> {
    write_atomic(path, &encode_checkpoint(metadata, params, dtype))
}

pub fn read_checkpoint(path: &Path) -> Result<(String, ParamStore)> {
    decode_checkpoint(&read(path)?).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
