//! On-disk formats: `QGF1` field snapshots and JSON trajectory manifests.
//!
//! QGF1 layout: magic `QGF1`, little-endian `u32` nx, ny, layers (2) and a
//! representation flag (0 = grid), then `lx`, `ly` as little-endian `f64`,
//! then the layer-major, row-major grid values as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Grid, LayeredField, LAYERS};

pub const QGF1_MAGIC: &[u8; 4] = b"QGF1";
const QGF1_HEADER: usize = 4 + 4 * 4 + 2 * 8;

/// Serializes a field (converted to grid representation) as QGF1 bytes.
pub fn encode_qgf1(field: &LayeredField) -> Result<Vec<u8>> {
    let gridded = field.gridded()?;
    let g = gridded.grid();
    let values = gridded.values()?;
    let mut out = Vec::with_capacity(QGF1_HEADER + 8 * values.len());
    out.extend_from_slice(QGF1_MAGIC);
    for v in [g.nx as u32, g.ny as u32, LAYERS as u32, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&g.lx.to_le_bytes());
    out.extend_from_slice(&g.ly.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses QGF1 bytes; `dt` completes the grid since snapshots do not store it.
pub fn decode_qgf1(bytes: &[u8], dt: f64, path: &Path) -> Result<LayeredField> {
    let bad = |reason: String| Error::Format {
        format: "QGF1",
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < QGF1_HEADER {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != QGF1_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let float = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let (nx, ny, layers, flag) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    if layers != LAYERS {
        return Err(bad(format!("expected {LAYERS} layers, found {layers}")));
    }
    if flag != 0 {
        return Err(bad(format!("unsupported representation flag {flag}")));
    }
    let (lx, ly) = (float(20), float(28));
    let grid = Grid::new(nx, ny, lx, ly, dt).map_err(|e| bad(e.to_string()))?;
    let n = grid.state_dim();
    if bytes.len() != QGF1_HEADER + 8 * n {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            8 * n,
            bytes.len() - QGF1_HEADER
        )));
    }
    let values = bytes[QGF1_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LayeredField::from_values(grid, values)
}

pub fn write_field(path: &Path, field: &LayeredField) -> Result<()> {
    let bytes = encode_qgf1(field)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path, dt: f64) -> Result<LayeredField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_qgf1(&bytes, dt, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub step: u64,
    pub file: String,
}

/// A saved trajectory: numbered QGF1 snapshots listed in `manifest.json`.
///
/// Snapshot paths are relative to the manifest's directory. `steps` are
/// absolute solver step indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub grid: Grid,
    pub seed: u64,
    pub save_every: u64,
    pub snapshots: Vec<SnapshotEntry>,
    #[serde(skip)]
    pub dir: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl TrajectoryManifest {
    /// Loads `path`, which may name the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let mut m: TrajectoryManifest = read_json(&file)?;
        m.grid.validate()?;
        m.dir = file
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshot_path(&self, i: usize) -> PathBuf {
        self.dir.join(&self.snapshots[i].file)
    }

    pub fn load_snapshot(&self, i: usize) -> Result<LayeredField> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "snapshot {i} out of range ({} saved)",
                self.len()
            )));
        }
        let field = read_field(&self.snapshot_path(i), self.grid.dt)?;
        self.grid.check_same(field.grid())?;
        Ok(field)
    }
}

/// Streams snapshots to a directory, then writes the manifest.
pub struct TrajectoryWriter {
    manifest: TrajectoryManifest,
}

impl TrajectoryWriter {
    pub fn create(dir: &Path, grid: Grid, seed: u64, save_every: u64) -> Result<Self> {
        create_dir(dir)?;
        Ok(TrajectoryWriter {
            manifest: TrajectoryManifest {
                grid,
                seed,
                save_every,
                snapshots: Vec::new(),
                dir: dir.to_path_buf(),
            },
        })
    }

    pub fn push(&mut self, step: u64, field: &LayeredField) -> Result<()> {
        self.manifest.grid.check_same(field.grid())?;
        let file = format!("snap_{:06}.qgf1", self.manifest.snapshots.len());
        write_field(&self.manifest.dir.join(&file), field)?;
        self.manifest.snapshots.push(SnapshotEntry { step, file });
        Ok(())
    }

    pub fn finish(self) -> Result<TrajectoryManifest> {
        write_json(&self.manifest.dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field() -> LayeredField {
        let g = Grid::new(8, 12, 4.0, 6.0, 0.1).unwrap();
        LayeredField::from_fn(g, |k, x, y| k as f64 + x * 0.5 - y * y)
    }

    #[test]
    fn qgf1_layout_and_round_trip() {
        let f = field();
        let bytes = encode_qgf1(&f).unwrap();
        assert_eq!(&bytes[..4], b"QGF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 4.0);
        assert_eq!(bytes.len(), 36 + 8 * 2 * 8 * 12);
        // first value is layer 0, row 0, column 0; second is column 1
        let v0 = f64::from_le_bytes(bytes[36..44].try_into().unwrap());
        let v1 = f64::from_le_bytes(bytes[44..52].try_into().unwrap());
        let vals = f.values().unwrap();
        assert_eq!((v0, v1), (vals[0], vals[1]));
        let back = decode_qgf1(&bytes, 0.1, Path::new("mem")).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn malformed_qgf1_is_rejected() {
        let bytes = encode_qgf1(&field()).unwrap();
        let p = Path::new("mem");
        assert!(decode_qgf1(&bytes[..30], 0.1, p).is_err());
        assert!(decode_qgf1(&bytes[..bytes.len() - 8], 0.1, p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_qgf1(&wrong, 0.1, p).is_err());
        let mut flag = bytes;
        flag[16] = 1;
        assert!(decode_qgf1(&flag, 0.1, p).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = field();
        let mut w = TrajectoryWriter::create(dir.path(), *f.grid(), 7, 5).unwrap();
        w.push(0, &f).unwrap();
        w.push(5, &f.scaled(2.0)).unwrap();
        w.finish().unwrap();
        let m = TrajectoryManifest::load(dir.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.snapshots[1].step, 5);
        assert_eq!(m.load_snapshot(1).unwrap(), f.scaled(2.0));
        assert!(m.load_snapshot(2).is_err());
    }
}
