//! The `HAMA` adapter file format and atomic file output.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HAMA"            4 bytes magic
//! version           u32 (currently 1)
//! kind              u32 (0 task, 1 group, 2 merged)
//! alpha             f64
//! layer_count       u32
//! per layer:        d u32, k u32, r u32, then B (d×r) and A (r×k) as f32, row-major
//! trailer:          id u32, member_count u32, member_count × u32 task ids
//! ```

use std::io::Write;
use std::path::Path;

use crate::adapters::{AdapterGroup, LayerAdapter, TaskAdapter};
use crate::error::{HamError, Result};
use crate::merging::MergedDelta;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"HAMA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Task,
    Group,
    Merged,
}

impl AdapterKind {
    fn code(self) -> u32 {
        match self {
            AdapterKind::Task => 0,
            AdapterKind::Group => 1,
            AdapterKind::Merged => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(AdapterKind::Task),
            1 => Ok(AdapterKind::Group),
            2 => Ok(AdapterKind::Merged),
            other => Err(HamError::Format(format!("unknown adapter kind {other}"))),
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Task => "task",
            AdapterKind::Group => "group",
            AdapterKind::Merged => "merged",
        })
    }
}

/// In-memory image of one adapter file.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFile {
    pub kind: AdapterKind,
    pub alpha: f64,
    pub layers: Vec<LayerAdapter>,
    /// Task id for task adapters, group id for groups, 0 for merged.
    pub id: usize,
    /// Members of a group; contributors of a merge; empty for a task.
    pub member_task_ids: Vec<usize>,
}

impl AdapterFile {
    pub fn member_count(&self) -> usize {
        self.member_task_ids.len()
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, LayerAdapter::rank)
    }

    pub fn nonzero_count(&self) -> usize {
        self.layers.iter().map(LayerAdapter::nonzero_count).sum()
    }

    pub fn into_task(self) -> TaskAdapter {
        TaskAdapter {
            task_id: self.id,
            layers: self.layers,
            alpha: self.alpha,
        }
    }

    pub fn into_group(self) -> AdapterGroup {
        let member_count = self.member_task_ids.len();
        let base_rank = self.rank().checked_div(member_count).unwrap_or(0);
        AdapterGroup {
            group_id: self.id,
            layers: self.layers,
            alpha_g: self.alpha,
            member_count,
            member_task_ids: self.member_task_ids,
            base_rank,
        }
    }
}

impl From<&TaskAdapter> for AdapterFile {
    fn from(a: &TaskAdapter) -> Self {
        AdapterFile {
            kind: AdapterKind::Task,
            alpha: a.alpha,
            layers: a.layers.clone(),
            id: a.task_id,
            member_task_ids: Vec::new(),
        }
    }
}

impl From<&AdapterGroup> for AdapterFile {
    fn from(g: &AdapterGroup) -> Self {
        AdapterFile {
            kind: AdapterKind::Group,
            alpha: g.alpha_g,
            layers: g.layers.clone(),
            id: g.group_id,
            member_task_ids: g.member_task_ids.clone(),
        }
    }
}

impl From<&MergedDelta> for AdapterFile {
    /// Uses the factored form when there is one; otherwise stores the dense
    /// update as `B = ΔW`, `A = I`.
    fn from(m: &MergedDelta) -> Self {
        let layers = match &m.factors {
            Some(f) => f.clone(),
            None => m
                .layers
                .iter()
                .map(|d| LayerAdapter {
                    b: d.clone(),
                    a: Matrix::identity(d.cols()),
                })
                .collect(),
        };
        AdapterFile {
            kind: AdapterKind::Merged,
            alpha: 1.0,
            layers,
            id: 0,
            member_task_ids: m.provenance.iter().map(|p| p.0).collect(),
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| HamError::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode(file: &AdapterFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&file.kind.code().to_le_bytes());
    out.extend_from_slice(&file.alpha.to_le_bytes());
    out.extend_from_slice(&to_u32(file.layers.len(), "layer count")?.to_le_bytes());
    for l in &file.layers {
        let (d, k) = l.weight_shape();
        for v in [d, k, l.rank()] {
            out.extend_from_slice(&to_u32(v, "dimension")?.to_le_bytes());
        }
        for v in l.b.as_slice().iter().chain(l.a.as_slice()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&to_u32(file.id, "id")?.to_le_bytes());
    out.extend_from_slice(&to_u32(file.member_task_ids.len(), "member count")?.to_le_bytes());
    for &t in &file.member_task_ids {
        out.extend_from_slice(&to_u32(t, "task id")?.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| HamError::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| HamError::Format("matrix size overflows".into()))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| HamError::Format("matrix size overflows".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<AdapterFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(HamError::Format("bad magic, not a HAMA adapter file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(HamError::Format(format!("unsupported format version {version}")));
    }
    let kind = AdapterKind::from_code(r.u32()?)?;
    let alpha = r.f64()?;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let b = r.matrix(d, rank)?;
        let a = r.matrix(rank, k)?;
        layers.push(LayerAdapter { b, a });
    }
    let id = r.u32()? as usize;
    let members = r.u32()? as usize;
    let mut member_task_ids = Vec::with_capacity(members.min(1 << 16));
    for _ in 0..members {
        member_task_ids.push(r.u32()? as usize);
    }
    if r.pos != bytes.len() {
        return Err(HamError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(AdapterFile {
        kind,
        alpha,
        layers,
        id,
        member_task_ids,
    })
}

pub fn save_adapter(path: &Path, file: &AdapterFile) -> Result<()> {
    write_atomic(path, &encode(file)?)
}

pub fn load_adapter(path: &Path) -> Result<AdapterFile> {
    decode(&std::fs::read(path)?)
}

/// Writes via a temporary file in the same directory, then renames over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HamError::Io(e.error))?;
    Ok(())
}
