//! Single-file binary checkpoints: architecture, node hierarchy, every
//! parameter tensor (including running statistics) and free-form metadata.
//! Values are stored as little-endian f32, so a save/load round trip is
//! bit-exact for f32 models.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::{Real, Shape};
use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;

use super::{ArchitectureSpec, MeshPhys, ModelHierarchy, ModelVariant, ParamStore};

const MAGIC: &[u8; 4] = b"MPH1";
const VERSION: u32 = 1;
const MAX_STRING: usize = 1 << 16;

/// Free-form string metadata carried inside a checkpoint (seed, epoch,
/// validation score, and so on).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub entries: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }
}

/// Internal error while the file path is out of scope; the public entry
/// points attach the path.
enum CkErr {
    Io(std::io::Error),
    Bad(String),
}

impl From<std::io::Error> for CkErr {
    fn from(e: std::io::Error) -> Self {
        CkErr::Io(e)
    }
}

impl From<Error> for CkErr {
    fn from(e: Error) -> Self {
        CkErr::Bad(e.to_string())
    }
}

type CkResult<T> = std::result::Result<T, CkErr>;

fn attach_path<T>(r: CkResult<T>, path: &Path) -> Result<T> {
    r.map_err(|e| match e {
        CkErr::Io(e) => Error::io(path.display().to_string(), e),
        CkErr::Bad(reason) => Error::format(path.display().to_string(), reason),
    })
}

fn bad(reason: impl Into<String>) -> CkErr {
    CkErr::Bad(reason.into())
}

fn write_string<W: Write>(w: &mut W, s: &str) -> CkResult<()> {
    if s.len() > MAX_STRING {
        return Err(bad("string field too long"));
    }
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> CkResult<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > MAX_STRING {
        return Err(bad("string field too long"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("invalid utf-8 in checkpoint"))
}

fn write_adjacency<W: Write>(w: &mut W, adj: &SparseAdjacency) -> CkResult<()> {
    w.write_u32::<LittleEndian>(adj.node_count() as u32)?;
    w.write_u64::<LittleEndian>(adj.entry_count() as u64)?;
    for (i, j) in adj.entries() {
        w.write_u32::<LittleEndian>(i)?;
        w.write_u32::<LittleEndian>(j)?;
    }
    Ok(())
}

fn read_adjacency<R: Read>(r: &mut R) -> CkResult<SparseAdjacency> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    if count > n.saturating_mul(n) {
        return Err(bad("adjacency entry count out of range"));
    }
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n];
    for _ in 0..count {
        let i = r.read_u32::<LittleEndian>()? as usize;
        let j = r.read_u32::<LittleEndian>()?;
        if i >= n || j as usize >= n {
            return Err(bad("adjacency index out of range"));
        }
        rows[i].push(j);
    }
    Ok(SparseAdjacency::from_rows(rows)?)
}

fn save_to<F: Real, W: Write>(
    w: &mut W,
    model: &MeshPhys<F>,
    meta: &CheckpointMeta,
) -> CkResult<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    write_string(w, &model.region_tag)?;
    write_string(w, model.arch.variant.tag())?;

    let a = &model.arch;
    w.write_u32::<LittleEndian>(a.in_channels as u32)?;
    w.write_u32::<LittleEndian>(a.channels.len() as u32)?;
    for &c in &a.channels {
        w.write_u32::<LittleEndian>(c as u32)?;
    }
    w.write_u32::<LittleEndian>(a.pool_after.len() as u32)?;
    for &p in &a.pool_after {
        w.write_u32::<LittleEndian>(p as u32)?;
    }
    for &k in &a.temporal_kernels {
        w.write_u32::<LittleEndian>(k as u32)?;
    }
    w.write_f64::<LittleEndian>(a.bn_eps)?;
    w.write_f64::<LittleEndian>(a.bn_momentum)?;

    let h = &model.hierarchy;
    w.write_u32::<LittleEndian>(h.adjacency.len() as u32)?;
    for adj in &h.adjacency {
        write_adjacency(w, adj)?;
    }
    for assignment in &h.assignments {
        w.write_u32::<LittleEndian>(assignment.len() as u32)?;
        for &c in assignment {
            w.write_u32::<LittleEndian>(c)?;
        }
    }

    w.write_u32::<LittleEndian>(meta.entries.len() as u32)?;
    for (k, v) in &meta.entries {
        write_string(w, k)?;
        write_string(w, v)?;
    }

    let tensors = model.params.tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        write_string(w, &t.name)?;
        for d in t.shape.axes() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u8(u8::from(t.trainable))?;
        w.write_u64::<LittleEndian>(t.data.len() as u64)?;
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_from<F: Real, R: Read>(r: &mut R) -> CkResult<(MeshPhys<F>, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("not a model checkpoint (magic {magic:?})")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let region_tag = read_string(r)?;
    let variant = ModelVariant::from_tag(&read_string(r)?)?;

    let in_channels = r.read_u32::<LittleEndian>()? as usize;
    let n_blocks = r.read_u32::<LittleEndian>()? as usize;
    if n_blocks > 1024 {
        return Err(bad("implausible block count"));
    }
    let mut channels = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        channels.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n_pool = r.read_u32::<LittleEndian>()? as usize;
    if n_pool > n_blocks {
        return Err(bad("implausible pooling count"));
    }
    let mut pool_after = Vec::with_capacity(n_pool);
    for _ in 0..n_pool {
        pool_after.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let mut temporal_kernels = [0usize; 3];
    for k in &mut temporal_kernels {
        *k = r.read_u32::<LittleEndian>()? as usize;
    }
    let bn_eps = r.read_f64::<LittleEndian>()?;
    let bn_momentum = r.read_f64::<LittleEndian>()?;
    let arch = ArchitectureSpec {
        in_channels,
        channels,
        pool_after,
        temporal_kernels,
        bn_eps,
        bn_momentum,
        variant,
    };
    arch.validate()?;

    let n_levels = r.read_u32::<LittleEndian>()? as usize;
    if n_levels != arch.level_count() {
        return Err(bad("hierarchy depth mismatches architecture"));
    }
    let mut adjacency = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        adjacency.push(read_adjacency(r)?);
    }
    let mut assignments = Vec::with_capacity(n_levels - 1);
    for level in 0..n_levels - 1 {
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len != adjacency[level].node_count() {
            return Err(bad("assignment length mismatch"));
        }
        let mut a = Vec::with_capacity(len);
        for _ in 0..len {
            a.push(r.read_u32::<LittleEndian>()?);
        }
        assignments.push(a);
    }
    let hierarchy = ModelHierarchy {
        adjacency,
        assignments,
    };

    let mut meta = CheckpointMeta::default();
    let n_meta = r.read_u32::<LittleEndian>()? as usize;
    for _ in 0..n_meta {
        let k = read_string(r)?;
        let v = read_string(r)?;
        meta.entries.insert(k, v);
    }

    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    if n_tensors > 1 << 20 {
        return Err(bad("implausible tensor count"));
    }
    let mut params = ParamStore::new();
    for _ in 0..n_tensors {
        let name = read_string(r)?;
        let mut axes = [0usize; 4];
        for a in &mut axes {
            *a = r.read_u32::<LittleEndian>()? as usize;
        }
        let shape = Shape::new(axes[0], axes[1], axes[2], axes[3]);
        let trainable = r.read_u8()? != 0;
        let len = r.read_u64::<LittleEndian>()? as usize;
        if len != shape.len() {
            return Err(bad(format!(
                "tensor '{name}' length disagrees with its shape"
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(F::cast(r.read_f32::<LittleEndian>()? as f64));
        }
        params.insert(&name, shape, data, trainable)?;
    }

    // The stored tensor set must exactly match what the architecture
    // defines: same names, shapes and trainability.
    let expected = super::init_params::<F>(&arch, 0)?;
    if expected.tensors().len() != params.tensors().len() {
        return Err(bad("checkpoint tensor set mismatch"));
    }
    for e in expected.tensors() {
        let got = params.get(&e.name)?;
        if got.shape != e.shape || got.trainable != e.trainable {
            return Err(bad(format!(
                "tensor '{}' does not match the declared architecture",
                e.name
            )));
        }
    }

    let model = MeshPhys::assemble(arch, hierarchy, params, region_tag)?;
    Ok((model, meta))
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &MeshPhys<F>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let run = || -> CkResult<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        save_to(&mut w, model, meta)
    };
    attach_path(run(), path)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(MeshPhys<F>, CheckpointMeta)> {
    let run = || -> CkResult<(MeshPhys<F>, CheckpointMeta)> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        load_from(&mut r)
    };
    attach_path(run(), path)
}
