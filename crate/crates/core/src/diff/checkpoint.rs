//! On-disk parameter snapshots: a text manifest plus a little-endian f64 blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DenseArray, DiffError, ParamStore};

const MAGIC: &str = "# quadkan-checkpoint 1";
const SLOTS: [&str; 3] = ["value", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub variant: String,
}

pub fn save(store: &ParamStore, dir: &Path, variant: &str) -> Result<(), DiffError> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MAGIC}\n# step {}\n# variant {variant}\n", store.step());
    let mut blob: Vec<u8> = Vec::with_capacity(store.num_scalars() * 24);
    let mut offset = 0usize;
    for (_, name, e) in store.iter() {
        for (slot, arr) in SLOTS.iter().zip([&e.value, &e.adam_m, &e.adam_v]) {
            let shape: Vec<String> = arr.shape().iter().map(|d| d.to_string()).collect();
            let shape = if shape.is_empty() { "-".to_string() } else { shape.join("x") };
            manifest.push_str(&format!("{name}:{slot} f64 {shape} {offset} {}\n", arr.len()));
            for v in arr.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += arr.len();
        }
    }
    fs::File::create(dir.join("params.bin"))?.write_all(&blob)?;
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

struct Line {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn bad(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

fn parse(dir: &Path) -> Result<(CheckpointMeta, Vec<Line>, Vec<f64>), DiffError> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing header"));
    }
    let mut meta = CheckpointMeta { step: 0, variant: String::new() };
    let mut entries = Vec::new();
    for l in lines {
        if let Some(rest) = l.strip_prefix("# step ") {
            meta.step = rest.trim().parse().map_err(|_| bad(format!("bad step line {l:?}")))?;
            continue;
        }
        if let Some(rest) = l.strip_prefix("# variant ") {
            meta.variant = rest.trim().to_string();
            continue;
        }
        if l.trim().is_empty() || l.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 5 || f[1] != "f64" {
            return Err(bad(format!("malformed entry {l:?}")));
        }
        let shape = if f[2] == "-" {
            Vec::new()
        } else {
            f[2].split('x').map(|d| d.parse()).collect::<Result<Vec<usize>, _>>().map_err(|_| bad(format!("bad shape in {l:?}")))?
        };
        let offset = f[3].parse().map_err(|_| bad(format!("bad offset in {l:?}")))?;
        let len = f[4].parse().map_err(|_| bad(format!("bad length in {l:?}")))?;
        entries.push(Line { name: f[0].to_string(), shape, offset, len });
    }
    let raw = fs::read(dir.join("params.bin"))?;
    if raw.len() % 8 != 0 {
        return Err(bad("params.bin length is not a multiple of 8"));
    }
    let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((meta, entries, data))
}

/// Restores values, Adam moments and step count into `store`, whose layout
/// must match the snapshot exactly.
pub fn load_into(store: &mut ParamStore, dir: &Path) -> Result<CheckpointMeta, DiffError> {
    let (meta, lines, data) = parse(dir)?;
    let mut it = lines.iter();
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    let mut restored = Vec::with_capacity(names.len());
    for (id, name) in names.iter().enumerate() {
        let e = store.entry(super::ParamId(id));
        let mut arrays = Vec::with_capacity(3);
        for slot in SLOTS {
            let want = format!("{name}:{slot}");
            let line = it.next().ok_or_else(|| DiffError::StoreMismatch(format!("checkpoint lacks entry {name}")))?;
            if line.name != want || line.shape != e.value.shape() {
                return Err(DiffError::StoreMismatch(format!(
                    "entry {name}: checkpoint has {} {:?}, model expects {:?}",
                    line.name,
                    line.shape,
                    e.value.shape()
                )));
            }
            let end = line.offset.checked_add(line.len).filter(|&end| end <= data.len());
            let end = end.ok_or_else(|| bad(format!("entry {} runs past params.bin", line.name)))?;
            arrays.push(DenseArray::from_vec(&line.shape, data[line.offset..end].to_vec())?);
        }
        restored.push(arrays);
    }
    if let Some(extra) = it.next() {
        let base = extra.name.split(':').next().unwrap_or(&extra.name);
        return Err(DiffError::StoreMismatch(format!("checkpoint has extra entry {base}")));
    }
    for (id, mut arrays) in restored.into_iter().enumerate() {
        let e = store.entry_mut(super::ParamId(id));
        e.adam_v = arrays.pop().unwrap();
        e.adam_m = arrays.pop().unwrap();
        e.value = arrays.pop().unwrap();
        e.grad.data_mut().fill(0.0);
    }
    store.set_step(meta.step);
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta, DiffError> {
    parse(dir).map(|(m, _, _)| m)
}
