//! VRST tensor file format and the checkpoint manifest built on it.
//!
//! Record layout: magic `VRST`, version u16 LE, rank u8, then `rank`
//! extents as u32 LE, then the payload as little-endian f32, row-major.
//! Checkpoints concatenate records into one file and index them with a
//! plain-text manifest carrying the resolved config and its hash.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mvgl::{explicit_prior, PriorMap, PriorSource};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"VRST";
pub const VERSION: u16 = 1;

pub fn write_record(out: &mut dyn Write, dims: &[usize], data: &[f64]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::format(format!("rank {} outside 1..=4", dims.len())));
    }
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(Error::shape(format!(
            "record of {} values for extents {dims:?}",
            data.len()
        )));
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[dims.len() as u8])?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn record_len(dims: &[usize]) -> usize {
    4 + 2 + 1 + 4 * dims.len() + 4 * dims.iter().product::<usize>()
}

pub fn read_record(input: &mut dyn Read) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("bad magic bytes, not a VRST record".to_string()));
    }
    let mut v = [0u8; 2];
    input.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::format(format!("unsupported VRST version {version}")));
    }
    let mut rank = [0u8; 1];
    input.read_exact(&mut rank)?;
    let rank = rank[0] as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::format(format!("rank {rank} outside 1..=4")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        input.read_exact(&mut d)?;
        dims.push(u32::from_le_bytes(d) as usize);
    }
    let numel: usize = dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    input.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((dims, data))
}

fn dims4(dims: &[usize]) -> [usize; 4] {
    let mut out = [1usize; 4];
    let offset = 4 - dims.len();
    for (i, &d) in dims.iter().enumerate() {
        out[offset + i] = d;
    }
    out
}

/// Load a prior map: rank 2 is a bare h x w grid, rank 3 is C x h x w
/// features reduced by the channel L2 norm.
pub fn load_prior(path: &Path) -> Result<PriorMap> {
    let mut f = fs::File::open(path)?;
    let (dims, data) = read_record(&mut f)?;
    let source = PriorSource::External(path.display().to_string());
    match dims.len() {
        2 => PriorMap::new(dims[0], dims[1], data.iter().map(|v| v.abs()).collect(), source),
        3 => {
            let t = Tensor4::new([1, dims[0], dims[1], dims[2]], data)?;
            explicit_prior(&t, source)
        }
        r => Err(Error::format(format!(
            "prior tensors must be rank 2 or 3, found rank {r}"
        ))),
    }
}

pub fn save_prior(path: &Path, prior: &PriorMap) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_record(&mut f, &[1, prior.h, prior.w], &prior.grid)
}

/// FNV-1a of the resolved config text; stable across platforms.
pub fn fnv1a64(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub struct Checkpoint {
    pub config_text: String,
    pub iter: u64,
    entries: Vec<(String, Tensor4)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor4> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Paths derived from a checkpoint stem (`<stem>.vrst` + `<stem>.manifest`).
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("vrst"), stem.with_extension("manifest"))
}

pub fn save_checkpoint(
    stem: &Path,
    config_text: &str,
    iter: u64,
    entries: &[(String, Tensor4)],
) -> Result<()> {
    let (data_path, manifest_path) = checkpoint_paths(stem);
    let mut data = Vec::new();
    let mut manifest = String::new();
    manifest.push_str("vrst-checkpoint v1\n");
    manifest.push_str(&format!("config-hash {:016x}\n", fnv1a64(config_text)));
    manifest.push_str("config-begin\n");
    manifest.push_str(config_text);
    if !config_text.ends_with('\n') {
        manifest.push('\n');
    }
    manifest.push_str("config-end\n");
    manifest.push_str(&format!("iter {iter}\n"));
    manifest.push_str(&format!("tensors {}\n", entries.len()));
    for (name, t) in entries {
        let offset = data.len();
        let dims = t.dims();
        write_record(&mut data, &dims, t.data())?;
        manifest.push_str(&format!(
            "{name} {offset} {} {} {} {} {}\n",
            record_len(&dims),
            dims[0],
            dims[1],
            dims[2],
            dims[3]
        ));
    }
    fs::write(data_path, data)?;
    fs::write(manifest_path, manifest)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<Checkpoint> {
    let (data_path, manifest_path) = checkpoint_paths(stem);
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", manifest_path.display())))?;
    let mut lines = manifest.lines();
    if lines.next() != Some("vrst-checkpoint v1") {
        return Err(Error::format("not a v1 checkpoint manifest".to_string()));
    }
    let hash_line = lines
        .next()
        .ok_or_else(|| Error::format("missing config hash".to_string()))?;
    let stored_hash = hash_line
        .strip_prefix("config-hash ")
        .ok_or_else(|| Error::format("malformed config-hash line".to_string()))?;
    if lines.next() != Some("config-begin") {
        return Err(Error::format("missing config block".to_string()));
    }
    let mut config_text = String::new();
    for line in lines.by_ref() {
        if line == "config-end" {
            break;
        }
        config_text.push_str(line);
        config_text.push('\n');
    }
    if format!("{:016x}", fnv1a64(&config_text)) != stored_hash {
        return Err(Error::format(
            "checkpoint config hash mismatch (corrupt or edited manifest)".to_string(),
        ));
    }
    let iter_line = lines
        .next()
        .ok_or_else(|| Error::format("missing iter line".to_string()))?;
    let iter: u64 = iter_line
        .strip_prefix("iter ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("malformed iter line".to_string()))?;
    let count_line = lines
        .next()
        .ok_or_else(|| Error::format("missing tensor count".to_string()))?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("malformed tensors line".to_string()))?;

    let blob = fs::read(&data_path)?;
    let mut entries = Vec::with_capacity(count);
    for line in lines.take(count) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(Error::format(format!("malformed manifest entry `{line}`")));
        }
        let name = parts[0].to_string();
        let offset: usize = parts[1]
            .parse()
            .map_err(|_| Error::format("bad offset".to_string()))?;
        let len: usize = parts[2]
            .parse()
            .map_err(|_| Error::format("bad length".to_string()))?;
        if offset + len > blob.len() {
            return Err(Error::format(format!("record `{name}` overruns data file")));
        }
        let mut cursor = &blob[offset..offset + len];
        let (dims, data) = read_record(&mut cursor)?;
        entries.push((name, Tensor4::new(dims4(&dims), data)?));
    }
    if entries.len() != count {
        return Err(Error::format(format!(
            "manifest declared {count} tensors, found {}",
            entries.len()
        )));
    }
    Ok(Checkpoint {
        config_text,
        iter,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let dims = [2usize, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 - 3.0).collect();
        let mut buf = Vec::new();
        write_record(&mut buf, &dims, &data).unwrap();
        assert_eq!(buf.len(), record_len(&dims));
        assert_eq!(&buf[0..4], MAGIC);
        let (rd, rv) = read_record(&mut buf.as_slice()).unwrap();
        assert_eq!(rd, dims);
        // Quarters survive the f32 round trip exactly.
        assert_eq!(rv, data);
    }

    #[test]
    fn rejects_bad_magic_and_rank() {
        let mut buf = Vec::new();
        write_record(&mut buf, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        buf[0] = b'X';
        assert!(read_record(&mut buf.as_slice()).is_err());
        assert!(write_record(&mut Vec::new(), &[1, 1, 1, 1, 1], &[0.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let entries = vec![
            ("block0.scan.a_raw".to_string(), Tensor4::from_fn([4, 2, 1, 1], |b, c, _, _| (b * 2 + c) as f64)),
            ("head.w".to_string(), Tensor4::zeros([3, 8, 3, 3])),
        ];
        save_checkpoint(&stem, "seed = 0\nbase_channels = 8\n", 17, &entries).unwrap();
        let ck = load_checkpoint(&stem).unwrap();
        assert_eq!(ck.iter, 17);
        assert_eq!(ck.config_text, "seed = 0\nbase_channels = 8\n");
        assert_eq!(ck.tensor("block0.scan.a_raw").unwrap().dims(), [4, 2, 1, 1]);
        assert_eq!(ck.tensor("block0.scan.a_raw").unwrap().at(3, 1, 0, 0), 7.0);

        // Tamper with the embedded config: the hash must catch it.
        let (_, manifest) = checkpoint_paths(&stem);
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace("seed = 0", "seed = 1")).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }

    #[test]
    fn prior_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.vrst");
        let prior = PriorMap::new(
            4,
            4,
            (0..16).map(|i| i as f64 / 16.0).collect(),
            PriorSource::ReferenceGradient,
        )
        .unwrap();
        save_prior(&path, &prior).unwrap();
        let loaded = load_prior(&path).unwrap();
        assert_eq!((loaded.h, loaded.w), (4, 4));
        for (a, b) in loaded.grid.iter().zip(&prior.grid) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
