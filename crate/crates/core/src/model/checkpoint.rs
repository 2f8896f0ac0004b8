//! Checkpoint container: a text header terminated by `end\n`, then each
//! parameter as `u32 name_len | name | u32 ndim | u64 dims.. | f64 data..`,
//! all little-endian, in declared order. A `.meta` sidecar lists
//! `name<TAB>shape<TAB>sha256` per parameter.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Dims, ReadoutKind, RnnSearchModel};
use crate::error::{NmtError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "nmt-checkpoint";

fn checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn write_checkpoint(model: &RnnSearchModel, out: &mut impl Write) -> Result<()> {
    let d = &model.dims;
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    let _ = writeln!(header, "version {CHECKPOINT_VERSION}");
    let _ = writeln!(header, "src_vocab {}", d.src_vocab);
    let _ = writeln!(header, "tgt_vocab {}", d.tgt_vocab);
    let _ = writeln!(header, "embed {}", d.embed);
    let _ = writeln!(header, "hidden {}", d.hidden);
    let _ = writeln!(header, "attention {}", d.attention);
    let _ = writeln!(header, "readout {}", d.readout);
    let _ = writeln!(header, "readout_kind {}", d.readout_kind.as_str());
    let _ = writeln!(header, "seed {}", model.seed);
    let _ = writeln!(header, "params {}", model.params().len());
    let _ = writeln!(header, "end");
    out.write_all(header.as_bytes())?;
    for (name, p) in model.names().iter().zip(model.params()) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(p.shape().len() as u32).to_le_bytes())?;
        for &d in p.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| NmtError::Checkpoint(format!("truncated parameter data: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<RnnSearchModel> {
    let mut header = Vec::new();
    loop {
        let [b] = read_exact::<1>(input)?;
        header.push(b);
        if header.ends_with(b"\nend\n") {
            break;
        }
        if header.len() > 4096 {
            return Err(NmtError::Checkpoint("header too long or missing `end`".into()));
        }
    }
    let header = String::from_utf8(header).map_err(|_| NmtError::Checkpoint("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(NmtError::Checkpoint("not a checkpoint file".into()));
    }
    let mut fields = std::collections::HashMap::new();
    for line in lines {
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| NmtError::Checkpoint(format!("bad header line `{line}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let num = |k: &str| -> Result<u64> {
        fields
            .get(k)
            .ok_or_else(|| NmtError::Checkpoint(format!("header lacks `{k}`")))?
            .parse()
            .map_err(|_| NmtError::Checkpoint(format!("header field `{k}` is not a number")))
    };
    let version = num("version")?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(NmtError::Checkpoint(format!("unsupported version {version}")));
    }
    let dims = Dims {
        src_vocab: num("src_vocab")? as usize,
        tgt_vocab: num("tgt_vocab")? as usize,
        embed: num("embed")? as usize,
        hidden: num("hidden")? as usize,
        attention: num("attention")? as usize,
        readout: num("readout")? as usize,
        readout_kind: ReadoutKind::parse(fields.get("readout_kind").map_or("tanh", String::as_str))?,
    };
    dims.validate()?;
    let seed = num("seed")?;
    let count = num("params")? as usize;
    let expected = super::layout(&dims);
    let mut params = Vec::with_capacity(count);
    for k in 0..count {
        let name_len = u32::from_le_bytes(read_exact::<4>(input)?) as usize;
        if name_len > 256 {
            return Err(NmtError::Checkpoint("corrupt parameter name".into()));
        }
        let mut name = vec![0u8; name_len];
        input
            .read_exact(&mut name)
            .map_err(|e| NmtError::Checkpoint(format!("truncated parameter name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| NmtError::Checkpoint("parameter name is not UTF-8".into()))?;
        if expected.get(k).map(|e| e.0.as_str()) != Some(name.as_str()) {
            return Err(NmtError::Checkpoint(format!("unexpected parameter `{name}` at position {k}")));
        }
        let ndim = u32::from_le_bytes(read_exact::<4>(input)?) as usize;
        if ndim == 0 || ndim > 4 {
            return Err(NmtError::Checkpoint(format!("{name}: bad rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_exact::<8>(input)?) as usize);
        }
        if shape != expected[k].1 {
            return Err(NmtError::Checkpoint(format!("{name}: shape {shape:?}, expected {:?}", expected[k].1)));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact::<8>(input)?));
        }
        params.push(Tensor::new(shape, data)?);
    }
    RnnSearchModel::from_parts(dims, seed, params)
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the checkpoint and its `.meta` sidecar.
pub fn save_checkpoint(model: &RnnSearchModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    let mut meta = String::new();
    for (name, p) in model.names().iter().zip(model.params()) {
        let _ = writeln!(meta, "{name}\t{}\t{}", shape_str(p.shape()), checksum(p));
    }
    fs::write(meta_path(path), meta)?;
    Ok(())
}

/// Loads a checkpoint; when the sidecar exists its checksums must match.
pub fn load_checkpoint(path: &Path) -> Result<RnnSearchModel> {
    let bytes = fs::read(path)?;
    let model = read_checkpoint(&mut bytes.as_slice())?;
    let meta = meta_path(path);
    if meta.exists() {
        let text = fs::read_to_string(&meta)?;
        for ((line, name), p) in text.lines().zip(model.names()).zip(model.params()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols[0] != name || cols[1] != shape_str(p.shape()) || cols[2] != checksum(p) {
                return Err(NmtError::Checkpoint(format!("{}: checksum mismatch for `{name}`", meta.display())));
            }
        }
    }
    Ok(model)
}
