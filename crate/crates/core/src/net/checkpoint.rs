//! Binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "GLABNET\0"
//! 8       4     format version (u32 LE) = 1
//! 12      4     num_classes (u32 LE)
//! 16      4     d_c
//! 20      4     d_h
//! 24      4     n_blocks
//! 28      4     branch_index (0 = no branch head)
//! 32      4     n_freqs
//! 36      8     params.version (u64 LE)
//! 44      8*F   time frequencies (f64 LE)
//! ...           tensors in canonical order, each: u64 LE element count, then f64 LE values
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! A sidecar `<path>.manifest.txt` lists the architecture, the tensor table and the digest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::{Arch, Block, Linear, NetError, NetParams, Result};

pub const MAGIC: &[u8; 8] = b"GLABNET\0";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    buf.extend_from_slice(&(vals.len() as u64).to_le_bytes());
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(params: &NetParams) -> Vec<u8> {
    let a = &params.arch;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, params.num_classes as u32);
    put_u32(&mut buf, a.d_c as u32);
    put_u32(&mut buf, a.d_h as u32);
    put_u32(&mut buf, a.n_blocks as u32);
    put_u32(&mut buf, a.branch_index.unwrap_or(0) as u32);
    put_u32(&mut buf, a.n_freqs as u32);
    buf.extend_from_slice(&params.version.to_le_bytes());
    for f in params.time_freqs.iter() {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    params.visit(|_, t| put_f64s(&mut buf, t));
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: usize, name: &str) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(NetError::Checkpoint(format!("tensor {name}: expected {expected} values, found {n}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetParams> {
    if bytes.len() < 44 + 32 {
        return Err(NetError::Checkpoint("file too short".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(NetError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported format version {version}")));
    }
    let num_classes = r.u32()? as usize;
    let d_c = r.u32()? as usize;
    let d_h = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    let branch = r.u32()? as usize;
    let n_freqs = r.u32()? as usize;
    let arch = Arch { d_c, d_h, n_blocks, branch_index: (branch > 0).then_some(branch), n_freqs };
    arch.validate()?;
    let param_version = r.u64()?;
    let time_freqs = Array1::from((0..n_freqs).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
    let mat = |r: &mut Reader, rows: usize, cols: usize, name: &str| -> Result<Array2<f64>> {
        Ok(Array2::from_shape_vec((rows, cols), r.tensor(rows * cols, name)?).expect("length checked"))
    };
    let vec = |r: &mut Reader, n: usize, name: &str| -> Result<Array1<f64>> { Ok(Array1::from(r.tensor(n, name)?)) };
    let embed = mat(&mut r, num_classes + 1, d_c, "embed")?;
    let input = Linear { w: mat(&mut r, arch.input_dim(), d_h, "input.w")?, b: vec(&mut r, d_h, "input.b")? };
    let mut blocks = Vec::with_capacity(n_blocks);
    for k in 0..n_blocks {
        let fc1 = Linear { w: mat(&mut r, d_h, d_h, &format!("blocks.{k}.fc1.w"))?, b: vec(&mut r, d_h, "fc1.b")? };
        let fc2 = Linear { w: mat(&mut r, d_h, d_h, &format!("blocks.{k}.fc2.w"))?, b: vec(&mut r, d_h, "fc2.b")? };
        blocks.push(Block { fc1, fc2 });
    }
    let head = Linear { w: mat(&mut r, d_h, 2, "head.w")?, b: vec(&mut r, 2, "head.b")? };
    let branch_head = match arch.branch_index {
        Some(_) => Some(Linear { w: mat(&mut r, d_h, 2, "branch_head.w")?, b: vec(&mut r, 2, "branch_head.b")? }),
        None => None,
    };
    if r.pos != body.len() {
        return Err(NetError::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(NetParams { arch, num_classes, embed, time_freqs, input, blocks, head, branch_head, version: param_version })
}

/// Text manifest describing a checkpoint.
pub fn manifest(params: &NetParams, bytes: &[u8]) -> String {
    let a = &params.arch;
    let mut s = String::from("# guidance-lab checkpoint manifest\n");
    let _ = writeln!(s, "format = checkpoint/{FORMAT_VERSION}");
    let _ = writeln!(s, "num_classes = {}", params.num_classes);
    let _ = writeln!(s, "d_c = {}", a.d_c);
    let _ = writeln!(s, "d_h = {}", a.d_h);
    let _ = writeln!(s, "n_blocks = {}", a.n_blocks);
    let _ = writeln!(s, "branch_index = {}", a.branch_index.map_or("none".to_string(), |b| b.to_string()));
    let _ = writeln!(s, "n_freqs = {}", a.n_freqs);
    let _ = writeln!(s, "param_version = {}", params.version);
    let _ = writeln!(s, "param_count = {}", params.param_count());
    params.visit(|name, t| {
        let _ = writeln!(s, "tensor.{name} = {}", t.len());
    });
    let _ = writeln!(s, "bytes = {}", bytes.len());
    let _ = writeln!(s, "sha256 = {}", hex::encode(Sha256::digest(bytes)));
    s
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.txt");
    PathBuf::from(p)
}

/// Writes checkpoint and sidecar manifest, each via write-temp-then-rename.
pub fn save(params: &NetParams, path: &Path) -> Result<()> {
    let bytes = encode(params);
    write_atomic(path, &bytes)?;
    write_atomic(&manifest_path(path), manifest(params, &bytes).as_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetParams> {
    let bytes = fs::read(path).map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
