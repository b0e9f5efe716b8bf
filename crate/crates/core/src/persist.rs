//! Little-endian binary framing shared by the codebook and model checkpoints.
//!
//! Every file is `magic (4 bytes) | version (u32) | header length (u32) |
//! header (UTF-8 `key=value` lines) | payload | sha256(payload) (32 bytes)`.
//! The trailing digest is recomputed on load and compared.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short stable hash of a serializable value's canonical JSON form.
pub fn hash_of<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize infallibly");
    sha256_hex(&json)[..16].to_string()
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], path: &'a Path) -> Self {
        Self { data, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(self.path, "unexpected end of payload"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n.saturating_mul(8) > self.data.len() - self.pos {
            return Err(Error::format(self.path, "array length exceeds payload"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(self.path, "invalid utf-8"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}

/// Header lines are `key=value`; order is preserved.
pub type Header = Vec<(String, String)>;

pub fn header_get<'h>(header: &'h Header, key: &str) -> Option<&'h str> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

pub fn write_framed(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    header: &Header,
    payload: &[u8],
) -> Result<()> {
    let header_text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::with_capacity(payload.len() + header_text.len() + 48);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header_text.len() as u32).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&Sha256::digest(payload));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a framed file, verifying magic, version, and payload digest.
pub fn read_framed(path: &Path, magic: &[u8; 4], version: u32) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 + 32 || &bytes[..4] != magic {
        return Err(Error::format(path, "bad magic or truncated file"));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: format!("v{version}"),
            found: format!("v{found}"),
        });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + hlen + 32 > bytes.len() {
        return Err(Error::format(path, "header length exceeds file size"));
    }
    let header_text = std::str::from_utf8(&bytes[12..12 + hlen])
        .map_err(|_| Error::format(path, "header is not utf-8"))?;
    let mut header = Header::new();
    for line in header_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed header line {line:?}")))?;
        header.push((k.to_string(), v.to_string()));
    }
    let payload = &bytes[12 + hlen..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    if Sha256::digest(payload).as_slice() != stored {
        return Err(Error::format(path, "payload checksum mismatch"));
    }
    Ok((header, payload.to_vec()))
}
