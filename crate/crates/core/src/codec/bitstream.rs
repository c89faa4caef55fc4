use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LVCC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;

/// Self-describing compressed image: fixed header, hyper-latent stream,
/// latent stream. All header integers are little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub q: u8,
    pub height: u16,
    pub width: u16,
    pub z_bytes: Vec<u8>,
    pub y_bytes: Vec<u8>,
}

impl Bitstream {
    pub fn len(&self) -> usize {
        HEADER_LEN + self.z_bytes.len() + self.y_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.q);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&(self.z_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.y_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_bytes);
        out.extend_from_slice(&self.y_bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Decode(format!("truncated header: {} bytes, need {HEADER_LEN}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic: not an LVCC bitstream".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {}", bytes[4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
        let (z_len, y_len) = (u32_at(10), u32_at(14));
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < z_len + y_len {
            return Err(Error::Decode(format!(
                "truncated payload: header announces {} bytes, found {}",
                z_len + y_len,
                payload.len()
            )));
        }
        if payload.len() > z_len + y_len {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self {
            q: bytes[5],
            height: u16_at(6),
            width: u16_at(8),
            z_bytes: payload[..z_len].to_vec(),
            y_bytes: payload[z_len..].to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
