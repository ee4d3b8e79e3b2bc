//! Loadable program images and their on-disk format.
//!
//! File layout: magic `SCVM`, version byte `1`, then origin, entry and
//! payload length as little-endian `u32`, then the payload bytes. Symbols
//! are debug-only and are not written to disk.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::MEMORY_SIZE;

pub const IMAGE_MAGIC: &[u8; 4] = b"SCVM";
pub const IMAGE_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramImage {
    pub origin: u32,
    pub payload: Vec<u8>,
    pub entry: u32,
    pub symbols: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("image [{origin:#x}, +{len:#x}) overflows {MEMORY_SIZE}-byte guest memory")]
    Overflow { origin: u32, len: usize },
    #[error("entry {entry:#x} lies outside the payload [{origin:#x}, +{len:#x})")]
    EntryOutside { entry: u32, origin: u32, len: usize },
    #[error("bad image magic")]
    BadMagic,
    #[error("unsupported image version {0}")]
    BadVersion(u8),
    #[error("image file truncated: header says {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

impl ProgramImage {
    pub fn new(
        origin: u32,
        payload: Vec<u8>,
        entry: u32,
        symbols: BTreeMap<String, u32>,
    ) -> Result<Self, ImageError> {
        let image = ProgramImage { origin, payload, entry, symbols };
        image.validate()?;
        Ok(image)
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let len = self.payload.len();
        if self.origin as usize + len > MEMORY_SIZE {
            return Err(ImageError::Overflow { origin: self.origin, len });
        }
        if self.entry < self.origin || self.entry as usize >= self.origin as usize + len {
            return Err(ImageError::EntryOutside { entry: self.entry, origin: self.origin, len });
        }
        Ok(())
    }

    /// One past the last payload byte.
    pub fn end(&self) -> u32 {
        self.origin + self.payload.len() as u32
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    /// Label whose address is exactly `addr`, preferring the
    /// lexicographically first when several coincide.
    pub fn label_at(&self, addr: u32) -> Option<&str> {
        self.symbols
            .iter()
            .find(|(_, &a)| a == addr)
            .map(|(name, _)| name.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.push(IMAGE_VERSION);
        out.extend_from_slice(&self.origin.to_le_bytes());
        out.extend_from_slice(&self.entry.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != IMAGE_MAGIC {
            return Err(ImageError::BadMagic);
        }
        if bytes[4] != IMAGE_VERSION {
            return Err(ImageError::BadVersion(bytes[4]));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let origin = word(5);
        let entry = word(9);
        let len = word(13) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(ImageError::Truncated { expected: len, found: payload.len() });
        }
        ProgramImage::new(origin, payload.to_vec(), entry, BTreeMap::new())
    }

    /// Hex SHA-256 of the serialized image (symbols excluded).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
