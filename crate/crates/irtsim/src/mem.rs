//! Physical memory, the two magic MMIO registers, and the loadable
//! memory-image format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Base of the physical RAM region.
pub const RAM_BASE: u64 = 0x8000_0000;
/// Default RAM size (64 MiB).
pub const RAM_SIZE_DEFAULT: u64 = 64 * 1024 * 1024;

/// Store of any width here halts the simulation with the stored value as
/// exit code.
pub const MMIO_EXIT: u64 = 0x1000_0000;
/// Store here captures the low byte into the output stream.
pub const MMIO_PUTCHAR: u64 = 0x1000_0008;

const MMIO_BASE: u64 = 0x1000_0000;
const MMIO_END: u64 = 0x1000_1000;

/// Side effect of a physical store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreEffect {
    None,
    Exit(u64),
    PutChar(u8),
}

/// Flat physical memory with bounds-checked access.
///
/// Misaligned accesses are handled natively; there is no misaligned trap.
#[derive(Clone)]
pub struct PhysicalMemory {
    base: u64,
    bytes: Vec<u8>,
}

impl PhysicalMemory {
    pub fn new(size: u64) -> Self {
        PhysicalMemory {
            base: RAM_BASE,
            bytes: vec![0; size as usize],
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn in_ram(&self, addr: u64, width: u64) -> bool {
        addr >= self.base && addr.wrapping_add(width) <= self.base + self.size()
    }

    pub fn is_mmio(addr: u64) -> bool {
        (MMIO_BASE..MMIO_END).contains(&addr)
    }

    /// Little-endian read of 1, 2, 4 or 8 bytes. `None` for out-of-range.
    pub fn read(&self, addr: u64, width: u64) -> Option<u64> {
        if Self::is_mmio(addr) {
            return Some(0);
        }
        if !self.in_ram(addr, width) {
            return None;
        }
        let off = (addr - self.base) as usize;
        let mut v = 0u64;
        for i in (0..width as usize).rev() {
            v = (v << 8) | self.bytes[off + i] as u64;
        }
        Some(v)
    }

    /// Little-endian write. `None` for out-of-range.
    pub fn write(&mut self, addr: u64, width: u64, value: u64) -> Option<StoreEffect> {
        match addr {
            MMIO_EXIT => return Some(StoreEffect::Exit(value)),
            MMIO_PUTCHAR => return Some(StoreEffect::PutChar(value as u8)),
            a if Self::is_mmio(a) => return Some(StoreEffect::None),
            _ => {}
        }
        if !self.in_ram(addr, width) {
            return None;
        }
        let off = (addr - self.base) as usize;
        let mut v = value;
        for i in 0..width as usize {
            self.bytes[off + i] = v as u8;
            v >>= 8;
        }
        Some(StoreEffect::None)
    }

    pub fn load_image(&mut self, image: &MemoryImage) -> Result<(), ImageError> {
        for seg in &image.segments {
            if !self.in_ram(seg.addr, seg.bytes.len() as u64) {
                return Err(ImageError::OutOfRange {
                    addr: seg.addr,
                    len: seg.bytes.len(),
                });
            }
            let off = (seg.addr - self.base) as usize;
            self.bytes[off..off + seg.bytes.len()].copy_from_slice(&seg.bytes);
        }
        Ok(())
    }

    /// FNV-1a digest over the full RAM contents, in 8-byte strides.
    pub fn digest(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for chunk in self.bytes.chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            hash ^= u64::from_le_bytes(word);
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    /// Raw view of a physical range, for postcondition checks.
    pub fn slice(&self, addr: u64, len: u64) -> Option<&[u8]> {
        if !self.in_ram(addr, len) {
            return None;
        }
        let off = (addr - self.base) as usize;
        Some(&self.bytes[off..off + len as usize])
    }
}

impl fmt::Debug for PhysicalMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhysicalMemory({} bytes @ {:#x})", self.size(), self.base)
    }
}

/// One loadable segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub addr: u64,
    pub bytes: Vec<u8>,
}

/// A loadable guest program: segments, entry point and symbols.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryImage {
    pub entry: u64,
    pub segments: Vec<Segment>,
    pub symbols: BTreeMap<String, u64>,
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("segment at {addr:#x} ({len} bytes) does not fit in RAM")]
    OutOfRange { addr: u64, len: usize },
    #[error("segments at {0:#x} and {1:#x} overlap")]
    Overlap(u64, u64),
    #[error("manifest parse error: {0}")]
    Manifest(String),
    #[error("bad hex in manifest: {0}")]
    Hex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MemoryImage {
    pub fn symbol(&self, name: &str) -> Option<u64> {
        self.symbols.get(name).copied()
    }

    /// Checks that segments are sorted and non-overlapping, sorting first.
    pub fn normalize(&mut self) -> Result<(), ImageError> {
        self.segments.sort_by_key(|s| s.addr);
        for pair in self.segments.windows(2) {
            let end = pair[0].addr + pair[0].bytes.len() as u64;
            if end > pair[1].addr {
                return Err(ImageError::Overlap(pair[0].addr, pair[1].addr));
            }
        }
        Ok(())
    }
}

// Manifest wire format. Addresses are hex strings so the full 64-bit range
// survives the TOML integer type.
#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    entry: String,
    #[serde(default, rename = "segment")]
    segments: Vec<ManifestSegment>,
    #[serde(default)]
    symbols: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSegment {
    addr: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inline_hex: Option<String>,
}

fn parse_hex(s: &str) -> Result<u64, ImageError> {
    let t = s.trim().trim_start_matches("0x").trim_start_matches("0X");
    u64::from_str_radix(t, 16).map_err(|_| ImageError::Hex(s.to_string()))
}

fn hex_bytes(s: &str) -> Result<Vec<u8>, ImageError> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if t.len() % 2 != 0 {
        return Err(ImageError::Hex("odd-length inline_hex".into()));
    }
    (0..t.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&t[i..i + 2], 16).map_err(|_| ImageError::Hex(t.clone())))
        .collect()
}

impl MemoryImage {
    /// Serializes to the manifest format with all segments inline.
    pub fn to_manifest(&self) -> String {
        let doc = ManifestDoc {
            entry: format!("{:#x}", self.entry),
            segments: self
                .segments
                .iter()
                .map(|s| ManifestSegment {
                    addr: format!("{:#x}", s.addr),
                    file: None,
                    inline_hex: Some(s.bytes.iter().map(|b| format!("{:02x}", b)).collect()),
                })
                .collect(),
            symbols: self
                .symbols
                .iter()
                .map(|(k, v)| (k.clone(), format!("{:#x}", v)))
                .collect(),
        };
        toml::to_string(&doc).expect("manifest serialization")
    }

    /// Parses a manifest. `dir` anchors relative `file` segment paths.
    pub fn from_manifest(text: &str, dir: &Path) -> Result<Self, ImageError> {
        let doc: ManifestDoc =
            toml::from_str(text).map_err(|e| ImageError::Manifest(e.to_string()))?;
        let mut image = MemoryImage {
            entry: parse_hex(&doc.entry)?,
            ..Default::default()
        };
        for seg in doc.segments {
            let addr = parse_hex(&seg.addr)?;
            let bytes = match (&seg.inline_hex, &seg.file) {
                (Some(hex), None) => hex_bytes(hex)?,
                (None, Some(file)) => std::fs::read(dir.join(file))?,
                _ => {
                    return Err(ImageError::Manifest(
                        "segment needs exactly one of inline_hex or file".into(),
                    ))
                }
            };
            image.segments.push(Segment { addr, bytes });
        }
        for (name, addr) in doc.symbols {
            image.symbols.insert(name, parse_hex(&addr)?);
        }
        image.normalize()?;
        Ok(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mmio_stores_have_effects() {
        let mut mem = PhysicalMemory::new(4096);
        assert_eq!(mem.write(MMIO_EXIT, 8, 7), Some(StoreEffect::Exit(7)));
        assert_eq!(
            mem.write(MMIO_PUTCHAR, 8, 0x141),
            Some(StoreEffect::PutChar(0x41))
        );
        assert_eq!(mem.read(MMIO_EXIT, 8), Some(0));
    }

    #[test]
    fn out_of_range_access_is_none() {
        let mut mem = PhysicalMemory::new(4096);
        assert_eq!(mem.read(0x2000_0000, 8), None);
        assert_eq!(mem.write(RAM_BASE + 4095, 8, 1), None);
        assert!(mem.write(RAM_BASE + 4088, 8, 1).is_some());
    }

    #[test]
    fn misaligned_access_works() {
        let mut mem = PhysicalMemory::new(4096);
        mem.write(RAM_BASE + 3, 8, 0x0102030405060708).unwrap();
        assert_eq!(mem.read(RAM_BASE + 3, 8), Some(0x0102030405060708));
        assert_eq!(mem.read(RAM_BASE + 3, 2), Some(0x0708));
    }

    #[test]
    fn manifest_round_trips() {
        let mut image = MemoryImage {
            entry: 0x8000_0000,
            segments: vec![
                Segment {
                    addr: 0x8000_0000,
                    bytes: vec![0x13, 0, 0, 0],
                },
                Segment {
                    addr: 0x8000_1000,
                    bytes: vec![0xff; 16],
                },
            ],
            symbols: BTreeMap::from([("_start".to_string(), 0x8000_0000)]),
        };
        image.normalize().unwrap();
        let text = image.to_manifest();
        let back = MemoryImage::from_manifest(&text, Path::new(".")).unwrap();
        assert_eq!(back, image);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let mut image = MemoryImage {
            entry: 0,
            segments: vec![
                Segment {
                    addr: 0x8000_0000,
                    bytes: vec![0; 8],
                },
                Segment {
                    addr: 0x8000_0004,
                    bytes: vec![0; 8],
                },
            ],
            symbols: BTreeMap::new(),
        };
        assert!(matches!(image.normalize(), Err(ImageError::Overlap(..))));
    }
}
