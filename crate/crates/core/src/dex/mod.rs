//! Direct DEX parsing for opcode histograms.
//!
//! Methods are discovered through `class_defs` → `class_data_item` →
//! `encoded_method.code_off`, the same route a disassembler takes, so every
//! method body is counted once per method that references it. The instruction
//! stream of each `code_item` is walked by format width. Payload tables
//! (`packed-switch`, `sparse-switch`, `fill-array-data`) are skipped as data.

pub mod writer;

use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::histogram::OpcodeHistogram;
use crate::opcodes::{
    Opcode, FILL_ARRAY_DATA_PAYLOAD, PACKED_SWITCH_PAYLOAD, SPARSE_SWITCH_PAYLOAD,
};

pub const HEADER_SIZE: usize = 0x70;
pub const ENDIAN_CONSTANT: u32 = 0x1234_5678;
pub const REVERSE_ENDIAN_CONSTANT: u32 = 0x7856_3412;
const CLASS_DEF_SIZE: usize = 32;
const CODE_ITEM_HEADER: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DexError {
    #[error("bad DEX magic")]
    BadMagic,
    #[error("unsupported DEX version {0:?}")]
    UnsupportedVersion(String),
    #[error("truncated: {0}")]
    Truncated(&'static str),
    #[error("unsupported endian tag {0:#010x}")]
    EndianTag(u32),
    #[error("{what} at offset {offset:#x} is out of bounds")]
    OutOfBounds { what: &'static str, offset: u64 },
    #[error("malformed uleb128 at offset {0:#x}")]
    Leb128(usize),
    #[error(
        "instruction at code unit {pc} of code_item {code_off:#x} overruns insns_size {insns_size}"
    )]
    InstructionOverrun {
        code_off: usize,
        pc: usize,
        insns_size: usize,
    },
    #[error("checksum mismatch: header says {stated:#010x}, computed {computed:#010x}")]
    Checksum { stated: u32, computed: u32 },
    #[error("SHA-1 signature mismatch")]
    Signature,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DexOptions {
    pub verify_checksum: bool,
    pub verify_signature: bool,
}

/// One decoded element of an instruction stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeUnitRun {
    Instruction { opcode: Opcode, width: usize },
    Payload { ident: u16, width: usize },
}

impl CodeUnitRun {
    pub fn width(&self) -> usize {
        match *self {
            CodeUnitRun::Instruction { width, .. } | CodeUnitRun::Payload { width, .. } => width,
        }
    }
}

/// A method body located inside a DEX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeItem {
    pub offset: usize,
    pub insns: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DexHeader {
    pub version: u16,
    pub checksum: u32,
    pub file_size: u32,
    pub class_defs_size: u32,
    pub class_defs_off: u32,
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn u32_at(&self, off: usize, what: &'static str) -> Result<u32, DexError> {
        let b = self.slice(off, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn slice(&self, off: usize, len: usize, what: &'static str) -> Result<&'a [u8], DexError> {
        off.checked_add(len)
            .and_then(|end| self.data.get(off..end))
            .ok_or(DexError::OutOfBounds {
                what,
                offset: off as u64,
            })
    }

    fn uleb128(&self, pos: &mut usize) -> Result<u32, DexError> {
        let start = *pos;
        let mut result: u32 = 0;
        for i in 0..5 {
            let byte = *self.data.get(*pos).ok_or(DexError::Leb128(start))?;
            *pos += 1;
            result |= u32::from(byte & 0x7f) << (7 * i);
            if byte & 0x80 == 0 {
                return Ok(result);
            }
        }
        Err(DexError::Leb128(start))
    }
}

pub fn parse_header(data: &[u8]) -> Result<DexHeader, DexError> {
    if data.len() < 8 || &data[0..4] != b"dex\n" || data[7] != 0 {
        return Err(DexError::BadMagic);
    }
    let digits = &data[4..7];
    if !digits.iter().all(u8::is_ascii_digit) {
        return Err(DexError::BadMagic);
    }
    let version_str = String::from_utf8_lossy(digits).into_owned();
    let version: u16 = version_str.parse().map_err(|_| DexError::BadMagic)?;
    if !(35..=39).contains(&version) {
        return Err(DexError::UnsupportedVersion(version_str));
    }
    if data.len() < HEADER_SIZE {
        return Err(DexError::Truncated("header"));
    }
    let r = Reader { data };
    let endian = r.u32_at(0x28, "endian_tag")?;
    if endian != ENDIAN_CONSTANT {
        return Err(DexError::EndianTag(endian));
    }
    Ok(DexHeader {
        version,
        checksum: r.u32_at(0x08, "checksum")?,
        file_size: r.u32_at(0x20, "file_size")?,
        class_defs_size: r.u32_at(0x60, "class_defs_size")?,
        class_defs_off: r.u32_at(0x64, "class_defs_off")?,
    })
}

pub fn adler32(data: &[u8]) -> u32 {
    const MOD: u32 = 65_521;
    let (mut a, mut b) = (1u32, 0u32);
    // 5552 is the largest block that cannot overflow u32 before reduction.
    for chunk in data.chunks(5552) {
        for &byte in chunk {
            a += u32::from(byte);
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (b << 16) | a
}

pub fn verify_integrity(data: &[u8], options: DexOptions) -> Result<(), DexError> {
    let header = parse_header(data)?;
    if options.verify_checksum {
        let computed = adler32(&data[12..]);
        if computed != header.checksum {
            return Err(DexError::Checksum {
                stated: header.checksum,
                computed,
            });
        }
    }
    if options.verify_signature {
        let digest = Sha1::digest(&data[32..]);
        if digest.as_slice() != &data[12..32] {
            return Err(DexError::Signature);
        }
    }
    Ok(())
}

/// Locates every method body reachable from the class definitions.
pub fn code_items(data: &[u8]) -> Result<Vec<CodeItem>, DexError> {
    let header = parse_header(data)?;
    let r = Reader { data };
    let defs_off = header.class_defs_off as usize;
    let defs_len = (header.class_defs_size as usize)
        .checked_mul(CLASS_DEF_SIZE)
        .ok_or(DexError::Truncated("class_defs"))?;
    if header.class_defs_size > 0 {
        r.slice(defs_off, defs_len, "class_defs")?;
    }

    let mut items = Vec::new();
    for i in 0..header.class_defs_size as usize {
        let class_data_off = r.u32_at(defs_off + i * CLASS_DEF_SIZE + 24, "class_data_off")?;
        if class_data_off == 0 {
            continue;
        }
        let mut pos = class_data_off as usize;
        if pos >= data.len() {
            return Err(DexError::OutOfBounds {
                what: "class_data_item",
                offset: pos as u64,
            });
        }
        let static_fields = r.uleb128(&mut pos)?;
        let instance_fields = r.uleb128(&mut pos)?;
        let direct_methods = r.uleb128(&mut pos)?;
        let virtual_methods = r.uleb128(&mut pos)?;
        for _ in 0..u64::from(static_fields) + u64::from(instance_fields) {
            r.uleb128(&mut pos)?; // field_idx_diff
            r.uleb128(&mut pos)?; // access_flags
        }
        for _ in 0..u64::from(direct_methods) + u64::from(virtual_methods) {
            r.uleb128(&mut pos)?; // method_idx_diff
            r.uleb128(&mut pos)?; // access_flags
            let code_off = r.uleb128(&mut pos)?;
            if code_off != 0 {
                items.push(read_code_item(&r, code_off as usize)?);
            }
        }
    }
    Ok(items)
}

fn read_code_item(r: &Reader<'_>, offset: usize) -> Result<CodeItem, DexError> {
    r.slice(offset, CODE_ITEM_HEADER, "code_item")?;
    let insns_size = r.u32_at(offset + 12, "insns_size")? as usize;
    let byte_len = insns_size.checked_mul(2).ok_or(DexError::OutOfBounds {
        what: "insns",
        offset: offset as u64,
    })?;
    let raw = r.slice(offset + CODE_ITEM_HEADER, byte_len, "insns")?;
    let insns = raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    Ok(CodeItem { offset, insns })
}

/// Splits an instruction stream into instructions and payload tables.
///
/// `code_off` is only used for error reporting.
pub fn walk_insns(insns: &[u16], code_off: usize) -> Result<Vec<CodeUnitRun>, DexError> {
    let mut runs = Vec::new();
    let mut pc = 0usize;
    let overrun = |pc: usize| DexError::InstructionOverrun {
        code_off,
        pc,
        insns_size: insns.len(),
    };
    while pc < insns.len() {
        let unit = insns[pc];
        let at = |i: usize| insns.get(pc + i).copied().ok_or_else(|| overrun(pc));
        let run = match unit {
            PACKED_SWITCH_PAYLOAD => {
                let size = u64::from(at(1)?);
                CodeUnitRun::Payload {
                    ident: unit,
                    width: clamp_width(4 + 2 * size),
                }
            }
            SPARSE_SWITCH_PAYLOAD => {
                let size = u64::from(at(1)?);
                CodeUnitRun::Payload {
                    ident: unit,
                    width: clamp_width(2 + 4 * size),
                }
            }
            FILL_ARRAY_DATA_PAYLOAD => {
                let element_width = u64::from(at(1)?);
                let size = u64::from(at(2)?) | (u64::from(at(3)?) << 16);
                CodeUnitRun::Payload {
                    ident: unit,
                    width: clamp_width(4 + (element_width * size).div_ceil(2)),
                }
            }
            _ => {
                let opcode = Opcode((unit & 0xff) as u8);
                CodeUnitRun::Instruction {
                    opcode,
                    width: opcode.width(),
                }
            }
        };
        let end = pc.checked_add(run.width()).ok_or_else(|| overrun(pc))?;
        if end > insns.len() {
            return Err(overrun(pc));
        }
        runs.push(run);
        pc = end;
    }
    Ok(runs)
}

fn clamp_width(w: u64) -> usize {
    usize::try_from(w).unwrap_or(usize::MAX)
}

pub fn extract_from_dex(data: &[u8]) -> Result<OpcodeHistogram, DexError> {
    extract_from_dex_with(data, DexOptions::default())
}

pub fn extract_from_dex_with(
    data: &[u8],
    options: DexOptions,
) -> Result<OpcodeHistogram, DexError> {
    verify_integrity(data, options)?;
    let mut hist = OpcodeHistogram::zero();
    for item in code_items(data)? {
        for run in walk_insns(&item.insns, item.offset)? {
            if let CodeUnitRun::Instruction { opcode, .. } = run {
                hist.record(opcode);
            }
        }
    }
    Ok(hist)
}
