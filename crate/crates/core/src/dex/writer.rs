//! A minimal DEX writer.
//!
//! Output holds one class definition whose methods carry the given
//! instruction streams, plus a map list and valid checksum/signature. There
//! are no string, type or method id tables: the files exist to exercise the
//! histogram path, not to run on a device.

use sha1::{Digest, Sha1};

use super::{adler32, ENDIAN_CONSTANT, HEADER_SIZE};
use crate::histogram::OpcodeHistogram;
use crate::opcodes::{
    Opcode, FILL_ARRAY_DATA, FILL_ARRAY_DATA_PAYLOAD, PACKED_SWITCH, PACKED_SWITCH_PAYLOAD,
    SPARSE_SWITCH, SPARSE_SWITCH_PAYLOAD,
};

const TYPE_HEADER_ITEM: u16 = 0x0000;
const TYPE_CLASS_DEF_ITEM: u16 = 0x0006;
const TYPE_MAP_LIST: u16 = 0x1000;
const TYPE_CLASS_DATA_ITEM: u16 = 0x2000;
const TYPE_CODE_ITEM: u16 = 0x2001;

#[derive(Debug, Default, Clone)]
pub struct DexBuilder {
    methods: Vec<Vec<u16>>,
}

impl DexBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn method(mut self, insns: Vec<u16>) -> Self {
        self.methods.push(insns);
        self
    }

    pub fn build(&self) -> Vec<u8> {
        let mut out = vec![0u8; HEADER_SIZE];
        let class_defs_off = out.len();
        out.extend([0u8; 32]);

        let mut code_offs = Vec::with_capacity(self.methods.len());
        for insns in &self.methods {
            align4(&mut out);
            code_offs.push(out.len() as u32);
            out.extend(16u16.to_le_bytes()); // registers_size
            out.extend(0u16.to_le_bytes()); // ins_size
            out.extend(0u16.to_le_bytes()); // outs_size
            out.extend(0u16.to_le_bytes()); // tries_size
            out.extend(0u32.to_le_bytes()); // debug_info_off
            out.extend((insns.len() as u32).to_le_bytes());
            for unit in insns {
                out.extend(unit.to_le_bytes());
            }
        }

        let class_data_off = out.len();
        for v in [0, 0, self.methods.len() as u32, 0] {
            write_uleb128(&mut out, v);
        }
        for (i, off) in code_offs.iter().enumerate() {
            write_uleb128(&mut out, u32::from(i != 0)); // method_idx_diff
            write_uleb128(&mut out, 0x9); // public static
            write_uleb128(&mut out, *off);
        }

        // class_def_item: class_idx, access_flags, superclass_idx, interfaces_off,
        // source_file_idx, annotations_off, class_data_off, static_values_off
        let no_index = u32::MAX;
        let class_def: [u32; 8] = [0, 0x1, no_index, 0, no_index, 0, class_data_off as u32, 0];
        for (i, v) in class_def.iter().enumerate() {
            put_u32(&mut out, class_defs_off + 4 * i, *v);
        }

        align4(&mut out);
        let map_off = out.len();
        let mut entries = vec![
            (TYPE_HEADER_ITEM, 1u32, 0u32),
            (TYPE_CLASS_DEF_ITEM, 1, class_defs_off as u32),
        ];
        if let Some(&first) = code_offs.first() {
            entries.push((TYPE_CODE_ITEM, code_offs.len() as u32, first));
        }
        entries.push((TYPE_CLASS_DATA_ITEM, 1, class_data_off as u32));
        entries.push((TYPE_MAP_LIST, 1, map_off as u32));
        out.extend((entries.len() as u32).to_le_bytes());
        for (ty, size, off) in entries {
            out.extend(ty.to_le_bytes());
            out.extend(0u16.to_le_bytes());
            out.extend(size.to_le_bytes());
            out.extend(off.to_le_bytes());
        }

        let data_off = class_defs_off + 32;
        let file_size = out.len();
        out[0..8].copy_from_slice(b"dex\n035\0");
        put_u32(&mut out, 0x20, file_size as u32);
        put_u32(&mut out, 0x24, HEADER_SIZE as u32);
        put_u32(&mut out, 0x28, ENDIAN_CONSTANT);
        put_u32(&mut out, 0x34, map_off as u32);
        put_u32(&mut out, 0x60, 1);
        put_u32(&mut out, 0x64, class_defs_off as u32);
        put_u32(&mut out, 0x68, (file_size - data_off) as u32);
        put_u32(&mut out, 0x6c, data_off as u32);

        let signature = Sha1::digest(&out[32..]);
        out[12..32].copy_from_slice(signature.as_slice());
        let checksum = adler32(&out[12..]);
        put_u32(&mut out, 0x08, checksum);
        out
    }
}

fn align4(out: &mut Vec<u8>) {
    while !out.len().is_multiple_of(4) {
        out.push(0);
    }
}

fn put_u32(out: &mut [u8], at: usize, v: u32) {
    out[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

pub fn write_uleb128(out: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Encodes `op` with all operand bits zero.
pub fn encode_zeroed(op: Opcode) -> Vec<u16> {
    let mut units = vec![0u16; op.width()];
    units[0] = u16::from(op.0);
    units
}

/// The smallest payload table that can follow a switch or fill instruction.
pub fn empty_payload(op: Opcode) -> Option<Vec<u16>> {
    match op.0 {
        PACKED_SWITCH => Some(vec![PACKED_SWITCH_PAYLOAD, 0, 0, 0]),
        SPARSE_SWITCH => Some(vec![SPARSE_SWITCH_PAYLOAD, 0]),
        FILL_ARRAY_DATA => Some(vec![FILL_ARRAY_DATA_PAYLOAD, 1, 0, 0]),
        _ => None,
    }
}

/// Builds one instruction stream whose opcode histogram is exactly `hist`.
///
/// Payload tables go first: offset zero is 4-byte aligned and every empty
/// payload has an even width, so no alignment `nop` is ever needed.
pub fn insns_for_histogram(hist: &OpcodeHistogram) -> Vec<u16> {
    let mut insns = Vec::new();
    for op in Opcode::all() {
        if let Some(payload) = empty_payload(op) {
            for _ in 0..hist.get(op) {
                insns.extend_from_slice(&payload);
            }
        }
    }
    for op in Opcode::all() {
        let encoded = encode_zeroed(op);
        for _ in 0..hist.get(op) {
            insns.extend_from_slice(&encoded);
        }
    }
    insns
}

pub fn dex_for_histogram(hist: &OpcodeHistogram) -> Vec<u8> {
    DexBuilder::new().method(insns_for_histogram(hist)).build()
}
