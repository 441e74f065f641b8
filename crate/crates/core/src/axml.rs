//! Android binary XML (AXML), limited to what permission extraction needs.
//!
//! Handled chunks: string pool (UTF-8 and UTF-16), resource map, namespace
//! start/end, element start/end. Anything else is skipped by its declared
//! size. Attribute values may be raw strings, typed strings or references;
//! references have no resource table to resolve against and are kept as
//! `@0xXXXXXXXX`.

use thiserror::Error;

use crate::manifest::{PermissionSet, ANDROID_NS, PERMISSION_ELEMENTS};

const RES_STRING_POOL_TYPE: u16 = 0x0001;
const RES_XML_TYPE: u16 = 0x0003;
const RES_XML_START_NAMESPACE_TYPE: u16 = 0x0100;
const RES_XML_END_NAMESPACE_TYPE: u16 = 0x0101;
const RES_XML_START_ELEMENT_TYPE: u16 = 0x0102;
const RES_XML_END_ELEMENT_TYPE: u16 = 0x0103;
const RES_XML_RESOURCE_MAP_TYPE: u16 = 0x0180;

const UTF8_FLAG: u32 = 1 << 8;
const NO_ENTRY: u32 = 0xffff_ffff;
const TYPE_REFERENCE: u8 = 0x01;
const TYPE_STRING: u8 = 0x03;
/// Resource id of the framework attribute `android:name`.
const ATTR_NAME_RES_ID: u32 = 0x0101_0003;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AxmlError {
    #[error("not a binary XML document")]
    NotBinaryXml,
    #[error("truncated chunk at offset {0:#x}")]
    Truncated(usize),
    #[error("string index {0} out of pool bounds")]
    StringIndex(u32),
    #[error("element before string pool at offset {0:#x}")]
    MissingStringPool(usize),
}

fn u16_at(b: &[u8], off: usize) -> Result<u16, AxmlError> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or(AxmlError::Truncated(off))
}

fn u32_at(b: &[u8], off: usize) -> Result<u32, AxmlError> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or(AxmlError::Truncated(off))
}

pub fn looks_binary(bytes: &[u8]) -> bool {
    matches!(
        (u16_at(bytes, 0), u16_at(bytes, 2)),
        (Ok(RES_XML_TYPE), Ok(8))
    )
}

struct StringPool<'a> {
    chunk: &'a [u8],
    offsets: Vec<u32>,
    strings_start: usize,
    utf8: bool,
}

impl<'a> StringPool<'a> {
    fn parse(chunk: &'a [u8], chunk_off: usize) -> Result<Self, AxmlError> {
        let header_size = u16_at(chunk, 2)? as usize;
        let count = u32_at(chunk, 8)? as usize;
        let flags = u32_at(chunk, 16)?;
        let strings_start = u32_at(chunk, 20)? as usize;
        let offsets = (0..count)
            .map(|i| u32_at(chunk, header_size + 4 * i))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| AxmlError::Truncated(chunk_off))?;
        Ok(Self {
            chunk,
            offsets,
            strings_start,
            utf8: flags & UTF8_FLAG != 0,
        })
    }

    fn get(&self, index: u32) -> Result<String, AxmlError> {
        let rel = *self
            .offsets
            .get(index as usize)
            .ok_or(AxmlError::StringIndex(index))?;
        let at = self.strings_start + rel as usize;
        let bad = || AxmlError::StringIndex(index);
        if self.utf8 {
            let (_, at) = self.utf8_len(at).ok_or_else(bad)?;
            let (len, at) = self.utf8_len(at).ok_or_else(bad)?;
            let bytes = self.chunk.get(at..at + len).ok_or_else(bad)?;
            Ok(String::from_utf8_lossy(bytes).into_owned())
        } else {
            let mut len = u16_at(self.chunk, at).map_err(|_| bad())? as usize;
            let mut at = at + 2;
            if len & 0x8000 != 0 {
                let low = u16_at(self.chunk, at).map_err(|_| bad())? as usize;
                len = ((len & 0x7fff) << 16) | low;
                at += 2;
            }
            let units = (0..len)
                .map(|i| u16_at(self.chunk, at + 2 * i))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            Ok(String::from_utf16_lossy(&units))
        }
    }

    fn utf8_len(&self, at: usize) -> Option<(usize, usize)> {
        let first = *self.chunk.get(at)? as usize;
        if first & 0x80 != 0 {
            let second = *self.chunk.get(at + 1)? as usize;
            Some((((first & 0x7f) << 8) | second, at + 2))
        } else {
            Some((first, at + 1))
        }
    }
}

pub fn parse_axml(bytes: &[u8]) -> Result<PermissionSet, AxmlError> {
    if !looks_binary(bytes) {
        return Err(AxmlError::NotBinaryXml);
    }
    let doc_size = u32_at(bytes, 4)? as usize;
    if doc_size > bytes.len() || doc_size < 8 {
        return Err(AxmlError::Truncated(0));
    }
    let doc = &bytes[..doc_size];

    let mut pool: Option<StringPool<'_>> = None;
    let mut resource_ids: Vec<u32> = Vec::new();
    let mut perms = PermissionSet::new();

    let mut pos = 8usize;
    while pos < doc.len() {
        let ty = u16_at(doc, pos)?;
        let header_size = u16_at(doc, pos + 2)? as usize;
        let size = u32_at(doc, pos + 4)? as usize;
        if size < 8 || header_size > size || pos + size > doc.len() {
            return Err(AxmlError::Truncated(pos));
        }
        let chunk = &doc[pos..pos + size];
        match ty {
            RES_STRING_POOL_TYPE => pool = Some(StringPool::parse(chunk, pos)?),
            RES_XML_RESOURCE_MAP_TYPE => {
                resource_ids = (header_size..size)
                    .step_by(4)
                    .filter_map(|off| u32_at(chunk, off).ok())
                    .collect();
            }
            RES_XML_START_ELEMENT_TYPE => {
                let pool = pool.as_ref().ok_or(AxmlError::MissingStringPool(pos))?;
                if let Some(name) =
                    permission_of(chunk, header_size, pool, &resource_ids).map_err(|e| match e {
                        AxmlError::Truncated(_) => AxmlError::Truncated(pos),
                        other => other,
                    })?
                {
                    perms.insert(&name);
                }
            }
            _ => {}
        }
        pos += size;
    }
    Ok(perms)
}

/// Returns the `android:name` value of a permission element, `None` for any
/// other element.
fn permission_of(
    chunk: &[u8],
    header_size: usize,
    pool: &StringPool<'_>,
    resource_ids: &[u32],
) -> Result<Option<String>, AxmlError> {
    let ext = header_size;
    let element = pool.get(u32_at(chunk, ext + 4)?)?;
    if !PERMISSION_ELEMENTS.contains(&element.as_str()) {
        return Ok(None);
    }
    let attr_start = u16_at(chunk, ext + 8)? as usize;
    let attr_size = u16_at(chunk, ext + 10)? as usize;
    let attr_count = u16_at(chunk, ext + 12)? as usize;
    for i in 0..attr_count {
        let a = ext + attr_start + i * attr_size;
        let name_idx = u32_at(chunk, a + 4)?;
        let is_name = resource_ids.get(name_idx as usize) == Some(&ATTR_NAME_RES_ID)
            || pool.get(name_idx)? == "name";
        if !is_name {
            continue;
        }
        let raw = u32_at(chunk, a + 8)?;
        let data_type = *chunk.get(a + 15).ok_or(AxmlError::Truncated(a))?;
        let data = u32_at(chunk, a + 16)?;
        let value = if raw != NO_ENTRY {
            pool.get(raw)?
        } else if data_type == TYPE_STRING {
            pool.get(data)?
        } else if data_type == TYPE_REFERENCE {
            format!("@{data:#010x}")
        } else {
            continue;
        };
        return Ok(Some(value));
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StringEncoding {
    Utf8,
    Utf16,
}

/// Encodes a manifest requesting `perms` as binary XML.
pub fn encode_manifest(package: &str, perms: &PermissionSet, encoding: StringEncoding) -> Vec<u8> {
    let mut strings: Vec<String> = [
        "name",
        "android",
        ANDROID_NS,
        "manifest",
        "package",
        package,
        "uses-permission",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let (s_name, s_prefix, s_uri, s_manifest, s_package, s_pkg_value, s_uses) =
        (0, 1, 2, 3, 4, 5, 6);
    let first_perm = strings.len() as u32;
    strings.extend(perms.iter().map(str::to_string));

    let mut body = Vec::new();
    body.extend(string_pool_chunk(&strings, encoding));

    // Resource map covers string 0 ("name").
    push_chunk_header(&mut body, RES_XML_RESOURCE_MAP_TYPE, 8, 12);
    push_u32(&mut body, ATTR_NAME_RES_ID);

    push_node_header(&mut body, RES_XML_START_NAMESPACE_TYPE, 0x18, 1);
    push_u32(&mut body, s_prefix);
    push_u32(&mut body, s_uri);

    push_start_element(
        &mut body,
        NO_ENTRY,
        s_manifest,
        &[(NO_ENTRY, s_package, s_pkg_value)],
    );
    for i in 0..perms.len() as u32 {
        let value = first_perm + i;
        push_start_element(&mut body, NO_ENTRY, s_uses, &[(s_uri, s_name, value)]);
        push_node_header(&mut body, RES_XML_END_ELEMENT_TYPE, 0x18, 2 + i);
        push_u32(&mut body, NO_ENTRY);
        push_u32(&mut body, s_uses);
    }
    push_node_header(&mut body, RES_XML_END_ELEMENT_TYPE, 0x18, 3);
    push_u32(&mut body, NO_ENTRY);
    push_u32(&mut body, s_manifest);

    push_node_header(&mut body, RES_XML_END_NAMESPACE_TYPE, 0x18, 3);
    push_u32(&mut body, s_prefix);
    push_u32(&mut body, s_uri);

    let mut out = Vec::with_capacity(body.len() + 8);
    push_chunk_header(&mut out, RES_XML_TYPE, 8, (body.len() + 8) as u32);
    out.extend(body);
    out
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend(v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend(v.to_le_bytes());
}

fn push_chunk_header(out: &mut Vec<u8>, ty: u16, header_size: u16, size: u32) {
    push_u16(out, ty);
    push_u16(out, header_size);
    push_u32(out, size);
}

fn push_node_header(out: &mut Vec<u8>, ty: u16, size: u32, line: u32) {
    push_chunk_header(out, ty, 0x10, size);
    push_u32(out, line);
    push_u32(out, NO_ENTRY); // comment
}

/// `attrs` are (namespace, name, string value) string-pool indices.
fn push_start_element(out: &mut Vec<u8>, ns: u32, name: u32, attrs: &[(u32, u32, u32)]) {
    let size = 0x10 + 0x14 + 0x14 * attrs.len() as u32;
    push_node_header(out, RES_XML_START_ELEMENT_TYPE, size, 1);
    push_u32(out, ns);
    push_u32(out, name);
    push_u16(out, 0x14); // attributeStart
    push_u16(out, 0x14); // attributeSize
    push_u16(out, attrs.len() as u16);
    push_u16(out, 0); // idIndex
    push_u16(out, 0); // classIndex
    push_u16(out, 0); // styleIndex
    for &(ans, aname, value) in attrs {
        push_u32(out, ans);
        push_u32(out, aname);
        push_u32(out, value);
        push_u16(out, 8);
        out.push(0);
        out.push(TYPE_STRING);
        push_u32(out, value);
    }
}

fn string_pool_chunk(strings: &[String], encoding: StringEncoding) -> Vec<u8> {
    let mut data = Vec::new();
    let mut offsets = Vec::with_capacity(strings.len());
    for s in strings {
        offsets.push(data.len() as u32);
        match encoding {
            StringEncoding::Utf8 => {
                push_utf8_len(&mut data, s.encode_utf16().count());
                push_utf8_len(&mut data, s.len());
                data.extend(s.as_bytes());
                data.push(0);
            }
            StringEncoding::Utf16 => {
                let units: Vec<u16> = s.encode_utf16().collect();
                if units.len() > 0x7fff {
                    push_u16(&mut data, 0x8000 | (units.len() >> 16) as u16);
                }
                push_u16(&mut data, (units.len() & 0xffff) as u16);
                for u in units {
                    push_u16(&mut data, u);
                }
                push_u16(&mut data, 0);
            }
        }
    }
    while data.len() % 4 != 0 {
        data.push(0);
    }
    let header_size = 0x1c;
    let strings_start = header_size + 4 * strings.len();
    let size = strings_start + data.len();
    let mut out = Vec::with_capacity(size);
    push_chunk_header(
        &mut out,
        RES_STRING_POOL_TYPE,
        header_size as u16,
        size as u32,
    );
    push_u32(&mut out, strings.len() as u32);
    push_u32(&mut out, 0); // styleCount
    push_u32(
        &mut out,
        if encoding == StringEncoding::Utf8 {
            UTF8_FLAG
        } else {
            0
        },
    );
    push_u32(&mut out, strings_start as u32);
    push_u32(&mut out, 0); // stylesStart
    for off in offsets {
        push_u32(&mut out, off);
    }
    out.extend(data);
    out
}

fn push_utf8_len(out: &mut Vec<u8>, len: usize) {
    if len > 0x7f {
        out.push(0x80 | ((len >> 8) & 0x7f) as u8);
    }
    out.push((len & 0xff) as u8);
}
