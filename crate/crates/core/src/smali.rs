//! Opcode histograms from smali text, and a smali renderer for generated apps.

use std::fmt::Write as _;

use thiserror::Error;

use crate::histogram::OpcodeHistogram;
use crate::opcodes::{Format, Opcode, FILL_ARRAY_DATA, PACKED_SWITCH, SPARSE_SWITCH};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmaliError {
    #[error("document {doc}, line {line}: unknown mnemonic {token:?}")]
    UnknownMnemonic {
        doc: usize,
        line: usize,
        token: String,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum UnknownMnemonicPolicy {
    #[default]
    Fail,
    WarnAndSkip,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SmaliExtraction {
    pub histogram: OpcodeHistogram,
    /// Unknown mnemonics that were skipped under [`UnknownMnemonicPolicy::WarnAndSkip`].
    pub skipped: Vec<SmaliError>,
}

/// Directives whose bodies are data rather than instructions.
const DATA_BLOCKS: &[(&str, &str)] = &[
    (".annotation", ".end annotation"),
    (".subannotation", ".end subannotation"),
    (".packed-switch", ".end packed-switch"),
    (".sparse-switch", ".end sparse-switch"),
    (".array-data", ".end array-data"),
];

pub fn extract_from_smali<S: AsRef<str>>(
    docs: &[S],
    policy: UnknownMnemonicPolicy,
) -> Result<SmaliExtraction, SmaliError> {
    let mut out = SmaliExtraction::default();
    for (doc_index, doc) in docs.iter().enumerate() {
        scan_document(doc_index, doc.as_ref(), policy, &mut out)?;
    }
    Ok(out)
}

fn scan_document(
    doc: usize,
    text: &str,
    policy: UnknownMnemonicPolicy,
    out: &mut SmaliExtraction,
) -> Result<(), SmaliError> {
    let mut in_method = false;
    // Closing directive of the data block we are inside, if any.
    let mut block_end: Option<&'static str> = None;

    for (index, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let token = line.split_whitespace().next().unwrap_or_default();

        if let Some(end) = block_end {
            if line.starts_with(end) {
                block_end = None;
            }
            continue;
        }
        if token.starts_with('.') {
            if token == ".method" {
                in_method = true;
            } else if line.starts_with(".end method") {
                in_method = false;
            } else if let Some((_, end)) = DATA_BLOCKS.iter().find(|(start, _)| *start == token) {
                block_end = Some(end);
            }
            continue;
        }
        if !in_method || token.starts_with(':') {
            continue;
        }
        match Opcode::from_mnemonic(token) {
            Some(op) => out.histogram.record(op),
            None => {
                let err = SmaliError::UnknownMnemonic {
                    doc,
                    line: index + 1,
                    token: token.to_string(),
                };
                match policy {
                    UnknownMnemonicPolicy::Fail => return Err(err),
                    UnknownMnemonicPolicy::WarnAndSkip => out.skipped.push(err),
                }
            }
        }
    }
    Ok(())
}

fn operands(op: Opcode) -> &'static str {
    match op.0 {
        0x1a => "v0, \"s\"",
        0x1b => "v0, \"s\"",
        0x1c | 0x1f | 0x22 => "v0, Lsyn/Gen;",
        0x20 | 0x23 => "v0, v1, [I",
        0x60..=0x6d => "v0, Lsyn/Gen;->f:I",
        0xfe => "v0, invoke-static@Lsyn/Gen;->m()V",
        0xff => "v0, ()V",
        _ => match op.format() {
            Format::F10x => "",
            Format::F12x | Format::F22x | Format::F32x => "v0, v1",
            Format::F11n | Format::F21s | Format::F31i => "v0, 0x1",
            Format::F21h => "v0, 0x10000",
            Format::F11x => "v0",
            Format::F10t | Format::F20t | Format::F30t => ":goto_0",
            Format::F21t => "v0, :goto_0",
            Format::F22t => "v0, v1, :goto_0",
            Format::F21c => "v0, Lsyn/Gen;",
            Format::F23x => "v0, v1, v2",
            Format::F22b | Format::F22s => "v0, v1, 0x1",
            Format::F22c => "v0, v1, Lsyn/Gen;->f:I",
            Format::F31t => "v0, :data_0",
            Format::F31c => "v0, \"s\"",
            Format::F35c => "{v0}, Lsyn/Gen;->m()V",
            Format::F3rc => "{v0 .. v1}, Lsyn/Gen;->m()V",
            Format::F45cc => "{v0}, Ljava/lang/invoke/MethodHandle;->invoke([Ljava/lang/Object;)Ljava/lang/Object;, ()V",
            Format::F4rcc => "{v0 .. v1}, Ljava/lang/invoke/MethodHandle;->invoke([Ljava/lang/Object;)Ljava/lang/Object;, ()V",
            Format::F51l => "v0, 0x1L",
        },
    }
}

/// Renders a class whose single method contains exactly the instructions
/// counted in `hist`, with one payload block per switch or fill instruction.
pub fn render_class(class_descriptor: &str, hist: &OpcodeHistogram) -> String {
    let mut s = String::new();
    let _ = writeln!(s, ".class public L{class_descriptor};");
    s.push_str(".super Ljava/lang/Object;\n\n");
    s.push_str(".method public static run()V\n    .registers 16\n\n    :goto_0\n");
    let mut data_blocks = String::new();
    let mut data_id = 0usize;
    for op in Opcode::all() {
        let n = hist.get(op);
        if n == 0 {
            continue;
        }
        let args = operands(op);
        for _ in 0..n {
            if op.format() == Format::F31t {
                let _ = writeln!(s, "    {} v0, :data_{data_id}", op.mnemonic());
                let _ = writeln!(data_blocks, "\n    :data_{data_id}");
                data_blocks.push_str(match op.0 {
                    PACKED_SWITCH => "    .packed-switch 0x0\n    .end packed-switch\n",
                    SPARSE_SWITCH => "    .sparse-switch\n    .end sparse-switch\n",
                    FILL_ARRAY_DATA => "    .array-data 1\n    .end array-data\n",
                    _ => unreachable!("only three opcodes use format 31t"),
                });
                data_id += 1;
            } else if args.is_empty() {
                let _ = writeln!(s, "    {}", op.mnemonic());
            } else {
                let _ = writeln!(s, "    {} {args}", op.mnemonic());
            }
        }
    }
    s.push_str(&data_blocks);
    s.push_str(".end method\n");
    s
}
