//! Independent encoders and brute-force oracles shared by integration tests.
//! Nothing here calls into the crate's own writers or rankers.

#![allow(dead_code)]

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha1::{Digest, Sha1};

// ---------------------------------------------------------------- dex ----

fn put_u16(b: &mut Vec<u8>, v: u16) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn set_u32(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn uleb(b: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            b.push(byte);
            return;
        }
        b.push(byte | 0x80);
    }
}

pub fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u64, 0u64);
    for &x in data {
        a = (a + u64::from(x)) % 65521;
        b = (b + a) % 65521;
    }
    ((b << 16) | a) as u32
}

/// A dex file with one class per entry of `classes`, each holding one direct
/// method per instruction stream. Layout: header, class_defs, code items,
/// class_data. Checksum and signature are valid.
pub fn assemble_dex(classes: &[Vec<Vec<u16>>]) -> Vec<u8> {
    let mut b = vec![0u8; 0x70];
    b[..8].copy_from_slice(b"dex\n035\0");
    set_u32(&mut b, 0x24, 0x70);
    set_u32(&mut b, 0x28, 0x1234_5678);
    set_u32(&mut b, 0x60, classes.len() as u32);
    set_u32(&mut b, 0x64, 0x70);

    let defs_at = b.len();
    b.resize(defs_at + 32 * classes.len(), 0);

    let mut code_offs: Vec<Vec<u32>> = Vec::new();
    for methods in classes {
        let mut offs = Vec::new();
        for insns in methods {
            while !b.len().is_multiple_of(4) {
                b.push(0);
            }
            offs.push(b.len() as u32);
            put_u16(&mut b, 1); // registers_size
            put_u16(&mut b, 0); // ins_size
            put_u16(&mut b, 0); // outs_size
            put_u16(&mut b, 0); // tries_size
            put_u32(&mut b, 0); // debug_info_off
            put_u32(&mut b, insns.len() as u32);
            for &u in insns {
                put_u16(&mut b, u);
            }
        }
        code_offs.push(offs);
    }

    for (i, offs) in code_offs.iter().enumerate() {
        let class_data_off = b.len() as u32;
        uleb(&mut b, 0);
        uleb(&mut b, 0);
        uleb(&mut b, offs.len() as u32);
        uleb(&mut b, 0);
        for (j, &off) in offs.iter().enumerate() {
            uleb(&mut b, u32::from(j > 0)); // method_idx_diff
            uleb(&mut b, 0x9); // public static
            uleb(&mut b, off);
        }
        let def = defs_at + 32 * i;
        set_u32(&mut b, def, i as u32);
        set_u32(&mut b, def + 4, 1);
        set_u32(&mut b, def + 8, u32::MAX);
        set_u32(&mut b, def + 16, u32::MAX);
        set_u32(&mut b, def + 24, class_data_off);
    }

    let len = b.len() as u32;
    set_u32(&mut b, 0x20, len);
    let sig = Sha1::digest(&b[32..]);
    b[12..32].copy_from_slice(&sig);
    let sum = adler32(&b[12..]);
    set_u32(&mut b, 8, sum);
    b
}

/// Plain nop then return-void, byte by byte.
pub fn nop_return_void_dex() -> Vec<u8> {
    let mut b = vec![
        b'd', b'e', b'x', b'\n', b'0', b'3', b'5', 0, // magic
    ];
    b.extend_from_slice(&[0; 4]); // checksum (unverified)
    b.extend_from_slice(&[0; 20]); // signature (unverified)
    b.extend_from_slice(&0xb4u32.to_le_bytes()); // file_size
    b.extend_from_slice(&0x70u32.to_le_bytes()); // header_size
    b.extend_from_slice(&0x1234_5678u32.to_le_bytes()); // endian_tag
    b.extend_from_slice(&[0; 0x60 - 0x2c]); // link, map, id tables
    b.extend_from_slice(&1u32.to_le_bytes()); // class_defs_size
    b.extend_from_slice(&0x70u32.to_le_bytes()); // class_defs_off
    b.extend_from_slice(&[0; 8]); // data_size, data_off
    assert_eq!(b.len(), 0x70);
    // class_def: class_idx, access, superclass, interfaces, source, annotations, class_data_off, static_values
    for v in [0u32, 1, u32::MAX, 0, u32::MAX, 0, 0x90, 0] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    // class_data: 0 static, 0 instance, 1 direct, 0 virtual; method idx 0, flags 9, code_off 0xa0
    b.extend_from_slice(&[0x00, 0x00, 0x01, 0x00, 0x00, 0x09, 0xa0, 0x01]);
    b.resize(0xa0, 0);
    // code_item: registers 1, ins 0, outs 0, tries 0, debug 0, insns_size 2
    b.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0]);
    b.extend_from_slice(&[0x00, 0x00, 0x0e, 0x00]); // nop; return-void
    assert_eq!(b.len(), 0xb4);
    b
}

// --------------------------------------------------------------- axml ----

const ANDROID_NS: &str = "http://schemas.android.com/apk/res/android";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrStyle {
    /// Attribute named "name", raw string value.
    Plain,
    /// Attribute name string blank; found only through the resource map.
    ResourceIdOnly,
    /// No raw value; the typed value is a string reference.
    TypedString,
}

fn string_pool(strings: &[&str], utf8: bool) -> Vec<u8> {
    let mut data = Vec::new();
    let mut offsets = Vec::new();
    for s in strings {
        offsets.push(data.len() as u32);
        if utf8 {
            assert!(s.len() < 0x80);
            data.push(s.chars().count() as u8);
            data.push(s.len() as u8);
            data.extend_from_slice(s.as_bytes());
            data.push(0);
        } else {
            let units: Vec<u16> = s.encode_utf16().collect();
            put_u16(&mut data, units.len() as u16);
            for u in units {
                put_u16(&mut data, u);
            }
            put_u16(&mut data, 0);
        }
    }
    while !data.len().is_multiple_of(4) {
        data.push(0);
    }
    let header = 28u32;
    let strings_start = header + 4 * strings.len() as u32;
    let mut c = Vec::new();
    put_u16(&mut c, 0x0001);
    put_u16(&mut c, header as u16);
    put_u32(&mut c, strings_start + data.len() as u32);
    put_u32(&mut c, strings.len() as u32);
    put_u32(&mut c, 0);
    put_u32(&mut c, if utf8 { 0x100 } else { 0 });
    put_u32(&mut c, strings_start);
    put_u32(&mut c, 0);
    for o in offsets {
        put_u32(&mut c, o);
    }
    c.extend(data);
    c
}

fn node(kind: u16, body: &[u32]) -> Vec<u8> {
    let mut c = Vec::new();
    put_u16(&mut c, kind);
    put_u16(&mut c, 16);
    put_u32(&mut c, 8 + 4 * (2 + body.len() as u32));
    put_u32(&mut c, 1); // line
    put_u32(&mut c, u32::MAX); // comment
    for &v in body {
        put_u32(&mut c, v);
    }
    c
}

fn start_element(ns: u32, name: u32, attrs: &[[u32; 5]]) -> Vec<u8> {
    let mut c = Vec::new();
    put_u16(&mut c, 0x0102);
    put_u16(&mut c, 16);
    put_u32(&mut c, 36 + 20 * attrs.len() as u32);
    put_u32(&mut c, 1);
    put_u32(&mut c, u32::MAX);
    put_u32(&mut c, ns);
    put_u32(&mut c, name);
    put_u16(&mut c, 20); // attributeStart
    put_u16(&mut c, 20); // attributeSize
    put_u16(&mut c, attrs.len() as u16);
    put_u16(&mut c, 0);
    put_u16(&mut c, 0);
    put_u16(&mut c, 0);
    for [a_ns, a_name, raw, dtype, data] in attrs {
        put_u32(&mut c, *a_ns);
        put_u32(&mut c, *a_name);
        put_u32(&mut c, *raw);
        put_u16(&mut c, 8);
        c.push(0);
        c.push(*dtype as u8);
        put_u32(&mut c, *data);
    }
    c
}

/// A binary manifest requesting `perms` via `uses-permission`, optionally
/// with an unrelated `<application>` element and an unknown chunk.
pub fn axml_manifest(perms: &[&str], utf8: bool, style: AttrStyle) -> Vec<u8> {
    // Index 0 is the attribute name so the resource map covers it.
    let attr_name = if style == AttrStyle::ResourceIdOnly {
        ""
    } else {
        "name"
    };
    let mut strings = vec![
        attr_name,
        "android",
        ANDROID_NS,
        "manifest",
        "uses-permission",
        "package",
        "org.fixture",
        "application",
    ];
    let first_perm = strings.len() as u32;
    strings.extend_from_slice(perms);

    let mut body = string_pool(&strings, utf8);
    // resource map: string 0 -> android:name
    put_u16(&mut body, 0x0180);
    put_u16(&mut body, 8);
    put_u32(&mut body, 12);
    put_u32(&mut body, 0x0101_0003);
    // an unknown chunk, skipped by size
    put_u16(&mut body, 0x7777);
    put_u16(&mut body, 8);
    put_u32(&mut body, 16);
    put_u32(&mut body, 0xdead_beef);
    put_u32(&mut body, 0xdead_beef);

    body.extend(node(0x0100, &[1, 2]));
    body.extend(start_element(u32::MAX, 3, &[[u32::MAX, 5, 6, 0x03, 6]]));
    for i in 0..perms.len() as u32 {
        let s = first_perm + i;
        let attr = match style {
            AttrStyle::TypedString => [2, 0, u32::MAX, 0x03, s],
            _ => [2, 0, s, 0x03, s],
        };
        body.extend(start_element(u32::MAX, 4, &[attr]));
        body.extend(node(0x0103, &[u32::MAX, 4]));
    }
    body.extend(start_element(u32::MAX, 7, &[]));
    body.extend(node(0x0103, &[u32::MAX, 7]));
    body.extend(node(0x0103, &[u32::MAX, 3]));
    body.extend(node(0x0101, &[1, 2]));

    let mut doc = Vec::new();
    put_u16(&mut doc, 0x0003);
    put_u16(&mut doc, 8);
    put_u32(&mut doc, 8 + body.len() as u32);
    doc.extend(body);
    doc
}

pub fn text_manifest(perms: &[&str]) -> String {
    let mut s = format!("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<manifest xmlns:android=\"{ANDROID_NS}\" package=\"org.fixture\">\n");
    for p in perms {
        s.push_str(&format!("    <uses-permission android:name=\"{p}\" />\n"));
    }
    s.push_str("    <application />\n</manifest>\n");
    s
}

// ---------------------------------------------------- selection oracle ----

/// Exact class-mean difference as a reduced-free fraction `num / den`.
#[derive(Clone, Copy, Debug)]
pub struct Frac {
    pub num: i128,
    pub den: i128,
}

impl Frac {
    pub fn cmp(&self, other: &Frac) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// `|mean_B - mean_M|` per opcode from raw counts, by direct summation.
pub fn oracle_differences(benign: &[[u64; 256]], malicious: &[[u64; 256]]) -> Vec<Frac> {
    let (nb, nm) = (benign.len() as i128, malicious.len() as i128);
    (0..256)
        .map(|o| {
            let sb: i128 = benign.iter().map(|h| h[o] as i128).sum();
            let sm: i128 = malicious.iter().map(|h| h[o] as i128).sum();
            // sb/nb - sm/nm = (sb*nm - sm*nb) / (nb*nm)
            Frac {
                num: (sb * nm - sm * nb).abs(),
                den: nb * nm,
            }
        })
        .collect()
}

/// Opcode order: larger difference first, then smaller opcode.
pub fn oracle_order(diffs: &[Frac]) -> Vec<u8> {
    let mut idx: Vec<usize> = (0..256).collect();
    idx.sort_by(|&a, &b| diffs[b].cmp(&diffs[a]).then(a.cmp(&b)));
    idx.into_iter().map(|i| i as u8).collect()
}

/// Relative-frequency differences in plain floating point.
pub fn oracle_relative(benign: &[[u64; 256]], malicious: &[[u64; 256]]) -> Vec<f64> {
    let mean = |apps: &[[u64; 256]], o: usize| {
        apps.iter()
            .map(|h| {
                let t: u64 = h.iter().sum();
                if t == 0 {
                    0.0
                } else {
                    h[o] as f64 / t as f64
                }
            })
            .sum::<f64>()
            / apps.len() as f64
    };
    (0..256)
        .map(|o| (mean(benign, o) - mean(malicious, o)).abs())
        .collect()
}

/// Random small corpus: 1..=15 apps per class, sparse counts, with some
/// duplicated columns to force ties.
pub fn random_corpus(seed: u64) -> (Vec<[u64; 256]>, Vec<[u64; 256]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = rng.random_range(1..=15);
    let nm = rng.random_range(1..=15);
    let active: Vec<usize> = (0..256).filter(|_| rng.random_bool(0.3)).collect();
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|_| {
                let mut h = [0u64; 256];
                for &o in &active {
                    h[o] = rng.random_range(0..20);
                }
                if rng.random_bool(0.5) {
                    h[0x6e] = h[0x0e];
                }
                h
            })
            .collect::<Vec<_>>()
    };
    let b = make(nb, &mut rng);
    let m = make(nm, &mut rng);
    (b, m)
}

// ---------------------------------------------------- gain-ratio oracle ----

fn entropy(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Every admissible `(feature, threshold, gain ratio)` root split with
/// positive gain. Labels are 0 (benign) or 1 (malicious).
pub fn all_root_splits(
    rows: &[Vec<f64>],
    labels: &[usize],
    min_leaf: usize,
) -> Vec<(usize, f64, f64)> {
    let n = rows.len();
    let mut total = [0usize; 2];
    labels.iter().for_each(|&l| total[l] += 1);
    let h = entropy(total);
    let mut out = Vec::new();
    for f in 0..rows[0].len() {
        let mut values: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = w[0] + (w[1] - w[0]) / 2.0;
            let t = if t >= w[1] { w[0] } else { t };
            let mut left = [0usize; 2];
            let mut right = [0usize; 2];
            for (r, &l) in rows.iter().zip(labels) {
                if r[f] <= t {
                    left[l] += 1;
                } else {
                    right[l] += 1;
                }
            }
            let (nl, nr) = (left[0] + left[1], right[0] + right[1]);
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let (pl, pr) = (nl as f64 / n as f64, nr as f64 / n as f64);
            let gain = h - pl * entropy(left) - pr * entropy(right);
            let split_info = -pl * pl.log2() - pr * pr.log2();
            if gain > 1e-12 {
                out.push((f, t, gain / split_info));
            }
        }
    }
    out
}

// ------------------------------------------------ nearest-centroid oracle ----

/// Accuracy (%) of a Euclidean nearest-centroid rule trained on `train`.
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let dim = train[0].0.len();
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for (x, l) in train {
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(x) {
            *s += v;
        }
    }
    let centroids: Vec<Vec<f64>> = (0..2)
        .map(|c| sums[c].iter().map(|s| s / counts[c] as f64).collect())
        .collect();
    let dist = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let correct = test
        .iter()
        .filter(|(x, l)| {
            let pred = usize::from(dist(x, &centroids[1]) < dist(x, &centroids[0]));
            pred == *l
        })
        .count();
    correct as f64 / test.len() as f64 * 100.0
}
