//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use opdroid_core::apk::{analyze_apk, write_apk};
use opdroid_core::classify::{
    deserialize_model, serialize_model, train, FeatureVector, Hyperparameters, Label, ModelKind,
    NodeKind,
};
use opdroid_core::corpus::{generate_synthetic, planted_benchmark, planted_opcodes, AppRecord};
use opdroid_core::dex::{extract_from_dex, extract_from_dex_with, DexOptions};
use opdroid_core::eval::{
    split, sweep, CellKey, CellOutcome, ConfusionCounts, EvalConfig, EvaluationReport,
};
use opdroid_core::groups::{partition_corpus, GroupId, GroupMapping, Grouper};
use opdroid_core::histogram::OpcodeHistogram;
use opdroid_core::manifest::{parse_axml, parse_manifest_text, PermissionSet};
use opdroid_core::opcodes::Opcode;
use opdroid_core::selection::{compute_profile, rank_features, top_n, FrequencyMode};
use opdroid_core::smali::{extract_from_smali, UnknownMnemonicPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ------------------------------------------------------------- selection ----

fn selection_oracle() -> Check {
    let start = Instant::now();
    let mut tied_corpora = 0;
    for seed in 0..200u64 {
        let (b, m) = random_corpus(seed);
        ensure!(b.len() + m.len() <= 30, "corpus {seed} too large");
        let hb: Vec<_> = b.iter().map(|c| OpcodeHistogram::from_counts(*c)).collect();
        let hm: Vec<_> = m.iter().map(|c| OpcodeHistogram::from_counts(*c)).collect();

        // Raw counts: exact rational ordering.
        let diffs = oracle_differences(&b, &m);
        let want_order = oracle_order(&diffs);
        let ranking = rank_features(&compute_profile(&hb, &hm, FrequencyMode::RawCount).unwrap());
        let got_order: Vec<u8> = ranking.order().iter().map(|o| o.0).collect();
        ensure!(got_order == want_order, "corpus {seed}: raw order differs");
        for o in 0..256 {
            let want = diffs[o].to_f64();
            let got = ranking.scores()[o];
            ensure!(
                (got - want).abs() <= 1e-12 * want.abs(),
                "corpus {seed} opcode {o}: {got} vs {want}"
            );
        }
        for n in [1, 10, 200, 256] {
            let top: Vec<u8> = top_n(&ranking, n).unwrap().iter().map(|o| o.0).collect();
            ensure!(top == want_order[..n], "corpus {seed}: top_{n} differs");
        }
        if (1..256).any(|i| {
            diffs[want_order[i - 1] as usize]
                .cmp(&diffs[want_order[i] as usize])
                .is_eq()
                && diffs[want_order[i] as usize].num > 0
        }) {
            tied_corpora += 1;
        }

        // Relative frequencies: floating point within 1e-12 of the class means.
        let rel = oracle_relative(&b, &m);
        let profile = compute_profile(&hb, &hm, FrequencyMode::Relative).unwrap();
        let ranking = rank_features(&profile);
        for o in 0..256 {
            let scale = profile.benign_mean(o).max(profile.malicious_mean(o));
            let got = ranking.scores()[o];
            ensure!(
                (got - rel[o]).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE),
                "corpus {seed} opcode {o}: relative {got} vs {}",
                rel[o]
            );
        }
        let order = ranking.order();
        for w in order.windows(2) {
            let (a, c) = (ranking.score(w[0]), ranking.score(w[1]));
            ensure!(
                a > c || (a == c && w[0].0 < w[1].0),
                "corpus {seed}: relative order not sorted"
            );
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "200 corpora, {tied_corpora} with nonzero ties, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// -------------------------------------------------------------- grouping ----

const DANGEROUS: &[(&str, GroupId)] = &[
    ("android.permission.READ_CALENDAR", GroupId::Calendar),
    ("android.permission.WRITE_CALENDAR", GroupId::Calendar),
    ("android.permission.CAMERA", GroupId::Camera),
    ("android.permission.READ_CONTACTS", GroupId::Contacts),
    ("android.permission.WRITE_CONTACTS", GroupId::Contacts),
    ("android.permission.GET_ACCOUNTS", GroupId::Contacts),
    ("android.permission.ACCESS_FINE_LOCATION", GroupId::Location),
    (
        "android.permission.ACCESS_COARSE_LOCATION",
        GroupId::Location,
    ),
    ("android.permission.RECORD_AUDIO", GroupId::Microphone),
    ("android.permission.READ_PHONE_STATE", GroupId::Phone),
    ("android.permission.CALL_PHONE", GroupId::Phone),
    ("android.permission.READ_CALL_LOG", GroupId::Phone),
    (
        "com.android.voicemail.permission.ADD_VOICEMAIL",
        GroupId::Phone,
    ),
    ("android.permission.USE_SIP", GroupId::Phone),
    ("android.permission.PROCESS_OUTGOING_CALLS", GroupId::Phone),
    ("android.permission.BODY_SENSORS", GroupId::Sensors),
    ("android.permission.SEND_SMS", GroupId::Sms),
    ("android.permission.RECEIVE_SMS", GroupId::Sms),
    ("android.permission.READ_SMS", GroupId::Sms),
    ("android.permission.RECEIVE_WAP_PUSH", GroupId::Sms),
    ("android.permission.RECEIVE_MMS", GroupId::Sms),
    ("android.permission.READ_EXTERNAL_STORAGE", GroupId::Storage),
    (
        "android.permission.WRITE_EXTERNAL_STORAGE",
        GroupId::Storage,
    ),
];

/// Later Phone permissions present only in the platform mapping.
const PLATFORM_EXTRA: &[&str] = &[
    "android.permission.READ_PHONE_NUMBERS",
    "android.permission.ANSWER_PHONE_CALLS",
    "android.permission.WRITE_CALL_LOG",
];

fn perms(list: &[&str]) -> PermissionSet {
    list.iter().copied().collect()
}

fn groups(list: &[GroupId]) -> BTreeSet<GroupId> {
    list.iter().copied().collect()
}

fn grouping_fidelity() -> Check {
    let default = Grouper::default();
    let with_sensors = Grouper::new(GroupMapping::default(), true);
    let platform = Grouper::new(GroupMapping::platform(), true);

    for &(p, g) in DANGEROUS {
        ensure!(
            with_sensors.assign_groups(&perms(&[p])) == groups(&[g]),
            "{p} not in {g}"
        );
        ensure!(
            platform.assign_groups(&perms(&[p])) == groups(&[g]),
            "{p} not in {g} (platform)"
        );
    }
    for p in PLATFORM_EXTRA {
        ensure!(
            platform.assign_groups(&perms(&[p])) == groups(&[GroupId::Phone]),
            "{p} not in Phone (platform)"
        );
    }
    ensure!(
        GroupMapping::default().entries().count() == DANGEROUS.len(),
        "default mapping has extra entries"
    );
    ensure!(
        GroupMapping::platform().entries().count() == DANGEROUS.len() + PLATFORM_EXTRA.len(),
        "platform mapping size"
    );

    let all: Vec<&str> = DANGEROUS.iter().map(|(p, _)| *p).collect();
    let eight = groups(&[
        GroupId::Calendar,
        GroupId::Camera,
        GroupId::Contacts,
        GroupId::Location,
        GroupId::Microphone,
        GroupId::Phone,
        GroupId::Sms,
        GroupId::Storage,
    ]);
    let mut nine = eight.clone();
    nine.insert(GroupId::Sensors);
    let others = groups(&[GroupId::Others]);
    let cases: Vec<(&Grouper, PermissionSet, BTreeSet<GroupId>)> = vec![
        (&default, PermissionSet::new(), others.clone()),
        (
            &default,
            perms(&["android.permission.INTERNET"]),
            others.clone(),
        ),
        (
            &default,
            perms(&["android.permission.read_sms"]),
            others.clone(),
        ),
        (&default, perms(&["READ_SMS"]), others.clone()),
        (
            &default,
            perms(&["  android.permission.CAMERA  "]),
            groups(&[GroupId::Camera]),
        ),
        (
            &default,
            perms(&["android.permission.CAMERA2"]),
            others.clone(),
        ),
        (
            &default,
            perms(&["android.permission.BODY_SENSORS"]),
            others.clone(),
        ),
        (
            &with_sensors,
            perms(&["android.permission.BODY_SENSORS"]),
            groups(&[GroupId::Sensors]),
        ),
        (
            &default,
            perms(&[
                "android.permission.SEND_SMS",
                "android.permission.READ_EXTERNAL_STORAGE",
                "android.permission.CALL_PHONE",
            ]),
            groups(&[GroupId::Sms, GroupId::Storage, GroupId::Phone]),
        ),
        (
            &default,
            perms(&[
                "android.permission.READ_CALENDAR",
                "android.permission.READ_CALENDAR",
            ]),
            groups(&[GroupId::Calendar]),
        ),
        (&default, perms(&all), eight.clone()),
        (&with_sensors, perms(&all), nine),
        (
            &default,
            perms(&[
                "android.permission.INTERNET",
                "android.permission.RECORD_AUDIO",
            ]),
            groups(&[GroupId::Microphone]),
        ),
        (
            &default,
            perms(&[
                "android.permission.ACCESS_FINE_LOCATION",
                "android.permission.ACCESS_COARSE_LOCATION",
            ]),
            groups(&[GroupId::Location]),
        ),
        (
            &default,
            perms(&["com.android.voicemail.permission.ADD_VOICEMAIL"]),
            groups(&[GroupId::Phone]),
        ),
        (
            &default,
            perms(&["android.permission.ADD_VOICEMAIL"]),
            others.clone(),
        ),
        (
            &default,
            perms(&["android.permission.READ_PHONE_NUMBERS"]),
            others.clone(),
        ),
        (
            &platform,
            perms(&["android.permission.READ_PHONE_NUMBERS"]),
            groups(&[GroupId::Phone]),
        ),
        (
            &default,
            perms(&[
                "android.permission.GET_ACCOUNTS",
                "android.permission.WRITE_CONTACTS",
            ]),
            groups(&[GroupId::Contacts]),
        ),
        (
            &default,
            perms(&["android.permission.CALL_PHONE.EXTRA"]),
            others.clone(),
        ),
    ];
    ensure!(cases.len() == 20, "expected 20 adversarial cases");
    for (i, (g, p, want)) in cases.iter().enumerate() {
        let got = g.assign_groups(p);
        ensure!(&got == want, "case {i} {p}: got {got:?}, want {want:?}");
    }

    // Multi-membership: recount bucket sizes straight from the table.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pool: Vec<&str> = all
        .iter()
        .copied()
        .chain([
            "android.permission.INTERNET",
            "android.permission.WAKE_LOCK",
        ])
        .collect();
    let apps: Vec<PermissionSet> = (0..500)
        .map(|_| {
            pool.iter()
                .copied()
                .filter(|_| rng.random_bool(0.12))
                .collect()
        })
        .collect();
    let assignments: Vec<_> = apps
        .iter()
        .enumerate()
        .map(|(i, p)| default.assignment(&format!("a{i}"), p))
        .collect();
    let buckets = partition_corpus(&assignments).unwrap();
    let mut multi = 0;
    for g in GroupId::ALL {
        let expected = apps
            .iter()
            .filter(|p| {
                let hit: BTreeSet<GroupId> = DANGEROUS
                    .iter()
                    .filter(|(name, grp)| *grp != GroupId::Sensors && p.contains(name))
                    .map(|(_, grp)| *grp)
                    .collect();
                match g {
                    GroupId::Others => hit.is_empty(),
                    _ => hit.contains(&g),
                }
            })
            .count();
        ensure!(
            buckets[&g].len() == expected,
            "{g}: bucket {} vs recount {expected}",
            buckets[&g].len()
        );
    }
    for a in &assignments {
        if a.groups.len() > 1 {
            multi += 1;
        }
    }
    let total: usize = buckets.values().map(Vec::len).sum();
    ensure!(total > apps.len(), "no multi-membership exercised");
    Ok(format!(
        "23 default + 26 platform strings, 20 adversarial cases, {multi}/500 multi-group apps recounted"
    ))
}

// --------------------------------------------------------------- parsers ----

fn parser_fixtures() -> Check {
    let strict = DexOptions {
        verify_checksum: true,
        verify_signature: true,
    };
    let hist = |pairs: &[(u8, u64)]| {
        let mut h = OpcodeHistogram::zero();
        for &(o, n) in pairs {
            h.add(Opcode(o), n);
        }
        h
    };

    let h = extract_from_dex(&nop_return_void_dex()).map_err(|e| e.to_string())?;
    ensure!(
        h == hist(&[(0x00, 1), (0x0e, 1)]) && h.total() == 2,
        "nop/return-void"
    );

    let switches = assemble_dex(&[vec![
        vec![
            0x002b, 0x0004, 0x0000, 0x000e, 0x0100, 0x0001, 0, 0, 0x000e, 0x0012,
        ],
        vec![
            0x002c, 0x0004, 0x0000, 0x000e, 0x0200, 0x0001, 0x0071, 0, 0x0028, 0,
        ],
        vec![
            0x0026, 0x0004, 0x0000, 0x000e, 0x0300, 0x0001, 0x0004, 0, 0x0e12, 0x2871,
        ],
    ]]);
    let h = extract_from_dex_with(&switches, strict).map_err(|e| e.to_string())?;
    ensure!(
        h == hist(&[(0x2b, 1), (0x2c, 1), (0x26, 1), (0x0e, 3)]),
        "switch payloads: {:?}",
        h
    );

    let apk = write_apk(&[
        (
            "AndroidManifest.xml",
            &axml_manifest(&["android.permission.CALL_PHONE"], false, AttrStyle::Plain),
        ),
        ("classes2.dex", &assemble_dex(&[vec![vec![0x1012, 0x000f]]])),
        ("classes.dex", &assemble_dex(&[vec![vec![0x0000, 0x000e]]])),
        (
            "classes3.dex",
            &assemble_dex(&[vec![vec![0x0071, 0, 0, 0x000e]]]),
        ),
        ("assets/classes.dex", &assemble_dex(&[vec![vec![0x0028]]])),
        ("classes1.dex", &assemble_dex(&[vec![vec![0x0028]]])),
    ])
    .map_err(|e| e.to_string())?;
    let (h, p) = analyze_apk(&apk, strict).map_err(|e| e.to_string())?;
    ensure!(
        h == hist(&[(0x00, 1), (0x0e, 2), (0x12, 1), (0x0f, 1), (0x71, 1)]),
        "multi-dex: {h:?}"
    );
    ensure!(
        p == perms(&["android.permission.CALL_PHONE"]),
        "apk permissions {p}"
    );

    let smali = ".class public LD;\n.super Ljava/lang/Object;\n.method public static f(I)I\n    .registers 3\n    const/4 v0, 0x1\n    if-eqz p0, :a\n    add-int/2addr v0, p0\n    :a\n    packed-switch p0, :t\n    return v0\n    :t\n    .packed-switch 0x0\n        :a\n    .end packed-switch\n.end method\n";
    let dex = assemble_dex(&[vec![vec![
        0x1012, 0x0238, 0x0003, 0x20b0, 0x022b, 0x0004, 0x0000, 0x000f, 0x0100, 0x0001, 0, 0,
        0xfffc, 0xffff,
    ]]]);
    let from_smali = extract_from_smali(&[smali], UnknownMnemonicPolicy::Fail)
        .map_err(|e| e.to_string())?
        .histogram;
    let from_dex = extract_from_dex_with(&dex, strict).map_err(|e| e.to_string())?;
    ensure!(from_smali == from_dex, "dual-encoded dex/smali disagree");

    let mut manifests = 0;
    for list in [
        vec!["android.permission.CALL_PHONE"],
        vec![],
        vec![
            "android.permission.SEND_SMS",
            "android.permission.CAMERA",
            "com.example.CUSTOM",
        ],
    ] {
        let text = parse_manifest_text(&text_manifest(&list)).map_err(|e| e.to_string())?;
        for utf8 in [false, true] {
            for style in [
                AttrStyle::Plain,
                AttrStyle::ResourceIdOnly,
                AttrStyle::TypedString,
            ] {
                let bin =
                    parse_axml(&axml_manifest(&list, utf8, style)).map_err(|e| e.to_string())?;
                ensure!(
                    bin == text,
                    "AXML {utf8} {style:?} disagrees with text for {list:?}"
                );
                manifests += 1;
            }
        }
    }
    Ok(format!(
        "byte-level dex, 3 payload kinds, 3-way multi-dex apk, dual smali/dex, {manifests} AXML/text pairs"
    ))
}

// ---------------------------------------------------------------- metrics ----

fn small_benchmark() -> Vec<AppRecord> {
    let mut spec = planted_benchmark(5);
    for c in &mut spec.cohorts {
        c.benign = 30;
        c.malicious = 31;
    }
    generate_synthetic(&spec)
        .unwrap()
        .into_iter()
        .map(|a| a.record)
        .collect()
}

fn check_metric_identities(report: &EvaluationReport) -> Result<usize, String> {
    let mut cells = 0;
    for (key, outcome) in &report.cells {
        let CellOutcome::Done(m) = outcome else {
            continue;
        };
        let c = m.counts;
        let total = c.tp + c.tn + c.fp + c.fn_;
        ensure!(total > 0, "{key:?}: empty test set");
        ensure!(
            m.accuracy == (c.tp + c.tn) as f64 / total as f64 * 100.0,
            "{key:?}: accuracy {}",
            m.accuracy
        );
        ensure!(
            m.tp_rate == (c.tp + c.fn_ > 0).then(|| c.tp as f64 / (c.tp + c.fn_) as f64),
            "{key:?}: tp rate"
        );
        ensure!(
            m.tn_rate == (c.tn + c.fp > 0).then(|| c.tn as f64 / (c.tn + c.fp) as f64),
            "{key:?}: tn rate"
        );
        cells += 1;
    }
    Ok(cells)
}

fn metric_identity() -> Check {
    let apps = small_benchmark();
    let config = EvalConfig {
        n_list: vec![10, 40, 200],
        hyper: Hyperparameters {
            n_trees: 20,
            ..Hyperparameters::default()
        },
        ..EvalConfig::default()
    };
    let report = sweep(&apps, &Grouper::default(), &config).map_err(|e| e.to_string())?;
    let live = check_metric_identities(&report)?;
    let reparsed =
        EvaluationReport::parse_records(&report.to_records()).map_err(|e| e.to_string())?;
    let parsed = check_metric_identities(&reparsed)?;
    ensure!(live == parsed && live > 0, "cell counts {live} vs {parsed}");

    // A Calendar-sized bucket: 73 benign and 71 malicious apps.
    let bucket: Vec<(String, Label)> = (0..73)
        .map(|i| (format!("b{i}"), Label::Benign))
        .chain((0..71).map(|i| (format!("m{i}"), Label::Malicious)))
        .collect();
    let spec = config.split_spec(GroupId::Calendar);
    let (train_ids, test_ids) = split(&bucket, &spec).map_err(|e| e.to_string())?;
    let count = |ids: &[String], p: char| ids.iter().filter(|s| s.starts_with(p)).count();
    ensure!(
        (
            count(&train_ids, 'b'),
            count(&train_ids, 'm'),
            count(&test_ids, 'b'),
            count(&test_ids, 'm')
        ) == (59, 57, 14, 14),
        "Calendar split"
    );
    let c = ConfusionCounts {
        tp: 14,
        tn: 14,
        fp: 0,
        fn_: 0,
    };
    ensure!(c.accuracy() == 100.0, "Calendar accuracy {}", c.accuracy());
    ensure!(
        format!("{:.2}", c.accuracy()) == "100.00",
        "Calendar rendering"
    );
    ensure!(
        c.tp_rate() == Some(1.0) && c.tn_rate() == Some(1.0),
        "Calendar rates"
    );
    Ok(format!(
        "{live} cells live and {parsed} reparsed; Calendar 59/57/14/14 -> 100.00"
    ))
}

// ------------------------------------------------------------ classifiers ----

fn random_dataset(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    loop {
        let n = rng.random_range(4..=50);
        let d = rng.random_range(1..=4);
        let levels = rng.random_range(2..9);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| f64::from(rng.random_range(0..levels)))
                    .collect()
            })
            .collect();
        // Labels loosely follow feature 0 so informative splits exist.
        let labels: Vec<usize> = rows
            .iter()
            .map(|r| usize::from(r[0] + rng.random_range(-2.0..2.0) > f64::from(levels) / 2.0))
            .collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (rows, labels);
        }
    }
}

fn to_vectors(rows: &[Vec<f64>], labels: &[usize]) -> Vec<FeatureVector> {
    rows.iter()
        .zip(labels)
        .map(|(r, &l)| {
            FeatureVector::new(
                r.clone(),
                Some(if l == 1 {
                    Label::Malicious
                } else {
                    Label::Benign
                }),
            )
        })
        .collect()
}

fn ops(n: usize) -> Vec<Opcode> {
    (0..n as u8).map(Opcode).collect()
}

fn classifier_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let hyper = Hyperparameters::default();
    let mut splits = 0;
    for case in 0..300 {
        let (rows, labels) = random_dataset(&mut rng);
        let f = ops(rows[0].len());
        let model = train(ModelKind::Tree, &f, &to_vectors(&rows, &labels), &hyper, 0)
            .map_err(|e| e.to_string())?;
        let root = &model.trees()[0].nodes[0];
        let candidates = all_root_splits(&rows, &labels, hyper.min_leaf);
        let best = candidates
            .iter()
            .map(|c| c.2)
            .fold(f64::NEG_INFINITY, f64::max);
        match root.kind {
            NodeKind::Split {
                feature, threshold, ..
            } => {
                let hit = candidates
                    .iter()
                    .find(|c| c.0 == feature as usize && c.1 == threshold);
                let Some(hit) = hit else {
                    return Err(format!(
                        "case {case}: root split ({feature}, {threshold}) not admissible"
                    ));
                };
                ensure!(
                    hit.2 >= best - 1e-12,
                    "case {case}: root ratio {} below best {best}",
                    hit.2
                );
                // Among equal ratios the lowest feature, then threshold wins.
                let first = candidates.iter().find(|c| c.2 >= best - 1e-12).unwrap();
                ensure!(
                    (first.0, first.1) == (feature as usize, threshold),
                    "case {case}: tie-break picked ({feature}, {threshold}) over ({}, {})",
                    first.0,
                    first.1
                );
                splits += 1;
            }
            _ => ensure!(
                candidates.is_empty(),
                "case {case}: leaf root but a split exists"
            ),
        }
    }

    // Separable data.
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let m = i % 2;
        rows.push(vec![
            f64::from((i % 6) as u8) + if m == 1 { 100.0 } else { 0.0 },
            f64::from((i * 7 % 11) as u8),
            f64::from((i * 5 % 3) as u8),
        ]);
        labels.push(m);
    }
    let data = to_vectors(&rows, &labels);
    let f = ops(3);
    for kind in ModelKind::ALL {
        let m = train(kind, &f, &data, &hyper, 1).map_err(|e| e.to_string())?;
        let correct = data
            .iter()
            .filter(|x| m.predict(x).unwrap().label == x.label.unwrap())
            .count();
        ensure!(
            correct == data.len(),
            "{kind:?}: {correct}/{} on separable data",
            data.len()
        );
    }

    // Same seed, same forest; different seed, different forest.
    let (rows, labels) = random_dataset(&mut rng);
    let data = to_vectors(&rows, &labels);
    let f = ops(rows[0].len());
    let a = train(ModelKind::Forest, &f, &data, &hyper, 99).unwrap();
    let b = train(ModelKind::Forest, &f, &data, &hyper, 99).unwrap();
    let c = train(ModelKind::Forest, &f, &data, &hyper, 100).unwrap();
    ensure!(
        a == b && serialize_model(&a) == serialize_model(&b),
        "same-seed forests differ"
    );
    ensure!(a.body != c.body, "seed has no effect");

    // Codec round trip on 1000 random vectors per kind.
    for kind in ModelKind::ALL {
        let m = train(kind, &f, &data, &hyper, 5).unwrap();
        let back = deserialize_model(&serialize_model(&m)).map_err(|e| e.to_string())?;
        ensure!(back == m, "{kind:?}: decoded model differs");
        for _ in 0..1000 {
            let x: Vec<f64> = (0..f.len()).map(|_| rng.random_range(-2.0..10.0)).collect();
            let (p, q) = (
                m.predict_values(&x).unwrap(),
                back.predict_values(&x).unwrap(),
            );
            ensure!(
                p.label == q.label && p.score.to_bits() == q.score.to_bits(),
                "{kind:?}: prediction differs after round trip"
            );
        }
    }
    Ok(format!(
        "300 root searches ({splits} splits), separable 100% x3 kinds, forest identity, 3000 codec probes"
    ))
}

// ------------------------------------------------- synthetic + determinism ----

struct Benchmark {
    apps: Vec<AppRecord>,
    planted: BTreeMap<String, Vec<Opcode>>,
    report: EvaluationReport,
    elapsed: Duration,
}

fn run_benchmark() -> Benchmark {
    let spec = planted_benchmark(0);
    let planted = planted_opcodes(&spec);
    let apps: Vec<AppRecord> = generate_synthetic(&spec)
        .unwrap()
        .into_iter()
        .map(|a| a.record)
        .collect();
    let start = Instant::now();
    let report = sweep(&apps, &Grouper::default(), &EvalConfig::default()).unwrap();
    Benchmark {
        apps,
        planted,
        report,
        elapsed: start.elapsed(),
    }
}

fn synthetic_benchmark(bench: &Benchmark) -> Check {
    ensure!(bench.apps.len() == 1503, "{} apps", bench.apps.len());
    ensure!(
        bench.elapsed < Duration::from_secs(300),
        "sweep took {:?}",
        bench.elapsed
    );
    let config = EvalConfig::default();
    let grouper = Grouper::default();
    let mut worst_best = f64::INFINITY;
    let mut worst_centroid = f64::INFINITY;
    for g in GroupId::pipeline_groups(false) {
        let bucket: Vec<&AppRecord> = bench
            .apps
            .iter()
            .filter(|a| grouper.assign_groups(&a.permissions).contains(&g))
            .collect();
        let planted: BTreeSet<Opcode> = bench.planted[&g.name().to_ascii_lowercase()]
            .iter()
            .copied()
            .collect();
        ensure!(
            planted.len() == 10,
            "{g}: {} planted opcodes",
            planted.len()
        );

        let pairs: Vec<(String, Label)> =
            bucket.iter().map(|a| (a.app_id.clone(), a.label)).collect();
        let (train_ids, test_ids) =
            split(&pairs, &config.split_spec(g)).map_err(|e| e.to_string())?;
        let train_set: BTreeSet<&String> = train_ids.iter().collect();
        let train_apps: Vec<&AppRecord> = bucket
            .iter()
            .copied()
            .filter(|a| train_set.contains(&a.app_id))
            .collect();
        let of = |l: Label| {
            train_apps
                .iter()
                .filter(move |a| a.label == l)
                .map(|a| &a.histogram)
        };
        let ranking = rank_features(
            &compute_profile(
                of(Label::Benign),
                of(Label::Malicious),
                FrequencyMode::RawCount,
            )
            .map_err(|e| e.to_string())?,
        );
        let top: BTreeSet<Opcode> = top_n(&ranking, 10).unwrap().into_iter().collect();
        ensure!(top == planted, "{g}: top-10 misses planted opcodes");

        let best = bench
            .report
            .group_best(g)
            .ok_or_else(|| format!("{g}: no completed cell"))?;
        ensure!(
            best.metrics.accuracy >= 95.0,
            "{g}: best accuracy {:.2}",
            best.metrics.accuracy
        );
        worst_best = worst_best.min(best.metrics.accuracy);

        let featurize = |ids: &[String]| -> Vec<(Vec<f64>, usize)> {
            let set: BTreeSet<&String> = ids.iter().collect();
            bucket
                .iter()
                .filter(|a| set.contains(&a.app_id))
                .map(|a| {
                    (
                        a.histogram.counts().iter().map(|&c| c as f64).collect(),
                        usize::from(a.label == Label::Malicious),
                    )
                })
                .collect()
        };
        let centroid = nearest_centroid_accuracy(&featurize(&train_ids), &featurize(&test_ids));
        ensure!(
            centroid > 95.0,
            "{g}: nearest-centroid margin only {centroid:.2}"
        );
        worst_centroid = worst_centroid.min(centroid);
    }
    Ok(format!(
        "1503 apps, sweep {:.1}s, planted top-10 in 9/9 groups, worst group best {worst_best:.2}%, worst centroid {worst_centroid:.2}%",
        bench.elapsed.as_secs_f64()
    ))
}

fn artifacts(report: &EvaluationReport) -> Vec<String> {
    let mut out = vec![
        report.to_records(),
        report.average_table(),
        report.best_table(),
    ];
    for &g in &report.groups {
        for &k in &report.kinds {
            out.push(report.plot_data(g, k));
        }
    }
    out
}

fn determinism(bench: &Benchmark) -> Check {
    let first = artifacts(&bench.report);
    // Second run on a single worker thread, so scheduling cannot matter.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let again = pool
        .install(|| sweep(&bench.apps, &Grouper::default(), &EvalConfig::default()))
        .map_err(|e| e.to_string())?;
    let second = artifacts(&again);
    ensure!(first.len() == second.len(), "artifact count differs");
    for (i, (a, b)) in first.iter().zip(&second).enumerate() {
        ensure!(a == b, "artifact {i} differs between runs");
    }
    let cells = again.cells.len();
    let expected = 9 * 3 * 10;
    ensure!(cells == expected, "{cells} cells, expected {expected}");
    let bytes: usize = first.iter().map(String::len).sum();
    let key = CellKey {
        group: GroupId::Calendar,
        kind: ModelKind::Forest,
        n: 20,
    };
    ensure!(
        bench.report.metrics(key) == again.metrics(key),
        "metric lookup differs"
    );
    Ok(format!(
        "{} artifacts, {bytes} bytes identical across 2 runs (threads: default vs 1)",
        first.len()
    ))
}

// -------------------------------------------------------------------- main ----

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {name}: {detail}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= run("selection matches brute-force oracle", selection_oracle);
    ok &= run("grouping fidelity", grouping_fidelity);
    ok &= run("parser fixtures", parser_fixtures);
    ok &= run("metric identity", metric_identity);
    ok &= run("classifier oracles", classifier_oracles);
    let bench = catch_unwind(run_benchmark).ok();
    ok &= run("synthetic end-to-end benchmark", || match &bench {
        Some(b) => synthetic_benchmark(b),
        None => Err("benchmark sweep panicked".into()),
    });
    ok &= run("sweep determinism", || match &bench {
        Some(b) => determinism(b),
        None => Err("benchmark sweep panicked".into()),
    });
    if !ok {
        std::process::exit(1);
    }
}
