use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use opdroid_core::classify::{
    self, deserialize_model, serialize_model, FeatureVector, Hyperparameters, Label,
};
use opdroid_core::corpus::{
    self, generate_synthetic, ingest, materialize, planted_benchmark, planted_opcodes,
    read_extracted, write_atomic, write_extracted, AppFormat, AppRecord, CorpusManifest,
    IngestOptions,
};
use opdroid_core::dex::DexOptions;
use opdroid_core::eval::{self, ConfusionCounts, EvalConfig, EvaluationReport};
use opdroid_core::groups::{GroupId, GroupMapping, Grouper};
use opdroid_core::selection::{self, FrequencyMode, RankingArtifact};
use opdroid_core::smali::UnknownMnemonicPolicy;

use crate::{
    Command, EvaluateArgs, ExperimentArgs, ExtractArgs, FormatArg, GroupArgs, ReportArgs,
    SelectArgs, SweepArgs, SyntheticArgs, TrainArgs, UsageError,
};

type Config = Vec<(String, String)>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Extract(a) => extract(a),
        Command::Group(a) => group(a),
        Command::Select(a) => select(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
        Command::GenerateSynthetic(a) => generate(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// Comment header carrying the tool version and the resolved settings.
fn header(command: &str, config: &Config) -> String {
    let mut s = format!("# opdroid {} {command}\n", opdroid_core::VERSION);
    for (k, v) in config {
        let _ = writeln!(s, "# config {k}={v}");
    }
    s
}

fn write(out: &Path, name: &str, content: &str) -> Result<()> {
    write_atomic(&out.join(name), content.as_bytes())?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_corpus(dir: &Path) -> Result<Vec<AppRecord>> {
    let hist = read_text(&dir.join("histograms.csv"))?;
    let apps = read_text(&dir.join("apps.tsv"))?;
    let records = read_extracted(&hist, &apps)
        .with_context(|| format!("loading corpus {}", dir.display()))?;
    if records.is_empty() {
        bail!("corpus {} holds no apps", dir.display());
    }
    Ok(records)
}

fn experiment(exp: &ExperimentArgs) -> Result<EvalConfig> {
    if !(exp.test_fraction > 0.0 && exp.test_fraction < 1.0) {
        return Err(usage(format!(
            "--test-fraction {} must lie in (0, 1)",
            exp.test_fraction
        )));
    }
    if exp.min_leaf == 0 || exp.n_trees == 0 || exp.features_per_split == Some(0) {
        return Err(usage(
            "--min-leaf, --n-trees and --features-per-split must be positive",
        ));
    }
    Ok(EvalConfig {
        test_fraction: exp.test_fraction,
        stratified: !exp.no_stratify,
        seed: exp.seed,
        mode: if exp.relative {
            FrequencyMode::Relative
        } else {
            FrequencyMode::RawCount
        },
        include_test_in_selection: exp.include_test_in_selection,
        include_sensors: exp.include_sensors,
        hyper: Hyperparameters {
            min_leaf: exp.min_leaf,
            prune: exp.prune,
            n_trees: exp.n_trees,
            features_per_split: exp.features_per_split,
            nb_leaf_threshold: exp.nb_leaf_threshold,
        },
        ..EvalConfig::default()
    })
}

fn check_n(n: usize) -> Result<()> {
    if !(1..=256).contains(&n) {
        return Err(usage(format!("feature count {n} must lie in 1..=256")));
    }
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let out = &a.out.out;
    let text = read_text(&a.manifest)?;
    let manifest = CorpusManifest::parse(&text).context("parsing corpus manifest")?;
    let base = a
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let cache_dir = if a.no_cache {
        None
    } else {
        Some(a.cache.clone().unwrap_or_else(|| out.join("cache")))
    };
    let opts = IngestOptions {
        cache_dir: cache_dir.clone(),
        dex: DexOptions {
            verify_checksum: a.verify_checksum,
            verify_signature: a.verify_signature,
        },
        smali_policy: if a.skip_unknown_mnemonics {
            UnknownMnemonicPolicy::WarnAndSkip
        } else {
            UnknownMnemonicPolicy::Fail
        },
    };
    let config: Config = vec![
        kv("manifest", a.manifest.display()),
        kv(
            "cache",
            cache_dir
                .as_deref()
                .map_or("none".into(), |p| p.display().to_string()),
        ),
        kv("skip_unknown_mnemonics", a.skip_unknown_mnemonics),
        kv("verify_checksum", a.verify_checksum),
        kv("verify_signature", a.verify_signature),
    ];
    let report = ingest(&manifest, &base, &opts)?;

    let head = header("extract", &config);
    let mut quarantine = format!("{head}app_id\tpath\treason\n");
    for q in &report.quarantined {
        let _ = writeln!(
            quarantine,
            "{}\t{}\t{}",
            q.app_id,
            q.path,
            q.reason.replace(['\t', '\n'], " ")
        );
    }
    write(out, "quarantine.tsv", &quarantine)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "extracted {} apps ({} from cache, {} parsed), {} quarantined",
        report.apps.len(),
        report.cache_hits,
        report.extracted,
        report.quarantined.len()
    );
    if report.apps.is_empty() {
        bail!(
            "no app could be extracted; see {}",
            out.join("quarantine.tsv").display()
        );
    }
    let (hist, apps) = write_extracted(&report.apps);
    write(out, "histograms.csv", &format!("{head}{hist}"))?;
    write(out, "apps.tsv", &format!("{head}{apps}"))?;
    Ok(())
}

fn grouper(include_sensors: bool, mapping: Option<&Path>) -> Result<Grouper> {
    let mapping = match mapping {
        Some(p) => GroupMapping::parse(&read_text(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => GroupMapping::default(),
    };
    Ok(Grouper::new(mapping, include_sensors))
}

fn group(a: GroupArgs) -> Result<()> {
    let apps = load_corpus(&a.corpus.corpus)?;
    let grouper = grouper(a.include_sensors, a.mapping.as_deref())?;
    let config: Config = vec![
        kv("corpus", a.corpus.corpus.display()),
        kv("include_sensors", a.include_sensors),
        kv(
            "mapping",
            a.mapping
                .as_deref()
                .map_or("built-in".into(), |p| p.display().to_string()),
        ),
        kv("mapping_version", grouper.mapping.version()),
    ];
    let head = header("group", &config);
    let mut groups = format!("{head}app_id\tlabel\tgroups\n");
    let mut counts: BTreeMap<GroupId, [usize; 2]> =
        GroupId::ALL.into_iter().map(|g| (g, [0, 0])).collect();
    for app in &apps {
        let assigned = grouper.assign_groups(&app.permissions);
        let names: Vec<&str> = assigned.iter().map(|g| g.name()).collect();
        let _ = writeln!(groups, "{}\t{}\t{}", app.app_id, app.label, names.join(","));
        for g in assigned {
            counts.get_mut(&g).expect("every group has a row")[app.label as usize] += 1;
        }
    }
    let mut table = format!("{head}group\tbenign\tmalicious\ttotal\n");
    for (g, [b, m]) in counts {
        let _ = writeln!(table, "{}\t{b}\t{m}\t{}", g.name(), b + m);
    }
    write(&a.out.out, "groups.tsv", &groups)?;
    write(&a.out.out, "group_counts.tsv", &table)?;
    Ok(())
}

fn file_stem(g: GroupId) -> String {
    g.name().to_ascii_lowercase()
}

fn select(a: SelectArgs) -> Result<()> {
    check_n(a.n)?;
    check_n(a.top)?;
    let apps = load_corpus(&a.corpus.corpus)?;
    let grouper = Grouper::new(GroupMapping::default(), a.include_sensors);
    let mode = if a.relative {
        FrequencyMode::Relative
    } else {
        FrequencyMode::RawCount
    };
    let groups = if a.groups.is_empty() {
        GroupId::pipeline_groups(a.include_sensors)
    } else {
        a.groups.clone()
    };
    let config: Config = vec![
        kv("corpus", a.corpus.corpus.display()),
        kv(
            "groups",
            groups
                .iter()
                .map(|g| g.name())
                .collect::<Vec<_>>()
                .join(","),
        ),
        kv("n", a.n),
        kv("top", a.top),
        kv("frequency", mode.name()),
        kv("include_sensors", a.include_sensors),
    ];
    let head = header("select", &config);
    let buckets = eval::group_buckets(&apps, &grouper);
    let mut ranked = 0;
    let mut skipped = format!("{head}group\treason\n");
    for g in groups {
        let bucket = buckets.get(&g).map(Vec::as_slice).unwrap_or(&[]);
        let of = |l: Label| {
            bucket
                .iter()
                .filter(move |x| x.label == l)
                .map(|x| &x.histogram)
        };
        let profile =
            match selection::compute_profile(of(Label::Benign), of(Label::Malicious), mode) {
                Ok(p) => p,
                Err(e) => {
                    let _ = writeln!(skipped, "{}\t{e}", g.name());
                    continue;
                }
            };
        let ranking = selection::rank_features(&profile);
        let artifact = RankingArtifact::from_ranking(Some(g), &ranking, a.n)?;
        write(
            &a.out.out,
            &format!("ranking_{}.txt", file_stem(g)),
            &format!("{head}{}", artifact.to_text()),
        )?;
        let diff = selection::difference_report(&ranking, a.top)?;
        write(
            &a.out.out,
            &format!("difference_{}.tsv", file_stem(g)),
            &format!("{head}{diff}"),
        )?;
        ranked += 1;
    }
    write(&a.out.out, "select_skipped.tsv", &skipped)?;
    if ranked == 0 {
        bail!("no group has both benign and malicious apps");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    check_n(a.n)?;
    let config = experiment(&a.exp)?;
    let kind = a.kind.into();
    let apps = load_corpus(&a.corpus.corpus)?;
    let grouper = Grouper::new(GroupMapping::default(), config.include_sensors);
    let buckets = eval::group_buckets(&apps, &grouper);
    let bucket = buckets.get(&a.group).map(Vec::as_slice).unwrap_or(&[]);
    let pairs: Vec<(String, Label)> = bucket.iter().map(|x| (x.app_id.clone(), x.label)).collect();
    let (train_ids, test_ids) = eval::split(&pairs, &config.split_spec(a.group))
        .with_context(|| format!("splitting group {}", a.group))?;
    let train_set: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let train_apps: Vec<&AppRecord> = bucket
        .iter()
        .copied()
        .filter(|x| train_set.contains(x.app_id.as_str()))
        .collect();

    let pool: &[&AppRecord] = if config.include_test_in_selection {
        bucket
    } else {
        &train_apps
    };
    let of = |l: Label| {
        pool.iter()
            .filter(move |x| x.label == l)
            .map(|x| &x.histogram)
    };
    let profile = selection::compute_profile(of(Label::Benign), of(Label::Malicious), config.mode)?;
    let ranking = selection::rank_features(&profile);
    let features = selection::top_n(&ranking, a.n)?;
    let data: Vec<FeatureVector> = train_apps
        .iter()
        .map(|x| FeatureVector::project(&x.histogram, &features, config.mode, Some(x.label)))
        .collect();
    let key = eval::CellKey {
        group: a.group,
        kind,
        n: a.n,
    };
    let model = classify::train(
        kind,
        &features,
        &data,
        &config.hyper,
        config.model_seed(key),
    )?
    .with_mode(config.mode);

    let mut echo: Config = vec![
        kv("corpus", a.corpus.corpus.display()),
        kv("group", a.group.name()),
        kv("kind", kind),
        kv("n", a.n),
    ];
    echo.extend(
        config
            .echo()
            .into_iter()
            .filter(|(k, _)| k != "kinds" && k != "n_list"),
    );
    let head = header("train", &echo);
    write_atomic(&a.out.out.join("model.opdm"), &serialize_model(&model))?;
    write(&a.out.out, "model.config", &head)?;
    let artifact = RankingArtifact::from_ranking(Some(a.group), &ranking, a.n)?;
    write(
        &a.out.out,
        "ranking.txt",
        &format!("{head}{}", artifact.to_text()),
    )?;
    let mut split = format!("{head}app_id\tset\n");
    for id in &train_ids {
        let _ = writeln!(split, "{id}\ttrain");
    }
    for id in &test_ids {
        let _ = writeln!(split, "{id}\ttest");
    }
    write(&a.out.out, "split.tsv", &split)?;
    eprintln!(
        "trained {} on {} with {} features: {} train, {} test apps",
        kind.label(),
        a.group,
        a.n,
        train_ids.len(),
        test_ids.len()
    );
    Ok(())
}

fn read_split(path: &Path) -> Result<BTreeSet<String>> {
    let text = read_text(path)?;
    let mut test = BTreeSet::new();
    let mut rows = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    if rows.next() != Some("app_id\tset") {
        bail!("{}: missing app_id/set header", path.display());
    }
    for line in rows {
        match line.split_once('\t') {
            Some((id, "test")) => {
                test.insert(id.to_string());
            }
            Some((_, "train")) => {}
            _ => bail!("{}: bad split row {line:?}", path.display()),
        }
    }
    Ok(test)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let bytes =
        std::fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model =
        deserialize_model(&bytes).with_context(|| format!("loading {}", a.model.display()))?;
    let apps = load_corpus(&a.corpus.corpus)?;
    let selected: Vec<&AppRecord> = match &a.split {
        Some(p) => {
            let test = read_split(p)?;
            let picked: Vec<&AppRecord> =
                apps.iter().filter(|x| test.contains(&x.app_id)).collect();
            if picked.len() != test.len() {
                bail!(
                    "{} test apps listed, {} found in the corpus",
                    test.len(),
                    picked.len()
                );
            }
            picked
        }
        None => apps.iter().collect(),
    };
    let config: Config = vec![
        kv("corpus", a.corpus.corpus.display()),
        kv("model", a.model.display()),
        kv(
            "split",
            a.split
                .as_deref()
                .map_or("none".into(), |p| p.display().to_string()),
        ),
        kv("kind", model.kind),
        kv("n", model.features.len()),
        kv("frequency", model.mode.name()),
    ];
    let head = header("evaluate", &config);
    let mut counts = ConfusionCounts::default();
    let mut predictions = format!("{head}app_id\tlabel\tpredicted\tscore\n");
    for app in &selected {
        let p = model.predict_histogram(&app.histogram);
        counts.record(app.label, p.label);
        let _ = writeln!(
            predictions,
            "{}\t{}\t{}\t{}",
            app.app_id, app.label, p.label, p.score
        );
    }
    let rate = |r: Option<f64>| r.map_or("-".into(), |x| x.to_string());
    let metrics = format!(
        "{head}tp\ttn\tfp\tfn\taccuracy\ttp_rate\ttn_rate\n{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        counts.tp,
        counts.tn,
        counts.fp,
        counts.fn_,
        counts.accuracy(),
        rate(counts.tp_rate()),
        rate(counts.tn_rate())
    );
    write(&a.out.out, "predictions.tsv", &predictions)?;
    write(&a.out.out, "metrics.tsv", &metrics)?;
    println!(
        "accuracy {:.2}% over {} apps",
        counts.accuracy(),
        counts.total()
    );
    Ok(())
}

fn write_report(out: &Path, report: &EvaluationReport) -> Result<()> {
    write(out, "table_average.txt", &report.average_table())?;
    write(out, "table_best.txt", &report.best_table())?;
    for &g in &report.groups {
        for &k in &report.kinds {
            let name = format!("plot/{}_{}.tsv", file_stem(g), k.name());
            write(out, &name, &report.plot_data(g, k))?;
        }
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut config = experiment(&a.exp)?;
    if a.n_list.is_empty() || a.kinds.is_empty() {
        return Err(usage("--n-list and --kinds need at least one value"));
    }
    for &n in &a.n_list {
        check_n(n)?;
    }
    config.n_list = a.n_list.clone();
    config.kinds = a.kinds.iter().map(|&k| k.into()).collect();

    let (apps, source) = match &a.corpus.corpus {
        Some(dir) => (load_corpus(dir)?, dir.display().to_string()),
        None => {
            let spec = planted_benchmark(config.seed);
            let apps = generate_synthetic(&spec)?
                .into_iter()
                .map(|x| x.record)
                .collect();
            (apps, format!("synthetic-benchmark seed={}", config.seed))
        }
    };
    let grouper = Grouper::new(GroupMapping::default(), config.include_sensors);
    let mut report = eval::sweep(&apps, &grouper, &config)?;
    report.config.insert(0, kv("corpus", source));
    write(&a.out.out, "report.tsv", &report.to_records())?;
    write_report(&a.out.out, &report)?;
    print!("{}", report.best_table());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = read_text(&a.records)?;
    let report = EvaluationReport::parse_records(&text)
        .with_context(|| format!("parsing {}", a.records.display()))?;
    write_report(&a.out.out, &report)?;
    print!("{}", report.best_table());
    Ok(())
}

fn generate(a: SyntheticArgs) -> Result<()> {
    let mut spec = planted_benchmark(a.seed);
    if let Some(n) = a.per_class {
        if n < 2 {
            return Err(usage("--per-class must be at least 2"));
        }
        for c in &mut spec.cohorts {
            c.benign = n;
            c.malicious = n;
        }
    }
    let format = match a.format {
        FormatArg::Smali => AppFormat::Smali,
        FormatArg::Dex => AppFormat::Dex,
        FormatArg::Apk => AppFormat::Apk,
    };
    let config: Config = vec![
        kv("seed", a.seed),
        kv("format", format!("{:?}", a.format).to_ascii_lowercase()),
        kv(
            "per_class",
            a.per_class.map_or("default".into(), |n| n.to_string()),
        ),
        kv("dispersion", spec.dispersion),
        kv("planted_gap", corpus::PLANTED_GAP),
    ];
    let head = header("generate-synthetic", &config);
    let apps = generate_synthetic(&spec)?;
    let out: &PathBuf = &a.out.out;
    let manifest = materialize(&apps, out, format)?;
    write(out, "corpus.tsv", &format!("{head}{}", manifest.to_text()))?;
    let mut planted = format!("{head}cohort\topcodes\n");
    for (cohort, ops) in planted_opcodes(&spec) {
        let names: Vec<&str> = ops.iter().map(|o| o.mnemonic()).collect();
        let _ = writeln!(planted, "{cohort}\t{}", names.join(","));
    }
    write(out, "planted.tsv", &planted)?;
    eprintln!("wrote {} apps to {}", apps.len(), out.display());
    Ok(())
}
