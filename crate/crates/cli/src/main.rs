//! `opdroid`: permission-grouped opcode-histogram malware detection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use opdroid_core::classify::ModelKind;
use opdroid_core::groups::GroupId;

#[derive(Parser, Debug)]
#[command(name = "opdroid", version, about, propagate_version = true)]
#[command(after_help = "Exit status: 0 on success, 1 on usage errors, 2 on data errors.")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract opcode histograms and permissions for every app in a corpus manifest.
    Extract(ExtractArgs),
    /// Assign extracted apps to permission groups.
    Group(GroupArgs),
    /// Rank opcodes by class-mean difference inside each group.
    Select(SelectArgs),
    /// Train one classifier on one group's training split.
    Train(TrainArgs),
    /// Score a trained model on a corpus or a saved split.
    Evaluate(EvaluateArgs),
    /// Run every (group, classifier, feature count) experiment.
    Sweep(SweepArgs),
    /// Re-render tables and plot data from sweep records.
    Report(ReportArgs),
    /// Write a seeded synthetic corpus with planted class differences.
    GenerateSynthetic(SyntheticArgs),
}

#[derive(Args, Debug)]
pub struct OutArg {
    /// Directory receiving every artifact.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CorpusArg {
    /// Directory holding histograms.csv and apps.tsv from `extract`.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Corpus manifest (app_id, label, path[, hist-ref[, perms-ref]]).
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
    /// Extraction cache directory [default: <out>/cache].
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Disable the extraction cache.
    #[arg(long, conflicts_with = "cache")]
    pub no_cache: bool,
    /// Skip unknown smali mnemonics instead of quarantining the app.
    #[arg(long)]
    pub skip_unknown_mnemonics: bool,
    /// Reject dex files whose adler32 checksum does not match.
    #[arg(long)]
    pub verify_checksum: bool,
    /// Reject dex files whose SHA-1 signature does not match.
    #[arg(long)]
    pub verify_signature: bool,
}

#[derive(Args, Debug)]
pub struct GroupArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[command(flatten)]
    pub out: OutArg,
    /// Assign the Sensors group too.
    #[arg(long)]
    pub include_sensors: bool,
    /// Alternative group mapping file [default: built-in].
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[command(flatten)]
    pub out: OutArg,
    /// Groups to rank [default: every group of the pipeline].
    #[arg(long = "group")]
    pub groups: Vec<GroupId>,
    /// Opcodes kept in each ranking artifact.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Rows in each difference report.
    #[arg(long, default_value_t = 50)]
    pub top: usize,
    /// Rank per-app relative frequencies instead of raw counts.
    #[arg(long)]
    pub relative: bool,
    /// Include the Sensors group.
    #[arg(long)]
    pub include_sensors: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ExperimentArgs {
    /// Global seed for splits and models.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out fraction per label.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Split the bucket without stratifying by label.
    #[arg(long)]
    pub no_stratify: bool,
    /// Rank opcodes on the whole bucket, test apps included.
    #[arg(long)]
    pub include_test_in_selection: bool,
    /// Include the Sensors group.
    #[arg(long)]
    pub include_sensors: bool,
    /// Use per-app relative frequencies instead of raw counts.
    #[arg(long)]
    pub relative: bool,
    /// Minimum samples per tree leaf.
    #[arg(long, default_value_t = 2)]
    pub min_leaf: usize,
    /// Reduced-error pruning for single trees.
    #[arg(long)]
    pub prune: bool,
    /// Trees per forest.
    #[arg(long, default_value_t = 100)]
    pub n_trees: usize,
    /// Features tried per forest split [default: ceil(sqrt(n))].
    #[arg(long)]
    pub features_per_split: Option<usize>,
    /// Nb-tree nodes smaller than this become naive Bayes leaves.
    #[arg(long, default_value_t = 30)]
    pub nb_leaf_threshold: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long)]
    pub group: GroupId,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Number of top-ranked opcodes used as features.
    #[arg(long, default_value_t = 80)]
    pub n: usize,
    #[command(flatten)]
    pub exp: ExperimentArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[command(flatten)]
    pub out: OutArg,
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Split file written by `train`; only its test apps are scored.
    /// Without it every corpus app is scored.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub corpus: SweepSource,
    #[command(flatten)]
    pub out: OutArg,
    /// Feature counts to evaluate.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "20,40,60,80,100,120,140,160,180,200"
    )]
    pub n_list: Vec<usize>,
    /// Classifiers to evaluate.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "tree,forest,nb-tree"
    )]
    pub kinds: Vec<KindArg>,
    #[command(flatten)]
    pub exp: ExperimentArgs,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct SweepSource {
    /// Extracted corpus directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Use the built-in synthetic benchmark, generated in memory.
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Records file written by `sweep`.
    #[arg(long)]
    pub records: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct SyntheticArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "smali")]
    pub format: FormatArg,
    /// Override the benign and malicious app count of every cohort.
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindArg {
    Tree,
    Forest,
    NbTree,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Tree => ModelKind::Tree,
            KindArg::Forest => ModelKind::Forest,
            KindArg::NbTree => ModelKind::NbTree,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatArg {
    Smali,
    Dex,
    Apk,
}

/// Bad flag values found after parsing; exits with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
