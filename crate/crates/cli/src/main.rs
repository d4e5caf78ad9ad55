use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use owr_core::annotate::{oracle_annotate, truth_by_id, OracleConfig};
use owr_core::classify::{fit, ClassifierKind, ClassifierSpec, FittedClassifier};
use owr_core::discover::{
    discover_categories, estimate_class_count, ss_kmeans_pp, EstimationConfig, PartitionFile, SsKmeansConfig,
};
use owr_core::exemplar::{select_exemplars, Ds3Config, ExemplarBuffer};
use owr_core::ingest::{generate_blobs, read_archive, read_archive_with_header, write_archive, write_archive_with, BlobSpec, Dtype};
use owr_core::metrics::{self, MetricReport, SilhouetteMode};
use owr_core::osr::{calibrate_alpha, decade_grid, predict_open_set, OsrConfig};
use owr_core::pipeline::{
    run_experiment_with, run_sweep, ExperimentPlan, ExperimentReport, PlanData, SweepAxis, SyntheticPlanSpec, Variant,
};
use owr_core::{ClassId, ClassRegistry, FeatureSet, Rng, UNKNOWN};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "owr", version, about = "Open-world recognition on precomputed features")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every phase of a plan for each seed and write report.json.
    Run(RunArgs),
    /// Repeat a plan across values of one parameter and write a CSV.
    Sweep(SweepArgs),
    /// Generate a synthetic blob plan with its archives.
    Synth(SynthArgs),
    #[command(subcommand)]
    Ingest(IngestCmd),
    #[command(subcommand)]
    Exemplar(ExemplarCmd),
    #[command(subcommand)]
    Classify(ClassifyCmd),
    #[command(subcommand)]
    Osr(OsrCmd),
    #[command(subcommand)]
    Discover(DiscoverCmd),
    #[command(subcommand)]
    Metrics(MetricsCmd),
    #[command(subcommand)]
    Annotate(AnnotateCmd),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Use seeds 0..N instead of the plan's list.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Fixed alpha; skips calibration.
    #[arg(long)]
    alpha: Option<f64>,
    /// Recalibrate alpha at every phase.
    #[arg(long)]
    recalibrate_alpha: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    OwrUe,
    IlE,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::OwrUe => Variant::OwrUe,
            VariantArg::IlE => Variant::IlE,
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    plan: PathBuf,
    /// capacity or alpha.
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    initial: usize,
    #[arg(long, default_value_t = 2)]
    step: usize,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 40)]
    test_per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    sep: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 200)]
    capacity: usize,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Subcommand)]
enum IngestCmd {
    /// Write labeled Gaussian blobs to an archive.
    GenBlobs {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        sep: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
    /// Print an archive's header and class counts.
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum ExemplarCmd {
    /// Pick representative rows per class into a fixed-size buffer.
    Select {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        capacity: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda_frac: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct ClassifierArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Linear)]
    kind: KindArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    classifier_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Linear,
    Ncm,
}

impl ClassifierArgs {
    fn spec(&self) -> ClassifierSpec {
        let kind = match self.kind {
            KindArg::Linear => ClassifierKind::LinearSoftmax,
            KindArg::Ncm => ClassifierKind::NearestClassMean,
        };
        ClassifierSpec {
            kind,
            temperature: self.temperature,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.classifier_seed,
            ..ClassifierSpec::default()
        }
    }
}

#[derive(Subcommand)]
enum ClassifyCmd {
    /// Fit a closed-set classifier on a buffer archive.
    Fit {
        #[arg(long)]
        buffer: PathBuf,
        #[command(flatten)]
        classifier: ClassifierArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `{id: class}` predictions as JSON.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum OsrCmd {
    /// Split rows into accepted and rejected archives.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out_known: PathBuf,
        #[arg(long)]
        out_rejected: PathBuf,
        /// Also write `{id: decision}` with 0 for rejected rows.
        #[arg(long)]
        decisions: Option<PathBuf>,
    },
    /// Pick alpha on a buffer with held-out pseudo-unknown classes.
    Calibrate {
        #[arg(long)]
        buffer: PathBuf,
        /// Exponent range `lo:hi` of the decade grid.
        #[arg(long, default_value = "-10:10", allow_hyphen_values = true)]
        grid_decades: String,
        #[command(flatten)]
        classifier: ClassifierArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    buffer: PathBuf,
    #[arg(long)]
    rejected: PathBuf,
    #[arg(long, default_value_t = 500)]
    kmax: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the unnormalized silhouette sum in the score.
    #[arg(long)]
    sc_sum: bool,
    #[arg(long, default_value_t = 20)]
    max_evals: usize,
}

impl EstimateArgs {
    fn config(&self) -> EstimationConfig {
        EstimationConfig {
            k_max: self.kmax,
            max_evals: self.max_evals,
            seed: self.seed,
            silhouette: if self.sc_sum { SilhouetteMode::Sum } else { SilhouetteMode::Mean },
            kmeans: self.kmeans(),
        }
    }

    fn kmeans(&self) -> SsKmeansConfig {
        SsKmeansConfig { seed: self.seed, ..SsKmeansConfig::default() }
    }
}

#[derive(Subcommand)]
enum DiscoverCmd {
    /// Estimate the total number of classes and print the search as JSON.
    Estimate(EstimateArgs),
    /// Cluster rejected rows and write a partition file.
    Run {
        #[command(flatten)]
        est: EstimateArgs,
        /// Cluster count, or `auto` to estimate it.
        #[arg(long, default_value = "auto")]
        k: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricKind {
    Acc,
    Hna,
    Hca,
    Sc,
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Score predictions against a labeled archive and print a JSON report.
    Report {
        #[arg(long)]
        truth: PathBuf,
        /// Labeled archive or `{id: label}` JSON.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_delimiter = ',')]
        known_classes: Vec<ClassId>,
        #[arg(long, value_enum)]
        kind: MetricKind,
    },
}

#[derive(Subcommand)]
enum AnnotateCmd {
    /// Label a partition with ground truth, optionally with noise.
    Oracle {
        /// Partition JSON or cluster-labeled archive.
        #[arg(long)]
        zhat: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Known classes; defaults to the partition file's known set.
        #[arg(long, value_delimiter = ',')]
        known: Vec<ClassId>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the review API, opening one session on the given partition.
    Serve {
        #[arg(long)]
        partition: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "annotations")]
        out_dir: PathBuf,
        /// Directory holding the review UI bundle.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    if let Ok(n) = std::env::var("OWR_THREADS") {
        let n: usize = n.parse().context("OWR_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match Cli::parse().cmd {
        Cmd::Run(a) => run(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Ingest(c) => ingest(c),
        Cmd::Exemplar(c) => exemplar(c),
        Cmd::Classify(c) => classify(c),
        Cmd::Osr(c) => osr(c),
        Cmd::Discover(c) => discover(c),
        Cmd::Metrics(c) => metrics_cmd(c),
        Cmd::Annotate(c) => annotate(c),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_plan(path: &Path, seeds: Option<u64>) -> Result<(ExperimentPlan, PlanData)> {
    let mut plan = ExperimentPlan::load(path).with_context(|| format!("reading plan {}", path.display()))?;
    if let Some(n) = seeds {
        if n == 0 {
            bail!("--seeds must be positive");
        }
        plan.seeds = (0..n).collect();
    }
    let data = PlanData::load(&plan)?;
    Ok((plan, data))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn summarize(report: &ExperimentReport) {
    println!("phase  acc     acc_ts1  hna     hca     k_est");
    for a in &report.aggregate {
        let m = |s: &Option<owr_core::pipeline::Stat>| fmt_opt(s.as_ref().map(|s| s.mean));
        println!(
            "{:<6} {:<7} {:<8} {:<7} {:<7} {}",
            a.phase,
            m(&a.acc),
            m(&a.acc_first_test),
            m(&a.hna),
            m(&a.hca),
            m(&a.estimated_k)
        );
    }
}

fn run(a: RunArgs) -> Result<()> {
    let (mut plan, data) = load_plan(&a.plan, a.seeds)?;
    if let Some(v) = a.variant {
        plan.variant = v.into();
    }
    if a.alpha.is_some() {
        plan.alpha = a.alpha;
    }
    plan.recalibrate_alpha |= a.recalibrate_alpha;
    plan.validate()?;
    let report = run_experiment_with(&plan, &data)?;
    fs::create_dir_all(&a.out_dir)?;
    let path = a.out_dir.join("report.json");
    fs::write(&path, report.to_json()?)?;
    summarize(&report);
    println!("report: {}", path.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (plan, data) = load_plan(&a.plan, a.seeds)?;
    let table = run_sweep(&plan, &data, a.axis, &a.values)?;
    table.write_csv(&a.out)?;
    println!("value        final_acc  mean_hna  mean_hca");
    for s in &table.summary {
        println!("{:<12} {:<10} {:<9} {}", s.value, fmt_opt(s.final_acc), fmt_opt(s.mean_hna), fmt_opt(s.mean_hca));
    }
    println!("table: {}", a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticPlanSpec {
        initial: a.initial,
        step: a.step,
        steps: a.steps,
        dim: a.dim,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        centroid_scale: a.sep,
        noise_sigma: a.sigma,
        data_seed: a.data_seed,
        capacity: a.capacity,
        seeds: (0..a.seeds).collect(),
        ..SyntheticPlanSpec::default()
    };
    spec.write(&a.out_dir)?;
    println!("plan: {}", a.out_dir.join("plan.json").display());
    Ok(())
}

fn ingest(c: IngestCmd) -> Result<()> {
    match c {
        IngestCmd::GenBlobs { classes, dim, per_class, sep, sigma, seed, out, dtype } => {
            let spec = BlobSpec { num_classes: classes, dim, per_class, centroid_scale: sep, noise_sigma: sigma, seed };
            let fs = generate_blobs(&spec)?;
            let dtype = match dtype {
                DtypeArg::F32 => Dtype::F32,
                DtypeArg::F64 => Dtype::F64,
            };
            write_archive_with(&fs, &out, dtype, None, spec.metadata())?;
            println!("wrote {} rows to {}", fs.len(), out.display());
        }
        IngestCmd::Inspect { path } => {
            let (fs, header) = read_archive_with_header(&path)?;
            let counts: BTreeMap<ClassId, usize> =
                fs.class_indices().into_iter().map(|(c, rows)| (c, rows.len())).collect();
            print_json(&serde_json::json!({ "header": header, "class_counts": counts }))?;
        }
    }
    Ok(())
}

fn exemplar(c: ExemplarCmd) -> Result<()> {
    let ExemplarCmd::Select { input, capacity, lambda_frac, out } = c;
    let fs = read_archive(&input)?;
    let classes = fs.classes();
    let registry = ClassRegistry::new(classes.iter().copied(), usize::MAX)?;
    let cfg = Ds3Config { lambda_frac, ..Ds3Config::default() };
    let buffer = select_exemplars(&fs, &registry, capacity, &cfg)?;
    buffer.write(&out)?;
    let sidecar = out.with_extension("json");
    fs::write(&sidecar, serde_json::to_vec_pretty(&buffer.sidecar())?)?;
    println!("selected {} of {} rows; sidecar {}", buffer.len(), fs.len(), sidecar.display());
    Ok(())
}

fn by_id(fs: &FeatureSet, labels: &[ClassId]) -> BTreeMap<String, ClassId> {
    fs.ids().iter().map(|id| id.to_string()).zip(labels.iter().copied()).collect()
}

fn classify(c: ClassifyCmd) -> Result<()> {
    match c {
        ClassifyCmd::Fit { buffer, classifier, out } => {
            let buffer = ExemplarBuffer::read(&buffer)?;
            let model = fit(&buffer, &classifier.spec())?;
            model.save(&out)?;
            println!("fitted {} classes to {}", model.num_classes(), out.display());
        }
        ClassifyCmd::Predict { model, input, out } => {
            let model = FittedClassifier::load(&model)?;
            let fs = read_archive(&input)?;
            let pred = model.predict(&fs)?;
            fs::write(&out, serde_json::to_vec_pretty(&by_id(&fs, &pred))?)?;
        }
    }
    Ok(())
}

fn parse_decades(s: &str) -> Result<Vec<f64>> {
    let (lo, hi) = s.split_once(':').context("grid must look like lo:hi")?;
    let (lo, hi): (i32, i32) = (lo.trim().parse()?, hi.trim().parse()?);
    if lo > hi {
        bail!("empty grid {s}");
    }
    Ok(decade_grid(lo, hi))
}

fn osr(c: OsrCmd) -> Result<()> {
    match c {
        OsrCmd::Predict { model, input, alpha, out_known, out_rejected, decisions } => {
            let model = FittedClassifier::load(&model)?;
            let fs = read_archive(&input)?;
            let out = predict_open_set(&model, &fs, alpha)?;
            let accepted: Vec<usize> = (0..fs.len()).filter(|i| !out.rejected_rows.contains(i)).collect();
            write_archive(&fs.select(&accepted), &out_known, Dtype::F64)?;
            write_archive(&out.rejected, &out_rejected, Dtype::F64)?;
            if let Some(path) = decisions {
                fs::write(path, serde_json::to_vec_pretty(&by_id(&fs, &out.decisions()))?)?;
            }
            println!("accepted {}, rejected {}", accepted.len(), out.rejected.len());
        }
        OsrCmd::Calibrate { buffer, grid_decades, classifier, seed } => {
            let buffer = ExemplarBuffer::read(&buffer)?;
            let cfg = OsrConfig { grid: parse_decades(&grid_decades)?, ..OsrConfig::default() };
            let cal = calibrate_alpha(&buffer, &classifier.spec(), &cfg, &mut Rng::new(seed))?;
            print_json(&cal)?;
        }
    }
    Ok(())
}

fn discover(c: DiscoverCmd) -> Result<()> {
    match c {
        DiscoverCmd::Estimate(a) => {
            let buffer = ExemplarBuffer::read(&a.buffer)?;
            let rejected = read_archive(&a.rejected)?;
            let est = estimate_class_count(&buffer, &rejected, &a.config(), &mut Rng::new(a.seed))?;
            print_json(&est)?;
        }
        DiscoverCmd::Run { est, k, out } => {
            let buffer = ExemplarBuffer::read(&est.buffer)?;
            let rejected = read_archive(&est.rejected)?;
            let features = fs::canonicalize(&est.rejected)?;
            let centroids = out.with_extension("centroids.owr");
            let pf = if k == "auto" {
                let d = discover_categories(&buffer, &rejected, &est.config(), &est.kmeans(), &mut Rng::new(est.seed))?;
                PartitionFile::from_discovery(&d, &rejected, &features, &centroids)?
            } else {
                let k: usize = k.parse().context("--k must be an integer or auto")?;
                let cfg = SsKmeansConfig { k, ..est.kmeans() };
                let res = ss_kmeans_pp(buffer.entries(), &rejected.clone().without_labels(), &cfg)?;
                PartitionFile::from_clustering(&res, &rejected, &features, &centroids)?
            };
            let mut stored = pf.clone();
            if let Some(name) = centroids.file_name() {
                stored.centroids = PathBuf::from(name);
            }
            stored.save(&out)?;
            println!("k = {}, novel clusters {:?}; partition {}", pf.k, pf.novel, out.display());
        }
    }
    Ok(())
}

/// Predicted label per truth row, from a labeled archive or `{id: label}` JSON.
fn read_predictions(path: &Path, truth: &FeatureSet) -> Result<Vec<ClassId>> {
    let map: BTreeMap<u64, ClassId> = if path.extension().is_some_and(|e| e == "json") {
        let raw: BTreeMap<String, ClassId> = serde_json::from_slice(&fs::read(path)?)?;
        raw.into_iter().map(|(k, v)| Ok((k.parse()?, v))).collect::<Result<_>>()?
    } else {
        truth_by_id(&read_archive(path)?)?
    };
    truth
        .ids()
        .iter()
        .map(|id| map.get(id).copied().with_context(|| format!("no prediction for id {id}")))
        .collect()
}

fn metrics_cmd(c: MetricsCmd) -> Result<()> {
    let MetricsCmd::Report { truth, pred, known_classes, kind } = c;
    let truth = read_archive(&truth)?;
    let labels = truth.require_labels()?.to_vec();
    let pred = read_predictions(&pred, &truth)?;
    let known: BTreeSet<ClassId> = known_classes.into_iter().collect();
    let report = match kind {
        MetricKind::Acc => MetricReport { acc: Some(metrics::classification_accuracy(&labels, &pred)?), ..Default::default() },
        MetricKind::Hna => {
            let marked: Vec<ClassId> = labels.iter().map(|l| if known.contains(l) { *l } else { UNKNOWN }).collect();
            metrics::hna(&marked, &pred)?
        }
        MetricKind::Hca => metrics::hca(&labels, &pred, &known)?,
        MetricKind::Sc => MetricReport { sc: Some(metrics::silhouette(&truth, &pred)?), ..Default::default() },
    };
    print_json(&report)
}

fn annotate(c: AnnotateCmd) -> Result<()> {
    match c {
        AnnotateCmd::Oracle { zhat, truth, noise, seed, known, out } => {
            let (zhat, file_known) = if zhat.extension().is_some_and(|e| e == "json") {
                let pf = PartitionFile::load(&zhat)?;
                (pf.zhat()?, pf.known)
            } else {
                (read_archive(&zhat)?, BTreeSet::new())
            };
            let known = if known.is_empty() { file_known } else { known.into_iter().collect() };
            let truth = truth_by_id(&read_archive(&truth)?)?;
            let z = oracle_annotate(&zhat, &truth, &known, &OracleConfig { noise_rate: noise, seed })?;
            write_archive(&z, &out, Dtype::F64)?;
            println!("kept {} of {} rows, classes {:?}", z.len(), zhat.len(), z.classes());
        }
        AnnotateCmd::Serve { partition, port, host, out_dir, static_dir } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let state = owr_server::AppState::new(out_dir);
                let id = state.open(&partition, None).await.map_err(|e| anyhow::anyhow!("{e:?}"))?;
                println!("session {id} open at http://{addr}/api/v1/sessions/{id}");
                let app = match static_dir {
                    Some(dir) => owr_server::router_with_static(state, &dir),
                    None => owr_server::router(state),
                };
                owr_server::serve(app, addr).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
