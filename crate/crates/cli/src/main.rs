mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use triphash::bqp::{certify_codes, infer_codes, CodeMatrix, SweepConfig, TripletSet};
use triphash::data::{
    feature_matrix, gen_multiclass_blobs, gen_multilabel, labels_of, load_codes, load_dataset, load_triplets,
    sample_triplets, save_codes, save_dataset, save_triplets, split_indices, LabeledPoint, Provenance, Similarity,
    Standardizer, TagCount,
};
use triphash::loss::{build_loss_table, decompose, reconstruct, LossTable, PrevContext, CANONICAL_PATTERNS};
use triphash::metrics::{
    evaluate_retrieval, evaluate_self_retrieval, similarity_precision, write_curve, CurvePoint, LabelRelevance,
    MetricsReport, PackedCodes, RetrievalScores,
};
use triphash::model::{
    incremental_train, predict_codes, Arch, GroupPlan, HashModel, IncrementalConfig, TrainConfig,
};
use triphash::loss::Hinge;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Contract(String),
    Core(triphash::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Contract(_) => 2,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Contract(m) => write!(f, "contract violation: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<triphash::Error> for CliError {
    fn from(e: triphash::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Triplet-supervised binary hashing.
#[derive(Parser, Debug)]
#[command(name = "triphash", version)]
struct Cli {
    /// Flat key=value settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its triplets.
    GenData(GenDataArgs),
    /// Infer binary codes from triplets.
    InferCodes(InferArgs),
    /// Train the hash model group by group.
    Train(TrainArgs),
    /// Compute retrieval metrics.
    Evaluate(EvalArgs),
    /// Print the pairwise decomposition of a per-bit loss table.
    InspectDecomposition(InspectArgs),
    /// Check that an objective log never increases within a bit.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Multiclass,
    Multilabel,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Multiclass => "multiclass",
            Mode::Multilabel => "multilabel",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <Mode as ValueEnum>::from_str(s, true)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    tags: Option<usize>,
    #[arg(long)]
    min_tags: Option<usize>,
    #[arg(long)]
    max_tags: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    triplets_per_anchor: Option<usize>,
    /// Hold out this fraction of points as a separate test set.
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    prefix: Option<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-bit objective trace as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Exhaustively check every block of every bit (blocks of at most 24 members).
    #[arg(long)]
    verify_brute_force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    group_len: Option<usize>,
    /// Hidden layer width; 0 selects the linear model.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    sweeps: Option<usize>,
    /// Standardize features with training-set statistics stored in the checkpoint.
    #[arg(long)]
    standardize: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    codes: Option<PathBuf>,
    /// Per-stage summary as CSV.
    #[arg(long)]
    stages: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint used to encode the gallery and probes.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Gallery codes, used instead of a model.
    #[arg(long)]
    codes: Option<PathBuf>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Probe set; without it every gallery item queries the rest.
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Test triplets over the probe set (or the gallery without probes).
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Only the top `depth` results count toward MAP.
    #[arg(long)]
    depth: Option<usize>,
    /// Comma-separated code lengths to evaluate on code prefixes.
    #[arg(long)]
    bits_sweep: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// One-based bit index of the hinge table.
    #[arg(long)]
    bit_index: Option<usize>,
    /// Distance gap accumulated over earlier bits.
    #[arg(long, allow_hyphen_values = true)]
    prev_gap: Option<i64>,
    /// Explicit table over (+,+,+), (+,+,-), (+,-,+), (+,-,-), comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    table: Option<String>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    log: Option<PathBuf>,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_comments<W: Write>(w: &mut W, prov: &Provenance) -> Result<()> {
    for (k, v) in &prov.0 {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

fn gen_data(args: GenDataArgs, cfg: &mut RunConfig) -> Result<()> {
    let mode = cfg.value("mode", args.mode, Mode::Multiclass)?;
    let dim = cfg.value("dim", args.dim, 16usize)?;
    let spread = cfg.value("spread", args.spread, 6.0f64)?;
    let per_anchor = cfg.value("triplets-per-anchor", args.triplets_per_anchor, 50usize)?;
    let test_fraction = cfg.value("test-fraction", args.test_fraction, 0.0f64)?;
    let seed = cfg.value("seed", args.seed, 0u64)?;
    let (points, oracle) = match mode {
        Mode::Multiclass => {
            let k = cfg.value("classes", args.classes, 3usize)?;
            let m = cfg.value("per-class", args.per_class, 20usize)?;
            (gen_multiclass_blobs(k, m, dim, spread, seed)?, Similarity::Multiclass)
        }
        Mode::Multilabel => {
            let n = cfg.value("points", args.points, 200usize)?;
            let tags = cfg.value("tags", args.tags, 8usize)?;
            let min = cfg.value("min-tags", args.min_tags, 1usize)?;
            let max = cfg.value("max-tags", args.max_tags, 3usize)?;
            (
                gen_multilabel(n, tags, TagCount { min, max }, dim, spread, seed)?,
                Similarity::Multilabel,
            )
        }
    };
    let out_dir = cfg.value("out-dir", args.out_dir.map(|p| p.display().to_string()), ".".to_string())?;
    let prefix = cfg.value("prefix", args.prefix, "data".to_string())?;
    let prov = cfg.provenance("gen-data");
    let out_dir = PathBuf::from(out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let emit = |name: String, pts: &[LabeledPoint], tseed: u64| -> Result<()> {
        let sampled = sample_triplets(&labels_of(pts), oracle, per_anchor, tseed)?;
        let data_path = out_dir.join(format!("{name}.jsonl"));
        let trip_path = out_dir.join(format!("{name}.triplets.csv"));
        save_dataset(&data_path, pts, &prov)?;
        save_triplets(&trip_path, &sampled.triplets, &prov)?;
        println!(
            "wrote {} ({} points) and {} ({} triplets, {} anchors skipped)",
            data_path.display(),
            pts.len(),
            trip_path.display(),
            sampled.triplets.len(),
            sampled.skipped
        );
        Ok(())
    };
    if test_fraction > 0.0 {
        let (train, test) = split_indices(points.len(), test_fraction, derive_seed(seed, 1))?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| points[i].clone()).collect::<Vec<_>>();
        emit(format!("{prefix}.train"), &pick(&train), derive_seed(seed, 2))?;
        emit(format!("{prefix}.test"), &pick(&test), derive_seed(seed, 3))?;
    } else {
        emit(prefix, &points, derive_seed(seed, 2))?;
    }
    Ok(())
}

fn infer(args: InferArgs, cfg: &mut RunConfig) -> Result<()> {
    let data = cfg.path("data", args.data)?;
    let trip = cfg.path("triplets", args.triplets)?;
    let bits = cfg.value("bits", args.bits, 16usize)?;
    let sweeps = cfg.value("sweeps", args.sweeps, SweepConfig::default().max_sweeps)?;
    let seed = cfg.value("seed", args.seed, 0u64)?;
    let out = cfg.path("out", args.out)?;
    let log_path = cfg.optional_path("log", args.log)?;
    let prov = cfg.provenance("infer-codes");

    let (points, _) = load_dataset(&data)?;
    let (triplets, _) = load_triplets(&trip, points.len())?;
    let (codes, summary) = infer_codes(&triplets, bits, &Hinge, &SweepConfig { max_sweeps: sweeps }, seed)?;
    save_codes(&out, &codes, &prov)?;
    println!("wrote {} ({} x {})", out.display(), codes.q(), codes.n());
    if let Some(path) = log_path {
        let mut w = create(&path)?;
        write_comments(&mut w, &prov)?;
        writeln!(w, "bit,step,objective")?;
        for s in &summary {
            for (step, obj) in s.trace.iter().enumerate() {
                writeln!(w, "{},{},{}", s.bit, step, obj)?;
            }
        }
        w.flush()?;
    }
    for s in &summary {
        log::info!(
            "bit {}: {} blocks, {} sweeps, objective {:.6} -> {:.6}{}",
            s.bit,
            s.blocks,
            s.sweeps,
            s.trace[0],
            s.trace[s.trace.len() - 1],
            if s.converged { "" } else { " (sweep cap reached)" }
        );
    }
    if args.verify_brute_force {
        let certs = certify_codes(&triplets, &codes, &Hinge, 24)?;
        let mut all = true;
        for (r, bit) in certs.iter().enumerate() {
            let ok = bit.iter().filter(|c| c.is_optimal()).count();
            all &= ok == bit.len();
            println!("bit {}: {ok}/{} blocks of at most 24 members optimal", r + 1, bit.len());
        }
        if !all {
            return Err(CliError::Contract("a block admits an improving reassignment".into()));
        }
        println!("certificate: every checked block is optimal given its exterior");
    }
    Ok(())
}

fn train_cmd(args: TrainArgs, cfg: &mut RunConfig) -> Result<()> {
    let data = cfg.path("data", args.data)?;
    let trip = cfg.path("triplets", args.triplets)?;
    let bits = cfg.value("bits", args.bits, 32usize)?;
    let group_len = cfg.value("group-len", args.group_len, 8usize)?;
    let hidden = cfg.value("hidden", args.hidden, 128usize)?;
    let d = TrainConfig::default();
    let train = TrainConfig {
        epochs: cfg.value("epochs", args.epochs, d.epochs)?,
        batch_size: cfg.value("batch-size", args.batch_size, d.batch_size)?,
        learning_rate: cfg.value("learning-rate", args.learning_rate, d.learning_rate)?,
        momentum: cfg.value("momentum", args.momentum, d.momentum)?,
        weight_decay: cfg.value("weight-decay", args.weight_decay, d.weight_decay)?,
        dropout: cfg.value("dropout", args.dropout, d.dropout)?,
        eps: cfg.value("eps", args.eps, d.eps)?,
        seed: 0,
    };
    let sweeps = cfg.value("sweeps", args.sweeps, SweepConfig::default().max_sweeps)?;
    let standardize = cfg.value("standardize", args.standardize, true)?;
    let seed = cfg.value("seed", args.seed, 0u64)?;
    let model_path = cfg.path("model", args.model)?;
    let codes_path = cfg.optional_path("codes", args.codes)?;
    let stages_path = cfg.optional_path("stages", args.stages)?;
    let prov = cfg.provenance("train");

    let (points, _) = load_dataset(&data)?;
    let (triplets, _) = load_triplets(&trip, points.len())?;
    let features = feature_matrix(&points)?;
    let arch = if hidden == 0 { Arch::Linear } else { Arch::Hidden { width: hidden } };
    let plan = GroupPlan::for_bits(bits, group_len)?;
    let icfg = IncrementalConfig {
        plan,
        train,
        arch,
        sweep: SweepConfig { max_sweeps: sweeps },
        seed,
    };
    let init = if standardize {
        Some(HashModel::new(features.d(), group_len, arch, derive_seed(seed, 4))?.with_input_norm(Standardizer::fit(&features))?)
    } else {
        None
    };
    let out = incremental_train(&features, &triplets, &icfg, init)?;

    println!("{:>5} {:>5} {:>12} {:>12} {:>12}", "stage", "bits", "first_loss", "final_loss", "bit_acc");
    for s in &out.stages {
        println!(
            "{:>5} {:>5} {:>12.4} {:>12.4} {:>12.4}",
            s.stage,
            s.bits,
            s.epoch_losses.first().copied().unwrap_or(f64::NAN),
            s.epoch_losses.last().copied().unwrap_or(f64::NAN),
            s.bit_accuracy
        );
    }
    let mut w = create(&model_path)?;
    out.model.save(&mut w, &prov.to_text())?;
    w.flush()?;
    println!("wrote {}", model_path.display());
    if let Some(path) = codes_path {
        save_codes(&path, &out.codes, &prov)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = stages_path {
        let mut w = create(&path)?;
        write_comments(&mut w, &prov)?;
        writeln!(w, "stage,bits,epoch,loss")?;
        for s in &out.stages {
            for (e, l) in s.epoch_losses.iter().enumerate() {
                writeln!(w, "{},{},{},{}", s.stage, s.bits, e + 1, l)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

struct EvalSet {
    gallery: CodeMatrix,
    probes: Option<CodeMatrix>,
    gallery_labels: Vec<Vec<u32>>,
    probe_labels: Option<Vec<Vec<u32>>>,
    triplets: Option<TripletSet>,
}

impl EvalSet {
    fn at_bits(&self, bits: usize, k: usize, depth: Option<usize>) -> Result<(RetrievalScores, Option<f64>)> {
        let gallery = self.gallery.prefix(bits);
        let retrieval = match (&self.probes, &self.probe_labels) {
            (Some(p), Some(pl)) => evaluate_retrieval(
                &PackedCodes::from_matrix(&p.prefix(bits)),
                &PackedCodes::from_matrix(&gallery),
                &LabelRelevance {
                    probes: pl,
                    gallery: &self.gallery_labels,
                },
                k,
                depth,
            )?,
            _ => evaluate_self_retrieval(
                &PackedCodes::from_matrix(&gallery),
                &LabelRelevance {
                    probes: &self.gallery_labels,
                    gallery: &self.gallery_labels,
                },
                k,
                depth,
            )?,
        };
        let sp = match &self.triplets {
            Some(t) => {
                let codes = self.probes.as_ref().unwrap_or(&self.gallery).prefix(bits);
                Some(similarity_precision(&codes, t)?)
            }
            None => None,
        };
        Ok((retrieval, sp))
    }
}

fn parse_sweep(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&b| b > 0)
                .ok_or_else(|| CliError::Validation(format!("bad bit count `{t}` in sweep")))
        })
        .collect()
}

fn evaluate(args: EvalArgs, cfg: &mut RunConfig) -> Result<()> {
    let model_path = cfg.optional_path("model", args.model)?;
    let codes_path = cfg.optional_path("codes", args.codes)?;
    let gallery_path = cfg.path("gallery", args.gallery)?;
    let probes_path = cfg.optional_path("probes", args.probes)?;
    let trip_path = cfg.optional_path("triplets", args.triplets)?;
    let k = cfg.value("k", args.k, 10usize)?;
    let depth = cfg.optional("depth", args.depth)?;
    let sweep = cfg.optional("bits-sweep", args.bits_sweep)?;
    let out = cfg.path("out", args.out)?;
    let curve_path = cfg.optional_path("curve", args.curve)?;
    let prov = cfg.provenance("evaluate");

    let (gallery_pts, _) = load_dataset(&gallery_path)?;
    let probe_pts = probes_path.as_deref().map(load_dataset).transpose()?.map(|p| p.0);
    let (gallery, probes) = match (&model_path, &codes_path) {
        (Some(m), None) => {
            let (model, _) = HashModel::load(File::open(m)?)?;
            let g = predict_codes(&model, &feature_matrix(&gallery_pts)?)?;
            let p = probe_pts
                .as_deref()
                .map(|p| feature_matrix(p).and_then(|f| predict_codes(&model, &f)))
                .transpose()?;
            (g, p)
        }
        (None, Some(c)) => {
            if probe_pts.is_some() {
                return Err(CliError::Validation("--probes needs --model to encode them".into()));
            }
            let (codes, _) = load_codes(c)?;
            if codes.n() != gallery_pts.len() {
                return Err(CliError::Validation(format!(
                    "codes cover {} points but the gallery has {}",
                    codes.n(),
                    gallery_pts.len()
                )));
            }
            (codes, None)
        }
        _ => return Err(CliError::Validation("give exactly one of --model and --codes".into())),
    };
    let triplet_n = probe_pts.as_ref().map_or(gallery_pts.len(), Vec::len);
    let triplets = trip_path.map(|p| load_triplets(&p, triplet_n).map(|t| t.0)).transpose()?;
    let set = EvalSet {
        gallery,
        probes,
        gallery_labels: labels_of(&gallery_pts),
        probe_labels: probe_pts.as_deref().map(labels_of),
        triplets,
    };
    let bits = set.gallery.q();
    let (retrieval, sp) = set.at_bits(bits, k, depth)?;
    println!(
        "bits {bits}: MAP {:.4}, precision@{k} {:.4} over {} probes ({} skipped)",
        retrieval.map, retrieval.precision_at_k, retrieval.probes, retrieval.skipped
    );
    if let Some(sp) = sp {
        println!("similarity precision {sp:.4}");
    }
    let mut curve = Vec::new();
    if let Some(raw) = sweep {
        for b in parse_sweep(&raw)? {
            if b > bits {
                return Err(CliError::Validation(format!("sweep asks for {b} bits, codes have {bits}")));
            }
            let (r, sp) = set.at_bits(b, k, depth)?;
            curve.push(CurvePoint { bits: b, metric: "map".into(), value: r.map });
            curve.push(CurvePoint {
                bits: b,
                metric: format!("precision_at_{k}"),
                value: r.precision_at_k,
            });
            if let Some(sp) = sp {
                curve.push(CurvePoint {
                    bits: b,
                    metric: "similarity_precision".into(),
                    value: sp,
                });
            }
        }
    }
    let report = MetricsReport {
        provenance: prov.0.clone(),
        bits,
        retrieval: Some(retrieval),
        similarity_precision: sp,
        curve: curve.clone(),
    };
    let mut w = create(&out)?;
    writeln!(w, "{}", report.to_json()?)?;
    w.flush()?;
    println!("wrote {}", out.display());
    if let Some(path) = curve_path {
        let mut w = create(&path)?;
        write_comments(&mut w, &prov)?;
        write_curve(&mut w, &curve)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Renders `v` as a short dyadic fraction when it is one.
fn fraction(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    for shift in 0..=10 {
        let den = (1u64 << shift) as f64;
        let num = v * den;
        if num == num.round() && num.abs() < 1e6 {
            return if shift == 0 {
                format!("{num}")
            } else {
                format!("{num}/{den}")
            };
        }
    }
    format!("{v}")
}

fn inspect(args: InspectArgs, cfg: &mut RunConfig) -> Result<()> {
    let explicit = cfg.optional("table", args.table)?;
    let table = match explicit {
        Some(raw) => {
            let vals: Vec<f64> = raw
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CliError::Validation(format!("table: {e}")))?;
            let arr: [f64; 4] = vals
                .try_into()
                .map_err(|_| CliError::Validation("table needs exactly 4 values".into()))?;
            LossTable::new(arr)?
        }
        None => {
            let r = cfg.value("bit-index", args.bit_index, 1usize)?;
            let g = cfg.value("prev-gap", args.prev_gap, 0i64)?;
            build_loss_table(&PrevContext::from_gap(r, g)?)
        }
    };
    let alpha = decompose(&table);
    let sign = |b: i8| if b > 0 { '+' } else { '-' };
    println!("loss table:");
    for (p, v) in CANONICAL_PATTERNS.iter().zip(table.values()) {
        println!("  ({},{},{})  {}", sign(p[0]), sign(p[1]), sign(p[2]), fraction(v));
    }
    let [ii, ij, ik, jk] = alpha.as_array();
    println!(
        "alpha: ii={} ij={} ik={} jk={}",
        fraction(ii),
        fraction(ij),
        fraction(ik),
        fraction(jk)
    );
    let mut worst: f64 = 0.0;
    println!("reconstruction:");
    for mask in 0..8u8 {
        let b: [i8; 3] = std::array::from_fn(|x| if mask >> (2 - x) & 1 == 1 { -1 } else { 1 });
        let rec = reconstruct(&alpha, b);
        let err = (rec - table.value(b)).abs();
        worst = worst.max(err);
        println!("  ({},{},{})  {}  error {err:.1e}", sign(b[0]), sign(b[1]), sign(b[2]), fraction(rec));
    }
    println!("max reconstruction error {worst:.1e}");
    Ok(())
}

fn verify(args: VerifyArgs, cfg: &mut RunConfig) -> Result<()> {
    let path = cfg.path("log", args.log)?;
    let text = std::fs::read_to_string(&path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("bit,step,objective") {
        return Err(CliError::Validation("objective log must have header bit,step,objective".into()));
    }
    let mut prev: Option<(usize, f64)> = None;
    let mut bits = 0;
    let mut rows = 0;
    for (n, line) in lines.enumerate() {
        let bad = || CliError::Validation(format!("objective log row {}: `{line}`", n + 1));
        let mut parts = line.split(',');
        let bit: usize = parts.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let _step: usize = parts.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let obj: f64 = parts.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        match prev {
            Some((b, last)) if b == bit => {
                if obj > last + 1e-9 * (1.0 + last.abs()) {
                    return Err(CliError::Contract(format!("bit {bit}: objective rose from {last} to {obj}")));
                }
            }
            _ => bits += 1,
        }
        prev = Some((bit, obj));
        rows += 1;
    }
    println!("ok: {rows} entries over {bits} bits, non-increasing within every bit");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(t) = cfg.optional("threads", cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a, &mut cfg),
        Command::InferCodes(a) => infer(a, &mut cfg),
        Command::Train(a) => train_cmd(a, &mut cfg),
        Command::Evaluate(a) => evaluate(a, &mut cfg),
        Command::InspectDecomposition(a) => inspect(a, &mut cfg),
        Command::Verify(a) => verify(a, &mut cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
