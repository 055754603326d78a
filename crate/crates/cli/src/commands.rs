//! One function per subcommand.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, ValueEnum};
use ndarray::{Array1, Array2, Axis};
use serde::Serialize;
use serde_json::json;

use stprot::checkpoint::{load_checkpoint, save_checkpoint};
use stprot::cluster::{assign, fit_gmm};
use stprot::dataset::{load_dataset, read_coords, read_labels, read_matrix, write_coords, write_labels, write_matrix_csv, SpatialOmicsDataset};
use stprot::metrics::{clustering_scores, evaluate, rmse, EvalReport};
use stprot::optim::{build_graph, predict_embedding, train_with_observer, TrainConfig};
use stprot::preprocess::{apply_protein_pipeline, clr_protein, invert_protein_pipeline, preprocess_training_pair, TransformKind};
use stprot::synth::{generate, SynthConfig};
use stprot::{Checkpoint, Pipeline, Processed};

use crate::config::{seed_or_env, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_dir, Recorder};
use crate::svg::{scatter, Coloring};

/// Paths of one spatial dataset.
#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Spot × gene RNA counts (CSV, or MatrixMarket `.mtx` with `.rows.txt`/`.cols.txt` sidecars).
    #[arg(long)]
    pub rna: PathBuf,
    /// `spot_id,x,y` CSV; fixes the spot order.
    #[arg(long)]
    pub coords: PathBuf,
    /// Spot × protein counts, same formats as `--rna`.
    #[arg(long)]
    pub protein: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, rec: &mut Recorder) -> CliResult<SpatialOmicsDataset> {
        rec.input(&self.rna);
        rec.input(&self.coords);
        if let Some(p) = &self.protein {
            rec.input(p);
        }
        Ok(load_dataset(&self.rna, &self.coords, self.protein.as_deref())?)
    }

    /// Loads a dataset that must carry protein measurements.
    fn load_paired(&self, rec: &mut Recorder) -> CliResult<SpatialOmicsDataset> {
        if self.protein.is_none() {
            return Err(stprot::Error::ProteinMissing.into());
        }
        self.load(rec)
    }
}

fn pc_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("PC{i}")).collect()
}

fn write_matrix(rec: &mut Recorder, path: PathBuf, rows: &[String], cols: &[String], values: &Array2<f64>) -> CliResult<()> {
    write_matrix_csv(&path, "spot_id", rows, cols, values)?;
    rec.output(&path);
    Ok(())
}

fn write_text(rec: &mut Recorder, path: PathBuf, text: &str) -> CliResult<()> {
    stprot::checkpoint::write_atomic(&path, text.as_bytes())?;
    rec.output(&path);
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

// ---------------------------------------------------------------- preprocess

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Highly variable genes kept before PCA.
    #[arg(long, default_value_t = stprot::preprocess::DEFAULT_N_HVG)]
    pub n_hvg: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// A fitted pipeline in plain JSON form.
#[derive(Serialize)]
struct PipelineJson<'a> {
    transform_kind: TransformKind,
    selected_names: &'a [String],
    library_size: f64,
    per_spot_scale: &'a [f64],
    pca_mean: Vec<f64>,
    pca_components: Vec<Vec<f64>>,
    explained_variance: Vec<f64>,
}

impl<'a> PipelineJson<'a> {
    fn new(p: &'a Pipeline) -> Self {
        Self {
            transform_kind: p.transform_kind,
            selected_names: &p.selected_names,
            library_size: p.library_size,
            per_spot_scale: &p.per_spot_scale,
            pca_mean: p.pca_mean.to_vec(),
            pca_components: p.pca_components.rows().into_iter().map(|r| r.to_vec()).collect(),
            explained_variance: p.explained_variance.to_vec(),
        }
    }
}

pub fn preprocess(args: &PreprocessArgs) -> CliResult<()> {
    let mut rec = Recorder::start("preprocess");
    let ds = args.data.load_paired(&mut rec)?;
    let processed: Processed = preprocess_training_pair(&ds, args.n_hvg)?;
    ensure_dir(&args.out)?;
    let p = processed.x.ncols();
    let y = processed.y.as_ref().expect("paired preprocessing yields y");
    write_matrix(&mut rec, args.out.join("x.csv"), &ds.spot_ids, &pc_names(p), &processed.x)?;
    write_matrix(&mut rec, args.out.join("y.csv"), &ds.spot_ids, &pc_names(p), y)?;
    let rna = serde_json::to_string_pretty(&PipelineJson::new(&processed.rna_pipeline)).expect("pipeline serializes");
    write_text(&mut rec, args.out.join("rna_pipeline.json"), &rna)?;
    let protein_pipeline = processed.protein_pipeline.as_ref().expect("paired preprocessing yields a protein pipeline");
    let protein = serde_json::to_string_pretty(&PipelineJson::new(protein_pipeline)).expect("pipeline serializes");
    write_text(&mut rec, args.out.join("protein_pipeline.json"), &protein)?;
    eprintln!(
        "{} spots: {} genes -> {} HVGs -> {p} components; {p} proteins",
        ds.n_spots(),
        ds.n_genes(),
        processed.rna_pipeline.selected_names.len()
    );
    rec.finish(&args.out, json!({ "n_hvg": args.n_hvg }), None)
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainCmdArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "model.stpk";

pub fn train(args: &TrainCmdArgs) -> CliResult<()> {
    let mut rec = Recorder::start("train");
    let cfg = args.train.resolve()?;
    if let Some(c) = &args.train.config {
        rec.input(c);
    }
    let ds = args.data.load_paired(&mut rec)?;
    let processed: Processed = preprocess_training_pair(&ds, cfg.n_hvg)?;
    let y = processed.y.as_ref().expect("paired preprocessing yields y");
    let graph = build_graph(&cfg, processed.x.view(), ds.coords.view())?;
    let log_every = cfg.log_every;
    let (params, log) = train_with_observer(processed.x.view(), y.view(), &graph, &cfg, |epoch, _, losses| {
        if log_every > 0 && (epoch % log_every == 0 || epoch == 1) {
            eprintln!(
                "epoch {epoch:>6}  total {:.6e}  rna {:.6e}  protein {:.6e}",
                losses.total, losses.l_rna, losses.l_protein
            );
        }
    })?;
    ensure_dir(&args.out)?;
    let ckpt = Checkpoint {
        params,
        config: cfg.clone(),
        rna_pipeline: processed.rna_pipeline,
        protein_pipeline: processed.protein_pipeline.expect("paired preprocessing yields a protein pipeline"),
    };
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &ckpt_path)?;
    rec.output(&ckpt_path);
    write_text(&mut rec, args.out.join("train_log.csv"), &log.to_csv())?;
    if let Some(last) = log.records.last() {
        eprintln!(
            "trained {} epochs on {} spots ({} edges): final total loss {:.6e}",
            last.epoch,
            ds.n_spots(),
            graph.edges.len(),
            last.total
        );
    }
    rec.finish(&args.out, to_json(&cfg), Some(cfg.seed))
}

// ---------------------------------------------------------------- predict

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Spot × gene RNA counts of the spots to predict.
    #[arg(long)]
    pub rna: PathBuf,
    #[arg(long)]
    pub coords: PathBuf,
    /// Also write the PCA-space prediction (`protein_pca.csv`).
    #[arg(long)]
    pub pca: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    let mut rec = Recorder::start("predict");
    rec.input(&args.checkpoint);
    rec.input(&args.rna);
    rec.input(&args.coords);
    let ckpt: Checkpoint = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.rna, &args.coords, None)?;
    let z = predict_embedding(&ckpt.params, &ckpt.rna_pipeline, &ds, &ckpt.config)?;
    let clr = invert_protein_pipeline(&ckpt.protein_pipeline, z.view())?;
    ensure_dir(&args.out)?;
    write_matrix(&mut rec, args.out.join("protein_clr.csv"), &ds.spot_ids, &ckpt.protein_pipeline.selected_names, &clr)?;
    if args.pca {
        write_matrix(&mut rec, args.out.join("protein_pca.csv"), &ds.spot_ids, &pc_names(z.ncols()), &z)?;
    }
    rec.finish(&args.out, json!({ "pca": args.pca, "train_config": to_json(&ckpt.config) }), Some(ckpt.config.seed))
}

// ---------------------------------------------------------------- cluster

#[derive(Args, Debug)]
pub struct ClusterArgs {
    /// Spot × feature CSV, e.g. `protein_pca.csv` from `predict`.
    #[arg(long)]
    pub embedding: PathBuf,
    /// Number of clusters.
    #[arg(long)]
    pub k: Option<usize>,
    /// `spot_id,label` CSV; its number of distinct labels sets K when `--k` is absent.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Falls back to `STPROT_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn distinct<T: Eq + std::hash::Hash>(items: &[T]) -> usize {
    items.iter().collect::<std::collections::HashSet<_>>().len()
}

pub fn cluster(args: &ClusterArgs) -> CliResult<()> {
    let mut rec = Recorder::start("cluster");
    let seed = seed_or_env(args.seed)?;
    let k = match (args.k, &args.truth) {
        (Some(k), _) => k,
        (None, Some(path)) => {
            rec.input(path);
            distinct(&read_labels(path)?.1)
        }
        (None, None) => return Err(CliError::Usage("give --k, or --truth to infer K from its labels".into())),
    };
    rec.input(&args.embedding);
    let table = read_matrix(&args.embedding)?;
    let model = fit_gmm(table.values.view(), k, seed)?;
    let labels = assign(&model, table.values.view())?;
    ensure_dir(&args.out)?;
    let path = args.out.join("labels.csv");
    write_labels(&path, &table.row_ids, &labels)?;
    rec.output(&path);
    eprintln!(
        "{} spots in {k} clusters; log-likelihood {:.6} after {} EM steps (restart {})",
        labels.len(),
        model.log_likelihood(),
        model.log_likelihood_trace.len(),
        model.restart
    );
    rec.finish(&args.out, json!({ "k": k }), Some(seed))
}

// ---------------------------------------------------------------- evaluate

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Ground-truth `spot_id,label` CSV.
    #[arg(long, requires = "pred_labels")]
    pub truth_labels: Option<PathBuf>,
    /// Predicted `spot_id,label` CSV; rows are matched to the truth by spot id.
    #[arg(long, requires = "truth_labels")]
    pub pred_labels: Option<PathBuf>,
    /// True protein matrix (spot × protein CSV).
    #[arg(long, requires = "pred_matrix")]
    pub truth_matrix: Option<PathBuf>,
    /// Predicted matrix; rows and columns are matched to the truth by name.
    #[arg(long, requires = "truth_matrix")]
    pub pred_matrix: Option<PathBuf>,
    /// The truth matrix holds raw protein counts; compare in CLR space.
    #[arg(long)]
    pub truth_counts: bool,
    /// Scale clustering scores to percentages.
    #[arg(long)]
    pub percent: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// `pred` re-ordered to follow `truth_ids`.
fn align_labels(truth_ids: &[String], pred_ids: &[String], pred: Vec<String>) -> CliResult<Vec<String>> {
    if truth_ids.len() != pred_ids.len() {
        return Err(stprot::Error::LengthMismatch {
            left: truth_ids.len(),
            right: pred_ids.len(),
        }
        .into());
    }
    let index: HashMap<&str, usize> = pred_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    truth_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| pred[i].clone())
                .ok_or_else(|| stprot::Error::DimensionMismatch(format!("spot {id:?} has no predicted label")).into())
        })
        .collect()
}

fn column_positions(names: &[String], wanted: &[String]) -> CliResult<Vec<usize>> {
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for w in wanted {
        match index.get(w.as_str()) {
            Some(&i) => out.push(i),
            None => missing.push(w.clone()),
        }
    }
    if missing.is_empty() && names.len() == wanted.len() {
        Ok(out)
    } else {
        Err(stprot::Error::DimensionMismatch(format!(
            "matrices name different columns; missing from prediction: {}",
            missing.join(", ")
        ))
        .into())
    }
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> CliResult<()> {
    let mut rec = Recorder::start("evaluate");
    let labels = match (&args.truth_labels, &args.pred_labels) {
        (Some(t), Some(p)) => {
            rec.input(t);
            rec.input(p);
            let (truth_ids, truth) = read_labels(t)?;
            let (pred_ids, pred) = read_labels(p)?;
            let pred = align_labels(&truth_ids, &pred_ids, pred)?;
            Some((truth, pred))
        }
        _ => None,
    };
    let matrices = match (&args.truth_matrix, &args.pred_matrix) {
        (Some(t), Some(p)) => {
            rec.input(t);
            rec.input(p);
            let truth = read_matrix(t)?;
            let pred = read_matrix(p)?;
            let columns = column_positions(&pred.col_names, &truth.col_names)?;
            let truth_values = if args.truth_counts {
                clr_protein::<f64>(truth.values.view())
            } else {
                truth.values.clone()
            };
            let pred_values = pred.align_rows(&truth.row_ids, "predicted matrix")?.select(Axis(1), &columns);
            Some((truth_values, pred_values))
        }
        _ => None,
    };
    let report: EvalReport = evaluate::<f64, String>(
        matrices.as_ref().map(|(t, _)| t.view()),
        matrices.as_ref().map(|(_, p)| p.view()),
        labels.as_ref().map(|(t, _)| t.as_slice()),
        labels.as_ref().map(|(_, p)| p.as_slice()),
    )?;
    let report = if args.percent { report.as_percent() } else { report };
    ensure_dir(&args.out)?;
    write_text(&mut rec, args.out.join("report.json"), &report.to_json())?;
    write_text(&mut rec, args.out.join("report.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    rec.finish(&args.out, json!({ "percent": args.percent, "truth_counts": args.truth_counts }), None)
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_spots: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_genes: usize,
    #[arg(long, default_value_t = 10)]
    pub n_proteins: usize,
    #[arg(long, default_value_t = 3)]
    pub n_domains: usize,
    /// Standard deviation of the additive protein noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Ground-truth seed; falls back to `STPROT_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the tissue layout and count draws; defaults to `--seed`.
    #[arg(long)]
    pub sample_seed: Option<u64>,
    /// Draw an independent sample of the same ground truth.
    #[arg(long)]
    pub held_out: bool,
    /// Smooth spatial gene programs added on top of the domain markers.
    #[arg(long, default_value_t = SynthConfig::default().n_programs)]
    pub n_programs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut rec = Recorder::start("synth");
    let seed = seed_or_env(args.seed)?;
    let base = SynthConfig {
        n_spots: args.n_spots,
        n_genes: args.n_genes,
        n_proteins: args.n_proteins,
        n_domains: args.n_domains,
        noise: args.noise,
        n_programs: args.n_programs,
        seed,
        sample_seed: args.sample_seed.unwrap_or(seed),
        ..SynthConfig::default()
    };
    let cfg = if args.held_out { base.held_out() } else { base };
    let data = generate(&cfg)?;
    let ds = &data.dataset;
    ensure_dir(&args.out)?;
    write_matrix(&mut rec, args.out.join("rna.csv"), &ds.spot_ids, &ds.gene_names, &ds.rna_counts)?;
    let protein = ds.protein_counts.as_ref().expect("synthetic data has protein");
    let protein_names = ds.protein_names.as_ref().expect("synthetic data has protein");
    write_matrix(&mut rec, args.out.join("protein.csv"), &ds.spot_ids, protein_names, protein)?;
    let coords_path = args.out.join("coords.csv");
    write_coords(&coords_path, &ds.spot_ids, &ds.coords)?;
    rec.output(&coords_path);
    let labels_path = args.out.join("labels.csv");
    write_labels(&labels_path, &ds.spot_ids, &data.labels)?;
    rec.output(&labels_path);
    rec.finish(&args.out, to_json(&cfg), Some(cfg.seed))
}

// ---------------------------------------------------------------- plot

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// `spot_id,x,y` CSV.
    #[arg(long)]
    pub coords: PathBuf,
    /// `spot_id,label` CSV to color by.
    #[arg(long, conflicts_with = "values", required_unless_present = "values")]
    pub labels: Option<PathBuf>,
    /// Spot × feature CSV (e.g. `protein_clr.csv`); needs `--column`.
    #[arg(long, requires = "column")]
    pub values: Option<PathBuf>,
    /// Column of `--values` to color by.
    #[arg(long)]
    pub column: Option<String>,
    /// Output SVG path; the run manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn plot(args: &PlotArgs) -> CliResult<()> {
    let mut rec = Recorder::start("plot");
    rec.input(&args.coords);
    let (spot_ids, coords) = read_coords(&args.coords)?;
    let points: Vec<(f64, f64)> = coords.rows().into_iter().map(|r| (r[0], r[1])).collect();
    let title;
    let svg = if let Some(path) = &args.labels {
        rec.input(path);
        let (ids, labels) = read_labels(path)?;
        let labels = align_labels(&spot_ids, &ids, labels)?;
        title = format!("labels from {}", path.display());
        scatter(&points, &Coloring::Labels(&labels), &title)
    } else {
        let path = args.values.as_ref().expect("clap requires --labels or --values");
        let column = args.column.as_ref().expect("clap requires --column with --values");
        rec.input(path);
        let table = read_matrix(path)?;
        let Some(j) = table.col_names.iter().position(|c| c == column) else {
            return Err(CliError::Usage(format!(
                "column {column:?} not found in {}; available: {}",
                path.display(),
                table.col_names.join(", ")
            )));
        };
        let values: Array1<f64> = table.align_rows(&spot_ids, "values matrix")?.column(j).to_owned();
        title = format!("{column} from {}", path.display());
        scatter(&points, &Coloring::Values(values.as_slice().expect("owned column"), column), &title)
    };
    let dir = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    ensure_dir(&dir)?;
    write_text(&mut rec, args.out.clone(), &svg)?;
    rec.finish(&dir, json!({ "column": args.column }), None)
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    /// KNN neighbors; takes `--values`.
    K,
    /// Spatial-graph radius; takes `--values`.
    Radius,
    /// Loss weights (β₁, β₂); takes `--grid B1xB2`.
    Beta,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Training data; protein is required.
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values, or an integer range `a..b` (inclusive).
    #[arg(long)]
    pub values: Option<String>,
    /// Two axes joined by `x`, each a list or range, e.g. `1..5x1..5`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Held-out RNA to score on; training spots are scored otherwise.
    #[arg(long, requires_all = ["test_coords", "test_protein"])]
    pub test_rna: Option<PathBuf>,
    #[arg(long)]
    pub test_coords: Option<PathBuf>,
    #[arg(long)]
    pub test_protein: Option<PathBuf>,
    /// `spot_id,label` CSV for the scored spots; adds ARI and NMI of a GMM on the prediction.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Worker threads; results are merged in grid order.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_axis(text: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::Usage(format!("cannot parse grid axis {text:?}"));
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((a, b)) = text.split_once("..") {
        let a: i64 = a.trim().parse().map_err(|_| bad())?;
        let b: i64 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..=b).map(|v| v as f64).collect());
    }
    text.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect()
}

/// Grid points in row-major order.
pub fn parse_grid(param: SweepParam, values: Option<&str>, grid: Option<&str>) -> CliResult<Vec<Vec<f64>>> {
    let points: Vec<Vec<f64>> = match param {
        SweepParam::K | SweepParam::Radius => {
            let v = values.ok_or_else(|| CliError::Usage("this parameter takes --values".into()))?;
            parse_axis(v)?.into_iter().map(|x| vec![x]).collect()
        }
        SweepParam::Beta => {
            let g = grid.ok_or_else(|| CliError::Usage("--param beta takes --grid B1xB2".into()))?;
            let (a, b) = g
                .split_once('x')
                .ok_or_else(|| CliError::Usage(format!("grid {g:?} needs two axes joined by 'x'")))?;
            let (a, b) = (parse_axis(a)?, parse_axis(b)?);
            a.iter().flat_map(|&x| b.iter().map(move |&y| vec![x, y])).collect()
        }
    };
    if points.is_empty() {
        return Err(CliError::Usage("the parameter grid is empty".into()));
    }
    Ok(points)
}

fn apply_point(base: &TrainConfig, param: SweepParam, point: &[f64]) -> CliResult<TrainConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::K => {
            if point[0] < 0.0 || point[0].fract() != 0.0 {
                return Err(CliError::Usage(format!("k must be a non-negative integer, got {}", point[0])));
            }
            cfg.k_neighbors = point[0] as usize;
        }
        SweepParam::Radius => {
            cfg.radius = point[0];
            cfg.graph_kind = stprot::graph::GraphKind::SpatialRadius;
        }
        SweepParam::Beta => {
            cfg.beta1_loss = point[0];
            cfg.beta2_loss = point[1];
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

struct SweepRow {
    rmse: f64,
    final_loss: f64,
    ari: Option<f64>,
    nmi: Option<f64>,
}

struct SweepContext<'a> {
    train_ds: &'a SpatialOmicsDataset,
    processed: &'a Processed,
    eval_ds: &'a SpatialOmicsDataset,
    truth: &'a Array2<f64>,
    labels: Option<&'a [String]>,
}

fn sweep_point(ctx: &SweepContext<'_>, cfg: &TrainConfig) -> CliResult<SweepRow> {
    let y = ctx.processed.y.as_ref().expect("paired preprocessing yields y");
    let graph = build_graph(cfg, ctx.processed.x.view(), ctx.train_ds.coords.view())?;
    let (params, log) = train_with_observer(ctx.processed.x.view(), y.view(), &graph, cfg, |_, _, _| {})?;
    let z = predict_embedding(&params, &ctx.processed.rna_pipeline, ctx.eval_ds, cfg)?;
    let (ari, nmi) = match ctx.labels {
        Some(labels) => {
            let k = distinct(labels);
            let assigned = assign(&fit_gmm(z.view(), k, cfg.seed)?, z.view())?;
            let assigned: Vec<String> = assigned.iter().map(|a| a.to_string()).collect();
            let scores = clustering_scores(labels, &assigned)?;
            (scores.ari, scores.nmi)
        }
        None => (None, None),
    };
    Ok(SweepRow {
        rmse: rmse(ctx.truth.view(), z.view())?,
        final_loss: log.records.last().map_or(f64::NAN, |r| r.total),
        ari,
        nmi,
    })
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let mut rec = Recorder::start("sweep");
    let base = args.train.resolve()?;
    let points = parse_grid(args.param, args.values.as_deref(), args.grid.as_deref())?;
    let configs: Vec<TrainConfig> = points.iter().map(|p| apply_point(&base, args.param, p)).collect::<CliResult<_>>()?;
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }

    let train_ds = args.data.load_paired(&mut rec)?;
    let processed: Processed = preprocess_training_pair(&train_ds, base.n_hvg)?;
    let eval_ds = match (&args.test_rna, &args.test_coords, &args.test_protein) {
        (Some(r), Some(c), Some(p)) => {
            let test = DataArgs {
                rna: r.clone(),
                coords: c.clone(),
                protein: Some(p.clone()),
            };
            test.load(&mut rec)?
        }
        _ => train_ds.clone(),
    };
    let protein_pipeline = processed.protein_pipeline.as_ref().expect("paired preprocessing yields a protein pipeline");
    let truth = apply_protein_pipeline(protein_pipeline, &eval_ds)?;
    let labels = match &args.labels {
        Some(path) => {
            rec.input(path);
            let (ids, labels) = read_labels(path)?;
            Some(align_labels(&eval_ds.spot_ids, &ids, labels)?)
        }
        None => None,
    };
    let ctx = SweepContext {
        train_ds: &train_ds,
        processed: &processed,
        eval_ds: &eval_ds,
        truth: &truth,
        labels: labels.as_deref(),
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<SweepRow>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.min(configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let row = sweep_point(&ctx, &configs[i]);
                results.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });

    let names: &[&str] = match args.param {
        SweepParam::K => &["k"],
        SweepParam::Radius => &["radius"],
        SweepParam::Beta => &["beta1", "beta2"],
    };
    let mut csv = names.join(",");
    csv.push_str(",rmse,final_loss");
    if labels.is_some() {
        csv.push_str(",ari,nmi");
    }
    csv.push('\n');
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (point, row) in points.iter().zip(results.into_inner().expect("no worker panicked")) {
        let row = row.expect("every grid point ran")?;
        let coords: Vec<String> = point.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{},{},{}", coords.join(","), row.rmse, row.final_loss));
        if labels.is_some() {
            csv.push_str(&format!(",{},{}", cell(row.ari), cell(row.nmi)));
        }
        csv.push('\n');
    }
    ensure_dir(&args.out)?;
    write_text(&mut rec, args.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    let grid = json!({ "param": format!("{:?}", args.param).to_lowercase(), "points": points, "train_config": to_json(&base) });
    rec.finish(&args.out, grid, Some(base.seed))
}
