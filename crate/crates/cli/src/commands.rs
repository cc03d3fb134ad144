use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use caspr_core::autodiff::Real;
use caspr_core::ingest::{
    fit_schema, prepare_sequences, read_csv_path, EntitySequence, FittedSchema, Schema,
};
use caspr_core::metrics::{
    evaluate, rank_items, ranking_metrics, LabeledSet, MetricsReport, Projection, RankingCase,
    Task,
};
use caspr_core::pretrain::{
    initial_checkpoint, resume, AnyCheckpoint, Checkpoint, EpochLog, TimingReport, TrainConfig,
    TrainError,
};
use caspr_core::rfm::rfm_table;
use caspr_core::synthgen;
use caspr_core::transformer::{EmbeddingRecord, Model, Precision};
use caspr_core::{Error, Result};

use crate::config::{existing, input, RunConfig};
use crate::output::write_atomic;

pub const FITTED: &str = "fitted.json";
pub const CHECKPOINT: &str = "checkpoint.cspr";
pub const LOSS_LOG: &str = "loss.csv";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const RFM: &str = "rfm.csv";
pub const METRICS: &str = "metrics.csv";
pub const RFM_METRICS: &str = "rfm_metrics.csv";
pub const RANKING: &str = "ranking.csv";
pub const RANKING_METRICS: &str = "ranking_metrics.csv";
pub const BENCH: &str = "bench.csv";

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let data = synthgen::generate(&cfg.synth)?;
    let out = cfg.out_dir()?;
    write_atomic(&out.join("data.csv"), data.data_csv().as_bytes())?;
    write_atomic(&out.join("schema.json"), (synthgen::schema().to_json() + "\n").as_bytes())?;
    write_atomic(&out.join("labels.csv"), data.labels_csv().as_bytes())
}

pub fn fit(cfg: &RunConfig) -> Result<FittedSchema> {
    let schema = Schema::load(input(&cfg.schema, "schema")?)?;
    let rows = read_csv_path(input(&cfg.data, "data")?, &schema)?;
    let fitted = fit_schema(&rows, &schema)?;
    write_atomic(&cfg.out_dir()?.join(FITTED), (fitted.to_json() + "\n").as_bytes())?;
    Ok(fitted)
}

/// The fitted schema from `fitted` if given, otherwise fitted afresh.
fn fitted_schema(cfg: &RunConfig) -> Result<FittedSchema> {
    match &cfg.fitted {
        Some(p) => FittedSchema::load(existing(p)?),
        None => fit(cfg),
    }
}

fn sequences(data: &Path, fitted: &FittedSchema, t: usize) -> Result<Vec<EntitySequence>> {
    let rows = read_csv_path(data, &fitted.schema()?)?;
    prepare_sequences(&rows, fitted, t)
}

fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,wall_seconds\n");
    for e in log {
        writeln!(s, "{},{},{}", e.epoch, e.mean_loss, e.wall_seconds).unwrap();
    }
    s
}

/// Trains `ck` up to `train.epochs` total epochs and writes the checkpoint.
/// On divergence the last good checkpoint is written before failing.
fn run_training<T: Real>(
    ck: Checkpoint<T>,
    data: &Path,
    train: &TrainConfig,
    out: &Path,
) -> Result<Vec<EpochLog>> {
    let seqs = sequences(data, &ck.model.fitted, ck.model.config.t)?;
    log::info!("{} entities, {} epochs", seqs.len(), train.epochs);
    match resume(ck, &seqs, train) {
        Ok(outcome) => {
            write_atomic(&out.join(CHECKPOINT), &outcome.checkpoint.to_bytes()?)?;
            Ok(outcome.log)
        }
        Err(TrainError::Diverged { epoch, reason, last_good }) => {
            write_atomic(&out.join(CHECKPOINT), &last_good.to_bytes()?)?;
            Err(Error::Numeric(format!("training diverged in epoch {epoch}: {reason}")))
        }
        Err(TrainError::Failed(e)) => Err(e),
    }
}

fn fresh<T: Real>(cfg: &RunConfig, fitted: FittedSchema, train: &TrainConfig) -> Result<Checkpoint<T>> {
    let model = Model::new(cfg.model.clone(), fitted, train.seed)?;
    Ok(initial_checkpoint(model, train))
}

/// With `resume_from_checkpoint`, `epochs` counts the total including the
/// epochs already in the checkpoint.
pub fn pretrain(cfg: &RunConfig, workers: Option<usize>, resume_from_checkpoint: bool) -> Result<()> {
    let mut train = cfg.train.clone();
    if let Some(w) = workers {
        train.workers = w;
    }
    let out = cfg.out_dir()?;
    let data = input(&cfg.data, "data")?;
    let log = if resume_from_checkpoint {
        match AnyCheckpoint::load(input(&cfg.checkpoint, "checkpoint")?)? {
            AnyCheckpoint::F32(ck) => run_training(ck, data, &train, &out)?,
            AnyCheckpoint::F64(ck) => run_training(ck, data, &train, &out)?,
        }
    } else {
        let fitted = fitted_schema(cfg)?;
        match cfg.model.precision {
            Precision::F32 => run_training(fresh::<f32>(cfg, fitted, &train)?, data, &train, &out)?,
            Precision::F64 => run_training(fresh::<f64>(cfg, fitted, &train)?, data, &train, &out)?,
        }
    };
    write_atomic(&out.join(LOSS_LOG), loss_csv(&log).as_bytes())
}

fn embed_checkpoint(
    ck: &AnyCheckpoint,
    data: &Path,
) -> Result<(Vec<EntitySequence>, Vec<EmbeddingRecord>)> {
    let seqs = sequences(data, ck.fitted(), ck.config().t)?;
    let recs = match ck {
        AnyCheckpoint::F32(c) => c.model.embed(&seqs)?,
        AnyCheckpoint::F64(c) => c.model.embed(&seqs)?,
    };
    Ok((seqs, recs))
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn embeddings_csv(recs: &[EmbeddingRecord]) -> Result<Vec<u8>> {
    let width = recs.first().map_or(0, |r| r.vector.len());
    let header: Vec<String> = std::iter::once("entity".to_string())
        .chain((0..width).map(|i| format!("e{i}")))
        .collect();
    csv_bytes(
        &header,
        recs.iter().map(|r| {
            std::iter::once(r.entity.clone())
                .chain(r.vector.iter().map(|v| v.to_string()))
                .collect()
        }),
    )
}

pub fn embed(cfg: &RunConfig) -> Result<()> {
    let ck = AnyCheckpoint::load(input(&cfg.checkpoint, "checkpoint")?)?;
    let (_, recs) = embed_checkpoint(&ck, input(&cfg.data, "data")?)?;
    write_atomic(&cfg.out_dir()?.join(EMBEDDINGS), &embeddings_csv(&recs)?)
}

fn rfm_from(schema: &Schema, data: &Path, out: &Path) -> Result<()> {
    let rows = read_csv_path(data, schema)?;
    write_atomic(&out.join(RFM), rfm_table(&rows, schema)?.to_csv().as_bytes())
}

pub fn rfm(cfg: &RunConfig) -> Result<()> {
    let schema = Schema::load(input(&cfg.schema, "schema")?)?;
    rfm_from(&schema, input(&cfg.data, "data")?, &cfg.out_dir()?)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::Reader::from_reader(File::open(path)?))
}

fn number(s: &str, row: usize, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse { row, msg: format!("{what} `{s}` is not a finite number") })
}

/// `entity,<feature>...` rows.
pub fn read_features(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv_reader(path)?;
    if rdr.headers()?.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            msg: "features need an entity column and at least one value column".into(),
        });
    }
    let (mut entities, mut features) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        entities.push(rec[0].to_string());
        features.push(
            rec.iter()
                .skip(1)
                .map(|f| number(f, row, "feature"))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((entities, features))
}

/// `entity,label` rows.
pub fn read_labels(path: &Path) -> Result<HashMap<String, f64>> {
    let mut rdr = csv_reader(path)?;
    let mut labels = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        if rec.len() != 2 {
            return Err(Error::Parse { row, msg: "expected `entity,label`".into() });
        }
        let v = number(&rec[1], row, "label")?;
        if labels.insert(rec[0].to_string(), v).is_some() {
            return Err(Error::Parse { row, msg: format!("duplicate entity `{}`", &rec[0]) });
        }
    }
    Ok(labels)
}

/// Joins features with labels on the entity id, in feature-file order.
pub fn labeled_set(features: &Path, labels: &Path) -> Result<LabeledSet> {
    let (entities, rows) = read_features(features)?;
    let labels = read_labels(labels)?;
    let mut seen = BTreeSet::new();
    let (mut es, mut xs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (e, x)) in entities.into_iter().zip(rows).enumerate() {
        if !seen.insert(e.clone()) {
            return Err(Error::Parse { row: i + 2, msg: format!("duplicate entity `{e}`") });
        }
        if let Some(&y) = labels.get(&e) {
            es.push(e);
            xs.push(x);
            ys.push(y);
        }
    }
    let dropped = seen.len() - es.len();
    if dropped > 0 {
        log::warn!("{dropped} entities have no label and were skipped");
    }
    LabeledSet::new(es, xs, ys)
}

fn eval_to(cfg: &RunConfig, features: &Path, task: Task, name: &str) -> Result<MetricsReport> {
    let set = labeled_set(features, input(&cfg.labels, "labels")?)?;
    let report = evaluate(&set, task, cfg.train.seed)?;
    write_atomic(&cfg.out_dir()?.join(name), report.to_csv().as_bytes())?;
    Ok(report)
}

pub fn eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let features = input(&cfg.features, "features")?;
    eval_to(cfg, features, cfg.task.unwrap_or(Task::Binary), METRICS)
}

/// `entity,relevant` (pipe-separated ids); other columns are ignored, so a
/// ranking CSV can be fed back in.
pub fn read_relevance(path: &Path) -> Result<Vec<(String, BTreeSet<String>)>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 1,
            msg: format!("relevance file has no `{name}` column"),
        })
    };
    let (ei, ri) = (col("entity")?, col("relevant")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let relevant = rec[ri].split('|').filter(|s| !s.is_empty()).map(String::from).collect();
        out.push((rec[ei].to_string(), relevant));
    }
    Ok(out)
}

fn item_table(ck: &AnyCheckpoint, name: &str) -> Result<(Vec<f64>, usize)> {
    let t = match ck {
        AnyCheckpoint::F32(c) => c.model.weights.get(name).map(|t| (t.to_f64_vec(), t.shape()[1])),
        AnyCheckpoint::F64(c) => c.model.weights.get(name).map(|t| (t.to_f64_vec(), t.shape()[1])),
    };
    t.ok_or_else(|| Error::SchemaMismatch(format!("checkpoint has no tensor `{name}`")))
}

pub fn rank(cfg: &RunConfig) -> Result<MetricsReport> {
    let ck = AnyCheckpoint::load(input(&cfg.checkpoint, "checkpoint")?)?;
    let relevance = read_relevance(input(&cfg.relevance, "relevance")?)?;
    let (seqs, recs) = embed_checkpoint(&ck, input(&cfg.data, "data")?)?;
    let fitted = ck.fitted();
    let ci = match &cfg.item_column {
        Some(name) => fitted.categorical.iter().position(|v| &v.name == name).ok_or_else(|| {
            Error::SchemaMismatch(format!("no categorical column `{name}`"))
        })?,
        None if fitted.categorical.is_empty() => {
            return Err(Error::SchemaMismatch("schema has no categorical item column".into()))
        }
        None => 0,
    };
    let vocab = &fitted.categorical[ci];
    let (table, w) = item_table(&ck, &format!("emb.{}", vocab.name))?;
    let row = |code: usize| &table[code * w..(code + 1) * w];
    let items: Vec<(String, Vec<f64>)> = vocab
        .values
        .iter()
        .enumerate()
        .map(|(k, id)| (id.clone(), row(k + 1).to_vec()))
        .collect();

    // Widths differ: map each entity's mean item vector onto its embedding.
    let projection = if w != ck.config().emb_out {
        let inputs: Vec<Vec<f64>> = seqs
            .iter()
            .map(|s| {
                let mut m = vec![0.0; w];
                for step in &s.steps {
                    for (a, b) in m.iter_mut().zip(row(step.codes[ci] as usize)) {
                        *a += b / s.steps.len() as f64;
                    }
                }
                m
            })
            .collect();
        let targets: Vec<Vec<f64>> = recs.iter().map(|r| r.vector.clone()).collect();
        Some(Projection::fit(&inputs, &targets)?)
    } else {
        None
    };

    let ranked = rank_items(&recs, &items, projection.as_ref())?;
    let by_entity: HashMap<&str, Vec<String>> = ranked
        .iter()
        .map(|(e, scored)| (e.as_str(), scored.iter().map(|(id, _)| id.clone()).collect()))
        .collect();
    let cases = relevance
        .into_iter()
        .map(|(entity, relevant)| {
            let ranked = by_entity
                .get(entity.as_str())
                .ok_or_else(|| Error::Case(format!("entity `{entity}` has no activity rows")))?
                .clone();
            Ok(RankingCase { entity, ranked, relevant })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = ranking_metrics(&cases)?.to_report();

    let out = cfg.out_dir()?;
    let join = |ids: &mut dyn Iterator<Item = &String>| ids.cloned().collect::<Vec<_>>().join("|");
    let header = ["entity", "ranked", "relevant"].map(String::from);
    let rows = cases.iter().map(|c| {
        vec![c.entity.clone(), join(&mut c.ranked.iter()), join(&mut c.relevant.iter())]
    });
    write_atomic(&out.join(RANKING), &csv_bytes(&header, rows)?)?;
    write_atomic(&out.join(RANKING_METRICS), report.to_csv().as_bytes())?;
    Ok(report)
}

fn time_run<T: Real>(
    cfg: &RunConfig,
    fitted: &FittedSchema,
    seqs: &[EntitySequence],
    train: &TrainConfig,
) -> Result<TimingReport> {
    let ck = fresh::<T>(cfg, fitted.clone(), train)?;
    Ok(resume(ck, seqs, train)?.timing)
}

pub fn bench(cfg: &RunConfig, workers: &[usize]) -> Result<String> {
    let list: Vec<usize> = match (workers, cfg.bench_workers.as_slice()) {
        ([], []) => vec![1, 2, 4],
        ([], from_config) => from_config.to_vec(),
        (flags, _) => flags.to_vec(),
    };
    if cfg.train.epochs == 0 {
        return Err(Error::Config("bench needs at least one epoch".into()));
    }
    let fitted = fitted_schema(cfg)?;
    let seqs = sequences(input(&cfg.data, "data")?, &fitted, cfg.model.t)?;
    let mut csv = String::from("workers,epoch_time_s,total_worker_time_s\n");
    for w in list {
        let train = TrainConfig { workers: w, ..cfg.train.clone() };
        let timing = match cfg.model.precision {
            Precision::F32 => time_run::<f32>(cfg, &fitted, &seqs, &train)?,
            Precision::F64 => time_run::<f64>(cfg, &fitted, &seqs, &train)?,
        };
        log::info!("workers {w}: {:.3}s per epoch", timing.mean_epoch_seconds());
        writeln!(
            csv,
            "{},{},{}",
            w,
            timing.mean_epoch_seconds(),
            timing.mean_total_worker_seconds()
        )
        .unwrap();
    }
    write_atomic(&cfg.out_dir()?.join(BENCH), csv.as_bytes())?;
    Ok(csv)
}

/// fit, pretrain and embed; with labels also eval, and the RFM baseline when
/// the schema has a monetary column.
pub fn pipeline(cfg: &RunConfig, workers: Option<usize>) -> Result<Vec<(String, MetricsReport)>> {
    let mut cfg = cfg.clone();
    let out = cfg.out_dir()?;
    let fitted = fitted_schema(&cfg)?;
    if cfg.fitted.is_none() {
        cfg.fitted = Some(out.join(FITTED));
    }
    pretrain(&cfg, workers, false)?;
    cfg.checkpoint = Some(out.join(CHECKPOINT));
    embed(&cfg)?;

    let mut reports = Vec::new();
    if cfg.labels.is_some() {
        let task = cfg.task.unwrap_or(Task::Binary);
        reports.push(("caspr".into(), eval_to(&cfg, &out.join(EMBEDDINGS), task, METRICS)?));
        let schema = fitted.schema()?;
        if schema.monetary_index().is_some() {
            rfm_from(&schema, input(&cfg.data, "data")?, &out)?;
            reports.push(("rfm".into(), eval_to(&cfg, &out.join(RFM), task, RFM_METRICS)?));
        }
    }
    Ok(reports)
}
