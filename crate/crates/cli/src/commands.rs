use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ui2vec::downstream::{
    description_exact_match, evaluate, finetune, generate_descriptions, ui_embeddings, EvalMode, EvalReport, Split,
    Task, TaskData, TaskHeads,
};
use ui2vec::encoder::{Model, ModelConfig};
use ui2vec::features::{FeatureConfig, FeatureEncoder, Vocab};
use ui2vec::model::{
    read_corpus, read_pairs, read_referring, read_sync, write_corpus, write_pairs, write_referring, write_sync, Corpus,
    ReferringExample, RetrievalPair, SyncExample,
};
use ui2vec::numerics::{read_checkpoint, write_checkpoint, ParamStore};
use ui2vec::pretrain::{pretrain, PretrainHeads};
use ui2vec::synth::{
    generate_corpus, generate_referring_expressions, generate_retrieval_pairs, generate_sync_examples,
};

use crate::config::RunConfig;
use crate::failure::{CliResult, Failure, Kind};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const RETRIEVAL_FILE: &str = "retrieval.jsonl";
pub const REFERRING_FILE: &str = "referring.jsonl";
pub const SYNC_FILE: &str = "sync.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

// distinct streams derived from the run seed
const PAIRS_SALT: u64 = 0x11;
const REFERRING_SALT: u64 = 0x12;
const SYNC_SALT: u64 = 0x13;
const HEADS_SALT: u64 = 0x21;
const TRAIN_SALT: u64 = 0x31;

/// Stored in every checkpoint so a later command can rebuild the model.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    features: FeatureConfig,
    feature_seed: u64,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(ui2vec::Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn data_file(cfg: &RunConfig, name: &str) -> CliResult<PathBuf> {
    let dir = cfg
        .paths
        .data
        .as_ref()
        .ok_or_else(|| Failure::config("paths.data is required (--data DIR, a synth run directory)"))?;
    Ok(dir.join(name))
}

fn to_json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("record serializes");
    s.push('\n');
    s
}

/// Builds the model from the checkpoint in `paths.checkpoint`, or with
/// fresh parameters from the run seed.
fn load_model(cfg: &RunConfig) -> CliResult<(Model, ParamStore<f32>, u64)> {
    match &cfg.paths.checkpoint {
        Some(path) => {
            let ckpt = read_checkpoint::<f32>(path)?;
            let meta: CheckpointMeta = serde_json::from_value(ckpt.meta)
                .map_err(|e| Failure::new(Kind::Parse, format!("{}: metadata: {e}", path.display())))?;
            if meta.model != cfg.model || meta.features != cfg.features {
                return Err(Failure::new(
                    Kind::Dimension,
                    format!(
                        "{} holds model {} / features {} but the run asks for model {} / features {}",
                        path.display(),
                        serde_json::to_string(&meta.model).expect("serializes"),
                        serde_json::to_string(&meta.features).expect("serializes"),
                        serde_json::to_string(&cfg.model).expect("serializes"),
                        serde_json::to_string(&cfg.features).expect("serializes"),
                    ),
                ));
            }
            let features = FeatureEncoder::new(meta.features, meta.feature_seed)?;
            let mut store = ckpt.params;
            let model = Model::from_store(meta.model, features, &mut store)?;
            Ok((model, store, meta.feature_seed))
        }
        None => {
            let features = FeatureEncoder::new(cfg.features, cfg.seed())?;
            let mut store = ParamStore::new();
            let model = Model::init(cfg.model.clone(), features, &mut store, cfg.seed())?;
            Ok((model, store, cfg.seed()))
        }
    }
}

fn save_checkpoint(path: &Path, store: &ParamStore<f32>, model: &Model, feature_seed: u64) -> CliResult<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        features: *model.features.config(),
        feature_seed,
    };
    let meta = serde_json::to_value(meta).expect("metadata serializes");
    Ok(write_checkpoint(path, store, &meta)?)
}

/// Task inputs read from the data directory.
struct Inputs {
    corpus: Corpus,
    pairs: Vec<RetrievalPair>,
    referring: Vec<ReferringExample>,
    sync: Vec<SyncExample>,
}

impl Inputs {
    fn load(cfg: &RunConfig, task: Task) -> CliResult<Self> {
        let corpus = match task {
            Task::Sync => Corpus::new(Vec::new()),
            _ => read_corpus(data_file(cfg, CORPUS_FILE)?)?,
        };
        let mut inputs = Inputs {
            corpus,
            pairs: Vec::new(),
            referring: Vec::new(),
            sync: Vec::new(),
        };
        match task {
            Task::Retrieval => inputs.pairs = read_pairs(data_file(cfg, RETRIEVAL_FILE)?)?,
            Task::Referring => inputs.referring = read_referring(data_file(cfg, REFERRING_FILE)?)?,
            Task::Sync => inputs.sync = read_sync(data_file(cfg, SYNC_FILE)?)?,
            Task::AppType | Task::Icon => {}
        }
        Ok(inputs)
    }

    fn task_data(&self, task: Task) -> CliResult<TaskData<'_>> {
        Ok(match task {
            Task::Retrieval => TaskData::retrieval(&self.corpus, &self.pairs)?,
            Task::Referring => TaskData::referring(&self.corpus, &self.referring)?,
            Task::Sync => TaskData::sync(&self.sync)?,
            Task::AppType => TaskData::app_type(&self.corpus)?,
            Task::Icon => TaskData::icon(&self.corpus)?,
        })
    }
}

fn write_report(run_dir: &Path, report: &EvalReport) -> CliResult<()> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    write_file(&run_dir.join("report.json"), json)?;
    if !report.per_class_f1.is_empty() {
        write_file(&run_dir.join("per_class_f1.csv"), report.per_class_csv())?;
    }
    Ok(())
}

fn report_summary(report: &EvalReport) -> Value {
    json!({
        "task": report.task,
        "mode": report.mode,
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
        "n_examples": report.n_examples,
    })
}

/// Corpus plus retrieval, referring and (with view hierarchies) sync files.
pub fn synth(cfg: &RunConfig, run_dir: &Path) -> CliResult<Value> {
    let vocab = Vocab::new(cfg.features.vocab_size)?;
    let seed = cfg.seed();
    let corpus = generate_corpus(&cfg.gen, &vocab)?;
    write_corpus(&corpus, run_dir.join(CORPUS_FILE))?;
    let pairs = generate_retrieval_pairs(
        &corpus,
        cfg.tasks.n_candidates,
        cfg.tasks.n_pairs,
        cfg.gen.n_icon_types,
        seed ^ PAIRS_SALT,
    )?;
    write_pairs(&pairs, run_dir.join(RETRIEVAL_FILE))?;
    let referring = generate_referring_expressions(&corpus, cfg.gen.n_icon_types, &vocab, seed ^ REFERRING_SALT)?;
    write_referring(&referring, run_dir.join(REFERRING_FILE))?;
    let n_sync = if corpus.no_vh {
        0
    } else {
        let sync = generate_sync_examples(&corpus, cfg.gen.desync_fraction, seed ^ SYNC_SALT)?;
        write_sync(&sync, run_dir.join(SYNC_FILE))?;
        sync.len()
    };
    Ok(json!({
        "n_uis": corpus.examples.len(),
        "n_retrieval_pairs": pairs.len(),
        "n_referring": referring.len(),
        "n_sync": n_sync,
    }))
}

/// Writes `metrics.jsonl` every `log_interval` steps, `checkpoint-<step>.bin`
/// every `checkpoint_interval` steps and `checkpoint.bin` at the end.
pub fn pretrain_cmd(cfg: &RunConfig, run_dir: &Path) -> CliResult<Value> {
    let corpus = read_corpus(data_file(cfg, CORPUS_FILE)?)?;
    let (model, mut store, feature_seed) = load_model(cfg)?;
    let heads = PretrainHeads::init(&model, &mut store, cfg.seed() ^ HEADS_SALT)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| io_failure(&metrics_path, e))?;
    let pc = &cfg.pretrain;
    let mut last = None;
    let as_lib = |path: &Path, e: std::io::Error| ui2vec::Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    pretrain(
        &corpus.examples,
        &model,
        &heads,
        &mut store,
        pc,
        cfg.seed() ^ TRAIN_SALT,
        |row, params| {
            if row.step % pc.log_interval == 0 {
                metrics
                    .write_all(to_json_line(row).as_bytes())
                    .map_err(|e| as_lib(&metrics_path, e))?;
            }
            if pc.checkpoint_interval > 0 && row.step % pc.checkpoint_interval == 0 && row.step < pc.steps {
                let path = run_dir.join(format!("checkpoint-{:06}.bin", row.step));
                save_checkpoint(&path, params, &model, feature_seed).map_err(|f| ui2vec::Error::Invalid(f.message))?;
            }
            last = Some(row.total);
            Ok(())
        },
    )?;
    save_checkpoint(&run_dir.join(CHECKPOINT_FILE), &store, &model, feature_seed)?;
    Ok(json!({ "steps": pc.steps, "final_total_loss": last }))
}

/// Trains on the train split and reports on the test split.
pub fn finetune_cmd(cfg: &RunConfig, run_dir: &Path) -> CliResult<Value> {
    let inputs = Inputs::load(cfg, cfg.task)?;
    let data = inputs.task_data(cfg.task)?;
    let (model, mut store, feature_seed) = load_model(cfg)?;
    let heads = if cfg.task.needs_head() {
        Some(TaskHeads::init(
            &model,
            &mut store,
            cfg.gen.n_icon_types,
            cfg.seed() ^ HEADS_SALT,
        )?)
    } else {
        None
    };
    let (train, test) = (data.subset(Split::Train), data.subset(Split::Test));
    let mut log = String::new();
    finetune(
        &mut store,
        &model,
        heads.as_ref(),
        &train,
        &cfg.finetune,
        cfg.seed() ^ TRAIN_SALT,
        |step, loss| {
            let _ = writeln!(log, "{}", json!({ "step": step, "loss": loss }));
            Ok(())
        },
    )?;
    write_file(&run_dir.join("finetune_metrics.jsonl"), log)?;
    save_checkpoint(&run_dir.join(CHECKPOINT_FILE), &store, &model, feature_seed)?;
    let report = evaluate(&store, &model, heads.as_ref(), &test, EvalMode::Finetuned)?;
    write_report(run_dir, &report)?;
    Ok(report_summary(&report))
}

/// Evaluates the test split. Zero-shot mode needs no task heads.
pub fn eval_cmd(cfg: &RunConfig, run_dir: &Path) -> CliResult<Value> {
    if cfg.mode == EvalMode::ZeroShot && cfg.task.needs_head() {
        return Err(Failure::config(format!(
            "{} has no zero-shot mode; finetune first and use --mode finetuned",
            cfg.task.name()
        )));
    }
    let inputs = Inputs::load(cfg, cfg.task)?;
    let data = inputs.task_data(cfg.task)?;
    let (model, mut store, _) = load_model(cfg)?;
    let heads = if cfg.mode == EvalMode::Finetuned && cfg.task.needs_head() {
        Some(TaskHeads::from_store(&model, &mut store)?)
    } else {
        None
    };
    let report = evaluate(&store, &model, heads.as_ref(), &data.subset(Split::Test), cfg.mode)?;
    write_report(run_dir, &report)?;
    Ok(report_summary(&report))
}

fn csv_row(out: &mut String, lead: &[String], values: &[f64]) {
    let mut fields: Vec<String> = lead.to_vec();
    fields.extend(values.iter().map(|v| v.to_string()));
    out.push_str(&fields.join(","));
    out.push('\n');
}

/// `cls.csv`: one CLS embedding per UI. `components.csv`: one `2d`-wide
/// embedding per IMG component.
pub fn embed(cfg: &RunConfig, run_dir: &Path) -> CliResult<Value> {
    let corpus = read_corpus(data_file(cfg, CORPUS_FILE)?)?;
    let (model, store, _) = load_model(cfg)?;
    let d = model.config.d;
    let dims = |n: usize| (0..n).map(|k| format!("e{k}")).collect::<Vec<_>>().join(",");
    let mut cls_csv = format!("id,app_type,{}\n", dims(d));
    let mut comp_csv = format!("id,img,icon_type,{}\n", dims(2 * d));
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut n_components = 0;
    for e in &corpus.examples {
        let (cls, comps) = ui_embeddings(&store, &model, e)?;
        csv_row(&mut cls_csv, &[e.id.clone(), opt(e.app_type_label)], &cls);
        for (i, c) in comps.iter().enumerate() {
            let label = e.icon_labels.as_ref().and_then(|l| l.get(i).copied());
            csv_row(&mut comp_csv, &[e.id.clone(), i.to_string(), opt(label)], c);
            n_components += 1;
        }
    }
    write_file(&run_dir.join("cls.csv"), cls_csv)?;
    write_file(&run_dir.join("components.csv"), comp_csv)?;
    Ok(json!({ "n_uis": corpus.examples.len(), "n_components": n_components }))
}

/// Greedy descriptions for every VH component with all descriptions masked.
pub fn gendesc(cfg: &RunConfig, run_dir: &Path) -> CliResult<Value> {
    let corpus = read_corpus(data_file(cfg, CORPUS_FILE)?)?;
    let (model, store, _) = load_model(cfg)?;
    let mut lines = String::new();
    for e in &corpus.examples {
        let generated = generate_descriptions(&store, &model, e)?;
        let truth: Vec<&Vec<u32>> = e.vh.iter().map(|c| &c.desc_tokens).collect();
        lines.push_str(&to_json_line(
            &json!({ "id": e.id, "generated": generated, "truth": truth }),
        ));
    }
    write_file(&run_dir.join("descriptions.jsonl"), lines)?;
    let (rate, n) = description_exact_match(&store, &model, &corpus.examples)?;
    let summary = json!({ "exact_match": rate, "n_descriptions": n });
    write_file(&run_dir.join("gendesc.json"), to_json_line(&summary))?;
    Ok(summary)
}
