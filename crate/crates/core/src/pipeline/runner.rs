use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate::{contrastive_eval_loss, evaluate_examples};
use super::optim::{AdamW, AdamWConfig};
use super::trainer::{StageTrainer, TaskData, TrainState};
use super::{MaskPolicy, RunManifest, StageConfig, StageKind, StageSpec};
use crate::checkpoint::Checkpoint;
use crate::datagen::{
    generate_clr, pair_from_sft, read_dataset, synth_corpus, write_dataset, DatasetHeader, ExampleBody,
    LanguageDistribution, MockTranslator, RawRecord, SynthConfig, TaskKind, TrainingExample,
};
use crate::dhnm::{MiningState, ThresholdMode};
use crate::diffengine::Tensor;
use crate::encoder::{Encoder, EncoderConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::MetricRecord;
use crate::maskschedule::ScheduleKind;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MINING_FILE: &str = "mining.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
    /// Write a mid-stage checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
    /// Stop (after checkpointing) once stage `.0` has run `.1` steps.
    pub stop_after: Option<(usize, u64)>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub kind: StageKind,
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub stages: Vec<StageSummary>,
    pub completed: bool,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: Encoder,
    pub tokenizer: Tokenizer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct LogCounts {
    metrics: u64,
    mining: u64,
    eval: u64,
}

struct Logs {
    files: [BufWriter<File>; 3],
    counts: LogCounts,
}

fn truncate_lines(path: &Path, keep: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && keep == 0 => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text.split_inclusive('\n').take(keep as usize).collect();
    if (kept.lines().count() as u64) < keep {
        return Err(Error::Checkpoint(format!("{} has fewer than {keep} lines", path.display())));
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

impl Logs {
    fn open(dir: &Path, counts: LogCounts) -> Result<Self> {
        let names = [METRICS_FILE, MINING_FILE, EVAL_FILE];
        let keep = [counts.metrics, counts.mining, counts.eval];
        let mut files = Vec::new();
        for (name, k) in names.iter().zip(keep) {
            let p = dir.join(name);
            truncate_lines(&p, k)?;
            let f = OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?;
            files.push(BufWriter::new(f));
        }
        let files: [BufWriter<File>; 3] = files.try_into().map_err(|_| Error::invalid("log files"))?;
        Ok(Logs { files, counts })
    }

    fn write(&mut self, which: usize, line: &str) -> Result<()> {
        let f = &mut self.files[which];
        writeln!(f, "{line}").map_err(|e| Error::io(Path::new("log"), e))?;
        match which {
            0 => self.counts.metrics += 1,
            1 => self.counts.mining += 1,
            _ => self.counts.eval += 1,
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for f in &mut self.files {
            f.flush().map_err(|e| Error::io(Path::new("log"), e))?;
        }
        Ok(())
    }
}

fn stage_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("stage{}.ckpt", i + 1))
}

fn partial_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("stage{}.partial.ckpt", i + 1))
}

fn example_texts(e: &TrainingExample) -> Vec<&str> {
    match &e.body {
        ExampleBody::Text { text } => vec![text],
        ExampleBody::Pair { query, positive } => vec![query, positive],
        ExampleBody::Triplet { query, positive, negatives } => {
            let mut v = vec![query.as_str(), positive.as_str()];
            v.extend(negatives.iter().map(|s| s.as_str()));
            v
        }
        ExampleBody::Scored { a, b, .. } => vec![a, b],
    }
}

fn model_checkpoint(enc: &Encoder, tok: &Tokenizer, extra: serde_json::Value) -> Checkpoint {
    let mut header = serde_json::json!({ "tokenizer": tok.to_json() });
    if let (Some(h), serde_json::Value::Object(e)) = (header.as_object_mut(), extra) {
        h.extend(e);
    }
    enc.to_checkpoint(header)
}

fn header_field<T: serde::de::DeserializeOwned>(c: &Checkpoint, key: &str) -> Result<T> {
    let v = c.header.get(key).ok_or_else(|| Error::Checkpoint(format!("header lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
}

/// Load an encoder together with the tokenizer stored beside it.
pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let c = Checkpoint::load(path)?;
    bundle_from(&c, None)
}

fn bundle_from(c: &Checkpoint, expected: Option<&EncoderConfig>) -> Result<ModelBundle> {
    let encoder = Encoder::from_checkpoint(c, expected)?;
    let tok = c.header.get("tokenizer").ok_or_else(|| Error::Checkpoint("header lacks a tokenizer".into()))?;
    Ok(ModelBundle { encoder, tokenizer: Tokenizer::from_json(tok)? })
}

fn save_partial(dir: &Path, i: usize, tok: &Tokenizer, state: &TrainState, counts: LogCounts) -> Result<()> {
    let mut c = model_checkpoint(
        &state.encoder,
        tok,
        serde_json::json!({
            "stage_index": i,
            "state": "partial",
            "step": state.step,
            "adam": state.optimizer.config,
            "adam_t": state.optimizer.t,
            "mining": state.mining,
            "logs": counts,
        }),
    );
    for (k, (name, _)) in state.encoder.params().iter().enumerate() {
        c.push(format!("adam.m.{name}"), state.optimizer.m[k].clone());
        c.push(format!("adam.v.{name}"), state.optimizer.v[k].clone());
    }
    c.save(partial_path(dir, i))
}

fn load_partial(c: &Checkpoint, cfg: &EncoderConfig) -> Result<(ModelBundle, TrainState, LogCounts)> {
    let bundle = bundle_from(c, Some(cfg))?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, _) in bundle.encoder.params() {
        let get = |k: &str| -> Result<Tensor> {
            c.get(&format!("adam.{k}.{name}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer array {k} for {name}")))
        };
        m.push(get("m")?);
        v.push(get("v")?);
    }
    let optimizer = AdamW { config: header_field::<AdamWConfig>(c, "adam")?, t: header_field(c, "adam_t")?, m, v };
    let state = TrainState {
        encoder: bundle.encoder.clone(),
        step: header_field(c, "step")?,
        optimizer,
        mining: header_field::<BTreeMap<TaskKind, MiningState>>(c, "mining")?,
    };
    Ok((bundle, state, header_field(c, "logs")?))
}

fn load_data(base: &Path, paths: &[PathBuf]) -> Result<Vec<TaskData>> {
    paths
        .iter()
        .map(|p| {
            let (h, examples) = read_dataset(&base.join(p))?;
            Ok(TaskData { task: h.task, examples })
        })
        .collect()
}

/// Run every stage of `m`, writing logs and checkpoints to the output directory.
///
/// Relative dataset paths resolve against `base`. Per stage the optimizer
/// starts fresh; the encoder carries over.
pub fn run_manifest(m: &RunManifest, base: &Path, opts: &RunOptions) -> Result<RunSummary> {
    m.validate()?;
    let mut m = m.clone();
    if let Some(s) = opts.seed {
        m.seed = s;
    }
    let out = opts.output_dir.clone().unwrap_or_else(|| base.join(&m.output_dir));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let data: Vec<Vec<TaskData>> = m.stages.iter().map(|s| load_data(base, &s.data)).collect::<Result<_>>()?;
    let eval: Vec<Option<Vec<TrainingExample>>> = m
        .stages
        .iter()
        .map(|s| s.eval_data.as_ref().map(|p| read_dataset(&base.join(p)).map(|d| d.1)).transpose())
        .collect::<Result<_>>()?;
    let texts = data
        .iter()
        .flatten()
        .flat_map(|d| d.examples.iter())
        .chain(eval.iter().flatten().flatten())
        .flat_map(example_texts);
    let tok = Tokenizer::fit(texts, m.encoder.vocab_size)?;

    let mut encoder = Encoder::new(m.encoder.clone(), m.seed)?;
    let mut start = 0;
    let mut partial: Option<TrainState> = None;
    let mut counts = LogCounts::default();
    if opts.resume {
        for i in (0..m.stages.len()).rev() {
            let p = stage_path(&out, i);
            if p.exists() {
                let c = Checkpoint::load(&p)?;
                encoder = bundle_from(&c, Some(&m.encoder))?.encoder;
                counts = header_field(&c, "logs")?;
                start = i + 1;
                break;
            }
        }
        if start < m.stages.len() && partial_path(&out, start).exists() {
            let c = Checkpoint::load(partial_path(&out, start))?;
            let (_, state, c_counts) = load_partial(&c, &m.encoder)?;
            counts = c_counts;
            partial = Some(state);
        }
        log::info!("resuming at stage {} (step {})", start + 1, partial.as_ref().map_or(0, |s| s.step));
    }
    let mut logs = Logs::open(&out, counts)?;
    let mut summary = RunSummary { output_dir: out.clone(), stages: vec![], completed: false, model: None };

    for i in start..m.stages.len() {
        let spec: &StageSpec = &m.stages[i];
        let cfg = spec.config.clone();
        let seed = m.stage_seed(i);
        let mut trainer = match partial.take() {
            Some(state) => StageTrainer::resume(state, cfg.clone(), seed, &tok, &data[i])?,
            None => StageTrainer::new(encoder, cfg.clone(), seed, &tok, &data[i])?,
        };
        log::info!("stage {} ({}) from step {}", i + 1, cfg.kind, trainer.step_index());
        let mut last_loss = None;
        while !trainer.is_done() {
            let metric = trainer.step()?;
            last_loss = Some(metric.loss);
            for r in trainer.take_metrics() {
                logs.write(0, &serde_json::to_string(&r).expect("metric serializes"))?;
            }
            for e in trainer.take_mining_log() {
                logs.write(1, &serde_json::to_string(&e).expect("event serializes"))?;
            }
            let at = trainer.step_index();
            let stop = opts.stop_after == Some((i, at));
            let periodic = opts.checkpoint_every.is_some_and(|n| n > 0 && at % n == 0);
            if (stop || periodic) && !trainer.is_done() {
                logs.flush()?;
                save_partial(&out, i, &tok, &trainer.state(), logs.counts)?;
            }
            if stop {
                logs.flush()?;
                summary.stages.push(StageSummary { kind: cfg.kind, steps: at, last_loss, eval_loss: None });
                return Ok(summary);
            }
        }
        encoder = trainer.into_encoder();
        let split = format!("stage{}-{}", i + 1, cfg.kind);
        let mut eval_loss = None;
        if let Some(ev) = &eval[i] {
            if matches!(cfg.kind, StageKind::WeakContrastive | StageKind::Supervised) {
                let pairs: Vec<TrainingExample> = ev.iter().filter(|e| e.query_passage().is_some()).cloned().collect();
                if !pairs.is_empty() {
                    let l = contrastive_eval_loss(&encoder, &tok, &pairs, cfg.batch_size, cfg.temperature)?;
                    eval_loss = Some(l);
                    logs.write(2, &MetricRecord::new("contrastive_loss", &split, Some(l)).to_line())?;
                }
                for r in evaluate_examples(&encoder, &tok, ev, &split, None)? {
                    logs.write(2, &r.to_line())?;
                }
            }
        }
        logs.flush()?;
        let c = model_checkpoint(
            &encoder,
            &tok,
            serde_json::json!({ "stage_index": i, "state": "complete", "logs": logs.counts }),
        );
        c.save(stage_path(&out, i))?;
        let pp = partial_path(&out, i);
        if pp.exists() {
            fs::remove_file(&pp).map_err(|e| Error::io(&pp, e))?;
        }
        summary.stages.push(StageSummary { kind: cfg.kind, steps: cfg.steps, last_loss, eval_loss });
    }
    let model = out.join(MODEL_FILE);
    model_checkpoint(&encoder, &tok, serde_json::json!({ "state": "final" })).save(&model)?;
    summary.completed = true;
    summary.model = Some(model);
    Ok(summary)
}

/// Shape of the synthetic workspace written by [`write_toy_workspace`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub clusters: usize,
    pub per_cluster: usize,
    /// Members `0..train_members` train; the rest are held out for evaluation.
    pub train_members: usize,
    /// The first language carries the passages; any others get translated queries.
    pub languages: Vec<String>,
    pub seed: u64,
    pub budgets: [u64; 4],
    pub encoder: EncoderConfig,
    pub labels: usize,
    pub sts_pairs: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            clusters: 64,
            per_cluster: 6,
            train_members: 4,
            languages: vec!["en".into()],
            seed: 7,
            budgets: [500, 200, 500, 1000],
            encoder: EncoderConfig::default(),
            labels: 8,
            sts_pairs: 256,
        }
    }
}

fn put(dir: &Path, name: &str, task: TaskKind, ex: &[TrainingExample]) -> Result<PathBuf> {
    write_dataset(&dir.join(name), &DatasetHeader::for_examples(task, ex), ex)?;
    Ok(PathBuf::from(name))
}

/// Write synthetic datasets for all four stages plus `manifest.toml` into `dir`.
pub fn write_toy_workspace(dir: &Path, spec: &ToySpec) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let langs: Vec<&str> = spec.languages.iter().map(|s| s.as_str()).collect();
    let main = *langs.first().ok_or_else(|| Error::invalid("toy workspace needs a language"))?;
    let corpus = synth_corpus(&SynthConfig::new(spec.clusters, spec.per_cluster, &[main], spec.seed))?;
    let train = 0..spec.train_members;
    let held = spec.train_members..spec.per_cluster;

    let text: Vec<TrainingExample> = corpus
        .sentences
        .iter()
        .filter(|s| train.contains(&(s.member as usize)))
        .map(|s| TrainingExample {
            task: TaskKind::Text,
            body: ExampleBody::Text { text: s.text.clone() },
            query_lang: None,
            passage_lang: Some(s.lang.clone()),
            group: Some(s.cluster),
            source: "synth".into(),
        })
        .collect();
    let pairs = corpus.pairs(TaskKind::Retrieval, train.clone(), main, main)?;
    let sft: Vec<TrainingExample> = pairs
        .iter()
        .map(|p| {
            let (q, pos) = p.query_passage().expect("pairs");
            let mut e = pair_from_sft(&RawRecord {
                instruction: format!("find.{main}"),
                input: q.into(),
                output: pos.into(),
                source: "synth".into(),
            })?;
            e.group = p.group;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let weak: Vec<TrainingExample> =
        pairs.iter().cloned().map(|mut p| { p.task = TaskKind::Weak; p }).collect();
    let eval_pairs = corpus.pairs(TaskKind::Retrieval, held.clone(), main, main)?;

    let mut files = BTreeMap::new();
    files.insert("text", put(dir, "text.jsonl", TaskKind::Text, &text)?);
    files.insert("sft", put(dir, "sft.jsonl", TaskKind::Sft, &sft)?);
    files.insert("weak", put(dir, "weak.jsonl", TaskKind::Weak, &weak)?);
    files.insert("retrieval", put(dir, "retrieval.jsonl", TaskKind::Retrieval, &pairs)?);
    files.insert("eval", put(dir, "eval.jsonl", TaskKind::Retrieval, &eval_pairs)?);
    let cls = corpus.classification(spec.labels, train.clone(), main)?;
    files.insert("classification", put(dir, "classification.jsonl", TaskKind::Classification, &cls)?);
    let sts = corpus.sts(spec.sts_pairs, train.clone(), main, spec.seed ^ 0x5757)?;
    files.insert("sts", put(dir, "sts.jsonl", TaskKind::Sts, &sts)?);
    let mut supervised = vec![files["retrieval"].clone(), files["classification"].clone(), files["sts"].clone()];
    if langs.len() > 1 {
        let tr = MockTranslator::new(langs.iter().copied());
        let targets: Vec<(String, f64)> = langs[1..].iter().map(|l| (l.to_string(), 1.0)).collect();
        let clr = generate_clr(&pairs, &tr, &LanguageDistribution::from_weights(targets)?, spec.seed);
        supervised.push(put(dir, "clr.jsonl", TaskKind::Clr, &clr.examples)?);
    }

    let stage = StageConfig::new;
    let mut s3 = stage(StageKind::WeakContrastive, spec.budgets[2]);
    s3.mask = Some(MaskPolicy::Soft(ScheduleKind::Linear));
    let mut s4 = stage(StageKind::Supervised, spec.budgets[3]);
    s4.mrl = true;
    s4.dhnm = Some(ThresholdMode::Absolute);
    let manifest = RunManifest {
        output_dir: PathBuf::from("out"),
        seed: spec.seed,
        encoder: spec.encoder.clone(),
        stages: vec![
            StageSpec { config: stage(StageKind::LmPretrain, spec.budgets[0]), data: vec![files["text"].clone()], eval_data: None },
            StageSpec { config: stage(StageKind::PairSft, spec.budgets[1]), data: vec![files["sft"].clone()], eval_data: None },
            StageSpec { config: s3, data: vec![files["weak"].clone()], eval_data: Some(files["eval"].clone()) },
            StageSpec { config: s4, data: supervised, eval_data: Some(files["eval"].clone()) },
        ],
    };
    manifest.validate()?;
    let p = dir.join("manifest.toml");
    fs::write(&p, manifest.to_toml()).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}
