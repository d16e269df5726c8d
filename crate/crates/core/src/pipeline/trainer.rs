use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::{MaskPolicy, StageConfig, StageKind};
use crate::datagen::{ExampleBody, TaskKind, TrainingExample};
use crate::dhnm::{self, Decision, MiningState};
use crate::diffengine::{Graph, Tensor, Var};
use crate::encoder::{Encoder, Tokenizer, BOS, SEP};
use crate::error::{Error, Result};
use crate::losses::{cosent, info_nce, next_token_ce, pair_cosines, ContrastiveBatch};
use crate::maskschedule::{build_soft_mask, AttentionMask, ScheduleState};

/// Examples of one task, as read from a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: TaskKind,
    pub examples: Vec<TrainingExample>,
}

/// One line of the per-step metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub stage: StageKind,
    pub step: u64,
    pub task: TaskKind,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced: Option<usize>,
}

/// One line of the hard-negative mining log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum MiningEvent {
    Score {
        task: TaskKind,
        step: u64,
        query_id: usize,
        slot: usize,
        negative_id: usize,
        s0: f64,
        s_cur: f64,
        decision: Decision,
    },
    Replace {
        task: TaskKind,
        step: u64,
        query_id: usize,
        slot: usize,
        old: usize,
        new: usize,
    },
    Exhausted {
        task: TaskKind,
        step: u64,
        query_id: usize,
        slot: usize,
    },
}

/// Everything needed to continue a stage mid-way.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: Encoder,
    pub step: u64,
    pub optimizer: AdamW,
    pub mining: BTreeMap<TaskKind, MiningState>,
}

type Seq = Vec<u32>;

enum Batches {
    Lm { seqs: Vec<Seq> },
    Pairs { q: Vec<Seq>, p: Vec<Seq>, groups: Vec<Option<u32>> },
    Retrieval { q: Vec<Seq>, p: Vec<Seq>, groups: Vec<Option<u32>>, explicit: Option<Vec<Vec<Seq>>> },
    Classification { q: Vec<Seq>, pos: Vec<usize>, negs: Vec<Vec<usize>>, labels: Vec<Seq> },
    Sts { a: Vec<Seq>, b: Vec<Seq>, labels: Vec<f64> },
}

struct PreparedTask {
    task: TaskKind,
    weight: f64,
    size: usize,
    data: Batches,
}

fn mismatch(stage: StageKind, task: TaskKind, ex: &TrainingExample) -> Error {
    let shape = match ex.body {
        ExampleBody::Text { .. } => "text",
        ExampleBody::Pair { .. } => "pair",
        ExampleBody::Triplet { .. } => "triplet",
        ExampleBody::Scored { .. } => "scored",
    };
    Error::Data(format!("{stage} stage cannot train on {shape}-shaped {task} data"))
}

fn lm_sequence(tok: &Tokenizer, ex: &TrainingExample, max_len: usize) -> Option<Seq> {
    let mut s = vec![BOS];
    match &ex.body {
        ExampleBody::Text { text } => s.extend(tok.encode(text, max_len)),
        ExampleBody::Pair { query, positive } => {
            s.extend(tok.encode(query, max_len));
            s.push(SEP);
            s.extend(tok.encode(positive, max_len));
        }
        _ => return None,
    }
    s.truncate(max_len);
    Some(s)
}

fn prepare(
    kind: StageKind,
    cfg: &StageConfig,
    tok: &Tokenizer,
    max_len: usize,
    data: &[TaskData],
) -> Result<Vec<PreparedTask>> {
    // Merge files of the same task, keeping first-appearance order.
    let mut merged: Vec<(TaskKind, Vec<&TrainingExample>)> = Vec::new();
    for d in data {
        match merged.iter_mut().find(|m| m.0 == d.task) {
            Some(m) => m.1.extend(d.examples.iter()),
            None => merged.push((d.task, d.examples.iter().collect())),
        }
    }
    let enc = |s: &str| tok.encode(s, max_len);
    let mut out = Vec::new();
    for (task, exs) in merged {
        if exs.is_empty() {
            return Err(Error::Data(format!("{task} dataset is empty")));
        }
        let data = match kind {
            StageKind::LmPretrain | StageKind::PairSft => {
                let mut seqs = Vec::with_capacity(exs.len());
                for ex in &exs {
                    let ok = matches!(ex.body, ExampleBody::Pair { .. })
                        || (kind == StageKind::LmPretrain && matches!(ex.body, ExampleBody::Text { .. }));
                    if !ok {
                        return Err(mismatch(kind, task, ex));
                    }
                    seqs.push(lm_sequence(tok, ex, max_len).expect("shape checked"));
                }
                if seqs.iter().any(|s| s.len() < 2) {
                    return Err(Error::invalid("max_len must allow at least one predicted token"));
                }
                Batches::Lm { seqs }
            }
            StageKind::WeakContrastive => {
                let (mut q, mut p, mut groups) = (vec![], vec![], vec![]);
                for ex in &exs {
                    let (a, b) = ex.query_passage().ok_or_else(|| mismatch(kind, task, ex))?;
                    q.push(enc(a));
                    p.push(enc(b));
                    groups.push(ex.group);
                }
                Batches::Pairs { q, p, groups }
            }
            StageKind::Supervised => match task {
                TaskKind::Sts => {
                    let (mut a, mut b, mut labels) = (vec![], vec![], vec![]);
                    for ex in &exs {
                        let ExampleBody::Scored { a: x, b: y, label } = &ex.body else {
                            return Err(mismatch(kind, task, ex));
                        };
                        if !label.is_finite() {
                            return Err(Error::Data("non-finite STS label".into()));
                        }
                        a.push(enc(x));
                        b.push(enc(y));
                        labels.push(*label);
                    }
                    Batches::Sts { a, b, labels }
                }
                TaskKind::Classification => {
                    let mut label_ids: HashMap<String, usize> = HashMap::new();
                    let mut labels = Vec::new();
                    let mut id = |s: &str| {
                        *label_ids.entry(s.to_string()).or_insert_with(|| {
                            labels.push(enc(s));
                            labels.len() - 1
                        })
                    };
                    let (mut q, mut pos, mut negs) = (vec![], vec![], vec![]);
                    for ex in &exs {
                        let ExampleBody::Triplet { query, positive, negatives } = &ex.body else {
                            return Err(mismatch(kind, task, ex));
                        };
                        if negatives.is_empty() {
                            return Err(Error::Data("classification example without negative labels".into()));
                        }
                        q.push(enc(query));
                        pos.push(id(positive));
                        negs.push(negatives.iter().map(|n| id(n)).collect());
                    }
                    Batches::Classification { q, pos, negs, labels }
                }
                TaskKind::Text => return Err(mismatch(kind, task, exs[0])),
                _ => {
                    let k = cfg.negatives();
                    let (mut q, mut p, mut groups) = (vec![], vec![], vec![]);
                    let mut explicit: Vec<Vec<Seq>> = vec![];
                    let triplets = matches!(exs[0].body, ExampleBody::Triplet { .. });
                    for ex in &exs {
                        match (&ex.body, triplets) {
                            (ExampleBody::Pair { query, positive }, false) => {
                                q.push(enc(query));
                                p.push(enc(positive));
                            }
                            (ExampleBody::Triplet { query, positive, negatives }, true) => {
                                if negatives.len() < k {
                                    return Err(Error::Data(format!(
                                        "triplet has {} negatives, stage needs {k}",
                                        negatives.len()
                                    )));
                                }
                                q.push(enc(query));
                                p.push(enc(positive));
                                explicit.push(negatives[..k].iter().map(|n| enc(n)).collect());
                            }
                            _ => return Err(mismatch(kind, task, ex)),
                        }
                        groups.push(ex.group);
                    }
                    if triplets && cfg.dhnm.is_some() {
                        return Err(Error::Data(
                            "hard-negative mining needs pair-shaped data to build its pools".into(),
                        ));
                    }
                    Batches::Retrieval { q, p, groups, explicit: triplets.then_some(explicit) }
                }
            },
        };
        out.push(PreparedTask { task, weight: 1.0, size: exs.len(), data });
    }
    // Every cycle of |tasks| steps visits each task once, larger datasets first;
    // unset loss weights default to the task's share of all examples.
    out.sort_by(|a, b| b.size.cmp(&a.size).then(a.task.cmp(&b.task)));
    let total: usize = out.iter().map(|t| t.size).sum();
    let n = out.len() as f64;
    for t in &mut out {
        t.weight = cfg
            .loss_weights
            .get(&t.task)
            .copied()
            .unwrap_or(n * t.size as f64 / total as f64);
    }
    Ok(out)
}

/// Indices of up to `b` distinct examples, avoiding repeated groups where possible.
fn sample_batch(rng: &mut ChaCha8Rng, n: usize, b: usize, groups: Option<&[Option<u32>]>) -> Vec<usize> {
    let b = b.min(n);
    let mut chosen = Vec::with_capacity(b);
    let mut used = BTreeSet::new();
    let mut used_groups = BTreeSet::new();
    let mut attempts = 0usize;
    while chosen.len() < b {
        let i = rng.gen_range(0..n);
        attempts += 1;
        if used.contains(&i) {
            continue;
        }
        if let Some(Some(g)) = groups.map(|gs| gs[i]) {
            if used_groups.contains(&g) && attempts < 64 * b {
                continue;
            }
            used_groups.insert(g);
        }
        used.insert(i);
        chosen.push(i);
    }
    chosen
}

fn add_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let s = add_all(g, terms)?;
    Ok(g.scale(s, 1.0 / terms.len() as f64))
}

/// Per-length attention masks for one step.
struct Masks {
    policy: MaskPolicy,
    state: Option<ScheduleState>,
    cache: HashMap<usize, Rc<Vec<f64>>>,
}

impl Masks {
    fn get(&mut self, n: usize) -> Result<Rc<Vec<f64>>> {
        if let Some(m) = self.cache.get(&n) {
            return Ok(m.clone());
        }
        let m = match (self.policy, self.state) {
            (MaskPolicy::Causal, _) => AttentionMask::causal(n)?,
            (MaskPolicy::Bidirectional, _) => AttentionMask::bidirectional(n)?,
            (MaskPolicy::Soft(_), Some(st)) => build_soft_mask(&st, n, n)?,
            (MaskPolicy::Soft(_), None) => unreachable!("soft policy always carries a schedule state"),
        };
        let m = Rc::new(m.into_entries());
        self.cache.insert(n, m.clone());
        Ok(m)
    }
}

/// Runs one stage step by step. Each step draws its batch from an RNG keyed by
/// (stage seed, step), so a resumed stage replays exactly.
pub struct StageTrainer {
    cfg: StageConfig,
    seed: u64,
    enc: Encoder,
    opt: AdamW,
    step: u64,
    tasks: Vec<PreparedTask>,
    mining: BTreeMap<TaskKind, MiningState>,
    metrics: Vec<StepMetric>,
    mining_log: Vec<MiningEvent>,
}

impl StageTrainer {
    pub fn new(encoder: Encoder, cfg: StageConfig, seed: u64, tok: &Tokenizer, data: &[TaskData]) -> Result<Self> {
        let opt = Self::fresh_optimizer(&encoder, &cfg);
        let state = TrainState { encoder, step: 0, optimizer: opt, mining: BTreeMap::new() };
        let mut t = Self::build(state, cfg, seed, tok, data)?;
        t.init_mining()?;
        Ok(t)
    }

    /// Continue from a saved state; pools and slots come from the state.
    pub fn resume(state: TrainState, cfg: StageConfig, seed: u64, tok: &Tokenizer, data: &[TaskData]) -> Result<Self> {
        if state.step > cfg.steps {
            return Err(Error::Checkpoint(format!("state at step {} beyond budget {}", state.step, cfg.steps)));
        }
        let t = Self::build(state, cfg, seed, tok, data)?;
        for task in &t.tasks {
            if let Batches::Retrieval { explicit: None, .. } = task.data {
                if t.cfg.negatives() > 0 && !t.mining.contains_key(&task.task) {
                    return Err(Error::Checkpoint(format!("saved state lacks mining state for {}", task.task)));
                }
            }
        }
        Ok(t)
    }

    fn fresh_optimizer(enc: &Encoder, cfg: &StageConfig) -> AdamW {
        let c = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
        AdamW::new(c, enc.params().iter().map(|(_, t)| t.shape()))
    }

    fn build(state: TrainState, cfg: StageConfig, seed: u64, tok: &Tokenizer, data: &[TaskData]) -> Result<Self> {
        cfg.validate()?;
        if tok.vocab_size() > state.encoder.config().vocab_size {
            return Err(Error::invalid(format!(
                "tokenizer needs {} ids, encoder has {}",
                tok.vocab_size(),
                state.encoder.config().vocab_size
            )));
        }
        if data.is_empty() {
            return Err(Error::Data(format!("{} stage has no data", cfg.kind)));
        }
        let tasks = prepare(cfg.kind, &cfg, tok, state.encoder.config().max_len, data)?;
        Ok(StageTrainer {
            cfg,
            seed,
            enc: state.encoder,
            opt: state.optimizer,
            step: state.step,
            tasks,
            mining: state.mining,
            metrics: Vec::new(),
            mining_log: Vec::new(),
        })
    }

    /// Rank every query's candidates with the encoder as it stands at stage
    /// start: the top `K` become initial negatives, the next `pool_size` the pool.
    fn init_mining(&mut self) -> Result<()> {
        let k = self.cfg.negatives();
        if k == 0 {
            return Ok(());
        }
        for task in &self.tasks {
            let Batches::Retrieval { q, p, groups, explicit: None } = &task.data else { continue };
            let embed = |seqs: &[Seq]| -> Result<Vec<Vec<f64>>> {
                let bi = |n: usize| Rc::new(vec![1.0; n * n]);
                Ok(self.enc.embed_texts(seqs, &bi)?.into_iter().map(|e| e.vector).collect())
            };
            let qe = embed(q)?;
            let pe = embed(p)?;
            let mut state = MiningState::new(self.cfg.dhnm.unwrap_or_default());
            for i in 0..q.len() {
                let scored: Vec<(usize, f64)> = (0..p.len())
                    .filter(|&j| j != i && p[j] != p[i])
                    .filter(|&j| match (groups[i], groups[j]) {
                        (Some(a), Some(b)) => a != b,
                        _ => true,
                    })
                    .map(|j| (j, dhnm::score(&qe[i], &pe[j])))
                    .collect();
                let (initial, mut pool) = dhnm::rank_candidates(scored, k);
                if initial.len() < k {
                    return Err(Error::Data(format!(
                        "{} query {i} has {} negative candidates, needs {k}",
                        task.task,
                        initial.len()
                    )));
                }
                pool.truncate(self.cfg.pool_size);
                state.add_query(i, &initial, pool);
            }
            self.mining.insert(task.task, state);
        }
        Ok(())
    }

    pub fn config(&self) -> &StageConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn encoder(&self) -> &Encoder {
        &self.enc
    }

    pub fn mining(&self) -> &BTreeMap<TaskKind, MiningState> {
        &self.mining
    }

    /// Tasks in round-robin order with their loss weights.
    pub fn schedule(&self) -> Vec<(TaskKind, f64)> {
        self.tasks.iter().map(|t| (t.task, t.weight)).collect()
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            encoder: self.enc.clone(),
            step: self.step,
            optimizer: self.opt.clone(),
            mining: self.mining.clone(),
        }
    }

    pub fn into_encoder(self) -> Encoder {
        self.enc
    }

    pub fn take_metrics(&mut self) -> Vec<StepMetric> {
        std::mem::take(&mut self.metrics)
    }

    pub fn take_mining_log(&mut self) -> Vec<MiningEvent> {
        std::mem::take(&mut self.mining_log)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = (self.cfg.warmup() * self.cfg.steps as f64).ceil() as u64;
        if warm == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }

    /// Schedule position at `step`; for a soft mask the clock runs from 0 at
    /// the first step to τ at the last, with τ = steps − 1.
    pub fn schedule_state(&self, step: u64) -> Result<Option<ScheduleState>> {
        match self.cfg.mask_policy() {
            MaskPolicy::Soft(kind) => Ok(Some(ScheduleState::new(kind, step, self.cfg.steps - 1)?)),
            _ => Ok(None),
        }
    }

    /// The attention mask a length-`n` sequence gets at `step`.
    pub fn mask_at(&self, step: u64, n: usize) -> Result<Vec<f64>> {
        let mut m = Masks { policy: self.cfg.mask_policy(), state: self.schedule_state(step)?, cache: HashMap::new() };
        Ok(m.get(n)?.as_ref().clone())
    }

    fn dims(&self) -> Vec<usize> {
        let cfg = self.enc.config();
        if self.cfg.mrl {
            cfg.mrl_dims.clone()
        } else {
            vec![cfg.hidden_dim]
        }
    }

    fn embed_raw(&self, g: &mut Graph, vars: &[Var], seqs: &[&[u32]], masks: &mut Masks) -> Result<Var> {
        let m = seqs.iter().map(|s| masks.get(s.len())).collect::<Result<Vec<_>>>()?;
        let batch = self.enc.pack(seqs, &m)?;
        let states = self.enc.forward(g, vars, &batch)?;
        self.enc.pool_raw(g, states, &batch)
    }

    fn prefix(&self, g: &mut Graph, raw: Var, d: usize) -> Result<Var> {
        if d == self.enc.config().hidden_dim {
            Ok(raw)
        } else {
            g.slice_cols(raw, 0, d)
        }
    }

    /// Run one optimization step and return its metric record.
    pub fn step(&mut self) -> Result<StepMetric> {
        if self.is_done() {
            return Err(Error::invalid(format!("{} stage already ran its {} steps", self.cfg.kind, self.cfg.steps)));
        }
        let s = self.step;
        let ti = (s % self.tasks.len() as u64) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(s);
        let sched = self.schedule_state(s)?;
        let mut masks = Masks { policy: self.cfg.mask_policy(), state: sched, cache: HashMap::new() };
        let lr = self.lr_at(s);
        let mut g = Graph::new();
        let vars = self.enc.bind(&mut g, true);
        let task = &self.tasks[ti];
        let mut mined: Option<(Vec<usize>, Vec<f64>)> = None;
        let loss = match &task.data {
            Batches::Lm { seqs } => {
                let idx = sample_batch(&mut rng, seqs.len(), self.cfg.batch_size, None);
                let refs: Vec<&[u32]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
                let m = refs.iter().map(|r| masks.get(r.len())).collect::<Result<Vec<_>>>()?;
                let batch = self.enc.pack(&refs, &m)?;
                let states = self.enc.forward(&mut g, &vars, &batch)?;
                let mut rows = Vec::new();
                let mut targets = Vec::new();
                for &(start, n) in &batch.segments {
                    for i in 0..n - 1 {
                        rows.push(start + i);
                        targets.push(batch.tokens[start + i + 1]);
                    }
                }
                let h = g.index_rows(states, &rows)?;
                let logits = self.enc.lm_logits(&mut g, &vars, h)?;
                next_token_ce(&mut g, logits, &targets)?
            }
            Batches::Pairs { q, p, groups } => {
                let idx = sample_batch(&mut rng, q.len(), self.cfg.batch_size, Some(groups));
                let b = idx.len();
                let mut refs: Vec<&[u32]> = idx.iter().map(|&i| q[i].as_slice()).collect();
                refs.extend(idx.iter().map(|&i| p[i].as_slice()));
                let raw = self.embed_raw(&mut g, &vars, &refs, &mut masks)?;
                let qi: Vec<usize> = (0..b).collect();
                let pi: Vec<usize> = (b..2 * b).collect();
                let mut terms = Vec::new();
                for d in self.dims() {
                    let e = self.prefix(&mut g, raw, d)?;
                    let qv = g.index_rows(e, &qi)?;
                    let pv = g.index_rows(e, &pi)?;
                    let out = info_nce(
                        &mut g,
                        &ContrastiveBatch {
                            queries: qv,
                            positives: pv,
                            negatives: None,
                            negatives_per_query: 0,
                            temperature: self.cfg.temperature,
                        },
                    )?;
                    terms.push(g.scale(out.loss, 1.0 / b as f64));
                }
                mean_of(&mut g, &terms)?
            }
            Batches::Retrieval { q, p, groups, explicit } => {
                let idx = sample_batch(&mut rng, q.len(), self.cfg.triplet_batch_size, Some(groups));
                let b = idx.len();
                let k = self.cfg.negatives();
                let mut refs: Vec<&[u32]> = idx.iter().map(|&i| q[i].as_slice()).collect();
                refs.extend(idx.iter().map(|&i| p[i].as_slice()));
                for &i in &idx {
                    match explicit {
                        Some(ex) => refs.extend(ex[i].iter().map(|n| n.as_slice())),
                        None if k > 0 => {
                            let negs = self.mining[&task.task].negatives(i);
                            refs.extend(negs.iter().map(|&j| p[j].as_slice()));
                        }
                        None => {}
                    }
                }
                let raw = self.embed_raw(&mut g, &vars, &refs, &mut masks)?;
                let qi: Vec<usize> = (0..b).collect();
                let pi: Vec<usize> = (b..2 * b).collect();
                let ni: Vec<usize> = (2 * b..2 * b + b * k).collect();
                let dims = self.dims();
                let full = *dims.last().expect("at least one dim");
                let mut terms = Vec::new();
                for d in dims {
                    let e = self.prefix(&mut g, raw, d)?;
                    let qv = g.index_rows(e, &qi)?;
                    let pv = g.index_rows(e, &pi)?;
                    let nv = if k > 0 { Some(g.index_rows(e, &ni)?) } else { None };
                    let out = info_nce(
                        &mut g,
                        &ContrastiveBatch {
                            queries: qv,
                            positives: pv,
                            negatives: nv,
                            negatives_per_query: k,
                            temperature: self.cfg.temperature,
                        },
                    )?;
                    terms.push(g.scale(out.loss, 1.0 / b as f64));
                    if d == full && explicit.is_none() && self.cfg.dhnm.is_some() {
                        mined = Some((idx.clone(), out.negative_scores));
                    }
                }
                mean_of(&mut g, &terms)?
            }
            Batches::Classification { q, pos, negs, labels } => {
                let idx = sample_batch(&mut rng, q.len(), self.cfg.batch_size, None);
                let b = idx.len();
                let used: BTreeSet<usize> =
                    idx.iter().flat_map(|&i| std::iter::once(pos[i]).chain(negs[i].iter().copied())).collect();
                let row_of: HashMap<usize, usize> = used.iter().enumerate().map(|(r, &l)| (l, b + r)).collect();
                let mut refs: Vec<&[u32]> = idx.iter().map(|&i| q[i].as_slice()).collect();
                refs.extend(used.iter().map(|&l| labels[l].as_slice()));
                let raw = self.embed_raw(&mut g, &vars, &refs, &mut masks)?;
                let mut terms = Vec::new();
                for d in self.dims() {
                    let e = self.prefix(&mut g, raw, d)?;
                    let mut per_example = Vec::with_capacity(b);
                    for (bi, &i) in idx.iter().enumerate() {
                        let qv = g.index_rows(e, &[bi])?;
                        let pv = g.index_rows(e, &[row_of[&pos[i]]])?;
                        let nrows: Vec<usize> = negs[i].iter().map(|l| row_of[l]).collect();
                        let nv = g.index_rows(e, &nrows)?;
                        let out = info_nce(
                            &mut g,
                            &ContrastiveBatch {
                                queries: qv,
                                positives: pv,
                                negatives: Some(nv),
                                negatives_per_query: nrows.len(),
                                temperature: self.cfg.temperature,
                            },
                        )?;
                        per_example.push(out.loss);
                    }
                    terms.push(mean_of(&mut g, &per_example)?);
                }
                mean_of(&mut g, &terms)?
            }
            Batches::Sts { a, b, labels } => {
                let idx = sample_batch(&mut rng, a.len(), self.cfg.sts_batch_size, None);
                let n = idx.len();
                let mut refs: Vec<&[u32]> = idx.iter().map(|&i| a[i].as_slice()).collect();
                refs.extend(idx.iter().map(|&i| b[i].as_slice()));
                let raw = self.embed_raw(&mut g, &vars, &refs, &mut masks)?;
                let lab: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
                let ai: Vec<usize> = (0..n).collect();
                let bi: Vec<usize> = (n..2 * n).collect();
                let mut terms = Vec::new();
                for d in self.dims() {
                    let e = self.prefix(&mut g, raw, d)?;
                    let av = g.index_rows(e, &ai)?;
                    let bv = g.index_rows(e, &bi)?;
                    let cos = pair_cosines(&mut g, av, bv)?;
                    terms.push(cosent(&mut g, cos, &lab, self.cfg.cosent_tau)?);
                }
                mean_of(&mut g, &terms)?
            }
        };
        let loss = g.scale(loss, task.weight);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} loss at step {s}", self.cfg.kind)));
        }
        let task_kind = task.task;
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor> = vars
            .iter()
            .map(|v| grads.take(*v).ok_or_else(|| Error::invalid("missing parameter gradient")))
            .collect::<Result<_>>()?;
        self.opt
            .step(self.enc.params_mut(), &gs, lr)
            .map_err(|e| Error::NonFinite(format!("{} step {s}: {e}", self.cfg.kind)))?;

        let mut replaced = None;
        if let Some((idx, scores)) = mined {
            let k = self.cfg.negatives();
            let triples: Vec<(usize, usize, f64)> = idx
                .iter()
                .enumerate()
                .flat_map(|(bi, &qi)| (0..k).map(move |slot| (qi, slot, bi * k + slot)))
                .map(|(qi, slot, r)| (qi, slot, scores[r]))
                .collect();
            let state = self.mining.get_mut(&task_kind).expect("mining initialised for mined tasks");
            for r in state.cache_scores(s, &triples)? {
                self.mining_log.push(MiningEvent::Score {
                    task: task_kind,
                    step: s,
                    query_id: r.query_id,
                    slot: r.slot,
                    negative_id: r.negative_id,
                    s0: r.s0,
                    s_cur: r.s_cur,
                    decision: r.decision,
                });
            }
            let report = state.replace_flagged();
            for &(query_id, slot, old, new) in &report.replaced {
                self.mining_log.push(MiningEvent::Replace { task: task_kind, step: s, query_id, slot, old, new });
            }
            for &(query_id, slot) in &report.exhausted {
                self.mining_log.push(MiningEvent::Exhausted { task: task_kind, step: s, query_id, slot });
            }
            replaced = Some(report.replaced.len());
        }
        self.step += 1;
        let metric = StepMetric {
            stage: self.cfg.kind,
            step: s,
            task: task_kind,
            loss: value,
            lr,
            alpha: sched.map(|st| st.alpha()),
            replaced,
        };
        self.metrics.push(metric.clone());
        Ok(metric)
    }

    /// Step until the budget is spent.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }
}
