//! Dataset records, SFT pair conversion, quality filtering, cross-lingual pair
//! generation and synthetic corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::Path;
use std::process::{Command, Stdio};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.4;
pub const SFT_SEPARATOR: &str = "\n";
pub const DATASET_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Text,
    Sft,
    Weak,
    Retrieval,
    Clr,
    Classification,
    Sts,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Text,
        TaskKind::Sft,
        TaskKind::Weak,
        TaskKind::Retrieval,
        TaskKind::Clr,
        TaskKind::Classification,
        TaskKind::Sts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Text => "text",
            TaskKind::Sft => "sft",
            TaskKind::Weak => "weak",
            TaskKind::Retrieval => "retrieval",
            TaskKind::Clr => "clr",
            TaskKind::Classification => "classification",
            TaskKind::Sts => "sts",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown task kind {s:?}")))
    }
}

/// The payload of one example; the `shape` tag decides which fields exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum ExampleBody {
    Text { text: String },
    Pair { query: String, positive: String },
    Triplet { query: String, positive: String, negatives: Vec<String> },
    Scored { a: String, b: String, label: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub task: TaskKind,
    #[serde(flatten)]
    pub body: ExampleBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_lang: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage_lang: Option<String>,
    /// Cluster id for synthetic data; equal groups are mutual positives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u32>,
    #[serde(default)]
    pub source: String,
}

impl TrainingExample {
    pub fn pair(task: TaskKind, query: impl Into<String>, positive: impl Into<String>) -> Self {
        TrainingExample {
            task,
            body: ExampleBody::Pair { query: query.into(), positive: positive.into() },
            query_lang: None,
            passage_lang: None,
            group: None,
            source: String::new(),
        }
    }

    pub fn query_passage(&self) -> Option<(&str, &str)> {
        match &self.body {
            ExampleBody::Pair { query, positive } | ExampleBody::Triplet { query, positive, .. } => {
                Some((query, positive))
            }
            _ => None,
        }
    }

    fn query_mut(&mut self) -> Option<&mut String> {
        match &mut self.body {
            ExampleBody::Pair { query, .. } | ExampleBody::Triplet { query, .. } => Some(query),
            _ => None,
        }
    }
}

pub fn pair_from_sft(r: &RawRecord) -> Result<TrainingExample> {
    if r.output.is_empty() {
        return Err(Error::Data(format!("record from {:?} has an empty output", r.source)));
    }
    let query = match (r.instruction.is_empty(), r.input.is_empty()) {
        (true, _) => r.input.clone(),
        (false, true) => r.instruction.clone(),
        (false, false) => format!("{}{SFT_SEPARATOR}{}", r.instruction, r.input),
    };
    let mut ex = TrainingExample::pair(TaskKind::Sft, query, r.output.clone());
    ex.source = r.source.clone();
    Ok(ex)
}

/// Relevance scorer returning a value in `[0, 1]`.
pub trait ScorerClient {
    fn score(&self, query: &str, passage: &str) -> Result<f64>;
}

impl<F: Fn(&str, &str) -> Result<f64>> ScorerClient for F {
    fn score(&self, query: &str, passage: &str) -> Result<f64> {
        self(query, passage)
    }
}

/// Scorer that returns the same value for everything.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl ScorerClient for ConstantScorer {
    fn score(&self, _: &str, _: &str) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DropReport {
    pub below_threshold: BTreeMap<String, usize>,
    pub scorer_failures: BTreeMap<String, usize>,
}

impl DropReport {
    pub fn total(&self) -> usize {
        self.below_threshold.values().sum::<usize>() + self.scorer_failures.values().sum::<usize>()
    }
}

/// Keep examples whose score is at least `threshold`, in their original order.
pub fn quality_filter(
    pairs: Vec<TrainingExample>,
    scorer: &dyn ScorerClient,
    threshold: f64,
) -> Result<(Vec<TrainingExample>, DropReport)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut kept = Vec::with_capacity(pairs.len());
    let mut report = DropReport::default();
    for ex in pairs {
        let (q, p) = ex
            .query_passage()
            .ok_or_else(|| Error::Data(format!("quality filter needs query/passage, got {:?}", ex.task)))?;
        match scorer.score(q, p) {
            Ok(s) if s.is_finite() && (0.0..=1.0).contains(&s) => {
                if s >= threshold {
                    kept.push(ex);
                } else {
                    *report.below_threshold.entry(ex.source.clone()).or_default() += 1;
                }
            }
            Ok(s) => {
                log::warn!("scorer returned {s} for a record from {:?}; dropping", ex.source);
                *report.scorer_failures.entry(ex.source.clone()).or_default() += 1;
            }
            Err(e) => {
                log::warn!("scorer failed on a record from {:?}: {e}; dropping", ex.source);
                *report.scorer_failures.entry(ex.source.clone()).or_default() += 1;
            }
        }
    }
    Ok((kept, report))
}

/// Categorical distribution over language codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageDistribution {
    entries: Vec<(String, f64)>,
}

/// Percentages of the translation-pair language table, in table order.
/// They add up to 106, so [`LanguageDistribution::table7`] normalizes them.
pub const TABLE7_PERCENT: [(&str, f64); 26] = [
    ("en", 25.0),
    ("zh", 12.0),
    ("es", 8.0),
    ("fr", 6.0),
    ("ja", 6.0),
    ("de", 5.0),
    ("ru", 5.0),
    ("it", 4.0),
    ("pt", 4.0),
    ("ar", 3.0),
    ("ko", 3.0),
    ("bn", 2.0),
    ("da", 2.0),
    ("sv", 2.0),
    ("th", 2.0),
    ("ms", 2.0),
    ("tr", 2.0),
    ("vi", 2.0),
    ("nl", 2.0),
    ("pl", 2.0),
    ("hi", 2.0),
    ("km", 1.0),
    ("fi", 1.0),
    ("he", 1.0),
    ("hu", 1.0),
    ("no", 1.0),
];

impl LanguageDistribution {
    /// Proportions must be non-negative and sum to 1 within 1e-9.
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        Self::check_entries(&entries)?;
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("language proportions sum to {total}, not 1")));
        }
        Ok(LanguageDistribution { entries })
    }

    /// Scale non-negative weights so they sum to 1.
    pub fn from_weights(entries: Vec<(String, f64)>) -> Result<Self> {
        Self::check_entries(&entries)?;
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if total <= 0.0 {
            return Err(Error::invalid("language weights sum to zero"));
        }
        Ok(LanguageDistribution {
            entries: entries.into_iter().map(|(c, w)| (c, w / total)).collect(),
        })
    }

    pub fn table7() -> Self {
        Self::from_weights(TABLE7_PERCENT.iter().map(|&(c, p)| (c.to_string(), p)).collect())
            .expect("static table is valid")
    }

    pub fn single(code: &str) -> Self {
        LanguageDistribution { entries: vec![(code.to_string(), 1.0)] }
    }

    fn check_entries(entries: &[(String, f64)]) -> Result<()> {
        if entries.is_empty() {
            return Err(Error::invalid("language distribution is empty"));
        }
        let mut seen = BTreeSet::new();
        for (code, p) in entries {
            if !p.is_finite() || *p < 0.0 {
                return Err(Error::invalid(format!("proportion for {code:?} is {p}")));
            }
            if !seen.insert(code.as_str()) {
                return Err(Error::invalid(format!("language code {code:?} listed twice")));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn proportion(&self, code: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == code).map(|e| e.1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (code, p) in &self.entries {
            acc += p;
            if u < acc {
                return code;
            }
        }
        // Rounding can leave `acc` just below 1; fall back to the last non-zero entry.
        &self.entries.iter().rev().find(|e| e.1 > 0.0).unwrap_or(&self.entries[0]).0
    }

    /// Parse the TOML distribution file.
    ///
    /// ```toml
    /// normalize = false      # optional; true rescales weights to sum to 1
    /// [[language]]
    /// code = "en"
    /// proportion = 0.6
    /// [[language]]
    /// code = "de"
    /// proportion = 0.4
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            code: String,
            proportion: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            #[serde(default)]
            normalize: bool,
            language: Vec<Entry>,
        }
        let f: File = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let entries = f.language.into_iter().map(|e| (e.code, e.proportion)).collect();
        if f.normalize {
            Self::from_weights(entries)
        } else {
            Self::new(entries)
        }
    }
}

pub fn sample_target_language(dist: &LanguageDistribution, seed: u64) -> String {
    dist.sample(&mut ChaCha8Rng::seed_from_u64(seed)).to_string()
}

pub trait TranslatorClient {
    fn translate(&self, text: &str, target: &str) -> Result<String>;
}

impl<F: Fn(&str, &str) -> Result<String>> TranslatorClient for F {
    fn translate(&self, text: &str, target: &str) -> Result<String> {
        self(text, target)
    }
}

/// Offline translator: prefixes `"[target] "` and rewrites every word of the
/// form `stem.code` with a known `code` to `stem.target`.
#[derive(Debug, Clone, Default)]
pub struct MockTranslator {
    codes: BTreeSet<String>,
}

impl MockTranslator {
    pub fn new<S: Into<String>>(codes: impl IntoIterator<Item = S>) -> Self {
        MockTranslator { codes: codes.into_iter().map(Into::into).collect() }
    }

    fn substitute(&self, text: &str, target: &str) -> String {
        text.split(' ')
            .map(|w| match w.rsplit_once('.') {
                Some((stem, code)) if !stem.is_empty() && self.codes.contains(code) => {
                    format!("{stem}.{target}")
                }
                _ => w.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Undo [`TranslatorClient::translate`], returning text in `source`.
    pub fn invert(&self, text: &str, source: &str) -> Result<String> {
        let rest = text
            .strip_prefix('[')
            .and_then(|t| t.split_once("] "))
            .map(|(_, r)| r)
            .ok_or_else(|| Error::Data(format!("{text:?} carries no language prefix")))?;
        Ok(self.substitute(rest, source))
    }
}

impl TranslatorClient for MockTranslator {
    fn translate(&self, text: &str, target: &str) -> Result<String> {
        Ok(format!("[{target}] {}", self.substitute(text, target)))
    }
}

/// Translator that runs `program args.. <target>` with the text on stdin and
/// reads the translation from stdout.
#[derive(Debug, Clone)]
pub struct CommandTranslator {
    pub program: String,
    pub args: Vec<String>,
}

impl TranslatorClient for CommandTranslator {
    fn translate(&self, text: &str, target: &str) -> Result<String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(target)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Data(format!("cannot start {:?}: {e}", self.program)))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(text.as_bytes())
            .map_err(|e| Error::Data(format!("writing to {:?}: {e}", self.program)))?;
        let out = child
            .wait_with_output()
            .map_err(|e| Error::Data(format!("waiting for {:?}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::Data(format!(
                "{:?} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let s = String::from_utf8(out.stdout)
            .map_err(|_| Error::Data(format!("{:?} produced non-UTF-8 output", self.program)))?;
        Ok(s.trim_end_matches(['\n', '\r']).to_string())
    }
}

/// Translate the query of `pair` into `target`, leaving the passage untouched.
pub fn make_clr_pair(
    pair: &TrainingExample,
    translator: &dyn TranslatorClient,
    target: &str,
) -> Result<TrainingExample> {
    let passage_lang = pair
        .passage_lang
        .clone()
        .ok_or_else(|| Error::Data("pair has no passage language tag".into()))?;
    let source = pair.query_lang.clone().unwrap_or_else(|| passage_lang.clone());
    let mut out = pair.clone();
    out.task = TaskKind::Clr;
    out.passage_lang = Some(passage_lang);
    let query = out
        .query_mut()
        .ok_or_else(|| Error::Data(format!("cannot translate a {:?} example", pair.task)))?;
    if source != target {
        *query = translator.translate(query, target)?;
    }
    out.query_lang = Some(target.to_string());
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ClrOutput {
    pub examples: Vec<TrainingExample>,
    /// (input index, reason) for every dropped record.
    pub failures: Vec<(usize, String)>,
}

/// Translate each pair into a language drawn from `dist`. Input order is kept.
pub fn generate_clr(
    pairs: &[TrainingExample],
    translator: &dyn TranslatorClient,
    dist: &LanguageDistribution,
    seed: u64,
) -> ClrOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ClrOutput::default();
    for (i, p) in pairs.iter().enumerate() {
        let target = dist.sample(&mut rng).to_string();
        match make_clr_pair(p, translator, &target) {
            Ok(ex) => out.examples.push(ex),
            Err(e) => {
                log::warn!("dropping record {i}: {e}");
                out.failures.push((i, e.to_string()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: u32,
    pub task: TaskKind,
    pub languages: Vec<String>,
}

impl DatasetHeader {
    pub fn for_examples(task: TaskKind, examples: &[TrainingExample]) -> Self {
        let mut langs = BTreeSet::new();
        for e in examples {
            langs.extend(e.query_lang.iter().cloned());
            langs.extend(e.passage_lang.iter().cloned());
        }
        DatasetHeader { format: DATASET_FORMAT, task, languages: langs.into_iter().collect() }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: DatasetHeader,
}

/// One JSON object per line, headed by a `{"header": ...}` record.
pub fn dataset_to_string(header: &DatasetHeader, examples: &[TrainingExample]) -> String {
    let mut s = serde_json::to_string(&HeaderLine { header: header.clone() }).expect("header serializes");
    s.push('\n');
    for e in examples {
        s.push_str(&serde_json::to_string(e).expect("example serializes"));
        s.push('\n');
    }
    s
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, examples: &[TrainingExample]) -> Result<()> {
    std::fs::write(path, dataset_to_string(header, examples)).map_err(|e| Error::io(path, e))
}

pub fn parse_dataset(reader: impl BufRead) -> Result<(DatasetHeader, Vec<TrainingExample>)> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(Error::Data("dataset has no header record".into())),
            Some((_, Err(e))) => return Err(Error::Data(e.to_string())),
            Some((_, Ok(l))) if l.trim().is_empty() => continue,
            Some((n, Ok(l))) => {
                let h: HeaderLine = serde_json::from_str(&l)
                    .map_err(|e| Error::Data(format!("line {}: bad header: {e}", n + 1)))?;
                break h.header;
            }
        }
    };
    if header.format != DATASET_FORMAT {
        return Err(Error::Data(format!("unsupported dataset format {}", header.format)));
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|e| Error::Data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        out.push(ex);
    }
    Ok((header, out))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<TrainingExample>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub languages: Vec<String>,
    pub seed: u64,
    pub signature_len: usize,
    pub fillers: usize,
    pub filler_len: usize,
}

impl SynthConfig {
    pub fn new(clusters: usize, per_cluster: usize, languages: &[&str], seed: u64) -> Self {
        SynthConfig {
            clusters,
            per_cluster,
            languages: languages.iter().map(|s| s.to_string()).collect(),
            seed,
            signature_len: 3,
            fillers: 16,
            filler_len: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSentence {
    pub cluster: u32,
    pub member: u32,
    pub lang: String,
    pub text: String,
}

/// Clustered toy corpus. Each cluster owns a set of signature words drawn from
/// a shared pool, so clusters overlap and near-misses make hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub signatures: Vec<Vec<usize>>,
    /// Ordered by cluster, then member, then language.
    pub sentences: Vec<SynthSentence>,
    base: Vec<Vec<Vec<usize>>>,
}

fn choose(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

pub fn surface(word: &str, lang: &str) -> String {
    format!("{word}.{lang}")
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.clusters < 2 {
        return Err(Error::invalid("synthetic corpus needs at least 2 clusters"));
    }
    if cfg.per_cluster == 0 || cfg.languages.is_empty() || cfg.signature_len == 0 {
        return Err(Error::invalid("per_cluster, languages and signature_len must be non-empty"));
    }
    if cfg.filler_len > 0 && cfg.fillers == 0 {
        return Err(Error::invalid("filler_len > 0 needs a filler vocabulary"));
    }
    let k = cfg.signature_len;
    let mut pool = (k + 3).max(8);
    while choose(pool, k) < 4 * cfg.clusters {
        pool += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = BTreeSet::new();
    let mut signatures = Vec::with_capacity(cfg.clusters);
    let all: Vec<usize> = (0..pool).collect();
    while signatures.len() < cfg.clusters {
        let mut s: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            signatures.push(s);
        }
    }
    let mut sentences = Vec::new();
    let mut base = Vec::with_capacity(cfg.clusters);
    for (c, sig) in signatures.iter().enumerate() {
        let mut members = Vec::with_capacity(cfg.per_cluster);
        for m in 0..cfg.per_cluster {
            // Word ids: signatures are 0..pool, fillers pool..pool+fillers.
            let mut words: Vec<usize> = sig.clone();
            words.extend((0..cfg.filler_len).map(|_| pool + rng.gen_range(0..cfg.fillers)));
            words.shuffle(&mut rng);
            for lang in &cfg.languages {
                let text = words
                    .iter()
                    .map(|&w| surface(&word_name(w, pool), lang))
                    .collect::<Vec<_>>()
                    .join(" ");
                sentences.push(SynthSentence { cluster: c as u32, member: m as u32, lang: lang.clone(), text });
            }
            members.push(words);
        }
        base.push(members);
    }
    Ok(SynthCorpus { config: cfg.clone(), signatures, sentences, base })
}

fn word_name(w: usize, pool: usize) -> String {
    if w < pool {
        format!("s{w}")
    } else {
        format!("f{}", w - pool)
    }
}

impl SynthCorpus {
    pub fn sentence(&self, cluster: usize, member: usize, lang: &str) -> Option<&SynthSentence> {
        let li = self.config.languages.iter().position(|l| l == lang)?;
        let nl = self.config.languages.len();
        self.sentences.get((cluster * self.config.per_cluster + member) * nl + li)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(|s| s.text.as_str())
    }

    /// Shared signature words between two clusters.
    pub fn overlap(&self, a: usize, b: usize) -> usize {
        let sa = &self.signatures[a];
        self.signatures[b].iter().filter(|w| sa.contains(w)).count()
    }

    /// Positive pairs (member `m` → member `m+1` of the same cluster) over the
    /// members in `members`, with the query in `query_lang` and the passage in
    /// `passage_lang`.
    pub fn pairs(
        &self,
        task: TaskKind,
        members: std::ops::Range<usize>,
        query_lang: &str,
        passage_lang: &str,
    ) -> Result<Vec<TrainingExample>> {
        if members.len() < 2 || members.end > self.config.per_cluster {
            return Err(Error::invalid(format!(
                "member range {members:?} needs 2..={} members",
                self.config.per_cluster
            )));
        }
        let mut out = Vec::new();
        for c in 0..self.config.clusters {
            for m in members.clone() {
                let next = if m + 1 == members.end { members.start } else { m + 1 };
                let q = self.lookup(c, m, query_lang)?;
                let p = self.lookup(c, next, passage_lang)?;
                let mut ex = TrainingExample::pair(task, q.text.clone(), p.text.clone());
                ex.query_lang = Some(query_lang.to_string());
                ex.passage_lang = Some(passage_lang.to_string());
                ex.group = Some(c as u32);
                ex.source = "synth".into();
                out.push(ex);
            }
        }
        Ok(out)
    }

    fn lookup(&self, c: usize, m: usize, lang: &str) -> Result<&SynthSentence> {
        self.sentence(c, m, lang)
            .ok_or_else(|| Error::invalid(format!("no sentence for cluster {c} member {m} in {lang:?}")))
    }

    /// Label texts for `labels` classes; cluster `c` belongs to class `c % labels`.
    pub fn label_texts(&self, labels: usize, lang: &str) -> Vec<String> {
        (0..labels).map(|k| surface(&format!("label{k}"), lang)).collect()
    }

    /// Classification as (text, true label text, other label texts).
    pub fn classification(&self, labels: usize, members: std::ops::Range<usize>, lang: &str) -> Result<Vec<TrainingExample>> {
        if labels < 2 {
            return Err(Error::invalid("classification needs at least 2 labels"));
        }
        let texts = self.label_texts(labels, lang);
        let mut out = Vec::new();
        for c in 0..self.config.clusters {
            let y = c % labels;
            for m in members.clone() {
                let s = self.lookup(c, m, lang)?;
                let negatives = texts.iter().enumerate().filter(|(k, _)| *k != y).map(|(_, t)| t.clone()).collect();
                out.push(TrainingExample {
                    task: TaskKind::Classification,
                    body: ExampleBody::Triplet { query: s.text.clone(), positive: texts[y].clone(), negatives },
                    query_lang: Some(lang.to_string()),
                    passage_lang: Some(lang.to_string()),
                    group: Some(y as u32),
                    source: "synth".into(),
                });
            }
        }
        Ok(out)
    }

    /// Graded similarity pairs; the label is the number of shared signature words.
    pub fn sts(&self, n: usize, members: std::ops::Range<usize>, lang: &str, seed: u64) -> Result<Vec<TrainingExample>> {
        if members.is_empty() || members.end > self.config.per_cluster {
            return Err(Error::invalid(format!("bad member range {members:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let a = rng.gen_range(0..self.config.clusters);
            // Every third pair stays in-cluster so the top grade is represented.
            let b = if i % 3 == 0 { a } else { rng.gen_range(0..self.config.clusters) };
            let ma = rng.gen_range(members.clone());
            let mb = rng.gen_range(members.clone());
            out.push(TrainingExample {
                task: TaskKind::Sts,
                body: ExampleBody::Scored {
                    a: self.lookup(a, ma, lang)?.text.clone(),
                    b: self.lookup(b, mb, lang)?.text.clone(),
                    label: self.overlap(a, b) as f64,
                },
                query_lang: Some(lang.to_string()),
                passage_lang: Some(lang.to_string()),
                group: None,
                source: "synth".into(),
            });
        }
        Ok(out)
    }

    /// Word ids of one member before surface rendering.
    pub fn base_words(&self, cluster: usize, member: usize) -> &[usize] {
        &self.base[cluster][member]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(instruction: &str, input: &str, output: &str) -> RawRecord {
        RawRecord {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
            source: "t".into(),
        }
    }

    #[test]
    fn sft_pairs() {
        let p = pair_from_sft(&rec("Summarize:", "long text", "short text")).unwrap();
        assert_eq!(p.query_passage(), Some(("Summarize:\nlong text", "short text")));
        let p = pair_from_sft(&rec("", "only input", "o")).unwrap();
        assert_eq!(p.query_passage().unwrap().0, "only input");
        assert!(matches!(pair_from_sft(&rec("a", "b", "")), Err(Error::Data(_))));
    }

    #[test]
    fn quality_filter_boundary_and_order() {
        let pairs: Vec<_> = ["0.39", "0.40", "0.9", "x", "0.1"]
            .iter()
            .map(|s| {
                let mut e = TrainingExample::pair(TaskKind::Sft, *s, "p");
                e.source = if s.starts_with("0.9") { "b".into() } else { "a".into() };
                e
            })
            .collect();
        let scorer = |q: &str, _: &str| q.parse::<f64>().map_err(|e| Error::Data(e.to_string()));
        let (kept, report) = quality_filter(pairs.clone(), &scorer, DEFAULT_QUALITY_THRESHOLD).unwrap();
        let kq: Vec<_> = kept.iter().map(|e| e.query_passage().unwrap().0).collect();
        assert_eq!(kq, vec!["0.40", "0.9"]);
        assert_eq!(report.below_threshold.get("a"), Some(&2));
        assert_eq!(report.scorer_failures.get("a"), Some(&1));
        assert_eq!(report.total(), 3);
        let (kept, report) = quality_filter(pairs.clone(), &ConstantScorer(1.0), 0.4).unwrap();
        assert_eq!(kept, pairs);
        assert_eq!(report.total(), 0);
        assert!(quality_filter(vec![], &ConstantScorer(1.0), 1.5).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(LanguageDistribution::new(vec![("en".into(), 0.5), ("de".into(), 0.4)]).is_err());
        assert!(LanguageDistribution::new(vec![("en".into(), 0.5), ("en".into(), 0.5)]).is_err());
        assert!(LanguageDistribution::new(vec![("en".into(), 1.1), ("de".into(), -0.1)]).is_err());
        assert!(LanguageDistribution::new(vec![("en".into(), 0.25), ("de".into(), 0.75)]).is_ok());
        let raw: f64 = TABLE7_PERCENT.iter().map(|e| e.1).sum();
        assert_eq!(raw, 106.0);
        let t7: Vec<_> = TABLE7_PERCENT.iter().map(|&(c, p)| (c.to_string(), p / 100.0)).collect();
        assert!(LanguageDistribution::new(t7).is_err());
        let d = LanguageDistribution::table7();
        let total: f64 = d.entries().iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(d.entries().len(), 26);
    }

    #[test]
    fn single_language_always_sampled() {
        let d = LanguageDistribution::single("sw");
        for s in 0..100 {
            assert_eq!(sample_target_language(&d, s), "sw");
        }
    }

    #[test]
    fn table7_english_frequency() {
        let d = LanguageDistribution::table7();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(d.sample(&mut rng).to_string()).or_default() += 1;
        }
        let en = counts["en"] as f64 / n as f64;
        assert!((en - 25.0 / 106.0).abs() < 0.002, "{en}");
        for (code, p) in d.entries() {
            let f = *counts.get(code).unwrap_or(&0) as f64 / n as f64;
            let tol = 5.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() <= tol, "{code}: {f} vs {p}");
        }
    }

    #[test]
    fn distribution_toml() {
        let d = LanguageDistribution::from_toml(
            "[[language]]\ncode = \"en\"\nproportion = 0.6\n[[language]]\ncode = \"de\"\nproportion = 0.4\n",
        )
        .unwrap();
        assert_eq!(d.proportion("de"), Some(0.4));
        let d = LanguageDistribution::from_toml(
            "normalize = true\n[[language]]\ncode = \"en\"\nproportion = 3\n[[language]]\ncode = \"de\"\nproportion = 1\n",
        )
        .unwrap();
        assert_eq!(d.proportion("en"), Some(0.75));
        assert!(LanguageDistribution::from_toml("[[language]]\ncode = \"en\"\nproportion = 0.5\n").is_err());
        assert!(matches!(LanguageDistribution::from_toml("nonsense ="), Err(Error::Parse(_))));
    }

    fn tagged(q: &str, p: &str) -> TrainingExample {
        let mut e = TrainingExample::pair(TaskKind::Retrieval, q, p);
        e.passage_lang = Some("en".into());
        e.query_lang = Some("en".into());
        e
    }

    #[test]
    fn clr_pairs() {
        let tr = MockTranslator::default();
        let out = make_clr_pair(&tagged("what is X", "X is a thing"), &tr, "de").unwrap();
        assert_eq!(out.query_passage(), Some(("[de] what is X", "X is a thing")));
        assert_eq!(out.task, TaskKind::Clr);
        assert_eq!(out.query_lang.as_deref(), Some("de"));
        assert_eq!(out.passage_lang.as_deref(), Some("en"));
        let same = make_clr_pair(&tagged("what is X", "p"), &tr, "en").unwrap();
        assert_eq!(same.query_passage(), Some(("what is X", "p")));
        assert_eq!(same.task, TaskKind::Clr);
        let mut untagged = tagged("q", "p");
        untagged.passage_lang = None;
        assert!(make_clr_pair(&untagged, &tr, "de").is_err());
    }

    #[test]
    fn mock_translator_is_reversible() {
        let tr = MockTranslator::new(["en", "de"]);
        let src = "s1.en f3.en plain a.b";
        let t = tr.translate(src, "de").unwrap();
        assert_eq!(t, "[de] s1.de f3.de plain a.b");
        assert_eq!(tr.invert(&t, "en").unwrap(), src);
    }

    #[test]
    fn clr_generation_conserves_records() {
        let pairs: Vec<_> = (0..20).map(|i| tagged(&format!("q{i}"), &format!("p{i}"))).collect();
        let flaky = |t: &str, target: &str| {
            if t.ends_with('3') || t.ends_with('7') {
                Err(Error::Data("boom".into()))
            } else {
                Ok(format!("[{target}] {t}"))
            }
        };
        let dist = LanguageDistribution::from_weights(vec![("de".into(), 1.0), ("fr".into(), 1.0)]).unwrap();
        let out = generate_clr(&pairs, &flaky, &dist, 3);
        assert_eq!(out.examples.len() + out.failures.len(), 20);
        assert_eq!(out.failures.iter().map(|f| f.0).collect::<Vec<_>>(), vec![3, 7, 13, 17]);
        for ex in &out.examples {
            let (q, p) = ex.query_passage().unwrap();
            assert_eq!(&q[q.len() - 1..], &p[p.len() - 1..]);
        }
        assert_eq!(out.examples, generate_clr(&pairs, &flaky, &dist, 3).examples);
    }

    #[test]
    fn synth_two_clusters_one_language() {
        let c = synth_corpus(&SynthConfig::new(2, 3, &["en"], 1)).unwrap();
        let pairs = c.pairs(TaskKind::Retrieval, 0..3, "en", "en").unwrap();
        assert_eq!(pairs.len(), 6);
        for p in &pairs {
            let (q, pos) = p.query_passage().unwrap();
            let g = p.group.unwrap() as usize;
            assert_ne!(q, pos);
            for w in &c.signatures[g] {
                let s = surface(&format!("s{w}"), "en");
                assert!(q.split(' ').any(|x| x == s) && pos.split(' ').any(|x| x == s));
            }
        }
        assert_ne!(c.signatures[0], c.signatures[1]);
        assert!(synth_corpus(&SynthConfig::new(1, 3, &["en"], 1)).is_err());
    }

    #[test]
    fn synth_two_languages_share_identity() {
        let c = synth_corpus(&SynthConfig::new(4, 2, &["en", "de"], 2)).unwrap();
        let tr = MockTranslator::new(["en", "de"]);
        for cl in 0..4 {
            for m in 0..2 {
                let en = c.sentence(cl, m, "en").unwrap();
                let de = c.sentence(cl, m, "de").unwrap();
                assert_eq!((en.cluster, de.cluster), (cl as u32, cl as u32));
                assert_eq!(tr.translate(&en.text, "de").unwrap(), format!("[de] {}", de.text));
            }
        }
        let cross = c.pairs(TaskKind::Clr, 0..2, "de", "en").unwrap();
        assert!(cross.iter().all(|p| p.query_passage().unwrap().0.contains(".de")));
    }

    #[test]
    fn synth_is_deterministic_and_roundtrips() {
        let cfg = SynthConfig::new(8, 4, &["en", "de"], 11);
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        let ea = a.pairs(TaskKind::Retrieval, 0..4, "en", "en").unwrap();
        let eb = b.pairs(TaskKind::Retrieval, 0..4, "en", "en").unwrap();
        let h = DatasetHeader::for_examples(TaskKind::Retrieval, &ea);
        let sa = dataset_to_string(&h, &ea);
        assert_eq!(sa, dataset_to_string(&h, &eb));
        let (h2, back) = parse_dataset(sa.as_bytes()).unwrap();
        assert_eq!((h2, back), (h, ea));
        let other = synth_corpus(&SynthConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(other.sentences, a.sentences);
    }

    #[test]
    fn synth_classification_and_sts() {
        let c = synth_corpus(&SynthConfig::new(6, 3, &["en"], 5)).unwrap();
        let cls = c.classification(3, 0..3, "en").unwrap();
        let labels = c.label_texts(3, "en");
        for ex in &cls {
            let ExampleBody::Triplet { positive, negatives, .. } = &ex.body else { panic!() };
            assert_eq!(positive, &labels[ex.group.unwrap() as usize]);
            assert_eq!(negatives.len(), 2);
            assert!(!negatives.contains(positive));
        }
        let sts = c.sts(30, 0..3, "en", 9).unwrap();
        let grades: BTreeSet<u64> = sts
            .iter()
            .map(|e| match e.body {
                ExampleBody::Scored { label, .. } => label as u64,
                _ => unreachable!(),
            })
            .collect();
        assert!(grades.contains(&3) && grades.len() >= 2);
    }

    #[test]
    fn dataset_parse_errors() {
        assert!(parse_dataset("".as_bytes()).is_err());
        assert!(parse_dataset("{\"header\":{\"format\":9,\"task\":\"sts\",\"languages\":[]}}\n".as_bytes()).is_err());
        let ok = "{\"header\":{\"format\":1,\"task\":\"text\",\"languages\":[]}}\n{\"task\":\"text\",\"shape\":\"text\",\"text\":\"hi\"}\n";
        let (_, ex) = parse_dataset(ok.as_bytes()).unwrap();
        assert_eq!(ex[0].body, ExampleBody::Text { text: "hi".into() });
        assert!(parse_dataset(format!("{ok}garbage\n").as_bytes()).is_err());
    }
}
