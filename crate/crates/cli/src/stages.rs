//! The pipeline stages. Each stage reads its inputs from the work directory
//! (or the configured input paths), writes its artifacts there and returns
//! their paths for the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qagen_core::corpus::{
    build_vocab, read_pairs, synth_corpus, train_embeddings, write_pairs, EmbeddingTable, EntityDictionary,
    MaterialCorpus, Phrase, QaPair, QaRecord,
};
use qagen_core::detector::{Detector, SignificanceProfile};
use qagen_core::egcvae::{prepare_pairs, train, DataShape, EgCvae};
use qagen_core::generate::{generate_pair, pair_seed, GenerationBatch, GenerationConfig, GenerationRecord};
use qagen_core::metrics::{evaluate, format_table, EvalItem, MetricReport};
use qagen_core::numerics::Checkpoint;
use qagen_core::typelab::{train_tagger, TypeTagger};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Context};

pub const PAIRS: &str = "pairs.jsonl";
pub const MATERIALS: &str = "materials.txt";
pub const DICTIONARY: &str = "dictionary.tsv";
pub const EMBEDDINGS: &str = "embeddings.txt";
pub const SCORES: &str = "scores.jsonl";
pub const TAGGER: &str = "tagger.ckpt";
pub const TAGGER_REPORT: &str = "tagger_report.json";
pub const GENERATOR: &str = "generator.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_BATCHES: &str = "train_batches.jsonl";
pub const GENERATED: &str = "generated.jsonl";
pub const GENERATED_TEXT: &str = "generated.txt";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Prep,
    Embed,
    Score,
    TrainTyper,
    TrainGen,
    Generate,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Prep,
        Stage::Embed,
        Stage::Score,
        Stage::TrainTyper,
        Stage::TrainGen,
        Stage::Generate,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prep => "prep",
            Stage::Embed => "embed",
            Stage::Score => "score",
            Stage::TrainTyper => "train-typer",
            Stage::TrainGen => "train-gen",
            Stage::Generate => "generate",
            Stage::Eval => "eval",
        }
    }
}

/// Candidate files for `eval`, each becoming one table row.
#[derive(Clone, Debug, Default)]
pub struct EvalInputs {
    pub reference: Option<PathBuf>,
    pub candidates: Vec<(String, PathBuf)>,
}

pub struct StageContext<'a> {
    pub config: &'a PipelineConfig,
    pub eval: &'a EvalInputs,
}

/// What a stage produced.
#[derive(Debug, Default)]
pub struct StageOutput {
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

fn workdir(cfg: &PipelineConfig) -> &Path {
    &cfg.paths.workdir
}

fn artifact(cfg: &PipelineConfig, name: &str) -> PathBuf {
    workdir(cfg).join(name)
}

/// Fails with the offending path when an input is absent.
pub fn require(path: &Path) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

/// Independent seed for one stage, derived from the run seed.
pub fn stage_seed(cfg: &PipelineConfig, stage: &str) -> u64 {
    pair_seed(cfg.seed, stage)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item).expect("records serialize"));
        s.push('\n');
    }
    s
}

fn stamp(ckpt: &mut Checkpoint, cfg: &PipelineConfig) {
    ckpt.meta.insert("run.config_hash".into(), cfg.hash());
    ckpt.meta.insert("run.seed".into(), cfg.seed.to_string());
}

pub fn run_stage(stage: Stage, ctx: &StageContext) -> Result<StageOutput, CliError> {
    let cfg = ctx.config;
    std::fs::create_dir_all(workdir(cfg)).map_err(|e| CliError::Data(format!("{}: {e}", workdir(cfg).display())))?;
    match stage {
        Stage::Prep => prep(cfg),
        Stage::Embed => embed(cfg),
        Stage::Score => score(cfg),
        Stage::TrainTyper => train_typer(cfg),
        Stage::TrainGen => train_gen(cfg),
        Stage::Generate => generate(cfg),
        Stage::Eval => eval(cfg, ctx.eval),
    }
}

/// A raw input line: either pre-split phrases or question text.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawPair {
    Split(QaRecord),
    Text { id: String, answer: String, question: String },
}

fn read_raw_pairs(path: &Path, delimiters: &[char]) -> Result<Vec<QaPair>, CliError> {
    let text = std::fs::read_to_string(require(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{} line {}", path.display(), n + 1);
        let raw: RawPair = serde_json::from_str(line).map_err(|e| CliError::Data(format!("{}: {e}", at())))?;
        let pair = match raw {
            RawPair::Split(r) => QaPair::from_record(&r),
            RawPair::Text { id, answer, question } => QaPair::from_raw(id, &answer, &question, delimiters),
        };
        out.push(pair.context(at())?);
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: no QA pairs", path.display())));
    }
    Ok(out)
}

fn prep(cfg: &PipelineConfig) -> Result<StageOutput, CliError> {
    let mut out = StageOutput::default();
    let (pairs, materials, dict) = match &cfg.prep.synthetic {
        Some(spec) => {
            let s = synth_corpus(spec, stage_seed(cfg, "prep")).context("synthetic fixture")?;
            (s.pairs, s.materials, s.dictionary)
        }
        None => {
            let delimiters: Vec<char> = cfg.prep.delimiters.chars().collect();
            let pairs = read_raw_pairs(&cfg.paths.pairs, &delimiters)?;
            let materials = MaterialCorpus::read(&require(&cfg.paths.materials)?).context("materials")?;
            let dict = EntityDictionary::read(&require(&cfg.paths.dictionary)?).context("dictionary")?;
            out.inputs = vec![cfg.paths.pairs.clone(), cfg.paths.materials.clone(), cfg.paths.dictionary.clone()];
            (pairs, materials, dict)
        }
    };
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = pairs.iter().find(|p| !seen.insert(p.id.clone())) {
        return Err(CliError::Data(format!("duplicate pair id '{}'", dup.id)));
    }
    let paths = [artifact(cfg, PAIRS), artifact(cfg, MATERIALS), artifact(cfg, DICTIONARY)];
    write_pairs(&paths[0], &pairs).context("writing pairs")?;
    materials.write(&paths[1]).context("writing materials")?;
    dict.write(&paths[2]).context("writing dictionary")?;
    out.summary = format!(
        "{} pairs, {} documents, {} dictionary entities",
        pairs.len(),
        materials.len(),
        dict.len()
    );
    out.artifacts = paths.to_vec();
    Ok(out)
}

fn load_pairs(cfg: &PipelineConfig) -> Result<Vec<QaPair>, CliError> {
    let p = require(&artifact(cfg, PAIRS))?;
    read_pairs(&p).context("reading pairs")
}

fn load_table(cfg: &PipelineConfig) -> Result<EmbeddingTable, CliError> {
    EmbeddingTable::read(&require(&artifact(cfg, EMBEDDINGS))?).context("reading embeddings")
}

fn load_dict(cfg: &PipelineConfig) -> Result<EntityDictionary, CliError> {
    EntityDictionary::read(&require(&artifact(cfg, DICTIONARY))?).context("reading dictionary")
}

fn embed(cfg: &PipelineConfig) -> Result<StageOutput, CliError> {
    let pairs = load_pairs(cfg)?;
    let materials = MaterialCorpus::read(&require(&artifact(cfg, MATERIALS))?).context("reading materials")?;
    let vocab = build_vocab(&pairs, &materials);
    let table = train_embeddings(&materials, &vocab, &cfg.embedding, stage_seed(cfg, "embed")).context("embedding training")?;
    let path = artifact(cfg, EMBEDDINGS);
    table.write(&path).context("writing embeddings")?;
    Ok(StageOutput {
        inputs: vec![artifact(cfg, PAIRS), artifact(cfg, MATERIALS)],
        summary: format!("{} vectors of dimension {}", table.len(), table.dim()),
        artifacts: vec![path],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseScore {
    pub text: String,
    pub raw: f64,
    pub normalized: f64,
}

/// One line of the scores file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub phrases: Vec<PhraseScore>,
}

fn score(cfg: &PipelineConfig) -> Result<StageOutput, CliError> {
    let pairs = load_pairs(cfg)?;
    let table = load_table(cfg)?;
    let materials = MaterialCorpus::read(&require(&artifact(cfg, MATERIALS))?).context("reading materials")?;
    let detector = Detector::new(materials, cfg.detector.clone()).context("building detector")?;
    let records: Vec<ScoreRecord> = pairs
        .par_iter()
        .map(|p| {
            let prof = detector.profile(p, &table).context(format!("scoring {}", p.id))?;
            Ok(ScoreRecord {
                id: p.id.clone(),
                phrases: p
                    .phrases
                    .iter()
                    .zip(prof.raw.iter().zip(&prof.normalized))
                    .map(|(ph, (&raw, &normalized))| PhraseScore {
                        text: ph.text(),
                        raw,
                        normalized,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_, CliError>>()?;
    let path = artifact(cfg, SCORES);
    write_file(&path, jsonl(&records))?;
    let mean = records.iter().flat_map(|r| r.phrases.iter().map(|p| p.normalized)).sum::<f64>()
        / records.iter().map(|r| r.phrases.len()).sum::<usize>().max(1) as f64;
    Ok(StageOutput {
        inputs: vec![artifact(cfg, PAIRS), artifact(cfg, MATERIALS), artifact(cfg, EMBEDDINGS)],
        summary: format!("{} pairs scored, mean normalized score {mean:.4}", records.len()),
        artifacts: vec![path],
    })
}

fn train_typer(cfg: &PipelineConfig) -> Result<StageOutput, CliError> {
    let pairs = load_pairs(cfg)?;
    let table = load_table(cfg)?;
    let dict = load_dict(cfg)?;
    let (tagger, report) = train_tagger(&pairs, &dict, &table, &cfg.tagger, stage_seed(cfg, "train-typer")).context("tagger training")?;
    let mut ckpt = tagger.to_checkpoint();
    stamp(&mut ckpt, cfg);
    let paths = [artifact(cfg, TAGGER), artifact(cfg, TAGGER_REPORT)];
    ckpt.save(&paths[0]).context("writing tagger checkpoint")?;
    write_file(&paths[1], serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    let mut summary = format!(
        "held-out token accuracy {:.4} ({} train / {} held-out sentences)\n",
        report.heldout_accuracy, report.train_size, report.heldout_size
    );
    summary.push_str(report.confusion_summary().trim_end());
    Ok(StageOutput {
        inputs: vec![artifact(cfg, PAIRS), artifact(cfg, EMBEDDINGS), artifact(cfg, DICTIONARY)],
        artifacts: paths.to_vec(),
        summary,
    })
}

fn load_tagger(cfg: &PipelineConfig) -> Result<TypeTagger, CliError> {
    let ckpt = Checkpoint::load(&require(&artifact(cfg, TAGGER))?).context("reading tagger checkpoint")?;
    TypeTagger::from_checkpoint(&ckpt).context("tagger checkpoint")
}

fn load_generator(cfg: &PipelineConfig) -> Result<EgCvae, CliError> {
    let ckpt = Checkpoint::load(&require(&artifact(cfg, GENERATOR))?).context("reading generator checkpoint")?;
    EgCvae::from_checkpoint(&ckpt).context("generator checkpoint")
}

fn train_gen(cfg: &PipelineConfig) -> Result<StageOutput, CliError> {
    let pairs = load_pairs(cfg)?;
    let table = load_table(cfg)?;
    let dict = load_dict(cfg)?;
    let tagger = load_tagger(cfg)?;
    let prepared = prepare_pairs(&pairs, &table, &tagger, &dict).context("preparing training pairs")?;
    let shape = DataShape {
        embedding_dim: table.dim(),
        type_dim: tagger.type_dim(),
        vocab_size: table.len(),
        num_entities: dict.len(),
    };
    let mut model = EgCvae::new(&cfg.model, shape, stage_seed(cfg, "init")).context("building generator")?;
    let log = train(&mut model, &table, &prepared, &cfg.training, stage_seed(cfg, "train-gen")).context("generator training")?;
    let mut ckpt = model.to_checkpoint().context("generator checkpoint")?;
    stamp(&mut ckpt, cfg);
    let paths = [artifact(cfg, GENERATOR), artifact(cfg, TRAIN_LOG), artifact(cfg, TRAIN_BATCHES)];
    ckpt.save(&paths[0]).context("writing generator checkpoint")?;
    write_file(&paths[1], jsonl(&log.epochs))?;
    write_file(&paths[2], jsonl(&log.batches))?;
    let mut summary = String::new();
    for e in &log.epochs {
        let _ = writeln!(
            summary,
            "epoch {:>3}  recon_nll {:>9.4}  kl {:>8.4}  type_ll {:>9.4}  entity_ll {:>8.4}  bow_ll {:>9.4}  kl_w {:.3}",
            e.epoch, -e.recon_ll, e.kl, e.type_ll, e.entity_ll, e.bow_ll, e.kl_weight
        );
    }
    Ok(StageOutput {
        inputs: vec![artifact(cfg, PAIRS), artifact(cfg, EMBEDDINGS), artifact(cfg, DICTIONARY), artifact(cfg, TAGGER)],
        artifacts: paths.to_vec(),
        summary: summary.trim_end().to_string(),
    })
}

fn load_profiles(cfg: &PipelineConfig) -> Result<BTreeMap<String, SignificanceProfile>, CliError> {
    let path = require(&artifact(cfg, SCORES))?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ScoreRecord =
            serde_json::from_str(line).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.insert(
            r.id,
            SignificanceProfile {
                raw: r.phrases.iter().map(|p| p.raw).collect(),
                normalized: r.phrases.iter().map(|p| p.normalized).collect(),
            },
        );
    }
    Ok(out)
}

fn generate(cfg: &PipelineConfig) -> Result<StageOutput, CliError> {
    let pairs = load_pairs(cfg)?;
    let table = load_table(cfg)?;
    let model = load_generator(cfg)?;
    let profiles = load_profiles(cfg)?;
    let gen = GenerationConfig {
        samples: cfg.generation.samples,
        beam_width: cfg.generation.beam_width,
        max_phrase_len: cfg.generation.max_phrase_len,
        seed: stage_seed(cfg, "generate"),
    };
    let batches: Vec<GenerationBatch> = pairs
        .par_iter()
        .map(|p| {
            let profile = profiles
                .get(&p.id)
                .ok_or_else(|| CliError::Data(format!("no significance scores for pair '{}'", p.id)))?;
            generate_pair(&model, &table, p, profile, &gen).context(format!("generating for {}", p.id))
        })
        .collect::<Result<_, CliError>>()?;
    let paths = [artifact(cfg, GENERATED), artifact(cfg, GENERATED_TEXT)];
    write_file(&paths[0], jsonl(batches.iter().flat_map(|b| b.records())))?;
    write_file(&paths[1], batches.iter().map(|b| b.render_text()).collect::<String>())?;
    let generated: usize = batches
        .iter()
        .flat_map(|b| &b.samples)
        .map(|s| s.provenance.iter().filter(|&&p| p == qagen_core::generate::Provenance::Generated).count())
        .sum();
    Ok(StageOutput {
        inputs: vec![artifact(cfg, PAIRS), artifact(cfg, EMBEDDINGS), artifact(cfg, GENERATOR), artifact(cfg, SCORES)],
        summary: format!(
            "{} candidates for {} pairs, {generated} phrases regenerated",
            batches.len() * gen.samples,
            batches.len()
        ),
        artifacts: paths.to_vec(),
    })
}

/// A candidate line; generation records carry `source_id`, pair files carry `id`.
#[derive(Deserialize)]
struct CandidateLine {
    #[serde(alias = "source_id")]
    id: String,
    phrases: Vec<String>,
}

/// Candidates grouped by source id, in first-seen order.
pub fn read_candidates(path: &Path) -> Result<Vec<(String, Vec<Vec<Vec<String>>>)>, CliError> {
    let text = std::fs::read_to_string(require(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Vec<Vec<String>>>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = || format!("{} line {}", path.display(), n + 1);
        let c: CandidateLine = serde_json::from_str(line).map_err(|e| CliError::Data(format!("{}: {e}", at())))?;
        let phrases = c
            .phrases
            .iter()
            .map(|p| Phrase::parse(p).map(|p| p.tokens))
            .collect::<Result<Vec<_>, _>>()
            .context(at())?;
        if !groups.contains_key(&c.id) {
            order.push(c.id.clone());
        }
        groups.entry(c.id).or_default().push(phrases);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let g = groups.remove(&id).expect("grouped");
            (id, g)
        })
        .collect())
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

fn eval(cfg: &PipelineConfig, inputs: &EvalInputs) -> Result<StageOutput, CliError> {
    let reference_path = inputs.reference.clone().unwrap_or_else(|| artifact(cfg, PAIRS));
    let references: BTreeMap<String, QaPair> = read_pairs(&require(&reference_path)?)
        .context("reading references")?
        .into_iter()
        .map(|p| (p.id.clone(), p))
        .collect();
    let table = load_table(cfg)?;
    let candidates = if inputs.candidates.is_empty() {
        vec![("eg-cvae".to_string(), artifact(cfg, GENERATED))]
    } else {
        inputs.candidates.clone()
    };
    let rows: Vec<(String, MetricReport)> = candidates
        .par_iter()
        .map(|(name, path)| {
            let items = read_candidates(path)?
                .into_iter()
                .map(|(id, samples)| {
                    let r = references
                        .get(&id)
                        .ok_or_else(|| CliError::Data(format!("{}: id '{id}' not in references", path.display())))?;
                    Ok(EvalItem {
                        reference: r.phrases.iter().map(|p| p.tokens.clone()).collect(),
                        samples,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let report = evaluate(&items, &table).context(format!("evaluating {name}"))?;
            Ok((name.clone(), report))
        })
        .collect::<Result<_, CliError>>()?;
    let table_text = format_table(&rows);
    let paths = [artifact(cfg, METRICS_TABLE), artifact(cfg, METRICS)];
    write_file(&paths[0], &table_text)?;
    write_file(
        &paths[1],
        jsonl(rows.iter().map(|(m, r)| MetricRecord {
            method: m.clone(),
            report: *r,
        })),
    )?;
    let mut used = vec![reference_path, artifact(cfg, EMBEDDINGS)];
    used.extend(candidates.into_iter().map(|(_, p)| p));
    Ok(StageOutput {
        inputs: used,
        artifacts: paths.to_vec(),
        summary: table_text.trim_end().to_string(),
    })
}

/// Parses a generation file back into records.
pub fn read_generation(path: &Path) -> Result<Vec<GenerationRecord>, CliError> {
    let text = std::fs::read_to_string(require(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}
