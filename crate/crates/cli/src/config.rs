//! Pipeline configuration: built-in profiles, TOML overlays and
//! environment overrides.
//!
//! Resolution order, later wins:
//!
//! 1. the selected profile (`paper` or `desk`);
//! 2. the TOML file passed with `--config`;
//! 3. environment variables `QAGEN_<SECTION>__<FIELD>=<value>`, where `__`
//!    separates nesting levels and the value is parsed as a TOML literal
//!    (falling back to a plain string).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use qagen_core::corpus::{SkipGramConfig, SynthSpec};
use qagen_core::detector::DetectorConfig;
use qagen_core::egcvae::{CvaeConfig, TrainConfig};
use qagen_core::typelab::TaggerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "QAGEN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(format!("unknown profile '{other}' (expected paper or desk)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory receiving every artifact.
    pub workdir: PathBuf,
    /// Raw QA pairs (line-delimited JSON); ignored when `prep.synthetic` is set.
    pub pairs: PathBuf,
    /// Material documents, one per line.
    pub materials: PathBuf,
    /// Entity dictionary, `surface<TAB>type` per line.
    pub dictionary: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepConfig {
    /// Characters splitting a raw question into phrases.
    pub delimiters: String,
    /// Generate the synthetic fixture instead of reading `paths`.
    pub synthetic: Option<SynthSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub samples: usize,
    pub beam_width: usize,
    pub max_phrase_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub paths: Paths,
    pub prep: PrepConfig,
    pub embedding: SkipGramConfig,
    pub detector: DetectorConfig,
    pub tagger: TaggerConfig,
    pub model: CvaeConfig,
    pub training: TrainConfig,
    pub generation: GenerationSection,
}

impl PipelineConfig {
    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        PipelineConfig {
            profile: Profile::Paper,
            seed: 0,
            paths: Paths {
                workdir: "out".into(),
                pairs: "data/pairs.jsonl".into(),
                materials: "data/materials.txt".into(),
                dictionary: "data/dictionary.tsv".into(),
            },
            prep: PrepConfig {
                delimiters: ",;.".into(),
                synthetic: None,
            },
            embedding: SkipGramConfig::default(),
            detector: DetectorConfig::default(),
            tagger: TaggerConfig::default(),
            model: CvaeConfig::default(),
            training: TrainConfig::default(),
            generation: GenerationSection {
                samples: 10,
                beam_width: 5,
                max_phrase_len: 30,
            },
        }
    }

    /// Dimensions divided by about four and a short annealing ramp.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.profile = Profile::Desk;
        c.embedding.dim = 50;
        c.embedding.epochs = 30;
        c.tagger.hidden = 25;
        c.model = CvaeConfig {
            encoder_hidden: 75,
            context_hidden: 150,
            latent: 50,
            mlp_hidden: 100,
            decoder_hidden: 100,
            entity_dim: 12,
            ..CvaeConfig::default()
        };
        c.training.anneal_batches = 500;
        c.generation.max_phrase_len = 12;
        c
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Resolves profile, optional TOML text and environment overrides.
    ///
    /// A `profile` key in the TOML text takes precedence over `profile`.
    pub fn resolve<I>(profile: Profile, toml_text: Option<&str>, env: I) -> Result<Self, CliError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let overlay: toml::Table = match toml_text {
            Some(text) => toml::from_str(text).map_err(|e| CliError::Config(vec![e.message().to_string()]))?,
            None => toml::Table::new(),
        };
        let profile = match overlay.get("profile") {
            Some(toml::Value::String(s)) => s.parse().map_err(|e: String| CliError::Config(vec![e]))?,
            Some(_) => return Err(CliError::Config(vec!["profile: expected a string".into()])),
            None => profile,
        };
        let mut merged = toml::Value::try_from(Self::for_profile(profile)).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        merge(&mut merged, toml::Value::Table(overlay));
        let mut problems = Vec::new();
        let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (key, raw) in env {
            let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            if path.iter().any(|p| p.is_empty()) {
                problems.push(format!("{key}: malformed override name"));
                continue;
            }
            if let Err(e) = set_path(&mut merged, &path, parse_literal(&raw)) {
                problems.push(format!("{key}: {e}"));
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        let config: PipelineConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(vec![e.message().to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    /// Collects every violated constraint instead of stopping at the first.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                bad.push(format!("{name}: must be positive"));
            }
        };
        positive("embedding.dim", self.embedding.dim);
        positive("embedding.window", self.embedding.window);
        positive("embedding.epochs", self.embedding.epochs);
        positive("embedding.negatives", self.embedding.negatives);
        positive("detector.retrieved", self.detector.retrieved);
        positive("detector.pool_window", self.detector.pool_window);
        positive("detector.split_width", self.detector.split_width);
        positive("detector.split_stride", self.detector.split_stride);
        positive("tagger.hidden", self.tagger.hidden);
        positive("tagger.epochs", self.tagger.epochs);
        positive("tagger.batch_size", self.tagger.batch_size);
        positive("model.encoder_hidden", self.model.encoder_hidden);
        positive("model.context_hidden", self.model.context_hidden);
        positive("model.latent", self.model.latent);
        positive("model.mlp_hidden", self.model.mlp_hidden);
        positive("model.decoder_hidden", self.model.decoder_hidden);
        positive("model.entity_dim", self.model.entity_dim);
        positive("training.epochs", self.training.epochs);
        positive("training.batch_size", self.training.batch_size);
        positive("generation.samples", self.generation.samples);
        positive("generation.beam_width", self.generation.beam_width);
        positive("generation.max_phrase_len", self.generation.max_phrase_len);
        let mut rate = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name}: must be a positive finite number"));
            }
        };
        rate("embedding.learning_rate", self.embedding.learning_rate);
        rate("tagger.learning_rate", self.tagger.learning_rate);
        rate("tagger.clip_norm", self.tagger.clip_norm);
        rate("training.learning_rate", self.training.learning_rate);
        rate("training.clip_norm", self.training.clip_norm);
        rate("detector.bm25_k1", self.detector.bm25_k1);
        if !(0.0..=1.0).contains(&self.detector.bm25_b) {
            bad.push("detector.bm25_b: must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.tagger.holdout_fraction) {
            bad.push("tagger.holdout_fraction: must lie in [0, 1)".into());
        }
        if !(self.training.bow_weight >= 0.0 && self.training.bow_weight.is_finite()) {
            bad.push("training.bow_weight: must be non-negative".into());
        }
        if i64::try_from(self.seed).is_err() {
            bad.push(format!("seed: must be at most {} to fit a TOML integer", i64::MAX));
        }
        if self.prep.delimiters.is_empty() {
            bad.push("prep.delimiters: must not be empty".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<(), String> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| format!("'{}' is not a section", path[..i].join(".")))?;
        if i + 1 == path.len() {
            table.insert(key.clone(), value);
            return Ok(());
        }
        cur = table.entry(key.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err("empty override path".into())
}
