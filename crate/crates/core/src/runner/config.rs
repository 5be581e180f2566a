use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineMethod, DEFAULT_MIN_K_PCT};
use crate::classifiers::{ClassifierKind, ForestParams, Hyperparams, LogisticParams};
use crate::datasets::{CorpusSpec, ViewSelector, DEFAULT_CLASS_CAP};
use crate::perturbation::PerturbationConfig;
use crate::{Error, Result};

/// Default environment variable holding the bearer token for HTTP endpoints.
pub const AUTH_TOKEN_ENV: &str = "REMIND_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Http,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Bpe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    MeanPooled,
    Remote,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("remind-out")
}
fn default_class_cap() -> usize {
    DEFAULT_CLASS_CAP
}
fn default_views() -> Vec<ViewSelector> {
    vec![ViewSelector::Original]
}
fn default_parallelism() -> usize {
    4
}
fn default_timeout() -> f64 {
    120.0
}
fn default_backoff() -> Vec<f64> {
    vec![0.5, 2.0, 8.0]
}
fn default_true() -> bool {
    true
}
fn default_auth_env() -> String {
    AUTH_TOKEN_ENV.to_string()
}
fn default_p() -> f64 {
    PerturbationConfig::default().p
}
fn default_m() -> usize {
    PerturbationConfig::default().m
}
fn default_k() -> usize {
    PerturbationConfig::default().k
}
fn default_max_tokens() -> usize {
    PerturbationConfig::default().max_tokens
}
fn default_resample_cap() -> usize {
    PerturbationConfig::default().resample_cap
}
fn default_classifiers() -> Vec<ClassifierKind> {
    vec![ClassifierKind::LogisticRegression, ClassifierKind::RandomForest]
}
fn default_l2() -> f64 {
    LogisticParams::default().l2
}
fn default_max_iter() -> usize {
    LogisticParams::default().max_iter
}
fn default_tol() -> f64 {
    LogisticParams::default().tol
}
fn default_n_trees() -> usize {
    ForestParams::default().n_trees
}
fn default_max_depth() -> usize {
    ForestParams::default().max_depth
}
fn default_min_leaf() -> usize {
    ForestParams::default().min_leaf
}
fn default_baselines() -> Vec<BaselineMethod> {
    BaselineMethod::ALL.to_vec()
}
fn default_min_k() -> f64 {
    DEFAULT_MIN_K_PCT
}
fn default_fpr_cap() -> f64 {
    0.01
}
fn default_test_size() -> f64 {
    0.2
}
fn default_repeats() -> usize {
    1
}
fn default_bins() -> usize {
    40
}

/// Flat TOML document; relative paths are taken from the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,

    pub split_files: BTreeMap<String, Vec<PathBuf>>,
    #[serde(default)]
    pub split_aliases: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_field: Option<String>,
    #[serde(default = "default_class_cap")]
    pub class_cap: usize,
    #[serde(default = "default_views")]
    pub views: Vec<ViewSelector>,

    pub oracle_kind: OracleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_model: Option<String>,
    #[serde(default = "default_parallelism")]
    pub oracle_parallelism: usize,
    #[serde(default = "default_timeout")]
    pub oracle_timeout_secs: f64,
    #[serde(default = "default_backoff")]
    pub oracle_retry_backoff_secs: Vec<f64>,
    #[serde(default)]
    pub oracle_vocab_stats: bool,
    #[serde(default = "default_true")]
    pub oracle_generation: bool,
    /// Environment variable read for the bearer token.
    #[serde(default = "default_auth_env")]
    pub oracle_auth_env: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub replay_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_profiles: Option<PathBuf>,
    #[serde(default)]
    pub synthetic_seed: u64,

    pub embedding_table: PathBuf,
    #[serde(default)]
    pub tokenizer_kind: TokenizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer_vocab: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer_merges: Option<PathBuf>,

    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_resample_cap")]
    pub resample_cap: usize,

    #[serde(default)]
    pub encoder_kind: EncoderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_dim: Option<usize>,

    #[serde(default = "default_classifiers")]
    pub classifiers: Vec<ClassifierKind>,
    #[serde(default = "default_l2")]
    pub logistic_l2: f64,
    #[serde(default = "default_max_iter")]
    pub logistic_max_iter: usize,
    #[serde(default = "default_tol")]
    pub logistic_tol: f64,
    #[serde(default = "default_n_trees")]
    pub forest_n_trees: usize,
    #[serde(default = "default_max_depth")]
    pub forest_max_depth: usize,
    #[serde(default = "default_min_leaf")]
    pub forest_min_leaf: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forest_max_features: Option<usize>,

    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineMethod>,
    #[serde(default = "default_min_k")]
    pub min_k_pct: f64,
    #[serde(default = "default_min_k")]
    pub min_k_pp_pct: f64,

    #[serde(default = "default_fpr_cap")]
    pub fpr_cap: f64,
    #[serde(default)]
    pub partial_auc: bool,
    #[serde(default = "default_test_size")]
    pub test_size: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        for paths in self.split_files.values_mut() {
            paths.iter_mut().for_each(|p| resolve(base, p));
        }
        resolve(base, &mut self.embedding_table);
        for p in [
            &mut self.cache_path,
            &mut self.synthetic_profiles,
            &mut self.tokenizer_vocab,
            &mut self.tokenizer_merges,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            split_files: self.split_files.clone(),
            split_aliases: self.split_aliases.clone(),
            text_template: self.text_template.clone(),
            prompt_field: self.prompt_field.clone(),
            answer_field: self.answer_field.clone(),
        }
    }

    /// Perturbation settings; the seed is replaced per sample.
    pub fn perturbation(&self) -> PerturbationConfig {
        PerturbationConfig {
            p: self.p,
            m: self.m,
            k: self.k,
            seed: self.seed,
            max_tokens: self.max_tokens,
            resample_cap: self.resample_cap,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            logistic: LogisticParams {
                l2: self.logistic_l2,
                max_iter: self.logistic_max_iter,
                tol: self.logistic_tol,
                step: None,
            },
            forest: ForestParams {
                n_trees: self.forest_n_trees,
                max_depth: self.forest_max_depth,
                min_leaf: self.forest_min_leaf,
                max_features: self.forest_max_features,
            },
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.oracle_timeout_secs)
    }

    pub fn backoff(&self) -> Vec<Duration> {
        self.oracle_retry_backoff_secs
            .iter()
            .map(|s| Duration::from_secs_f64(*s))
            .collect()
    }

    /// Hash of every setting that can change a result. Output location,
    /// cache location and network tuning are left out, so a resumed run
    /// into a fresh directory carries the same hash.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_path = None;
        c.replay_only = false;
        c.oracle_parallelism = 0;
        c.oracle_timeout_secs = 0.0;
        c.oracle_retry_backoff_secs.clear();
        c.oracle_auth_env.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.split_files.is_empty() {
            return bad("split_files is empty".into());
        }
        let spec = self.corpus_spec();
        for (split, paths) in &self.split_files {
            spec.resolve_label(split)?;
            if paths.is_empty() {
                return bad(format!("split `{split}` lists no files"));
            }
        }
        let mut files: Vec<(&str, &Path)> = self
            .split_files
            .values()
            .flatten()
            .map(|p| ("split file", p.as_path()))
            .collect();
        files.push(("embedding_table", &self.embedding_table));
        if self.tokenizer_kind == TokenizerKind::Bpe {
            for (key, p) in [
                ("tokenizer_vocab", &self.tokenizer_vocab),
                ("tokenizer_merges", &self.tokenizer_merges),
            ] {
                match p {
                    Some(p) => files.push((key, p)),
                    None => return bad(format!("{key} is required for the bpe tokenizer")),
                }
            }
        }
        match self.oracle_kind {
            OracleKind::Http => {
                if self.oracle_url.is_none() || self.oracle_model.is_none() {
                    return bad("oracle_url and oracle_model are required for the http oracle".into());
                }
            }
            OracleKind::Synthetic => match &self.synthetic_profiles {
                Some(p) => files.push(("synthetic_profiles", p)),
                None => return bad("synthetic_profiles is required for the synthetic oracle".into()),
            },
        }
        if self.encoder_kind == EncoderKind::Remote
            && (self.encoder_url.is_none() || self.encoder_model.is_none() || self.encoder_dim.is_none())
        {
            return bad("encoder_url, encoder_model and encoder_dim are required for the remote encoder".into());
        }
        if self.replay_only && self.cache_path.is_none() {
            return bad("replay_only needs cache_path".into());
        }
        for (key, p) in files {
            if !p.is_file() {
                return bad(format!("{key} {} does not exist", p.display()));
            }
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p = {} outside [0, 1]", self.p));
        }
        if self.m == 0 || self.k < 2 || self.max_tokens == 0 {
            return bad("m must be positive, k at least 2 and max_tokens positive".into());
        }
        if self.views.is_empty() {
            return bad("views is empty".into());
        }
        if self.class_cap == 0 || self.oracle_parallelism == 0 || self.repeats == 0 || self.histogram_bins == 0 {
            return bad("class_cap, oracle_parallelism, repeats and histogram_bins must be positive".into());
        }
        if !(self.test_size > 0.0 && self.test_size < 1.0) {
            return bad(format!("test_size = {} outside (0, 1)", self.test_size));
        }
        if !(self.fpr_cap > 0.0 && self.fpr_cap <= 1.0) {
            return bad(format!("fpr_cap = {} outside (0, 1]", self.fpr_cap));
        }
        for (key, k) in [("min_k_pct", self.min_k_pct), ("min_k_pp_pct", self.min_k_pp_pct)] {
            if !(k > 0.0 && k <= 100.0) {
                return bad(format!("{key} = {k} outside (0, 100]"));
            }
        }
        let timeout_ok = self.oracle_timeout_secs.is_finite() && self.oracle_timeout_secs > 0.0;
        if !timeout_ok
            || self
                .oracle_retry_backoff_secs
                .iter()
                .any(|s| !s.is_finite() || *s < 0.0)
        {
            return bad("oracle timeout must be positive and backoffs non-negative".into());
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let splits: Vec<String> = self
            .split_files
            .iter()
            .map(|(k, v)| format!("{k} ({} file{})", v.len(), if v.len() == 1 { "" } else { "s" }))
            .collect();
        s.push_str(&format!("config hash   {}\n", self.config_hash()));
        s.push_str(&format!("seed          {}\n", self.seed));
        s.push_str(&format!("splits        {}\n", splits.join(", ")));
        s.push_str(&format!(
            "views         {}\n",
            self.views.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", ")
        ));
        s.push_str(&format!("oracle        {:?}", self.oracle_kind));
        if let Some(url) = &self.oracle_url {
            s.push_str(&format!(" {url}"));
        }
        s.push('\n');
        s.push_str(&format!(
            "perturbation  p={} m={} K={} max_tokens={}\n",
            self.p, self.m, self.k, self.max_tokens
        ));
        s.push_str(&format!(
            "classifiers   {}\n",
            self.classifiers
                .iter()
                .map(|c| c.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        s.push_str(&format!(
            "baselines     {}\n",
            self.baselines.iter().map(|b| b.as_str()).collect::<Vec<_>>().join(", ")
        ));
        s.push_str(&format!("test_size     {}\n", self.test_size));
        s.push_str(&format!("output_dir    {}\n", self.output_dir.display()));
        s
    }
}
