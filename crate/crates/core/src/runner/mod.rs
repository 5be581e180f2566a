//! End-to-end evaluation over a corpus: perturb each sample, score the
//! original and its variants through the oracle, extract features, train
//! the classifiers, score the baselines and write the report.
//!
//! Outputs in `output_dir`: `report.csv`, `report.txt`, `features.csv`
//! (`features-reph.csv` for the paraphrased arm), `scores.csv`,
//! `histograms/` and `run-manifest.json`. Wall-clock timestamps appear only
//! in the manifest, so every other file is a function of the config and the
//! oracle responses.

mod config;
mod histograms;
mod report;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use config::{EncoderKind, ExperimentConfig, OracleKind, TokenizerKind, AUTH_TOKEN_ENV};
pub use histograms::{emit_feature_histograms, feature_histograms, FeatureHistogram, HistogramOutput};
pub use report::{
    arm_label, classifier_metrics, scalar_metrics, EvaluatedOn, EvaluationReport, MetricOptions, MetricValues,
    ReportRow, METRIC_COLUMNS,
};

use crate::baselines::{self, BaselineMethod, SpvMode};
use crate::classifiers::{self, ClassifierKind, Example, LabeledDataset};
use crate::datasets::{load_corpus, select_view, Corpus, Sample, ViewSelector};
use crate::embedding_store::{load_embedding_table, TokenEmbeddingTable};
use crate::ill_features::{
    extract_features, write_features_csv, FeatureRow, IllFeatureVector, MeanPooledEncoder, RemoteEncoder, TextEncoder,
};
use crate::oracle::{
    CacheStats, CachedOracle, HttpOracle, HttpOracleConfig, LossOracle, OracleCapabilities, ResponseCache, RetryPolicy,
    ScoringContext, SyntheticOracle,
};
use crate::perturbation::perturb;
use crate::tokenizer::Tokenizer;
use crate::{Error, Label, Result};

/// Everything computed for one sample of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub label: Label,
    pub features: IllFeatureVector,
    /// Raw baseline scores, in each method's own orientation.
    pub baselines: BTreeMap<BaselineMethod, f64>,
}

/// One line of `scores.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub arm: ViewSelector,
    pub method: String,
    pub repeat: Option<usize>,
    pub sample_id: String,
    pub label: Label,
    pub split: &'static str,
    pub score: Option<f64>,
    pub probs: Option<[f64; 3]>,
}

/// Perturbation seed of one sample: the first 8 bytes of
/// `sha256(seed_le || id)`, so samples do not share replacement patterns.
pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn with_sample(id: &str, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("sample `{id}`: {m}")),
        Error::Oracle(m) => Error::Oracle(format!("sample `{id}`: {m}")),
        other => other,
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct Experiment {
    cfg: ExperimentConfig,
    table: Arc<TokenEmbeddingTable>,
    tokenizer: Arc<Tokenizer>,
    encoder: Arc<dyn TextEncoder>,
    oracle: Arc<dyn LossOracle>,
    cached: Option<Arc<CachedOracle>>,
    corpus: Corpus,
    pool: rayon::ThreadPool,
}

impl Experiment {
    /// Loads every resource named by the config and builds its oracle.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        Self::build(cfg, None)
    }

    /// As [`Experiment::prepare`] with a caller-supplied oracle; the cache
    /// settings of the config still apply.
    pub fn with_oracle(cfg: &ExperimentConfig, oracle: Arc<dyn LossOracle>) -> Result<Self> {
        Self::build(cfg, Some(oracle))
    }

    fn build(cfg: &ExperimentConfig, oracle: Option<Arc<dyn LossOracle>>) -> Result<Self> {
        cfg.validate()?;
        let table = Arc::new(load_embedding_table(&cfg.embedding_table, cfg.m)?);
        let tokenizer = Arc::new(match cfg.tokenizer_kind {
            TokenizerKind::Whitespace => Tokenizer::whitespace(&table)?,
            TokenizerKind::Bpe => Tokenizer::bpe_from_files(
                cfg.tokenizer_vocab.as_ref().expect("validated"),
                cfg.tokenizer_merges.as_ref().expect("validated"),
            )?,
        });
        tokenizer.check_compatible(&table)?;
        let encoder: Arc<dyn TextEncoder> = match cfg.encoder_kind {
            EncoderKind::MeanPooled => Arc::new(MeanPooledEncoder::new(table.clone(), tokenizer.clone())),
            EncoderKind::Remote => Arc::new(RemoteEncoder::new(
                cfg.encoder_url.clone().expect("validated"),
                cfg.encoder_model.clone().expect("validated"),
                cfg.encoder_dim.expect("validated"),
                cfg.timeout(),
            )),
        };
        let inner = match oracle {
            Some(o) => o,
            None => build_oracle(cfg, &tokenizer, &encoder)?,
        };
        let (oracle, cached): (Arc<dyn LossOracle>, _) = match &cfg.cache_path {
            Some(path) => {
                let cache = Arc::new(ResponseCache::open(path)?);
                log::info!("response cache {} holds {} records", path.display(), cache.len());
                let cached = Arc::new(if cfg.replay_only {
                    CachedOracle::replay(inner.identity(), inner.capabilities(), inner.context_sensitive(), cache)
                } else {
                    CachedOracle::new(inner, cache)
                });
                (cached.clone(), Some(cached))
            }
            None => (inner, None),
        };
        let corpus = load_corpus(&cfg.corpus_spec())?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.oracle_parallelism)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg: cfg.clone(),
            table,
            tokenizer,
            encoder,
            oracle,
            cached,
            corpus,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn oracle_identity(&self) -> String {
        self.oracle.identity()
    }

    pub fn cache_stats(&self) -> Option<CacheStats> {
        self.cached.as_ref().map(|c| c.stats())
    }

    /// Configured baselines the oracle can serve.
    pub fn active_baselines(&self) -> Vec<BaselineMethod> {
        let caps: OracleCapabilities = self.oracle.capabilities();
        self.cfg
            .baselines
            .iter()
            .copied()
            .filter(|m| {
                let ok = match m {
                    BaselineMethod::MinKPlusPlus => caps.vocab_distribution_stats,
                    BaselineMethod::RougeL => caps.generation,
                    _ => true,
                };
                if !ok {
                    log::warn!(
                        "{} skipped: oracle lacks the required capability; reported as n/a",
                        m.display_name()
                    );
                }
                ok
            })
            .collect()
    }

    fn score_sample(&self, s: &Sample, methods: &[BaselineMethod]) -> Result<ScoredSample> {
        let ids = self.tokenizer.encode(&s.text)?;
        if ids.is_empty() {
            return Err(Error::Data("text encodes to no tokens".into()));
        }
        let text = if ids.len() > self.cfg.max_tokens {
            self.tokenizer.decode(&ids[..self.cfg.max_tokens])?
        } else {
            s.text.clone()
        };
        let mut pcfg = self.cfg.perturbation();
        pcfg.seed = sample_seed(self.cfg.seed, &s.id);
        let hood = perturb(&ids, &self.table, &pcfg)?;

        let ctx = ScoringContext {
            sample_id: &s.id,
            original_text: &text,
        };
        let orig = self.oracle.score_in_context(&ctx, &text)?;
        let mut neighbors = Vec::with_capacity(hood.variants.len());
        for v in &hood.variants {
            let vt = self.tokenizer.decode(v)?;
            neighbors.push((self.oracle.score_in_context(&ctx, &vt)?, vt));
        }
        let features = extract_features(&orig, &neighbors, &text, &*self.encoder)?;

        let mut scores = BTreeMap::new();
        for &m in methods {
            let v = match m {
                BaselineMethod::Loss => baselines::loss_score(&orig),
                BaselineMethod::Zlib => baselines::zlib_score(&orig, &text)?,
                BaselineMethod::MinK => baselines::min_k_score(&orig, self.cfg.min_k_pct)?,
                BaselineMethod::MinKPlusPlus => {
                    let stats = self.oracle.distribution_stats(&text)?;
                    baselines::min_k_pp_score(&orig, &stats, self.cfg.min_k_pp_pct)?
                }
                BaselineMethod::RougeL => match (&s.prompt, &s.answer) {
                    (Some(p), Some(a)) => baselines::rouge_l_f1_pair(p, a, &*self.oracle, &self.tokenizer)?,
                    _ => baselines::rouge_l_f1_score(&text, &*self.oracle, &self.tokenizer)?,
                },
                BaselineMethod::SpvMean | BaselineMethod::SpvMax => {
                    let profiles: Vec<_> = neighbors.iter().map(|(p, _)| p.clone()).collect();
                    let mode = if m == BaselineMethod::SpvMean {
                        SpvMode::Mean
                    } else {
                        SpvMode::Max
                    };
                    baselines::spv_mia_simplified(&orig, &profiles, mode)?
                }
            };
            scores.insert(m, v);
        }
        Ok(ScoredSample {
            id: s.id.clone(),
            label: s.label,
            features,
            baselines: scores,
        })
    }

    /// Scores every sample of one arm, fanning out over the thread pool.
    pub fn score_view(&self, selector: ViewSelector) -> Result<Vec<ScoredSample>> {
        let view = select_view(&self.corpus, selector, self.cfg.class_cap, self.cfg.seed)?;
        let methods = self.active_baselines();
        let total = view.samples.len();
        let done = AtomicUsize::new(0);
        let step = (total / 10).max(1);
        log::info!("scoring {total} samples ({} arm)", arm_label(selector));
        self.pool.install(|| {
            view.samples
                .par_iter()
                .map(|s| {
                    let r = self.score_sample(s, &methods).map_err(|e| with_sample(&s.id, e));
                    let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                    if n.is_multiple_of(step) || n == total {
                        log::info!("{n}/{total} samples scored");
                    }
                    r
                })
                .collect()
        })
    }

    fn score_arms(&self) -> Result<Vec<(ViewSelector, Vec<ScoredSample>)>> {
        self.cfg
            .views
            .iter()
            .map(|&arm| Ok((arm, self.score_view(arm)?)))
            .collect()
    }

    fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            fpr_cap: self.cfg.fpr_cap,
            partial_auc: self.cfg.partial_auc,
        }
    }

    fn baseline_rows(
        &self,
        arm: ViewSelector,
        scored: &[ScoredSample],
        lines: &mut Vec<ScoreLine>,
    ) -> Result<Vec<ReportRow>> {
        let labels: Vec<Label> = scored.iter().map(|s| s.label).collect();
        let mut rows = Vec::new();
        for &m in &self.cfg.baselines {
            let raw: Option<Vec<f64>> = scored.iter().map(|s| s.baselines.get(&m).copied()).collect();
            let metrics = match &raw {
                Some(raw) => {
                    let oriented: Vec<f64> = raw.iter().map(|v| m.membership_score(*v)).collect();
                    Some(scalar_metrics(&labels, &oriented, &self.metric_options())?)
                }
                None => None,
            };
            if let Some(raw) = raw {
                for (s, v) in scored.iter().zip(raw) {
                    lines.push(ScoreLine {
                        arm,
                        method: m.as_str().into(),
                        repeat: None,
                        sample_id: s.id.clone(),
                        label: s.label,
                        split: "all",
                        score: Some(v),
                        probs: None,
                    });
                }
            }
            rows.push(ReportRow {
                method: m.as_str().into(),
                display_name: m.display_name().into(),
                arm,
                evaluated_on: EvaluatedOn::All,
                samples: scored.len(),
                metrics,
            });
        }
        Ok(rows)
    }

    fn classifier_rows(
        &self,
        arm: ViewSelector,
        scored: &[ScoredSample],
        lines: &mut Vec<ScoreLine>,
    ) -> Result<Vec<ReportRow>> {
        if self.cfg.classifiers.is_empty() {
            return Ok(Vec::new());
        }
        let data = LabeledDataset::new(
            scored
                .iter()
                .map(|s| Example {
                    id: s.id.clone(),
                    label: s.label,
                    features: s.features.0.to_vec(),
                })
                .collect(),
        )?;
        let hp = self.cfg.hyperparams();
        let opts = self.metric_options();
        let mut per_kind: Vec<Vec<MetricValues>> = vec![Vec::new(); self.cfg.classifiers.len()];
        let mut test_size = 0;
        for repeat in 0..self.cfg.repeats {
            let seed = self.cfg.seed.wrapping_add(repeat as u64);
            let (train, test) = classifiers::split(&data, self.cfg.test_size, seed)?;
            let full = data.class_counts();
            let seen = train.class_counts();
            if let Some(c) = Label::ALL.iter().find(|c| full[c.index()] > 0 && seen[c.index()] == 0) {
                return Err(Error::Split(format!("class {c} is missing from the training split")));
            }
            test_size = test.len();
            let labels = test.labels();
            for (i, &kind) in self.cfg.classifiers.iter().enumerate() {
                let model = classifiers::train(&train, kind, &hp, seed)?;
                let mut probs = Vec::with_capacity(test.len());
                let mut predicted = Vec::with_capacity(test.len());
                for row in test.rows() {
                    let p = model.predict_proba(&row.features)?;
                    let best = (0..3).fold(0, |b, c| if p[c] > p[b] { c } else { b });
                    predicted.push(Label::from_index(best).expect("three classes"));
                    lines.push(ScoreLine {
                        arm,
                        method: classifier_key(kind),
                        repeat: Some(repeat),
                        sample_id: row.id.clone(),
                        label: row.label,
                        split: "test",
                        score: None,
                        probs: Some(p),
                    });
                    probs.push(p);
                }
                per_kind[i].push(classifier_metrics(&labels, &probs, &predicted, &opts)?);
            }
        }
        Ok(self
            .cfg
            .classifiers
            .iter()
            .zip(per_kind)
            .map(|(&kind, values)| ReportRow {
                method: classifier_key(kind),
                display_name: format!("REMIND: {}", kind.display_name()),
                arm,
                evaluated_on: EvaluatedOn::Test,
                samples: test_size,
                metrics: Some(MetricValues::mean(&values)),
            })
            .collect())
    }

    /// Full evaluation; writes every output file.
    pub fn run(&self) -> Result<EvaluationReport> {
        self.execute(true)
    }

    /// Baseline rows only; writes `report.*`, `scores.csv` and the manifest.
    pub fn score_baselines(&self) -> Result<EvaluationReport> {
        self.execute(false)
    }

    /// Issues every oracle call a run would make, filling the cache.
    pub fn warm_cache(&self) -> Result<usize> {
        let arms = self.score_arms()?;
        Ok(arms.iter().map(|(_, s)| s.len()).sum())
    }

    fn execute(&self, with_classifiers: bool) -> Result<EvaluationReport> {
        let started = now_unix();
        let out = &self.cfg.output_dir;
        std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
        let arms = self.score_arms()?;

        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for (arm, scored) in &arms {
            rows.extend(self.baseline_rows(*arm, scored, &mut lines)?);
            if with_classifiers {
                rows.extend(self.classifier_rows(*arm, scored, &mut lines)?);
                let path = out.join(features_file(*arm));
                let feature_rows: Vec<FeatureRow> = scored
                    .iter()
                    .map(|s| FeatureRow {
                        sample_id: s.id.clone(),
                        label: s.label,
                        features: s.features,
                    })
                    .collect();
                write_features_csv(&path, &feature_rows)?;
                let hist_dir = out.join(histogram_dir(*arm));
                emit_feature_histograms(&path, &hist_dir, self.cfg.histogram_bins)?;
            }
        }
        write_scores_csv(&out.join("scores.csv"), &lines)?;

        let report = EvaluationReport {
            rows,
            config_hash: self.cfg.config_hash(),
            seed: self.cfg.seed,
            oracle_identity: self.oracle.identity(),
            fpr_cap: self.cfg.fpr_cap,
            partial_auc: self.cfg.partial_auc,
            cache: self.cache_stats(),
            started_unix: started,
            finished_unix: now_unix(),
        };
        report.write(out)?;
        self.write_manifest(&report, &arms)?;
        Ok(report)
    }

    fn write_manifest(&self, report: &EvaluationReport, arms: &[(ViewSelector, Vec<ScoredSample>)]) -> Result<()> {
        let samples: BTreeMap<&str, usize> = arms.iter().map(|(a, s)| (arm_label(*a), s.len())).collect();
        let manifest = serde_json::json!({
            "tool": concat!("remind ", env!("CARGO_PKG_VERSION")),
            "config_hash": report.config_hash,
            "seed": self.cfg.seed,
            "split_seeds": (0..self.cfg.repeats).map(|r| self.cfg.seed.wrapping_add(r as u64)).collect::<Vec<_>>(),
            "perturbation_seed": "first 8 bytes (LE) of sha256(seed LE || sample id)",
            "synthetic_seed": (self.cfg.oracle_kind == OracleKind::Synthetic).then_some(self.cfg.synthetic_seed),
            "oracle_identity": report.oracle_identity,
            "cache": report.cache.map(|c| serde_json::json!({
                "path": self.cfg.cache_path,
                "hits": c.hits,
                "misses": c.misses,
            })),
            "samples": samples,
            "started_unix": report.started_unix,
            "finished_unix": report.finished_unix,
        });
        let path = self.cfg.output_dir.join("run-manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn build_oracle(
    cfg: &ExperimentConfig,
    tokenizer: &Arc<Tokenizer>,
    encoder: &Arc<dyn TextEncoder>,
) -> Result<Arc<dyn LossOracle>> {
    Ok(match cfg.oracle_kind {
        OracleKind::Http => {
            let mut hc = HttpOracleConfig::new(
                cfg.oracle_url.clone().expect("validated"),
                cfg.oracle_model.clone().expect("validated"),
            );
            hc.auth_token = std::env::var(&cfg.oracle_auth_env).ok().filter(|t| !t.is_empty());
            hc.timeout = cfg.timeout();
            hc.retry = RetryPolicy { backoff: cfg.backoff() };
            hc.capabilities = OracleCapabilities {
                vocab_distribution_stats: cfg.oracle_vocab_stats,
                generation: cfg.oracle_generation,
            };
            Arc::new(HttpOracle::new(hc))
        }
        OracleKind::Synthetic => {
            let mut o = SyntheticOracle::new(cfg.synthetic_seed)
                .load_profiles(cfg.synthetic_profiles.as_ref().expect("validated"))?
                .with_encoder(encoder.clone())
                .with_tokenizer(tokenizer.clone());
            if cfg.oracle_vocab_stats {
                o = o.with_uniform_stats(tokenizer.vocab_size());
            }
            Arc::new(o)
        }
    })
}

pub fn classifier_key(kind: ClassifierKind) -> String {
    format!("remind-{}", kind.as_str())
}

pub fn features_file(arm: ViewSelector) -> &'static str {
    match arm {
        ViewSelector::Original => "features.csv",
        ViewSelector::Paraphrased => "features-reph.csv",
    }
}

pub fn histogram_dir(arm: ViewSelector) -> &'static str {
    match arm {
        ViewSelector::Original => "histograms",
        ViewSelector::Paraphrased => "histograms-reph",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `arm,method,repeat,sample_id,label,split,score,p_retained,p_forgotten,p_holdout`
pub fn write_scores_csv(path: &Path, lines: &[ScoreLine]) -> Result<()> {
    let mut s = String::from("arm,method,repeat,sample_id,label,split,score,p_retained,p_forgotten,p_holdout\n");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for l in lines {
        let p = l.probs.map(|p| p.map(Some)).unwrap_or([None; 3]);
        w.write_record([
            arm_label(l.arm).to_string(),
            l.method.clone(),
            l.repeat.map(|r| r.to_string()).unwrap_or_default(),
            l.sample_id.clone(),
            l.label.to_string(),
            l.split.to_string(),
            opt(l.score),
            opt(p[0]),
            opt(p[1]),
            opt(p[2]),
        ])
        .map_err(|e| Error::Data(format!("rendering scores: {e}")))?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::Data(format!("rendering scores: {e}")))?;
    s.push_str(std::str::from_utf8(&body).expect("csv output is UTF-8"));
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads, runs and writes outputs for `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    let exp = Experiment::prepare(cfg)?;
    let report = exp.run()?;
    if let Some(c) = exp.cache_stats() {
        log::info!("oracle cache: {} hits, {} misses", c.hits, c.misses);
    }
    Ok(report)
}

/// One-paragraph overview of a report, for terminal output.
pub fn summarize(report: &EvaluationReport, out_dir: &Path) -> String {
    let mut s = String::new();
    for r in &report.rows {
        let m = r.metrics.and_then(|m| m.get("multi_class_auc"));
        let acc = r.metrics.and_then(|m| m.get("accuracy"));
        let _ = writeln!(
            s,
            "{:<32} {:<5} multi_class_auc={:<9} accuracy={}",
            r.display_name,
            arm_label(r.arm),
            m.map_or("n/a".into(), |v| format!("{v:.2}")),
            acc.map_or("n/a".into(), |v| format!("{v:.2}"))
        );
    }
    let _ = writeln!(
        s,
        "report written to {}",
        PathBuf::from(out_dir).join("report.txt").display()
    );
    s
}
