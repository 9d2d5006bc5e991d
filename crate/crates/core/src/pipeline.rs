//! Stage wiring: config, providers, caches and on-disk stage outputs.
//!
//! Every stage reads its inputs from the output directory and writes plain
//! files back, so any stage can be rerun once its predecessors exist. LLM
//! responses and embeddings are cached by digest under the cache directory;
//! a rerun with a warm cache makes no provider calls.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{classify_relation, run_level_stage, run_sector_stage, ClassifyError, LevelLabel, RelationLabel, StageCounts};
use crate::corpus::{load_corpus, load_news, write_jsonl, CompanyRecord, Corpus, CorpusError, CorpusPaths, NewsArticle, PriceSeries};
use crate::embed::{embed, CachedEmbedder, EmbedError, EmbeddingProvider, HashEmbedder, HttpEmbedder};
use crate::encode::{LevelMask, TextEncoder};
use crate::evaluation::{
    case_study, evaluate_model, fit_with_grid, merge_cell_files, regenerate_report, run_ablation, write_case_study,
    write_hit_rate_table, write_metrics_csv, AblationPlan, Arm, EvalError, HitRateRow, MetricReport, ModelSpec, RunMetric,
    METRICS_FILE,
};
use crate::filing::{build_profile_table, parse_filings, write_parsed, CompanyProfile, ParseCache, ParsedFiling, ProfileTable, DEFAULT_CHAR_BUDGET};
use crate::forecast::{
    split_by_years, windows_for_ticker, write_training_log, ForecastError, ForecastModel, NormalizationStats, SplitSamples,
    Splits, HORIZON, LOOKBACK,
};
use crate::llm::{CachingProvider, Descriptions, FixtureStore, Gateway, HeuristicRule, HttpProvider, LlmError, LlmProvider, MockProvider, ProviderConfig};
use crate::pairing::{
    emit_dataset, keyword_pairs, load_dataset, CategorySummary, DayIndex, Level, Manifest, PairedDayRecord, PairingError,
    RelationTable, SlotCaps, Summarizer,
};
use crate::retrieval::{hit_rate, retrieve_top_n, train_adapter, sector_gap, Adapter, ContrastiveConfig, RetrievalError, Retrieved};
use crate::synthetic::{load_ground_truth, SyntheticError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("provider: {0}")]
    Provider(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 1 for validation and io failures, 2 for provider failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Provider(_) => 2,
            _ => 1,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(e.to_string())
}

impl From<LlmError> for PipelineError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Cache(io) => PipelineError::Io(io),
            LlmError::Render(r) => invalid(r),
            other => PipelineError::Provider(other.to_string()),
        }
    }
}

impl From<EmbedError> for PipelineError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Llm(l) => l.into(),
            EmbedError::Cache(io) => PipelineError::Io(io),
            other => invalid(other),
        }
    }
}

impl From<ClassifyError> for PipelineError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Llm(l) => l.into(),
            other => invalid(other),
        }
    }
}

impl From<PairingError> for PipelineError {
    fn from(e: PairingError) -> Self {
        match e {
            PairingError::Llm(l) => l.into(),
            PairingError::Shared(s) => PipelineError::Provider(s),
            PairingError::Io(io) => PipelineError::Io(io),
            other => invalid(other),
        }
    }
}

impl From<RetrievalError> for PipelineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Embed(x) => x.into(),
            RetrievalError::Io(io) => PipelineError::Io(io),
            other => invalid(other),
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        invalid(e)
    }
}

impl From<ForecastError> for PipelineError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Io(io) => PipelineError::Io(io),
            other => invalid(other),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(io) => PipelineError::Io(io),
            other => invalid(other),
        }
    }
}

impl From<SyntheticError> for PipelineError {
    fn from(e: SyntheticError) -> Self {
        match e {
            SyntheticError::Io(io) => PipelineError::Io(io),
            other => invalid(other),
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Real,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIds {
    #[serde(default = "default_llm_id")]
    pub filing_parse: String,
    #[serde(default = "default_llm_id")]
    pub classify: String,
    #[serde(default = "default_llm_id")]
    pub summarize: String,
    #[serde(default = "default_embedding_id")]
    pub embedding: String,
}

fn default_llm_id() -> String {
    "gpt-4.1-mini".into()
}

fn default_embedding_id() -> String {
    "text-embedding-3-small".into()
}

impl Default for ModelIds {
    fn default() -> Self {
        Self {
            filing_parse: default_llm_id(),
            classify: default_llm_id(),
            summarize: default_llm_id(),
            embedding: default_embedding_id(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    #[serde(default = "default_top_n")]
    pub top_n: usize,
}

fn default_top_n() -> usize {
    10
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { top_n: default_top_n() }
    }
}

/// The single JSON run configuration. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusPaths,
    #[serde(default = "default_provider")]
    pub provider: ProviderKind,
    /// Mock fixture directory.
    #[serde(default)]
    pub fixtures_dir: Option<PathBuf>,
    #[serde(default)]
    pub llm: Option<ProviderConfig>,
    #[serde(default)]
    pub embedding: Option<ProviderConfig>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub descriptions: Option<PathBuf>,
    /// Relation labels used for hit-rate evaluation.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub model_ids: ModelIds,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default = "default_models")]
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub keep_article_ids: bool,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
}

fn default_provider() -> ProviderKind {
    ProviderKind::Mock
}

fn default_dim() -> usize {
    64
}

fn default_models() -> Vec<ModelSpec> {
    vec![ModelSpec::linear()]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

impl RunConfig {
    /// A mock-provider config for a generated corpus directory.
    pub fn for_synthetic(corpus_dir: &Path, out_dir: &Path, cache_dir: &Path) -> Self {
        Self {
            corpus: crate::synthetic::corpus_paths(corpus_dir),
            provider: ProviderKind::Mock,
            fixtures_dir: Some(corpus_dir.join("fixtures")),
            llm: None,
            embedding: None,
            embedding_dim: default_dim(),
            descriptions: None,
            ground_truth: Some(corpus_dir.join(crate::synthetic::GROUND_TRUTH_FILE)),
            model_ids: ModelIds::default(),
            retrieval: RetrievalConfig::default(),
            contrastive: ContrastiveConfig::default(),
            models: default_models(),
            seeds: default_seeds(),
            keep_article_ids: false,
            out_dir: out_dir.to_path_buf(),
            cache_dir: cache_dir.to_path_buf(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.news);
        fix(&mut self.corpus.filings);
        fix(&mut self.corpus.prices_dir);
        fix(&mut self.corpus.registry);
        fix(&mut self.out_dir);
        fix(&mut self.cache_dir);
        for p in [&mut self.fixtures_dir, &mut self.descriptions, &mut self.ground_truth]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("config lists no seeds"));
        }
        if self.models.is_empty() {
            return Err(invalid("config lists no models"));
        }
        if self.embedding_dim == 0 {
            return Err(invalid("embedding_dim must be positive"));
        }
        match self.provider {
            ProviderKind::Mock if self.fixtures_dir.is_none() => Err(invalid("mock provider needs fixtures_dir")),
            ProviderKind::Real if self.llm.is_none() || self.embedding.is_none() => {
                Err(invalid("real provider needs llm and embedding provider configs"))
            }
            _ => Ok(()),
        }
    }
}

/// Optional ticker and trading-day filters from the command line.
#[derive(Debug, Clone, Default)]
pub struct Filter {
    pub tickers: Option<BTreeSet<String>>,
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
}

impl Filter {
    fn day(&self, d: NaiveDate) -> bool {
        self.from.is_none_or(|f| d >= f) && self.to.is_none_or(|t| d <= t)
    }

    fn ticker(&self, t: &str) -> bool {
        self.tickers.as_ref().is_none_or(|s| s.contains(t))
    }
}

/// Per-day retrieval output with the relation label of each hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDay {
    pub trading_day: NaiveDate,
    pub retrieved: Vec<LabeledHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledHit {
    #[serde(flatten)]
    pub hit: Retrieved,
    pub relation: RelationLabel,
}

/// Provider call counts since the pipeline was opened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CallStats {
    pub llm_calls: usize,
    pub llm_cache_hits: usize,
    pub embedding_calls: usize,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub filter: Filter,
    llm: Arc<CachingProvider>,
    embedder: Arc<CachedEmbedder>,
    descriptions: Descriptions,
}

pub const PARSED_FILE: &str = "filings/parsed.jsonl";
pub const CLASSIFIED_FILE: &str = "classify/articles.jsonl";
pub const ADAPTER_FILE: &str = "embedding/adapter.bin";
pub const RETRIEVAL_DIR: &str = "retrieval";
pub const DATASET_DIR: &str = "dataset";

fn article_text(a: &NewsArticle) -> String {
    format!("{}\n{}", a.headline, a.body)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

impl Pipeline {
    pub fn open(config: RunConfig, filter: Filter) -> Result<Self> {
        config.validate()?;
        let (llm, embed_inner): (Arc<dyn LlmProvider>, Arc<dyn EmbeddingProvider>) = match config.provider {
            ProviderKind::Mock => {
                let dir = config.fixtures_dir.as_ref().unwrap();
                let store = FixtureStore::load(dir).map_err(|e| invalid(format!("fixtures {}: {e}", dir.display())))?;
                let mock = MockProvider::new(store).with_fallback(Arc::new(HeuristicRule::default()));
                (Arc::new(mock), Arc::new(HashEmbedder::new(config.embedding_dim)))
            }
            ProviderKind::Real => {
                let llm = HttpProvider::new(config.llm.clone().unwrap()).map_err(invalid)?;
                let emb = HttpEmbedder::new(config.embedding.clone().unwrap(), crate::llm::DEFAULT_MAX_RETRIES)
                    .map_err(invalid)?;
                (Arc::new(llm), Arc::new(emb))
            }
        };
        // Mock and real responses never share cache entries.
        let tag = match config.provider {
            ProviderKind::Mock => "mock",
            ProviderKind::Real => "real",
        };
        let llm = Arc::new(CachingProvider::new(llm, config.cache_dir.join(tag).join("llm"))?);
        let embedder = Arc::new(CachedEmbedder::new(embed_inner, config.cache_dir.join(tag).join("embed"))?);
        let descriptions = match &config.descriptions {
            Some(p) => Descriptions::load(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
            None => Descriptions::default(),
        };
        fs::create_dir_all(&config.out_dir)?;
        Ok(Self {
            config,
            filter,
            llm,
            embedder,
            descriptions,
        })
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            llm_calls: self.llm.provider_calls(),
            llm_cache_hits: self.llm.cache_hits(),
            embedding_calls: self.embedder.provider_calls(),
        }
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    fn gateway(&self, model_id: &str) -> Gateway {
        Gateway::new(self.llm.clone(), model_id)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(256) {
            out.extend(embed(chunk, self.embedder.as_ref(), &self.config.model_ids.embedding)?);
        }
        Ok(out)
    }

    fn companies(&self, corpus: &Corpus) -> Result<Vec<CompanyRecord>> {
        let list: Vec<CompanyRecord> = corpus
            .registry
            .companies()
            .iter()
            .filter(|c| self.filter.ticker(&c.ticker))
            .cloned()
            .collect();
        if list.is_empty() {
            return Err(invalid("no company matches the ticker filter"));
        }
        Ok(list)
    }

    fn days(&self, corpus: &Corpus) -> Vec<NaiveDate> {
        corpus.calendar.days().iter().copied().filter(|d| self.filter.day(*d)).collect()
    }

    /// Loads and validates the corpus and writes a summary.
    pub fn ingest(&self) -> Result<Corpus> {
        let corpus = load_corpus(&self.config.corpus)?;
        for (ticker, series) in &corpus.prices {
            if corpus.registry.get(ticker).is_none() {
                return Err(invalid(format!("price file for {ticker} has no registry entry")));
            }
            series.validate().map_err(|(row, reason)| invalid(format!("{ticker} price row {row}: {reason}")))?;
        }
        for c in corpus.registry.companies() {
            if !corpus.prices.contains_key(&c.ticker) {
                return Err(invalid(format!("{} has no price series", c.ticker)));
            }
        }
        write_json(
            &self.out("ingest.json"),
            &serde_json::json!({
                "articles": corpus.articles.len(),
                "filings": corpus.filings.len(),
                "companies": corpus.registry.len(),
                "trading_days": corpus.calendar.len(),
                "first_day": corpus.calendar.first(),
                "last_day": corpus.calendar.last(),
            }),
        )?;
        Ok(corpus)
    }

    pub fn parse_filings(&self, corpus: &Corpus) -> Result<Vec<ParsedFiling>> {
        let path = self.out(PARSED_FILE);
        let cache = ParseCache::load(&path)?;
        let gateway = self.gateway(&self.config.model_ids.filing_parse);
        let parsed = parse_filings(&corpus.filings, &gateway, &cache, DEFAULT_CHAR_BUDGET)?;
        fs::create_dir_all(path.parent().unwrap())?;
        write_parsed(&path, &parsed)?;
        let failed = parsed.iter().filter(|p| p.parse_failed).count();
        if failed > 0 {
            log::warn!("{failed} filing(s) could not be parsed");
        }
        Ok(parsed)
    }

    fn load_parsed(&self) -> Result<Vec<ParsedFiling>> {
        let path = self.out(PARSED_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| invalid(format!("{}: {e}; run parse-filings first", path.display())))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(invalid))
            .collect()
    }

    fn profile_tables(&self, corpus: &Corpus, parsed: &[ParsedFiling]) -> BTreeMap<String, ProfileTable> {
        corpus
            .registry
            .companies()
            .iter()
            .map(|c| (c.ticker.clone(), build_profile_table(&c.ticker, parsed, &corpus.calendar)))
            .collect()
    }

    /// Level labels for every article, then sector labels for sector news.
    pub fn classify(&self, corpus: &Corpus) -> Result<Vec<NewsArticle>> {
        let gateway = self.gateway(&self.config.model_ids.classify);
        let mut articles = corpus.articles.clone();
        let level: StageCounts = run_level_stage(&mut articles, &gateway, &self.descriptions)?;
        let sector = run_sector_stage(&mut articles, &gateway, &self.descriptions)?;
        let path = self.out(CLASSIFIED_FILE);
        fs::create_dir_all(path.parent().unwrap())?;
        write_jsonl(&path, &articles)?;
        write_json(&self.out("classify/counts.json"), &serde_json::json!({"level": level, "sector": sector}))?;
        Ok(articles)
    }

    fn load_classified(&self) -> Result<Vec<NewsArticle>> {
        let path = self.out(CLASSIFIED_FILE);
        if !path.exists() {
            return Err(invalid(format!("{} is missing; run classify first", path.display())));
        }
        Ok(load_news(&path)?)
    }

    /// Trains the adapter on sector news with a known sector.
    pub fn finetune_embedding(&self, articles: &[NewsArticle]) -> Result<Adapter> {
        let sample: Vec<(&NewsArticle, String)> = articles
            .iter()
            .filter(|a| a.level == Some(LevelLabel::Sector))
            .filter_map(|a| a.sector.and_then(|s| s.sector()).map(|s| (a, s.name().to_string())))
            .collect();
        let texts: Vec<String> = sample.iter().map(|(a, _)| article_text(a)).collect();
        let labels: Vec<String> = sample.iter().map(|(_, s)| s.clone()).collect();
        let dim = self.config.embedding_dim;
        let (adapter, log) = if texts.is_empty() {
            log::warn!("no sector-labeled articles; keeping the identity adapter");
            (Adapter::identity(dim), Vec::new())
        } else {
            let vectors = self.embed_texts(&texts)?;
            match train_adapter(&vectors, &labels, &self.config.contrastive) {
                Ok((adapter, log)) => {
                    let tuned: Vec<Vec<f64>> = vectors.iter().map(|v| adapter.apply(v)).collect();
                    write_json(
                        &self.out("embedding/gap.json"),
                        &serde_json::json!({
                            "identity": sector_gap(&vectors, &labels),
                            "tuned": sector_gap(&tuned, &labels),
                            "articles": vectors.len(),
                        }),
                    )?;
                    (adapter, log)
                }
                Err(RetrievalError::Training(msg)) => {
                    log::warn!("adapter training skipped ({msg}); keeping the identity adapter");
                    (Adapter::identity(vectors[0].len()), Vec::new())
                }
                Err(e) => return Err(e.into()),
            }
        };
        let path = self.out(ADAPTER_FILE);
        fs::create_dir_all(path.parent().unwrap())?;
        adapter.save(&path)?;
        let mut w = csv::Writer::from_path(self.out("embedding/log.csv")).map_err(std::io::Error::other)?;
        for row in &log {
            w.serialize(row).map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(adapter)
    }

    fn load_adapter(&self) -> Result<Adapter> {
        let path = self.out(ADAPTER_FILE);
        if !path.exists() {
            return Err(invalid(format!("{} is missing; run finetune-embedding first", path.display())));
        }
        Ok(Adapter::load(&path)?)
    }

    /// Adapted vectors of every company-level article, keyed by id.
    fn pool_vectors(&self, articles: &[NewsArticle], adapter: &Adapter) -> Result<HashMap<String, Vec<f64>>> {
        let pool: Vec<&NewsArticle> = articles.iter().filter(|a| a.level == Some(LevelLabel::Company)).collect();
        let texts: Vec<String> = pool.iter().map(|a| article_text(a)).collect();
        let vectors = self.embed_texts(&texts)?;
        Ok(pool
            .iter()
            .zip(vectors)
            .map(|(a, v)| (a.article_id.clone(), adapter.apply(&v)))
            .collect())
    }

    /// Adapted query vectors for every distinct profile in the tables.
    fn query_vectors(
        &self,
        tables: &BTreeMap<String, ProfileTable>,
        adapter: &Adapter,
    ) -> Result<HashMap<String, Vec<f64>>> {
        let mut texts: BTreeSet<String> = BTreeSet::new();
        for table in tables.values() {
            for p in table.days().values() {
                texts.extend(p.non_empty().map(|(_, t)| t.to_string()));
            }
        }
        let texts: Vec<String> = texts.into_iter().collect();
        let vectors = self.embed_texts(&texts)?;
        Ok(texts.into_iter().zip(vectors).map(|(t, v)| (t, adapter.apply(&v))).collect())
    }

    fn retrieve_for(
        profile: &CompanyProfile,
        day_pool: &[&NewsArticle],
        pool_vecs: &HashMap<String, Vec<f64>>,
        query_vecs: &HashMap<String, Vec<f64>>,
        n: usize,
    ) -> Vec<Retrieved> {
        let queries: Vec<Vec<f64>> = profile.non_empty().map(|(_, t)| query_vecs[t].clone()).collect();
        let pool: Vec<(String, Vec<f64>)> = day_pool
            .iter()
            .map(|a| (a.article_id.clone(), pool_vecs[&a.article_id].clone()))
            .collect();
        retrieve_top_n(&queries, &pool, n)
    }

    /// Top-`n` retrieval plus relation labels for every (company, day).
    fn retrieve_with(
        &self,
        corpus: &Corpus,
        articles: &[NewsArticle],
        tables: &BTreeMap<String, ProfileTable>,
        adapter: &Adapter,
        n: usize,
    ) -> Result<BTreeMap<String, Vec<RetrievedDay>>> {
        let index = DayIndex::build(articles, &corpus.calendar);
        let pool_vecs = self.pool_vectors(articles, adapter)?;
        let query_vecs = self.query_vectors(tables, adapter)?;
        let gateway = self.gateway(&self.config.model_ids.classify);
        let companies = self.companies(corpus)?;
        let days = self.days(corpus);
        let jobs: Vec<(&CompanyRecord, NaiveDate)> =
            companies.iter().flat_map(|c| days.iter().map(move |d| (c, *d))).collect();
        let results: Vec<RetrievedDay> = jobs
            .par_iter()
            .map(|&(company, day)| {
                let profile = tables[&company.ticker].on(day).cloned().unwrap_or_default();
                let day_pool = index.company_pool(day);
                let hits = Self::retrieve_for(&profile, &day_pool, &pool_vecs, &query_vecs, n);
                let by_id: HashMap<&str, &NewsArticle> = day_pool.iter().map(|a| (a.article_id.as_str(), *a)).collect();
                let retrieved = hits
                    .into_iter()
                    .map(|hit| {
                        let article = by_id[hit.article_id.as_str()];
                        let relation = classify_relation(article, company, &profile, &gateway, &self.descriptions)?;
                        Ok(LabeledHit { hit, relation })
                    })
                    .collect::<std::result::Result<Vec<_>, ClassifyError>>()?;
                Ok(RetrievedDay {
                    trading_day: day,
                    retrieved,
                })
            })
            .collect::<Result<_>>()?;
        let mut out: BTreeMap<String, Vec<RetrievedDay>> = BTreeMap::new();
        for ((company, _), day) in jobs.iter().zip(results) {
            out.entry(company.ticker.clone()).or_default().push(day);
        }
        Ok(out)
    }

    pub fn retrieve(
        &self,
        corpus: &Corpus,
        articles: &[NewsArticle],
        parsed: &[ParsedFiling],
        adapter: &Adapter,
    ) -> Result<BTreeMap<String, Vec<RetrievedDay>>> {
        let tables = self.profile_tables(corpus, parsed);
        let out = self.retrieve_with(corpus, articles, &tables, adapter, self.config.retrieval.top_n)?;
        let dir = self.out(RETRIEVAL_DIR);
        fs::create_dir_all(&dir)?;
        for (ticker, days) in &out {
            write_jsonl(&dir.join(format!("{ticker}.jsonl")), days)?;
        }
        Ok(out)
    }

    fn load_retrieval(&self, corpus: &Corpus) -> Result<BTreeMap<String, Vec<RetrievedDay>>> {
        let dir = self.out(RETRIEVAL_DIR);
        let mut out = BTreeMap::new();
        for c in self.companies(corpus)? {
            let path = dir.join(format!("{}.jsonl", c.ticker));
            let text = fs::read_to_string(&path)
                .map_err(|e| invalid(format!("{}: {e}; run retrieve first", path.display())))?;
            let days = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(invalid))
                .collect::<Result<Vec<RetrievedDay>>>()?;
            out.insert(c.ticker.clone(), days);
        }
        Ok(out)
    }

    /// One record per (company, retrieved day).
    fn assemble(
        &self,
        corpus: &Corpus,
        articles: &[NewsArticle],
        tables: &BTreeMap<String, ProfileTable>,
        retrieval: &BTreeMap<String, Vec<RetrievedDay>>,
    ) -> Result<Vec<PairedDayRecord>> {
        let index = DayIndex::build(articles, &corpus.calendar);
        let gateway = self.gateway(&self.config.model_ids.summarize);
        let mut summarizer = Summarizer::new(&gateway, self.descriptions.clone());
        summarizer.keep_article_ids = self.config.keep_article_ids;
        let mut relations: RelationTable = HashMap::new();
        let mut jobs: Vec<(&CompanyRecord, &RetrievedDay)> = Vec::new();
        for (ticker, days) in retrieval {
            let company = corpus
                .registry
                .get(ticker)
                .ok_or_else(|| invalid(format!("retrieval output for unknown ticker {ticker}")))?;
            for day in days {
                for h in &day.retrieved {
                    relations.insert((ticker.clone(), h.hit.article_id.clone()), h.relation);
                }
                jobs.push((company, day));
            }
        }
        let records = jobs
            .par_iter()
            .map(|&(company, day)| {
                let hits: Vec<Retrieved> = day.retrieved.iter().map(|h| h.hit.clone()).collect();
                crate::pairing::assemble_day(
                    company,
                    day.trading_day,
                    &index,
                    &hits,
                    &relations,
                    tables,
                    &summarizer,
                )
                .map_err(PipelineError::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(records)
    }

    /// Summarizes every level and writes the dataset with its manifest.
    pub fn summarize(
        &self,
        corpus: &Corpus,
        articles: &[NewsArticle],
        parsed: &[ParsedFiling],
        retrieval: &BTreeMap<String, Vec<RetrievedDay>>,
    ) -> Result<Manifest> {
        let tables = self.profile_tables(corpus, parsed);
        let records = self.assemble(corpus, articles, &tables, retrieval)?;
        let dir = self.out(DATASET_DIR);
        let manifest = emit_dataset(&records, &dir)?;
        validate_dataset(&dir, &self.days(corpus), &self.companies(corpus)?, SlotCaps::default())?;
        Ok(manifest)
    }

    /// Every stage up to the dataset.
    pub fn build_dataset(&self) -> Result<Manifest> {
        let corpus = self.ingest()?;
        let parsed = self.parse_filings(&corpus)?;
        let articles = self.classify(&corpus)?;
        let adapter = self.finetune_embedding(&articles)?;
        let retrieval = self.retrieve(&corpus, &articles, &parsed, &adapter)?;
        self.summarize(&corpus, &articles, &parsed, &retrieval)
    }

    // Stage entry points that read their inputs from disk.

    pub fn run_parse_filings(&self) -> Result<usize> {
        let corpus = self.ingest()?;
        Ok(self.parse_filings(&corpus)?.len())
    }

    pub fn run_classify(&self) -> Result<usize> {
        let corpus = self.ingest()?;
        Ok(self.classify(&corpus)?.len())
    }

    pub fn run_finetune_embedding(&self) -> Result<()> {
        let articles = self.load_classified()?;
        self.finetune_embedding(&articles).map(|_| ())
    }

    pub fn run_retrieve(&self) -> Result<()> {
        let corpus = self.ingest()?;
        let (articles, parsed, adapter) = (self.load_classified()?, self.load_parsed()?, self.load_adapter()?);
        self.retrieve(&corpus, &articles, &parsed, &adapter).map(|_| ())
    }

    pub fn run_summarize(&self) -> Result<Manifest> {
        let corpus = self.ingest()?;
        let (articles, parsed) = (self.load_classified()?, self.load_parsed()?);
        let retrieval = self.load_retrieval(&corpus)?;
        self.summarize(&corpus, &articles, &parsed, &retrieval)
    }

    fn load_records(&self) -> Result<BTreeMap<String, BTreeMap<NaiveDate, PairedDayRecord>>> {
        let dir = self.out(DATASET_DIR);
        if !dir.join(crate::pairing::MANIFEST_FILE).exists() {
            return Err(invalid(format!("no dataset in {}; run build-dataset first", dir.display())));
        }
        Ok(index_records(load_dataset(&dir)?.into_values().flatten()))
    }

    /// Windows for every selected ticker with text from `records` under
    /// `mask`; days without a record get zero text.
    fn windows(
        &self,
        corpus: &Corpus,
        splits: &Splits,
        records: &BTreeMap<String, BTreeMap<NaiveDate, PairedDayRecord>>,
        mask: LevelMask,
    ) -> Result<(SplitSamples, BTreeMap<String, NormalizationStats>)> {
        let encoder = TextEncoder::build(
            records.values().flat_map(|m| m.values()),
            self.embedder.as_ref(),
            &self.config.model_ids.embedding,
            self.config.embedding_dim,
        )?;
        let mut all = SplitSamples::default();
        let mut stats = BTreeMap::new();
        for company in self.companies(corpus)? {
            let series: &PriceSeries = &corpus.prices[&company.ticker];
            let by_day = records.get(&company.ticker);
            let text_for = |day: NaiveDate| match by_day.and_then(|m| m.get(&day)) {
                Some(r) => encoder.encode(r, mask),
                None => vec![0.0; encoder.dim()],
            };
            let (samples, s) = windows_for_ticker(series, splits, LOOKBACK, HORIZON, &text_for)?;
            all.extend(samples);
            stats.insert(company.ticker.clone(), s);
        }
        if all.train.is_empty() || all.val.is_empty() || all.test.is_empty() {
            return Err(invalid("a split has no windows; each split year needs at least 67 trading days"));
        }
        Ok((all, stats))
    }

    /// Rebuilds records with retrieval size `n`.
    fn records_at_n(&self, corpus: &Corpus, n: usize) -> Result<BTreeMap<String, BTreeMap<NaiveDate, PairedDayRecord>>> {
        let (articles, parsed, adapter) = (self.load_classified()?, self.load_parsed()?, self.load_adapter()?);
        let tables = self.profile_tables(corpus, &parsed);
        let retrieval = self.retrieve_with(corpus, &articles, &tables, &adapter, n)?;
        Ok(index_records(self.assemble(corpus, &articles, &tables, &retrieval)?))
    }

    /// Records whose target slot summarizes keyword-matched articles
    /// (forward-filled); the other slots stay empty.
    fn keyword_records(&self, corpus: &Corpus) -> Result<BTreeMap<String, BTreeMap<NaiveDate, PairedDayRecord>>> {
        let (articles, parsed) = (self.load_classified()?, self.load_parsed()?);
        let tables = self.profile_tables(corpus, &parsed);
        let index = DayIndex::build(&articles, &corpus.calendar);
        let by_id: HashMap<&str, &NewsArticle> = articles.iter().map(|a| (a.article_id.as_str(), a)).collect();
        let gateway = self.gateway(&self.config.model_ids.summarize);
        let summarizer = Summarizer::new(&gateway, self.descriptions.clone());
        let days = self.days(corpus);
        let mut jobs = Vec::new();
        for company in self.companies(corpus)? {
            let pairs = keyword_pairs(&company, &corpus.calendar, &index, true);
            for &day in &days {
                jobs.push((company.clone(), day, pairs[&day].clone()));
            }
        }
        let records = jobs
            .par_iter()
            .map(|(company, day, ids)| {
                let profile = tables[&company.ticker].on(*day).cloned().unwrap_or_default();
                let list: Vec<&NewsArticle> = ids.iter().map(|id| by_id[id.as_str()]).collect();
                let target: Vec<CategorySummary> = summarizer.company_slot(company, &profile, &list)?;
                Ok(PairedDayRecord {
                    ticker: company.ticker.clone(),
                    trading_day: *day,
                    macro_level: Vec::new(),
                    sector: Vec::new(),
                    related_company: Vec::new(),
                    target_company: target,
                    profile,
                    article_ids: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(index_records(records))
    }

    /// Windowed data per arm, in plan order.
    pub fn arm_inputs(&self, plan: &AblationPlan) -> Result<Vec<SplitSamples>> {
        let corpus = self.ingest()?;
        let splits = split_by_years(&corpus.calendar)?;
        let base = self.load_records()?;
        plan.arms
            .iter()
            .map(|arm| {
                let (records, mask) = match arm {
                    Arm::Levels(mask) => (None, *mask),
                    Arm::TopN(n) => (Some(self.records_at_n(&corpus, *n)?), LevelMask::ALL),
                    Arm::Keyword => (Some(self.keyword_records(&corpus)?), LevelMask::of(&[Level::Target])),
                };
                Ok(self.windows(&corpus, &splits, records.as_ref().unwrap_or(&base), mask)?.0)
            })
            .collect()
    }

    /// Runs an ablation plan and writes `ablate/<plan>/`.
    pub fn ablate(&self, plan: &AblationPlan) -> Result<MetricReport> {
        let inputs = self.arm_inputs(plan)?;
        let dir = self.out(&format!("ablate/{}", plan.name));
        let cells = dir.join("cells");
        if cells.exists() {
            fs::remove_dir_all(&cells)?;
        }
        let report = run_ablation(plan, &inputs, &self.config.models, &self.config.seeds, Some(&cells))?;
        let names: Vec<String> = self
            .config
            .models
            .iter()
            .flat_map(|m| {
                (0..plan.arms.len())
                    .flat_map(move |a| self.config.seeds.iter().map(move |s| format!("{}__{a:02}__{s}.csv", m.name)))
            })
            .collect();
        let runs = merge_cell_files(&cells, &names)?;
        write_metrics_csv(&dir.join(METRICS_FILE), &runs)?;
        regenerate_report(&dir.join(METRICS_FILE), &dir)?;
        Ok(report)
    }

    /// Regenerates `ablate/<plan>/` report files from its metrics CSV.
    pub fn report(&self, plan: &str) -> Result<MetricReport> {
        let dir = self.out(&format!("ablate/{plan}"));
        let metrics = dir.join(METRICS_FILE);
        if !metrics.exists() {
            return Err(invalid(format!("{} is missing; run ablate first", metrics.display())));
        }
        Ok(regenerate_report(&metrics, &dir)?)
    }

    /// Trains each configured model on full-mask text with the first seed
    /// and saves checkpoints and logs under `train/`.
    pub fn train(&self) -> Result<Vec<(String, f64)>> {
        let corpus = self.ingest()?;
        let splits = split_by_years(&corpus.calendar)?;
        let (data, stats) = self.windows(&corpus, &splits, &self.load_records()?, LevelMask::ALL)?;
        let dir = self.out("train");
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("stats.json"), &stats)?;
        let seed = self.config.seeds[0];
        let mut out = Vec::new();
        for spec in &self.config.models {
            let fit = fit_with_grid(&data, spec, seed)?;
            fit.model.save(&dir.join(format!("{}.ckpt", spec.name)))?;
            write_training_log(&dir.join(format!("{}_log.csv", spec.name)), &fit.log)?;
            log::info!("{}: fusion ratio {} val mse {:.6}", spec.name, fit.model.ratio, fit.val_mse);
            out.push((spec.name.clone(), fit.val_mse));
        }
        Ok(out)
    }

    /// Test metrics of the trained checkpoints, the hit-rate table when
    /// ground truth is configured, and a case study on the first ticker.
    pub fn evaluate(&self) -> Result<Vec<RunMetric>> {
        let corpus = self.ingest()?;
        let splits = split_by_years(&corpus.calendar)?;
        let records = self.load_records()?;
        let (data, stats) = self.windows(&corpus, &splits, &records, LevelMask::ALL)?;
        let dir = self.out("evaluate");
        fs::create_dir_all(&dir)?;
        let mut runs = Vec::new();
        for spec in &self.config.models {
            let path = self.out(&format!("train/{}.ckpt", spec.name));
            if !path.exists() {
                return Err(invalid(format!("{} is missing; run train first", path.display())));
            }
            let model = ForecastModel::load(&path)?;
            let (mse, mae) = evaluate_model(&model, &data.test)?;
            runs.push(RunMetric {
                model: spec.name.clone(),
                arm: LevelMask::ALL.to_string(),
                seed: self.config.seeds[0],
                mse: Some(mse),
                mae: Some(mae),
            });
        }
        write_metrics_csv(&dir.join(METRICS_FILE), &runs)?;

        if let Some(gt) = &self.config.ground_truth {
            let rows = self.hit_rate_rows(gt, self.config.retrieval.top_n)?;
            write_hit_rate_table(&rows, &dir.join("hit_rate.csv"))?;
        }

        let ticker = self.companies(&corpus)?[0].ticker.clone();
        let spec = &self.config.models[0];
        let seed = self.config.seeds[0];
        let masks = [
            LevelMask::NONE,
            LevelMask::of(&[Level::Macro]),
            LevelMask::of(&[Level::Macro, Level::Sector]),
            LevelMask::of(&[Level::Macro, Level::Sector, Level::Related]),
            LevelMask::ALL,
        ];
        let mut arms = Vec::new();
        for mask in masks {
            let (data, _) = self.windows(&corpus, &splits, &records, mask)?;
            let fit = fit_with_grid(&data, spec, seed)?;
            let test: Vec<_> = data.test.into_iter().filter(|s| s.ticker == ticker).collect();
            arms.push((Arm::Levels(mask).to_string(), fit.model, test));
        }
        let study = case_study(&ticker, &arms, &stats[&ticker], 40)?;
        write_case_study(&study, &dir.join("case_study.csv"))?;
        Ok(runs)
    }

    /// Identity-adapter vs tuned-adapter hit rate per ticker over the days
    /// that have at least one ground-truth target article.
    pub fn hit_rate_rows(&self, ground_truth: &Path, n: usize) -> Result<Vec<HitRateRow>> {
        let corpus = load_corpus(&self.config.corpus)?;
        let articles = self.load_classified()?;
        let tables = self.profile_tables(&corpus, &self.load_parsed()?);
        let tuned = self.load_adapter()?;
        let base = Adapter::identity(tuned.dim());
        let truth = load_ground_truth(ground_truth).map_err(invalid)?;
        let published: HashMap<&str, NaiveDate> =
            articles.iter().map(|a| (a.article_id.as_str(), a.published)).collect();
        let mut targets: BTreeMap<(String, NaiveDate), BTreeSet<String>> = BTreeMap::new();
        for g in truth.iter().filter(|g| g.relation == RelationLabel::Target) {
            let Some(day) = published.get(g.article_id.as_str()).and_then(|d| corpus.calendar.align(*d)) else {
                continue;
            };
            if self.filter.day(day) {
                targets.entry((g.ticker.clone(), day)).or_default().insert(g.article_id.clone());
            }
        }
        let index = DayIndex::build(&articles, &corpus.calendar);
        let mut rates = Vec::new();
        for adapter in [&base, &tuned] {
            let pool_vecs = self.pool_vectors(&articles, adapter)?;
            let query_vecs = self.query_vectors(&tables, adapter)?;
            let mut per_ticker = BTreeMap::new();
            for company in self.companies(&corpus)? {
                let days: Vec<(Vec<String>, &BTreeSet<String>)> = targets
                    .iter()
                    .filter(|((t, _), _)| *t == company.ticker)
                    .map(|((_, day), ids)| {
                        let profile = tables[&company.ticker].on(*day).cloned().unwrap_or_default();
                        let hits = Self::retrieve_for(&profile, &index.company_pool(*day), &pool_vecs, &query_vecs, n);
                        (hits.into_iter().map(|h| h.article_id).collect(), ids)
                    })
                    .collect();
                if days.is_empty() {
                    continue;
                }
                let rate = hit_rate(days.iter().map(|(r, t)| (r.as_slice(), *t)))?;
                per_ticker.insert(company.ticker.clone(), rate);
            }
            rates.push(per_ticker);
        }
        Ok(rates[0]
            .iter()
            .map(|(ticker, base)| HitRateRow {
                ticker: ticker.clone(),
                base: *base,
                tuned: rates[1][ticker],
            })
            .collect())
    }
}

fn index_records(
    records: impl IntoIterator<Item = PairedDayRecord>,
) -> BTreeMap<String, BTreeMap<NaiveDate, PairedDayRecord>> {
    let mut out: BTreeMap<String, BTreeMap<NaiveDate, PairedDayRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.ticker.clone()).or_default().insert(r.trading_day, r);
    }
    out
}

/// Checks a written dataset: manifest digests match, one record per
/// (company, day), slot caps hold and summaries are non-empty.
pub fn validate_dataset(dir: &Path, days: &[NaiveDate], companies: &[CompanyRecord], caps: SlotCaps) -> Result<()> {
    use sha2::{Digest, Sha256};
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(crate::pairing::MANIFEST_FILE))?)
        .map_err(|e| invalid(format!("manifest: {e}")))?;
    let data = load_dataset(dir)?;
    for entry in &manifest.tickers {
        let bytes = fs::read(dir.join(&entry.file))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(invalid(format!("{}: digest does not match the manifest", entry.file)));
        }
    }
    for company in companies {
        let rows = data
            .get(&company.ticker)
            .ok_or_else(|| invalid(format!("dataset has no file for {}", company.ticker)))?;
        let got: Vec<NaiveDate> = rows.iter().map(|r| r.trading_day).collect();
        if got != days {
            return Err(invalid(format!(
                "{}: {} records for {} trading days",
                company.ticker,
                got.len(),
                days.len()
            )));
        }
        for r in rows {
            let limits = [
                (Level::Macro, caps.macro_level),
                (Level::Sector, caps.sector),
                (Level::Related, caps.company),
                (Level::Target, caps.company),
            ];
            for (level, cap) in limits {
                let slot = r.slot(level);
                if slot.len() > cap {
                    return Err(invalid(format!("{} {}: {level:?} slot exceeds {cap}", r.ticker, r.trading_day)));
                }
                if slot.iter().any(|s| s.category.trim().is_empty() || s.summary.trim().is_empty()) {
                    return Err(invalid(format!("{} {}: empty summary entry", r.ticker, r.trading_day)));
                }
            }
            if !crate::pairing::slots_disjoint(r) {
                return Err(invalid(format!("{} {}: an article feeds two slots", r.ticker, r.trading_day)));
            }
        }
    }
    Ok(())
}
