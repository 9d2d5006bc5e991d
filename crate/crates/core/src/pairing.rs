//! Summarization and assembly of the four-level paired record per
//! (company, trading day).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::classify::{LevelLabel, RelationLabel};
use crate::corpus::{CompanyRecord, GicsSector, NewsArticle, TradingCalendar};
use crate::filing::{CompanyProfile, ProfileTable};
use crate::llm::extract::{extract_object, value_to_text};
use crate::llm::templates::article_block;
use crate::llm::{Descriptions, ExtractError, Gateway, LlmError, TemplateId};
use crate::retrieval::Retrieved;

#[derive(Debug, thiserror::Error)]
pub enum PairingError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("shared summary failed: {0}")]
    Shared(String),
    #[error("no profile table for {0}")]
    MissingProfile(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDayRecord {
    pub ticker: String,
    pub trading_day: NaiveDate,
    #[serde(rename = "macro")]
    pub macro_level: Vec<CategorySummary>,
    pub sector: Vec<CategorySummary>,
    pub related_company: Vec<CategorySummary>,
    pub target_company: Vec<CategorySummary>,
    pub profile: CompanyProfile,
    /// Source articles per slot, kept only when debugging is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub article_ids: Option<BTreeMap<String, Vec<String>>>,
}

/// The four text slots, numbered ① to ④ in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Macro,
    Sector,
    Related,
    Target,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Macro, Level::Sector, Level::Related, Level::Target];

    pub fn symbol(self) -> char {
        match self {
            Level::Macro => '①',
            Level::Sector => '②',
            Level::Related => '③',
            Level::Target => '④',
        }
    }
}

impl PairedDayRecord {
    pub fn slot(&self, level: Level) -> &[CategorySummary] {
        match level {
            Level::Macro => &self.macro_level,
            Level::Sector => &self.sector,
            Level::Related => &self.related_company,
            Level::Target => &self.target_company,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCaps {
    pub macro_level: usize,
    pub sector: usize,
    pub company: usize,
}

impl Default for SlotCaps {
    fn default() -> Self {
        Self {
            macro_level: 5,
            sector: 5,
            company: 3,
        }
    }
}

fn summary_entry(key: &str, value: &Value) -> Option<CategorySummary> {
    let (category, summary) = match value {
        Value::Object(map) => {
            let pick = |keys: &[&str]| {
                keys.iter()
                    .find_map(|k| map.get(*k))
                    .map(value_to_text)
                    .unwrap_or_default()
            };
            (pick(&["category", "name", "title"]), pick(&["summary", "description", "events"]))
        }
        Value::String(text) => match text.split_once(':') {
            Some((name, rest)) if !name.trim().is_empty() && !rest.trim().is_empty() => {
                (name.to_string(), rest.to_string())
            }
            _ => (key.to_string(), text.clone()),
        },
        _ => return None,
    };
    let (category, summary) = (category.trim().to_string(), summary.trim().to_string());
    (!category.is_empty() && !summary.is_empty()).then_some(CategorySummary { category, summary })
}

/// Reads `{"category1": ..., "category2": ...}` in response order.
pub fn parse_summaries(raw: &str) -> Result<Vec<CategorySummary>, ExtractError> {
    let object = extract_object(raw)?;
    Ok(object.iter().filter_map(|(k, v)| summary_entry(k, v)).collect())
}

/// Summarizes one tag's articles into at most `cap` categories. No articles
/// means no call. Unusable responses leave a failure record and yield `[]`.
pub fn summarize_level(
    tag: &str,
    context: &str,
    articles: &[&NewsArticle],
    cap: usize,
    gateway: &Gateway,
) -> Result<Vec<CategorySummary>, LlmError> {
    if articles.is_empty() || cap == 0 {
        return Ok(Vec::new());
    }
    let slots: BTreeMap<String, String> = [
        ("TAG", tag.to_string()),
        ("N", cap.to_string()),
        ("TAG DESCRIPTION", context.to_string()),
        (
            "ARTICLES",
            article_block(articles.iter().map(|a| (a.headline.as_str(), a.body.as_str()))),
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let prompt = gateway.render(TemplateId::Summarize, &slots)?;
    let mut out = gateway.ask(&prompt, parse_summaries)?.unwrap_or_default();
    if out.len() > cap {
        log::warn!("{tag}: {} categories returned, keeping the first {cap}", out.len());
        out.truncate(cap);
    }
    Ok(out)
}

type Shared = Result<Vec<CategorySummary>, String>;

/// Single-flight memo: concurrent requests for one key wait on one computation.
#[derive(Default)]
pub struct SummaryMemo {
    cells: Mutex<HashMap<(NaiveDate, String), Arc<OnceLock<Shared>>>>,
}

impl SummaryMemo {
    pub fn get_or_compute(
        &self,
        day: NaiveDate,
        tag: &str,
        compute: impl FnOnce() -> Result<Vec<CategorySummary>, LlmError>,
    ) -> Result<Vec<CategorySummary>, PairingError> {
        let cell = {
            let mut cells = self.cells.lock().unwrap();
            cells.entry((day, tag.to_string())).or_default().clone()
        };
        cell.get_or_init(|| compute().map_err(|e| e.to_string()))
            .clone()
            .map_err(PairingError::Shared)
    }

    pub fn len(&self) -> usize {
        self.cells.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Classified articles grouped by roll-forward trading day.
pub struct DayIndex<'a> {
    by_day: BTreeMap<NaiveDate, Vec<&'a NewsArticle>>,
}

impl<'a> DayIndex<'a> {
    /// Articles published after the last trading day are dropped.
    pub fn build(articles: &'a [NewsArticle], calendar: &TradingCalendar) -> Self {
        let mut by_day: BTreeMap<NaiveDate, Vec<&'a NewsArticle>> = BTreeMap::new();
        for article in articles {
            if let Some(day) = calendar.align(article.published) {
                by_day.entry(day).or_default().push(article);
            }
        }
        for list in by_day.values_mut() {
            list.sort_by(|a, b| a.article_id.cmp(&b.article_id));
        }
        Self { by_day }
    }

    pub fn on(&self, day: NaiveDate) -> &[&'a NewsArticle] {
        self.by_day.get(&day).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn at_level(&self, day: NaiveDate, level: LevelLabel) -> Vec<&'a NewsArticle> {
        self.on(day).iter().copied().filter(|a| a.level == Some(level)).collect()
    }

    pub fn sector_news(&self, day: NaiveDate, sector: GicsSector) -> Vec<&'a NewsArticle> {
        self.on(day)
            .iter()
            .copied()
            .filter(|a| a.level == Some(LevelLabel::Sector) && a.sector.and_then(|s| s.sector()) == Some(sector))
            .collect()
    }

    /// Company-level articles of the day: the retrieval pool.
    pub fn company_pool(&self, day: NaiveDate) -> Vec<&'a NewsArticle> {
        self.at_level(day, LevelLabel::Company)
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.by_day.keys().copied()
    }
}

/// Relation labels per (ticker, article_id).
pub type RelationTable = HashMap<(String, String), RelationLabel>;

/// Gateway plus shared state for per-day summarization.
pub struct Summarizer<'g> {
    pub gateway: &'g Gateway,
    pub descriptions: Descriptions,
    pub caps: SlotCaps,
    pub memo: SummaryMemo,
    pub keep_article_ids: bool,
}

impl<'g> Summarizer<'g> {
    pub fn new(gateway: &'g Gateway, descriptions: Descriptions) -> Self {
        Self {
            gateway,
            descriptions,
            caps: SlotCaps::default(),
            memo: SummaryMemo::default(),
            keep_article_ids: false,
        }
    }

    pub fn macro_slot(&self, day: NaiveDate, articles: &[&NewsArticle]) -> Result<Vec<CategorySummary>, PairingError> {
        let tag = "Macroeconomic";
        let context = self.descriptions.level_description(tag).unwrap_or_default().to_string();
        self.memo.get_or_compute(day, tag, || {
            summarize_level(tag, &context, articles, self.caps.macro_level, self.gateway)
        })
    }

    pub fn sector_slot(
        &self,
        day: NaiveDate,
        sector: GicsSector,
        articles: &[&NewsArticle],
    ) -> Result<Vec<CategorySummary>, PairingError> {
        let tag = sector.name();
        let context = self.descriptions.sector_description(tag).unwrap_or_default().to_string();
        self.memo.get_or_compute(day, tag, || {
            summarize_level(tag, &context, articles, self.caps.sector, self.gateway)
        })
    }

    pub fn company_slot(
        &self,
        company: &CompanyRecord,
        profile: &CompanyProfile,
        articles: &[&NewsArticle],
    ) -> Result<Vec<CategorySummary>, PairingError> {
        Ok(summarize_level(
            &company.name,
            &profile.describe(),
            articles,
            self.caps.company,
            self.gateway,
        )?)
    }
}

fn ids(articles: &[&NewsArticle]) -> Vec<String> {
    articles.iter().map(|a| a.article_id.clone()).collect()
}

/// Builds one record. Retrieved articles are split by their relation label
/// for this company; `Irrelevant` and unlabeled ones are discarded.
pub fn assemble_day(
    company: &CompanyRecord,
    day: NaiveDate,
    index: &DayIndex<'_>,
    retrieved: &[Retrieved],
    relations: &RelationTable,
    profiles: &BTreeMap<String, ProfileTable>,
    summarizer: &Summarizer<'_>,
) -> Result<PairedDayRecord, PairingError> {
    let table = profiles
        .get(&company.ticker)
        .ok_or_else(|| PairingError::MissingProfile(company.ticker.clone()))?;
    let profile = table.on(day).cloned().unwrap_or_default();

    let macro_articles = index.at_level(day, LevelLabel::Macroeconomic);
    let sector_articles = index.sector_news(day, company.gics_sector);
    let pool: HashMap<&str, &NewsArticle> = index
        .company_pool(day)
        .into_iter()
        .map(|a| (a.article_id.as_str(), a))
        .collect();
    let (mut related, mut target) = (Vec::new(), Vec::new());
    for r in retrieved {
        let Some(article) = pool.get(r.article_id.as_str()) else {
            return Err(PairingError::Usage(format!(
                "retrieved article {} is not in the {day} pool",
                r.article_id
            )));
        };
        match relations.get(&(company.ticker.clone(), r.article_id.clone())) {
            Some(RelationLabel::Target) => target.push(*article),
            Some(RelationLabel::Related) => related.push(*article),
            _ => {}
        }
    }

    let record = PairedDayRecord {
        ticker: company.ticker.clone(),
        trading_day: day,
        macro_level: summarizer.macro_slot(day, &macro_articles)?,
        sector: summarizer.sector_slot(day, company.gics_sector, &sector_articles)?,
        related_company: summarizer.company_slot(company, &profile, &related)?,
        target_company: summarizer.company_slot(company, &profile, &target)?,
        profile,
        article_ids: summarizer.keep_article_ids.then(|| {
            [
                ("macro", ids(&macro_articles)),
                ("sector", ids(&sector_articles)),
                ("related_company", ids(&related)),
                ("target_company", ids(&target)),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
        }),
    };
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub ticker: String,
    pub file: String,
    pub days: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tickers: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `<ticker>.jsonl` per company (records sorted by day) and a manifest.
pub fn emit_dataset(records: &[PairedDayRecord], out_dir: &Path) -> Result<Manifest, PairingError> {
    if records.is_empty() {
        return Err(PairingError::Usage("no records to emit".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut by_ticker: BTreeMap<&str, Vec<&PairedDayRecord>> = BTreeMap::new();
    for r in records {
        by_ticker.entry(&r.ticker).or_default().push(r);
    }
    let mut tickers = Vec::new();
    for (ticker, mut rows) in by_ticker {
        rows.sort_by_key(|r| r.trading_day);
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
            text.push('\n');
        }
        let file = format!("{ticker}.jsonl");
        fs::write(out_dir.join(&file), &text)?;
        tickers.push(ManifestEntry {
            ticker: ticker.to_string(),
            file,
            days: rows.len(),
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        });
    }
    let manifest = Manifest { tickers };
    let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    fs::write(out_dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<BTreeMap<String, Vec<PairedDayRecord>>, PairingError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| PairingError::Usage(format!("bad manifest: {e}")))?;
    let mut out = BTreeMap::new();
    for entry in manifest.tickers {
        let text = fs::read_to_string(dir.join(&entry.file))?;
        let rows = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line)
                    .map_err(|e| PairingError::Usage(format!("{}:{}: {e}", entry.file, i + 1)))
            })
            .collect::<Result<Vec<PairedDayRecord>, _>>()?;
        out.insert(entry.ticker, rows);
    }
    Ok(out)
}

const NAME_SUFFIXES: &[&str] = &[
    "inc", "incorporated", "corp", "corporation", "co", "company", "ltd", "limited", "plc", "llc",
    "holdings", "group", "the", "class", "a", "b", "c",
];

fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '&'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The name's distinctive words: legal suffixes are stripped from the end.
pub fn name_keywords(name: &str) -> Vec<String> {
    let mut words = word_tokens(name);
    while words.len() > 1 && NAME_SUFFIXES.contains(&words.last().unwrap().as_str()) {
        words.pop();
    }
    words
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

pub fn mentions(company: &CompanyRecord, article: &NewsArticle) -> bool {
    let name = name_keywords(&company.name);
    let ticker = company.ticker.to_lowercase();
    [&article.headline, &article.body].iter().any(|text| {
        let words = word_tokens(text);
        contains_run(&words, &name) || words.iter().any(|w| *w == ticker)
    })
}

/// Articles of the day that name the company or its ticker as whole words.
pub fn keyword_pair_baseline<'a>(company: &CompanyRecord, day_articles: &[&'a NewsArticle]) -> Vec<&'a NewsArticle> {
    day_articles.iter().copied().filter(|a| mentions(company, a)).collect()
}

/// Keyword pairing over every trading day; with `forward_fill`, days without
/// a match carry the previous day's pairing.
pub fn keyword_pairs(
    company: &CompanyRecord,
    calendar: &TradingCalendar,
    index: &DayIndex<'_>,
    forward_fill: bool,
) -> BTreeMap<NaiveDate, Vec<String>> {
    let mut out = BTreeMap::new();
    let mut last: Vec<String> = Vec::new();
    for &day in calendar.days() {
        let hits: Vec<String> = keyword_pair_baseline(company, index.on(day))
            .into_iter()
            .map(|a| a.article_id.clone())
            .collect();
        if !hits.is_empty() {
            last = hits.clone();
            out.insert(day, hits);
        } else if forward_fill && !last.is_empty() {
            out.insert(day, last.clone());
        } else {
            out.insert(day, Vec::new());
        }
    }
    out
}

/// Checks that no article feeds two slots of a record's debug attribution.
pub fn slots_disjoint(record: &PairedDayRecord) -> bool {
    let Some(ids) = &record.article_ids else {
        return true;
    };
    let mut seen = BTreeSet::new();
    ids.values().flatten().all(|id| seen.insert(id.clone()))
}
