//! Raw inputs: news, filings, prices and the company registry.
//!
//! Everything here is loaded once, validated, and then treated as immutable.
//! The trading calendar is not an exchange table; it is the sorted union of
//! every date that appears in a loaded price file.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::classify::{LevelLabel, RelationLabel, SectorLabel};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {reason}")]
    Invalid {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{file}: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty trading calendar: no price rows were loaded")]
    EmptyCalendar,
}

impl CorpusError {
    fn invalid(file: &Path, line: usize, reason: impl Into<String>) -> Self {
        CorpusError::Invalid {
            file: file.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }

    fn io(file: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            file: file.to_path_buf(),
            source,
        }
    }
}

/// The eleven GICS sectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GicsSector {
    Energy,
    Materials,
    Industrials,
    ConsumerDiscretionary,
    ConsumerStaples,
    HealthCare,
    Financials,
    InformationTechnology,
    CommunicationServices,
    Utilities,
    RealEstate,
}

impl GicsSector {
    pub const ALL: [GicsSector; 11] = [
        GicsSector::Energy,
        GicsSector::Materials,
        GicsSector::Industrials,
        GicsSector::ConsumerDiscretionary,
        GicsSector::ConsumerStaples,
        GicsSector::HealthCare,
        GicsSector::Financials,
        GicsSector::InformationTechnology,
        GicsSector::CommunicationServices,
        GicsSector::Utilities,
        GicsSector::RealEstate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GicsSector::Energy => "Energy",
            GicsSector::Materials => "Materials",
            GicsSector::Industrials => "Industrials",
            GicsSector::ConsumerDiscretionary => "Consumer Discretionary",
            GicsSector::ConsumerStaples => "Consumer Staples",
            GicsSector::HealthCare => "Health Care",
            GicsSector::Financials => "Financials",
            GicsSector::InformationTechnology => "Information Technology",
            GicsSector::CommunicationServices => "Communication Services",
            GicsSector::Utilities => "Utilities",
            GicsSector::RealEstate => "Real Estate",
        }
    }
}

impl fmt::Display for GicsSector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GicsSector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        GicsSector::ALL
            .iter()
            .copied()
            .find(|sector| sector.name().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| format!("unknown GICS sector {wanted:?}"))
    }
}

impl TryFrom<String> for GicsSector {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<GicsSector> for String {
    fn from(value: GicsSector) -> Self {
        value.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompanyRecord {
    pub ticker: String,
    pub name: String,
    pub gics_sector: GicsSector,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    companies: Vec<CompanyRecord>,
}

impl Registry {
    pub fn new(companies: Vec<CompanyRecord>) -> Result<Self, String> {
        let mut seen = HashSet::new();
        for company in &companies {
            if !seen.insert(company.ticker.as_str()) {
                return Err(format!("duplicate ticker {}", company.ticker));
            }
        }
        Ok(Self { companies })
    }

    pub fn companies(&self) -> &[CompanyRecord] {
        &self.companies
    }

    pub fn get(&self, ticker: &str) -> Option<&CompanyRecord> {
        self.companies.iter().find(|c| c.ticker == ticker)
    }

    pub fn len(&self) -> usize {
        self.companies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.companies.is_empty()
    }
}

/// A dated article. Labels are attached by the classification stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewsArticle {
    pub article_id: String,
    pub published: NaiveDate,
    pub headline: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<LevelLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sector: Option<SectorLabel>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub relation_by_company: BTreeMap<String, RelationLabel>,
}

impl NewsArticle {
    pub fn new(
        article_id: impl Into<String>,
        published: NaiveDate,
        headline: impl Into<String>,
        body: impl Into<String>,
    ) -> Self {
        Self {
            article_id: article_id.into(),
            published,
            headline: headline.into(),
            body: body.into(),
            level: None,
            sector: None,
            relation_by_company: BTreeMap::new(),
        }
    }

    /// Checks that labels only appear behind the stage that produces them.
    pub fn check_stage_gating(&self) -> Result<(), String> {
        if self.sector.is_some() && self.level != Some(LevelLabel::Sector) {
            return Err(format!(
                "article {} carries a sector label without level Sector",
                self.article_id
            ));
        }
        if !self.relation_by_company.is_empty() && self.level != Some(LevelLabel::Company) {
            return Err(format!(
                "article {} carries relation labels without level Company",
                self.article_id
            ));
        }
        Ok(())
    }
}

/// The accepted SEC form types, in same-day processing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FilingType {
    S1,
    S4,
    F1,
    F4,
    S1A,
    F1A,
    F4A,
    TenK,
    TwentyF,
    FortyF,
    TenKA,
    TwentyFA,
    FortyFA,
    TenQ,
    TenQA,
    EightK,
    SixK,
    EightKA,
}

impl FilingType {
    pub const ALL: [FilingType; 18] = [
        FilingType::S1,
        FilingType::S4,
        FilingType::F1,
        FilingType::F4,
        FilingType::S1A,
        FilingType::F1A,
        FilingType::F4A,
        FilingType::TenK,
        FilingType::TwentyF,
        FilingType::FortyF,
        FilingType::TenKA,
        FilingType::TwentyFA,
        FilingType::FortyFA,
        FilingType::TenQ,
        FilingType::TenQA,
        FilingType::EightK,
        FilingType::SixK,
        FilingType::EightKA,
    ];

    pub fn code(self) -> &'static str {
        match self {
            FilingType::S1 => "S-1",
            FilingType::S4 => "S-4",
            FilingType::F1 => "F-1",
            FilingType::F4 => "F-4",
            FilingType::S1A => "S-1/A",
            FilingType::F1A => "F-1/A",
            FilingType::F4A => "F-4/A",
            FilingType::TenK => "10-K",
            FilingType::TwentyF => "20-F",
            FilingType::FortyF => "40-F",
            FilingType::TenKA => "10-K/A",
            FilingType::TwentyFA => "20-F/A",
            FilingType::FortyFA => "40-F/A",
            FilingType::TenQ => "10-Q",
            FilingType::TenQA => "10-Q/A",
            FilingType::EightK => "8-K",
            FilingType::SixK => "6-K",
            FilingType::EightKA => "8-K/A",
        }
    }

    /// Position in the accepted-type list; earlier types are processed first on a shared date.
    pub fn order(self) -> usize {
        FilingType::ALL.iter().position(|t| *t == self).unwrap_or(usize::MAX)
    }
}

impl fmt::Display for FilingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for FilingType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        FilingType::ALL
            .iter()
            .copied()
            .find(|t| t.code().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| format!("unsupported filing type {wanted:?}"))
    }
}

impl TryFrom<String> for FilingType {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<FilingType> for String {
    fn from(value: FilingType) -> Self {
        value.code().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilingDocument {
    pub ticker: String,
    pub filed: NaiveDate,
    pub filing_type: FilingType,
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

impl PriceBar {
    pub fn channels(&self) -> [f64; 4] {
        [self.open, self.high, self.low, self.close]
    }

    fn check(&self) -> Result<(), String> {
        let prices = self.channels();
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err("prices must be finite and > 0".into());
        }
        if self.high < self.open.max(self.close) {
            return Err("high < max(open, close)".into());
        }
        if self.low > self.open.min(self.close) {
            return Err("low > min(open, close)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub ticker: String,
    pub bars: Vec<PriceBar>,
}

impl PriceSeries {
    pub fn validate(&self) -> Result<(), (usize, String)> {
        for (i, bar) in self.bars.iter().enumerate() {
            bar.check().map_err(|e| (i, e))?;
            if i > 0 {
                let prev = self.bars[i - 1].date;
                if bar.date == prev {
                    return Err((i, format!("duplicate price row for {}", bar.date)));
                }
                if bar.date < prev {
                    return Err((i, "dates must be strictly increasing".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.bars.iter().map(|b| b.date)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradingCalendar {
    days: Vec<NaiveDate>,
}

impl TradingCalendar {
    pub fn new(days: Vec<NaiveDate>) -> Result<Self, String> {
        if days.is_empty() {
            return Err("trading calendar must not be empty".into());
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err("trading days must be strictly increasing".into());
        }
        Ok(Self { days })
    }

    /// Sorted union of all dates in the given series.
    pub fn from_series<'a>(series: impl IntoIterator<Item = &'a PriceSeries>) -> Result<Self, String> {
        let days: BTreeSet<NaiveDate> = series.into_iter().flat_map(|s| s.dates()).collect();
        Self::new(days.into_iter().collect())
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn first(&self) -> NaiveDate {
        self.days[0]
    }

    pub fn last(&self) -> NaiveDate {
        self.days[self.days.len() - 1]
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.days.binary_search(&date).is_ok()
    }

    /// Rolls a date forward to the first trading day on or after it.
    pub fn align(&self, date: NaiveDate) -> Option<NaiveDate> {
        align_to_trading_day(date, self)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.days.binary_search(&date).ok()
    }
}

/// Earliest calendar day `>= date`, or `None` past the last trading day.
pub fn align_to_trading_day(date: NaiveDate, calendar: &TradingCalendar) -> Option<NaiveDate> {
    let idx = calendar.days.partition_point(|d| *d < date);
    calendar.days.get(idx).copied()
}

/// Carries each dated value onto every following trading day until the next
/// value takes over. Days before the first value are left out.
///
/// `dated_values` must be sorted by date; on equal dates the later entry wins.
pub fn forward_fill<T: Clone>(
    dated_values: &[(NaiveDate, T)],
    calendar: &TradingCalendar,
) -> BTreeMap<NaiveDate, T> {
    let mut out = BTreeMap::new();
    let mut next = 0;
    let mut current: Option<&T> = None;
    for &day in calendar.days() {
        while next < dated_values.len() && dated_values[next].0 <= day {
            current = Some(&dated_values[next].1);
            next += 1;
        }
        if let Some(value) = current {
            out.insert(day, value.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub articles: Vec<NewsArticle>,
    pub filings: Vec<FilingDocument>,
    pub prices: BTreeMap<String, PriceSeries>,
    pub registry: Registry,
    pub calendar: TradingCalendar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub news: PathBuf,
    pub filings: PathBuf,
    pub prices_dir: PathBuf,
    pub registry: PathBuf,
}

pub fn load_corpus(paths: &CorpusPaths) -> Result<Corpus, CorpusError> {
    let articles = load_news(&paths.news)?;
    let filings = load_filings(&paths.filings)?;
    let prices = load_prices_dir(&paths.prices_dir)?;
    let registry = load_registry(&paths.registry)?;
    let calendar =
        TradingCalendar::from_series(prices.values()).map_err(|_| CorpusError::EmptyCalendar)?;
    Ok(Corpus {
        articles,
        filings,
        prices,
        registry,
        calendar,
    })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn load_news(path: &Path) -> Result<Vec<NewsArticle>, CorpusError> {
    let mut seen = HashSet::new();
    let mut articles = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let article: NewsArticle = serde_json::from_str(&line)
            .map_err(|e| CorpusError::invalid(path, line_no, format!("malformed article: {e}")))?;
        if article.headline.trim().is_empty() {
            return Err(CorpusError::invalid(path, line_no, "headline must be non-empty"));
        }
        if !seen.insert(article.article_id.clone()) {
            return Err(CorpusError::invalid(
                path,
                line_no,
                format!("duplicate article_id {}", article.article_id),
            ));
        }
        article
            .check_stage_gating()
            .map_err(|e| CorpusError::invalid(path, line_no, e))?;
        articles.push(article);
    }
    Ok(articles)
}

pub fn load_filings(path: &Path) -> Result<Vec<FilingDocument>, CorpusError> {
    read_lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            serde_json::from_str::<FilingDocument>(&line)
                .map_err(|e| CorpusError::invalid(path, line_no, format!("malformed filing: {e}")))
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct PriceRow {
    date: NaiveDate,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
}

pub fn load_price_csv(path: &Path) -> Result<PriceSeries, CorpusError> {
    let ticker = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CorpusError::invalid(path, 0, "price file name must be <TICKER>.csv"))?
        .to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| CorpusError::invalid(path, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::invalid(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "open", "high", "low", "close"] {
        return Err(CorpusError::invalid(path, 1, "header must be date,open,high,low,close"));
    }
    let mut bars = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            CorpusError::invalid(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: PriceRow = record
            .deserialize(Some(&headers))
            .map_err(|e| CorpusError::invalid(path, line, format!("malformed price row: {e}")))?;
        bars.push(PriceBar {
            date: row.date,
            open: row.open,
            high: row.high,
            low: row.low,
            close: row.close,
        });
        lines.push(line);
    }
    let series = PriceSeries { ticker, bars };
    series
        .validate()
        .map_err(|(i, reason)| CorpusError::invalid(path, lines[i], reason))?;
    Ok(series)
}

pub fn load_prices_dir(dir: &Path) -> Result<BTreeMap<String, PriceSeries>, CorpusError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CorpusError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    files.sort();
    let mut out = BTreeMap::new();
    for file in files {
        let series = load_price_csv(&file)?;
        out.insert(series.ticker.clone(), series);
    }
    Ok(out)
}

pub fn load_registry(path: &Path) -> Result<Registry, CorpusError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CorpusError::invalid(path, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::invalid(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["ticker", "name", "gics_sector"] {
        return Err(CorpusError::invalid(path, 1, "header must be ticker,name,gics_sector"));
    }
    let mut companies: Vec<CompanyRecord> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::invalid(path, 0, e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let company: CompanyRecord = record
            .deserialize(Some(&headers))
            .map_err(|e| CorpusError::invalid(path, line, format!("malformed registry row: {e}")))?;
        if companies.iter().any(|c| c.ticker == company.ticker) {
            return Err(CorpusError::invalid(
                path,
                line,
                format!("duplicate ticker {}", company.ticker),
            ));
        }
        companies.push(company);
    }
    Registry::new(companies).map_err(|e| CorpusError::invalid(path, 0, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_price_csv(dir: &Path, series: &PriceSeries) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join(format!("{}.csv", series.ticker)))?);
    writeln!(out, "date,open,high,low,close")?;
    for bar in &series.bars {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4}",
            bar.date, bar.open, bar.high, bar.low, bar.close
        )?;
    }
    out.flush()
}

pub fn write_registry(path: &Path, registry: &Registry) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    for company in registry.companies() {
        writer.serialize(company)?;
    }
    writer.flush()
}
