//! Five-component company profiles parsed from filings and carried forward
//! onto every trading day.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{forward_fill, write_jsonl, FilingDocument, FilingType, TradingCalendar};
use crate::llm::extract::extract_structured_with_extras;
use crate::llm::{Gateway, LlmError, TemplateId};

/// Character budget applied before a filing is sent for parsing.
pub const DEFAULT_CHAR_BUDGET: usize = 400_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProfileComponent {
    OverviewProduct,
    StrategyMarketOps,
    GovernanceRisks,
    FinancialStatement,
    RecentEventCatalyst,
}

impl ProfileComponent {
    pub const ALL: [ProfileComponent; 5] = [
        ProfileComponent::OverviewProduct,
        ProfileComponent::StrategyMarketOps,
        ProfileComponent::GovernanceRisks,
        ProfileComponent::FinancialStatement,
        ProfileComponent::RecentEventCatalyst,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ProfileComponent::OverviewProduct => "overviewProduct",
            ProfileComponent::StrategyMarketOps => "strategyMarketOps",
            ProfileComponent::GovernanceRisks => "governanceRisks",
            ProfileComponent::FinancialStatement => "financialStatement",
            ProfileComponent::RecentEventCatalyst => "recentEventCatalyst",
        }
    }
}

pub const PROFILE_KEYS: [&str; 5] = [
    "overviewProduct",
    "strategyMarketOps",
    "governanceRisks",
    "financialStatement",
    "recentEventCatalyst",
];

/// The five profile components. Empty strings mean "nothing relevant".
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompanyProfile {
    pub overview_product: String,
    pub strategy_market_ops: String,
    pub governance_risks: String,
    pub financial_statement: String,
    pub recent_event_catalyst: String,
}

impl CompanyProfile {
    pub fn get(&self, component: ProfileComponent) -> &str {
        match component {
            ProfileComponent::OverviewProduct => &self.overview_product,
            ProfileComponent::StrategyMarketOps => &self.strategy_market_ops,
            ProfileComponent::GovernanceRisks => &self.governance_risks,
            ProfileComponent::FinancialStatement => &self.financial_statement,
            ProfileComponent::RecentEventCatalyst => &self.recent_event_catalyst,
        }
    }

    pub fn set(&mut self, component: ProfileComponent, value: String) {
        let slot = match component {
            ProfileComponent::OverviewProduct => &mut self.overview_product,
            ProfileComponent::StrategyMarketOps => &mut self.strategy_market_ops,
            ProfileComponent::GovernanceRisks => &mut self.governance_risks,
            ProfileComponent::FinancialStatement => &mut self.financial_statement,
            ProfileComponent::RecentEventCatalyst => &mut self.recent_event_catalyst,
        };
        *slot = value;
    }

    pub fn is_empty(&self) -> bool {
        ProfileComponent::ALL.iter().all(|c| self.get(*c).is_empty())
    }

    /// Non-empty components in canonical order.
    pub fn non_empty(&self) -> impl Iterator<Item = (ProfileComponent, &str)> {
        ProfileComponent::ALL
            .into_iter()
            .map(move |c| (c, self.get(c)))
            .filter(|(_, text)| !text.is_empty())
    }

    /// Multi-line rendering used as summarization context for company tags.
    pub fn describe(&self) -> String {
        format!(
            "1. Financial Statement: {}\n2. Governance Risks: {}\n3. Overview Product: {}\n4. Recent Event Catalyst: {}\n5. Strategy Market Ops: {}",
            self.financial_statement,
            self.governance_risks,
            self.overview_product,
            self.recent_event_catalyst,
            self.strategy_market_ops
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedFiling {
    pub ticker: String,
    pub filed: NaiveDate,
    pub filing_type: FilingType,
    #[serde(flatten)]
    pub profile: CompanyProfile,
    pub raw_digest: String,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default)]
    pub parse_failed: bool,
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn truncate_chars(text: &str, budget: usize) -> (&str, bool) {
    match text.char_indices().nth(budget) {
        Some((cut, _)) => (&text[..cut], true),
        None => (text, false),
    }
}

/// Parses one filing. Unusable responses degrade to an all-empty profile
/// with `parse_failed` set; transport errors propagate.
pub fn parse_filing(
    doc: &FilingDocument,
    gateway: &Gateway,
    char_budget: usize,
) -> Result<ParsedFiling, LlmError> {
    let raw_digest = text_digest(&doc.raw_text);
    let mut parsed = ParsedFiling {
        ticker: doc.ticker.clone(),
        filed: doc.filed,
        filing_type: doc.filing_type,
        profile: CompanyProfile::default(),
        raw_digest,
        truncated: false,
        parse_failed: false,
    };
    if doc.raw_text.trim().is_empty() {
        log::warn!("{} {} filing on {} has no text", doc.ticker, doc.filing_type, doc.filed);
        parsed.parse_failed = true;
        return Ok(parsed);
    }
    let (text, truncated) = truncate_chars(&doc.raw_text, char_budget);
    if truncated {
        log::info!(
            "{} {} filing on {} truncated to {char_budget} characters",
            doc.ticker,
            doc.filing_type,
            doc.filed
        );
    }
    parsed.truncated = truncated;
    let slots = [("sec_filing_text".to_string(), text.to_string())].into();
    let prompt = gateway.render(TemplateId::FilingParse, &slots)?;
    let reply = gateway.ask(&prompt, |raw| {
        let (values, dropped) = extract_structured_with_extras(raw, &PROFILE_KEYS)?;
        if !dropped.is_empty() {
            log::warn!("filing parse: dropping unexpected keys {}", dropped.join(", "));
        }
        Ok(values)
    })?;
    match reply {
        Some(values) => {
            for component in ProfileComponent::ALL {
                parsed
                    .profile
                    .set(component, values[component.key()].trim().to_string());
            }
        }
        None => parsed.parse_failed = true,
    }
    Ok(parsed)
}

/// Previously parsed filings keyed by the digest of their raw text.
#[derive(Debug, Clone, Default)]
pub struct ParseCache {
    by_digest: HashMap<(String, String), ParsedFiling>,
}

impl ParseCache {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut cache = Self::default();
        if !path.exists() {
            return Ok(cache);
        }
        for line in std::fs::read_to_string(path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ParsedFiling = serde_json::from_str(line).map_err(std::io::Error::other)?;
            cache.insert(parsed);
        }
        Ok(cache)
    }

    pub fn insert(&mut self, parsed: ParsedFiling) {
        self.by_digest
            .insert((parsed.ticker.clone(), parsed.raw_digest.clone()), parsed);
    }

    pub fn get(&self, doc: &FilingDocument) -> Option<&ParsedFiling> {
        self.by_digest
            .get(&(doc.ticker.clone(), text_digest(&doc.raw_text)))
            .filter(|p| p.filed == doc.filed && p.filing_type == doc.filing_type)
    }
}

/// Parses every filing, reusing cached results. Output order follows input.
pub fn parse_filings(
    docs: &[FilingDocument],
    gateway: &Gateway,
    cache: &ParseCache,
    char_budget: usize,
) -> Result<Vec<ParsedFiling>, LlmError> {
    docs.par_iter()
        .map(|doc| match cache.get(doc) {
            Some(hit) => Ok(hit.clone()),
            None => parse_filing(doc, gateway, char_budget),
        })
        .collect()
}

pub fn write_parsed(path: &Path, parsed: &[ParsedFiling]) -> std::io::Result<()> {
    write_jsonl(path, parsed)
}

/// Daily profiles for one company over the whole calendar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileTable {
    pub ticker: String,
    days: BTreeMap<NaiveDate, CompanyProfile>,
}

impl ProfileTable {
    pub fn on(&self, day: NaiveDate) -> Option<&CompanyProfile> {
        self.days.get(&day)
    }

    pub fn days(&self) -> &BTreeMap<NaiveDate, CompanyProfile> {
        &self.days
    }
}

/// Forward-fills each component independently. Empty extractions never
/// overwrite an earlier non-empty value. Same-day filings are applied in
/// accepted-type order, later non-empty values winning.
pub fn build_profile_table(
    ticker: &str,
    parsed: &[ParsedFiling],
    calendar: &TradingCalendar,
) -> ProfileTable {
    let mut ordered: Vec<&ParsedFiling> = parsed.iter().filter(|p| p.ticker == ticker).collect();
    ordered.sort_by_key(|p| (p.filed, p.filing_type.order()));

    let filled: Vec<BTreeMap<NaiveDate, String>> = ProfileComponent::ALL
        .iter()
        .map(|component| {
            let values: Vec<(NaiveDate, String)> = ordered
                .iter()
                .map(|p| (p.filed, p.profile.get(*component)))
                .filter(|(_, text)| !text.is_empty())
                .map(|(d, text)| (d, text.to_string()))
                .collect();
            forward_fill(&values, calendar)
        })
        .collect();

    let days = calendar
        .days()
        .iter()
        .map(|day| {
            let mut profile = CompanyProfile::default();
            for (component, values) in ProfileComponent::ALL.iter().zip(&filled) {
                if let Some(text) = values.get(day) {
                    profile.set(*component, text.clone());
                }
            }
            (*day, profile)
        })
        .collect();
    ProfileTable {
        ticker: ticker.to_string(),
        days,
    }
}
