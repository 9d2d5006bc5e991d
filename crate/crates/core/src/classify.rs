//! Level, sector and relation classification of news articles.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CompanyRecord, GicsSector, NewsArticle};
use crate::filing::CompanyProfile;
use crate::llm::extract::extract_structured;
use crate::llm::templates::{category_block, category_choices, CategoryDescription};
use crate::llm::{Descriptions, ExtractError, Gateway, LlmError, Prompt, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LevelLabel {
    Macroeconomic,
    Sector,
    Company,
    #[serde(rename = "NA")]
    NA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SectorLabel {
    Sector(GicsSector),
    NA,
}

impl SectorLabel {
    pub fn sector(self) -> Option<GicsSector> {
        match self {
            SectorLabel::Sector(s) => Some(s),
            SectorLabel::NA => None,
        }
    }
}

impl fmt::Display for SectorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SectorLabel::Sector(s) => f.write_str(s.name()),
            SectorLabel::NA => f.write_str("NA"),
        }
    }
}

impl FromStr for SectorLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "NA" | "N/A" => Ok(SectorLabel::NA),
            other => other.parse().map(SectorLabel::Sector),
        }
    }
}

impl TryFrom<String> for SectorLabel {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<SectorLabel> for String {
    fn from(value: SectorLabel) -> Self {
        value.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationLabel {
    Target,
    Related,
    Irrelevant,
}

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn article_slots(article: &NewsArticle, categories: &[CategoryDescription]) -> BTreeMap<String, String> {
    [
        ("CATEGORY_DESCRIPTIONS", category_block(categories)),
        ("CATEGORY_CHOICES", category_choices(categories)),
        ("HEADLINE", article.headline.clone()),
        ("BODY", article.body.clone()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn level_prompt(article: &NewsArticle, descriptions: &Descriptions) -> Prompt {
    crate::llm::render_prompt(TemplateId::LevelClassify, &article_slots(article, &descriptions.level))
        .expect("level slots are complete")
}

pub fn sector_prompt(article: &NewsArticle, descriptions: &Descriptions) -> Prompt {
    crate::llm::render_prompt(TemplateId::SectorClassify, &article_slots(article, &descriptions.sector))
        .expect("sector slots are complete")
}

pub fn relation_prompt(
    article: &NewsArticle,
    profile: &CompanyProfile,
    descriptions: &Descriptions,
) -> Prompt {
    let mut slots = article_slots(article, &descriptions.relation);
    for (key, value) in [
        ("FINANCIAL_STATEMENT", &profile.financial_statement),
        ("GOVERNANCE_RISKS", &profile.governance_risks),
        ("OVERVIEW_PRODUCT", &profile.overview_product),
        ("RECENT_EVENT_CATALYST", &profile.recent_event_catalyst),
        ("STRATEGY_MARKET_OPS", &profile.strategy_market_ops),
    ] {
        slots.insert(key.to_string(), value.clone());
    }
    crate::llm::render_prompt(TemplateId::RelationClassify, &slots).expect("relation slots are complete")
}

fn category_of(raw: &str) -> Result<String, ExtractError> {
    Ok(extract_structured(raw, &["category"])?["category"].trim().to_string())
}

fn is_na(value: &str) -> bool {
    matches!(value.to_ascii_uppercase().as_str(), "N/A" | "NA")
}

pub fn parse_level(raw: &str) -> Result<LevelLabel, ExtractError> {
    let value = category_of(raw)?;
    match value.to_ascii_lowercase().as_str() {
        "macroeconomic" => Ok(LevelLabel::Macroeconomic),
        "sector" => Ok(LevelLabel::Sector),
        "company" => Ok(LevelLabel::Company),
        _ if is_na(&value) => Ok(LevelLabel::NA),
        _ => Err(ExtractError::OffVocabulary { value }),
    }
}

pub fn parse_sector(raw: &str) -> Result<SectorLabel, ExtractError> {
    let value = category_of(raw)?;
    if is_na(&value) {
        return Ok(SectorLabel::NA);
    }
    value
        .parse::<GicsSector>()
        .map(SectorLabel::Sector)
        .map_err(|_| ExtractError::OffVocabulary { value })
}

pub fn parse_relation(raw: &str) -> Result<RelationLabel, ExtractError> {
    let value = category_of(raw)?;
    let lower = value.to_ascii_lowercase();
    if lower == "target" || lower.starts_with("target-company") || lower.starts_with("target company") {
        Ok(RelationLabel::Target)
    } else if lower == "related" || lower.starts_with("related-company") || lower.starts_with("related company") {
        Ok(RelationLabel::Related)
    } else if is_na(&value) || lower == "irrelevant" {
        Ok(RelationLabel::Irrelevant)
    } else {
        Err(ExtractError::OffVocabulary { value })
    }
}

/// Off-vocabulary answers are re-asked; exhaustion yields `NA`.
pub fn classify_level(
    article: &NewsArticle,
    gateway: &Gateway,
    descriptions: &Descriptions,
) -> Result<LevelLabel, LlmError> {
    let prompt = level_prompt(article, descriptions);
    Ok(gateway.ask(&prompt, parse_level)?.unwrap_or(LevelLabel::NA))
}

pub fn classify_sector(
    article: &NewsArticle,
    gateway: &Gateway,
    descriptions: &Descriptions,
) -> Result<SectorLabel, ClassifyError> {
    if article.level != Some(LevelLabel::Sector) {
        return Err(ClassifyError::Usage(format!(
            "sector classification needs a Sector-level article, {} is {:?}",
            article.article_id, article.level
        )));
    }
    let prompt = sector_prompt(article, descriptions);
    Ok(gateway.ask(&prompt, parse_sector)?.unwrap_or(SectorLabel::NA))
}

/// Classifies an article against one company using the profile in force on
/// the article's trading day. Exhaustion yields `Irrelevant`.
pub fn classify_relation(
    article: &NewsArticle,
    company: &CompanyRecord,
    profile: &CompanyProfile,
    gateway: &Gateway,
    descriptions: &Descriptions,
) -> Result<RelationLabel, ClassifyError> {
    if article.level != Some(LevelLabel::Company) {
        return Err(ClassifyError::Usage(format!(
            "relation classification for {} needs a Company-level article, {} is {:?}",
            company.ticker, article.article_id, article.level
        )));
    }
    let prompt = relation_prompt(article, profile, descriptions);
    Ok(gateway.ask(&prompt, parse_relation)?.unwrap_or(RelationLabel::Irrelevant))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageCounts {
    pub classified: usize,
    pub skipped: usize,
    pub by_label: BTreeMap<String, usize>,
}

/// Labels every article that has no level yet. Calls run in parallel; the
/// labels are attached afterwards in article order.
pub fn run_level_stage(
    articles: &mut [NewsArticle],
    gateway: &Gateway,
    descriptions: &Descriptions,
) -> Result<StageCounts, LlmError> {
    let labels: Vec<Option<LevelLabel>> = articles
        .par_iter()
        .map(|a| match a.level {
            Some(_) => Ok(None),
            None => classify_level(a, gateway, descriptions).map(Some),
        })
        .collect::<Result<_, _>>()?;
    let mut counts = StageCounts::default();
    for (article, label) in articles.iter_mut().zip(labels) {
        match label {
            Some(l) => {
                article.level = Some(l);
                counts.classified += 1;
            }
            None => counts.skipped += 1,
        }
        *counts
            .by_label
            .entry(format!("{:?}", article.level.unwrap()))
            .or_default() += 1;
    }
    Ok(counts)
}

pub fn run_sector_stage(
    articles: &mut [NewsArticle],
    gateway: &Gateway,
    descriptions: &Descriptions,
) -> Result<StageCounts, ClassifyError> {
    let labels: Vec<Option<SectorLabel>> = articles
        .par_iter()
        .map(|a| {
            if a.level == Some(LevelLabel::Sector) && a.sector.is_none() {
                classify_sector(a, gateway, descriptions).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_, _>>()?;
    let mut counts = StageCounts::default();
    for (article, label) in articles.iter_mut().zip(labels) {
        if let Some(l) = label {
            article.sector = Some(l);
            counts.classified += 1;
        } else if article.level == Some(LevelLabel::Sector) {
            counts.skipped += 1;
        }
        if let Some(l) = article.sector {
            *counts.by_label.entry(l.to_string()).or_default() += 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{FixtureStore, MockProvider};
    use std::sync::Arc;

    fn article(headline: &str, body: &str) -> NewsArticle {
        NewsArticle::new("a1", "2022-05-02".parse().unwrap(), headline, body)
    }

    fn gateway(fixtures: &[(Prompt, &str)]) -> Gateway {
        let mut store = FixtureStore::new();
        for (prompt, reply) in fixtures {
            store.insert_for(prompt, *reply);
        }
        Gateway::new(Arc::new(MockProvider::new(store)), "mock")
    }

    #[test]
    fn level_fixture_round_trip() {
        let d = Descriptions::default();
        let a = article("Fed raises rates", "The central bank lifted its target range.");
        let g = gateway(&[(level_prompt(&a, &d), r#"{"category": "Macroeconomic"}"#)]);
        assert_eq!(classify_level(&a, &g, &d).unwrap(), LevelLabel::Macroeconomic);
    }

    #[test]
    fn off_vocabulary_level_degrades_to_na() {
        let d = Descriptions::default();
        let a = article("Storm season", "Rain expected.");
        let g = gateway(&[(level_prompt(&a, &d), r#"{"category": "Weather"}"#)]);
        assert_eq!(classify_level(&a, &g, &d).unwrap(), LevelLabel::NA);
        assert_eq!(g.failures().len(), 1);
    }

    #[test]
    fn empty_body_still_classifies() {
        let d = Descriptions::default();
        let a = article("Acme recalls anvils", "");
        let prompt = level_prompt(&a, &d);
        assert!(prompt.text.contains("Headline: Acme recalls anvils\nBody: "));
        let g = gateway(&[(prompt, r#"{"category": "Company"}"#)]);
        assert_eq!(classify_level(&a, &g, &d).unwrap(), LevelLabel::Company);
    }

    #[test]
    fn sector_requires_sector_level() {
        let d = Descriptions::default();
        let a = article("Oil jumps", "");
        let g = gateway(&[]);
        assert!(matches!(classify_sector(&a, &g, &d), Err(ClassifyError::Usage(_))));
    }

    #[test]
    fn sector_fixture_round_trips() {
        let d = Descriptions::default();
        let cases = [
            ("Oil majors rally", r#"{"category": "Energy"}"#, SectorLabel::Sector(GicsSector::Energy)),
            ("Chipmakers slide", "```json\n{\"category\": \"Information Technology\"}\n```", SectorLabel::Sector(GicsSector::InformationTechnology)),
            ("Mixed session", r#"{"category": "N/A"}"#, SectorLabel::NA),
        ];
        for (headline, reply, want) in cases {
            let mut a = article(headline, "");
            a.level = Some(LevelLabel::Sector);
            let g = gateway(&[(sector_prompt(&a, &d), reply)]);
            assert_eq!(classify_sector(&a, &g, &d).unwrap(), want);
        }
    }

    #[test]
    fn relation_fixture_round_trips() {
        let d = Descriptions::default();
        let company = CompanyRecord {
            ticker: "ACME".into(),
            name: "Acme Corp".into(),
            gics_sector: GicsSector::Industrials,
        };
        let profile = CompanyProfile {
            overview_product: "Acme Corp makes anvils".into(),
            ..Default::default()
        };
        let cases = [
            ("Acme launches titanium anvil", r#"{"category": "Target"}"#, RelationLabel::Target),
            ("Globex cuts anvil prices", r#"{"category": "Related"}"#, RelationLabel::Related),
            ("Local team wins derby", r#"{"category": "N/A"}"#, RelationLabel::Irrelevant),
        ];
        for (headline, reply, want) in cases {
            let mut a = article(headline, "");
            a.level = Some(LevelLabel::Company);
            let prompt = relation_prompt(&a, &profile, &d);
            assert!(prompt.text.contains("3. Overview Product: Acme Corp makes anvils"));
            let g = gateway(&[(prompt, reply)]);
            assert_eq!(classify_relation(&a, &company, &profile, &g, &d).unwrap(), want);
        }
    }

    #[test]
    fn label_serde_shapes() {
        assert_eq!(serde_json::to_string(&LevelLabel::NA).unwrap(), "\"NA\"");
        assert_eq!(
            serde_json::to_string(&SectorLabel::Sector(GicsSector::RealEstate)).unwrap(),
            "\"Real Estate\""
        );
        let back: SectorLabel = serde_json::from_str("\"NA\"").unwrap();
        assert_eq!(back, SectorLabel::NA);
    }
}
