//! Deterministic offline provider.
//!
//! Responses come from a fixture store keyed by [`Prompt::digest`]. When a
//! digest is unknown, an optional [`MockRule`] may synthesize a reply from the
//! prompt slots; otherwise the call fails with [`LlmError::MockMiss`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Map, Value};

use super::templates::{Prompt, TemplateId};
use super::{ChatRequest, LlmError, LlmProvider};
use crate::corpus::GicsSector;

#[derive(Debug, Clone, Default)]
pub struct FixtureStore {
    responses: HashMap<String, String>,
}

impl FixtureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `fixtures.jsonl` (one `{"digest", "response"}` object per line)
    /// and any loose `<digest>.txt` files in `dir`.
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let mut responses = HashMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    responses.insert(stem.to_string(), fs::read_to_string(&path)?);
                }
            }
        }
        let bundle = dir.join(FIXTURE_FILE);
        if bundle.exists() {
            for (i, line) in fs::read_to_string(&bundle)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: FixtureEntry = serde_json::from_str(line).map_err(|e| {
                    std::io::Error::other(format!("{}:{}: {e}", bundle.display(), i + 1))
                })?;
                responses.insert(entry.digest, entry.response);
            }
        }
        Ok(Self { responses })
    }

    pub fn insert(&mut self, digest: impl Into<String>, response: impl Into<String>) {
        self.responses.insert(digest.into(), response.into());
    }

    pub fn insert_for(&mut self, prompt: &Prompt, response: impl Into<String>) {
        self.insert(prompt.digest(), response);
    }

    pub fn get(&self, digest: &str) -> Option<&str> {
        self.responses.get(digest).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Writes the store as `fixtures.jsonl`, sorted by digest.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut digests: Vec<&String> = self.responses.keys().collect();
        digests.sort();
        let mut out = String::new();
        for digest in digests {
            let entry = FixtureEntry {
                digest: digest.clone(),
                response: self.responses[digest].clone(),
            };
            out.push_str(&serde_json::to_string(&entry).map_err(std::io::Error::other)?);
            out.push('\n');
        }
        fs::write(dir.join(FIXTURE_FILE), out)
    }
}

pub const FIXTURE_FILE: &str = "fixtures.jsonl";

#[derive(serde::Serialize, serde::Deserialize)]
struct FixtureEntry {
    digest: String,
    response: String,
}

pub trait MockRule: Send + Sync {
    fn respond(&self, prompt: &Prompt) -> Option<String>;
}

pub fn mock_complete(
    request: &ChatRequest,
    store: &FixtureStore,
    fallback: Option<&dyn MockRule>,
) -> Result<String, LlmError> {
    let digest = request.prompt.digest();
    if let Some(hit) = store.get(&digest) {
        return Ok(hit.to_string());
    }
    fallback
        .and_then(|rule| rule.respond(&request.prompt))
        .ok_or(LlmError::MockMiss {
            template: request.prompt.template,
            digest,
        })
}

#[derive(Clone, Default)]
pub struct MockProvider {
    store: Arc<FixtureStore>,
    fallback: Option<Arc<dyn MockRule>>,
}

impl MockProvider {
    pub fn new(store: FixtureStore) -> Self {
        Self {
            store: Arc::new(store),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, rule: Arc<dyn MockRule>) -> Self {
        self.fallback = Some(rule);
        self
    }
}

impl LlmProvider for MockProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        mock_complete(request, &self.store, self.fallback.as_deref())
    }
}

/// Keyword rules for prompts that have no fixture.
///
/// Level: macro vocabulary wins, then any sector vocabulary, else Company.
/// Sector: the sector with the most vocabulary hits, ties to the earlier
/// sector in GICS order. Relation: Target when the article mentions the
/// company name that opens the profile overview, N/A otherwise.
/// Summarize: one category per article, in article order.
#[derive(Debug, Clone)]
pub struct HeuristicRule {
    macro_terms: Vec<String>,
    sector_terms: Vec<(GicsSector, Vec<String>)>,
}

impl Default for HeuristicRule {
    fn default() -> Self {
        let macro_terms = [
            "federal reserve", "fed ", "inflation", "gdp", "unemployment", "interest rate",
            "treasury", "tariff", "recession", "economy", "jobs report", "cpi", "payrolls",
        ];
        let sector_terms = GicsSector::ALL
            .iter()
            .map(|s| {
                let mut terms = vec![s.name().to_lowercase()];
                terms.extend(
                    match s {
                        GicsSector::Energy => &["oil", "natural gas", "crude", "refiner"][..],
                        GicsSector::Materials => &["steel", "chemicals", "aluminum", "cement"],
                        GicsSector::Industrials => &["aerospace", "defense", "logistics", "railroad"],
                        GicsSector::ConsumerDiscretionary => &["automaker", "apparel", "retail sales"],
                        GicsSector::ConsumerStaples => &["grocery", "beverage", "household goods"],
                        GicsSector::HealthCare => &["pharma", "biotech", "drugmaker", "hospital"],
                        GicsSector::Financials => &["banks", "insurers", "lenders", "asset managers"],
                        GicsSector::InformationTechnology => &["semiconductor", "chipmakers", "software"],
                        GicsSector::CommunicationServices => &["telecom", "streaming", "media"],
                        GicsSector::Utilities => &["utilities", "electricity", "power grid"],
                        GicsSector::RealEstate => &["reit", "property", "commercial real estate"],
                    }
                    .iter()
                    .map(|t| t.to_string()),
                );
                (*s, terms)
            })
            .collect();
        Self {
            macro_terms: macro_terms.iter().map(|t| t.to_string()).collect(),
            sector_terms,
        }
    }
}

fn category_reply(value: &str) -> String {
    json!({ "category": value }).to_string()
}

fn article_text(prompt: &Prompt) -> String {
    let get = |k: &str| prompt.slots.get(k).map(String::as_str).unwrap_or("");
    format!(" {} {} ", get("HEADLINE"), get("BODY")).to_lowercase()
}

impl HeuristicRule {
    fn sector_hits(&self, text: &str) -> Option<GicsSector> {
        let mut best: Option<(GicsSector, usize)> = None;
        for (sector, terms) in &self.sector_terms {
            let hits = terms.iter().filter(|t| text.contains(t.as_str())).count();
            if hits > 0 && best.is_none_or(|(_, b)| hits > b) {
                best = Some((*sector, hits));
            }
        }
        best.map(|(s, _)| s)
    }
}

/// Parses the numbered article block back into (headline, body) pairs.
pub fn parse_article_block(block: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut in_body = false;
    for line in block.lines() {
        let trimmed = line.trim_start();
        if let Some((_, rest)) = trimmed.split_once(". Headline: ").filter(|(n, _)| n.ends_with("-1")) {
            out.push((rest.to_string(), String::new()));
            in_body = false;
        } else if let Some((_, rest)) = trimmed.split_once(". Body: ").filter(|(n, _)| n.ends_with("-2")) {
            if let Some(last) = out.last_mut() {
                last.1 = rest.to_string();
                in_body = true;
            }
        } else if in_body && !trimmed.starts_with(|c: char| c.is_ascii_digit()) {
            if let Some(last) = out.last_mut() {
                if !trimmed.is_empty() {
                    last.1.push(' ');
                    last.1.push_str(trimmed);
                }
            }
        } else {
            in_body = false;
        }
    }
    out
}

fn first_sentence(text: &str) -> &str {
    match text.find(". ") {
        Some(i) => &text[..=i],
        None => text,
    }
}

impl MockRule for HeuristicRule {
    fn respond(&self, prompt: &Prompt) -> Option<String> {
        match prompt.template {
            TemplateId::LevelClassify => {
                let text = article_text(prompt);
                let label = if self.macro_terms.iter().any(|t| text.contains(t.as_str())) {
                    "Macroeconomic"
                } else if self.sector_hits(&text).is_some() {
                    "Sector"
                } else {
                    "Company"
                };
                Some(category_reply(label))
            }
            TemplateId::SectorClassify => {
                let text = article_text(prompt);
                Some(category_reply(self.sector_hits(&text).map_or("N/A", |s| s.name())))
            }
            TemplateId::RelationClassify => {
                let overview = prompt.slots.get("OVERVIEW_PRODUCT")?;
                let name: Vec<&str> = overview
                    .split_whitespace()
                    .take_while(|w| w.starts_with(|c: char| c.is_uppercase()))
                    .collect();
                let text = article_text(prompt);
                let label = if !name.is_empty() && text.contains(&name.join(" ").to_lowercase()) {
                    "Target"
                } else {
                    "N/A"
                };
                Some(category_reply(label))
            }
            TemplateId::Summarize => {
                let cap: usize = prompt.slots.get("N")?.parse().ok()?;
                let articles = parse_article_block(prompt.slots.get("ARTICLES")?);
                let mut object = Map::new();
                for (i, (headline, body)) in articles.iter().take(cap).enumerate() {
                    let name: Vec<&str> = headline.split_whitespace().take(4).collect();
                    object.insert(
                        format!("category{}", i + 1),
                        json!({
                            "category": name.join(" "),
                            "summary": format!("{headline}. {}", first_sentence(body)).trim().to_string(),
                        }),
                    );
                }
                Some(Value::Object(object).to_string())
            }
            TemplateId::FilingParse => {
                let text = prompt.slots.get("sec_filing_text")?;
                let overview: String = first_sentence(text).chars().take(400).collect();
                Some(
                    json!({
                        "overviewProduct": overview,
                        "strategyMarketOps": "",
                        "financialStatement": "",
                        "governanceRisks": "",
                        "recentEventCatalyst": "",
                    })
                    .to_string(),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::templates::{article_block, render_prompt};
    use std::collections::BTreeMap;

    fn level_prompt(headline: &str) -> Prompt {
        let slots: BTreeMap<String, String> = [
            ("CATEGORY_DESCRIPTIONS", "d"),
            ("CATEGORY_CHOICES", "c"),
            ("HEADLINE", headline),
            ("BODY", ""),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        render_prompt(TemplateId::LevelClassify, &slots).unwrap()
    }

    fn request(prompt: Prompt) -> ChatRequest {
        ChatRequest {
            model_id: "mock".into(),
            prompt,
            max_retries: 0,
            temperature: 0.0,
            attempt: 0,
        }
    }

    #[test]
    fn fixture_hit_and_miss() {
        let prompt = level_prompt("Fed raises rates");
        let mut store = FixtureStore::new();
        store.insert_for(&prompt, r#"{"category": "Macroeconomic"}"#);
        let provider = MockProvider::new(store);
        assert_eq!(
            provider.complete(&request(prompt)).unwrap(),
            r#"{"category": "Macroeconomic"}"#
        );
        match provider.complete(&request(level_prompt("Something else"))) {
            Err(LlmError::MockMiss { digest, .. }) => assert_eq!(digest.len(), 64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_requests_give_identical_text() {
        let provider = MockProvider::default().with_fallback(Arc::new(HeuristicRule::default()));
        let a = provider.complete(&request(level_prompt("Oil prices jump"))).unwrap();
        let b = provider.complete(&request(level_prompt("Oil prices jump"))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, r#"{"category":"Sector"}"#);
    }

    #[test]
    fn fixture_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FixtureStore::new();
        store.insert("abc", "reply");
        store.write(dir.path()).unwrap();
        let loaded = FixtureStore::load(dir.path()).unwrap();
        assert_eq!(loaded.get("abc"), Some("reply"));
    }

    #[test]
    fn article_block_parses_back() {
        let block = article_block([("H1", "B1 first. B1 second"), ("H2", "B2")]);
        let parsed = parse_article_block(&block);
        assert_eq!(
            parsed,
            vec![
                ("H1".to_string(), "B1 first. B1 second".to_string()),
                ("H2".to_string(), "B2".to_string())
            ]
        );
    }
}
