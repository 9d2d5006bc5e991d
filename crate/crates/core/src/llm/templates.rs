//! Prompt catalog.
//!
//! Templates mark their slots as `[NAME]`. Rendering is a single left-to-right
//! pass over the template text: substituted values are never rescanned, so
//! brackets or braces inside a headline come through untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    FilingParse,
    LevelClassify,
    SectorClassify,
    RelationClassify,
    Summarize,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::FilingParse,
        TemplateId::LevelClassify,
        TemplateId::SectorClassify,
        TemplateId::RelationClassify,
        TemplateId::Summarize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::FilingParse => "filing_parse",
            TemplateId::LevelClassify => "level_classify",
            TemplateId::SectorClassify => "sector_classify",
            TemplateId::RelationClassify => "relation_classify",
            TemplateId::Summarize => "summarize",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            TemplateId::FilingParse => FILING_PARSE,
            TemplateId::LevelClassify | TemplateId::SectorClassify => CLASSIFY,
            TemplateId::RelationClassify => RELATION_CLASSIFY,
            TemplateId::Summarize => SUMMARIZE,
        }
    }

    pub fn slots(self) -> &'static [&'static str] {
        match self {
            TemplateId::FilingParse => &["sec_filing_text"],
            TemplateId::LevelClassify | TemplateId::SectorClassify => {
                &["CATEGORY_DESCRIPTIONS", "CATEGORY_CHOICES", "HEADLINE", "BODY"]
            }
            TemplateId::RelationClassify => &[
                "CATEGORY_DESCRIPTIONS",
                "CATEGORY_CHOICES",
                "FINANCIAL_STATEMENT",
                "GOVERNANCE_RISKS",
                "OVERVIEW_PRODUCT",
                "RECENT_EVENT_CATALYST",
                "STRATEGY_MARKET_OPS",
                "HEADLINE",
                "BODY",
            ],
            TemplateId::Summarize => &["TAG", "N", "TAG DESCRIPTION", "ARTICLES"],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const FILING_PARSE: &str = r#"# Main Instruction
You are given a single SEC filing document. Your task is to identify and summarize all relevant content in the SEC filing according to the following five categories. Extract and summarize only the information that is relevant to each category.

# Descriptions of the 5 Categories
1. overviewProduct: Provides a high-level summary of the company's business, including its mission, core products or services, key customer groups, business segments, and primary geographic markets.
2. strategyMarketOps: Describes the company's strategic direction and competitive strengths (e.g., proprietary technology, intellectual property, and regulatory expertise), along with its target markets, regulatory context, and operating model such as manufacturing footprint, supply chain structure, and major partnerships.
3. governanceRisks: Covers the company's governance framework, including notable changes in leadership or the board, and summarizes key risks disclosed in filings. Risk factors are organized by category (e.g., regulatory, market, operational, and cybersecurity) and may include both long-term structural risks and near-term concerns.
4. financialStatement: Summarizes the company's financial statements with key figures, and provides an interpretation of its financial health based on filings-discussing major performance drivers, liquidity, funding and capital resources, capital allocation decisions, accounting updates, and material obligations-rather.
5. recentEventCatalyst: highlights significant developments from roughly the past 12 months, including changes to earnings outlook, major product releases, regulatory decisions, M&A progress, leadership updates, and other events that could meaningfully affect market perception or performance.

# Rules
1. The SEC filing can be long and may contain noisy formatting. Focus on the content rather than the format.
2. Do not hallucinate. Only use information explicitly stated in the SEC filing.
3. If there is no relevant information for a category, return an empty string for that category.

# Output Format
1. Example: {
  "overviewProduct": ...,
  "strategyMarketOps": ...,
  "financialStatement": ...,
  "governanceRisks": ...,
  "recentEventCatalyst": ...
}

# SEC Filing
[sec_filing_text]"#;

const CLASSIFY: &str = r#"# Main Instruction
You are given a single news article. Your task is to analyze the article and classify it into one of the following categories.

# Descriptions of Categories
[CATEGORY_DESCRIPTIONS]

# Rules
1. Please ignore any unusual or inconsistent formatting in the article.

# Output
1. Example: {"category": ...}
2. "category" must be one of [CATEGORY_CHOICES].

# Article
Headline: [HEADLINE]
Body: [BODY]"#;

const RELATION_CLASSIFY: &str = r#"# Main Instruction
You are given a single news article. Your task is to analyze the article and classify it into one of the following categories.

# Descriptions of Categories
[CATEGORY_DESCRIPTIONS]

# COMPANY_PROFILE
1. Financial Statement: [FINANCIAL_STATEMENT]
2. Governance Risks: [GOVERNANCE_RISKS]
3. Overview Product: [OVERVIEW_PRODUCT]
4. Recent Event Catalyst: [RECENT_EVENT_CATALYST]
5. Strategy Market Ops: [STRATEGY_MARKET_OPS]

# Rules
1. Please ignore any unusual or inconsistent formatting in the article.

# Output
1. Example: {"category": ...}
2. "category" must be one of [CATEGORY_CHOICES].

# Article
Headline: [HEADLINE]
Body: [BODY]"#;

const SUMMARIZE: &str = r#"# Main Instruction
You will be given a list of multiple ARTICLES that may impact [TAG].
Your task is to review all ARTICLES and identify up to [N] key categories of significant events that may impact [TAG].
For each category, summarize the key factual events in the related ARTICLES.

# Descriptions of [TAG]
[TAG DESCRIPTION]

# Rules
1. Please ignore any unusual or inconsistent formatting in the ARTICLES.
2. Select a category only if it has a meaningful impact on [TAG].
3. If more than [N] categories are identified, select only the [N] most important ones.
4. Each category must address one single, distinct topic only.
5. Do not hallucinate. Write only based on the given ARTICLES.

# Output Format
1. Example: {
    "category1": ...,
    "category2": ...,
    ...
}

# Articles
[ARTICLES]"#;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("template {template}: missing slot {slot:?}")]
    MissingSlot { template: TemplateId, slot: String },
}

/// A fully rendered prompt together with the inputs that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub template: TemplateId,
    pub slots: BTreeMap<String, String>,
    pub text: String,
}

impl Prompt {
    /// Stable content key over (template, slots). Slot maps are ordered, so
    /// the JSON encoding is canonical.
    pub fn digest(&self) -> String {
        prompt_digest(self.template, &self.slots)
    }
}

pub fn prompt_digest(template: TemplateId, slots: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(template.as_str().as_bytes());
    hasher.update(b"\n");
    hasher.update(serde_json::to_vec(slots).expect("string map serializes"));
    hex::encode(hasher.finalize())
}

pub fn render_prompt(
    template: TemplateId,
    slots: &BTreeMap<String, String>,
) -> Result<Prompt, RenderError> {
    let names = template.slots();
    if let Some(missing) = names.iter().find(|name| !slots.contains_key(**name)) {
        return Err(RenderError::MissingSlot {
            template,
            slot: missing.to_string(),
        });
    }
    let source = template.text();
    let mut out = String::with_capacity(source.len() + slots.values().map(String::len).sum::<usize>());
    let mut rest = source;
    while let Some(open) = rest.find('[') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = names.iter().find(|name| {
            tail.starts_with(**name) && tail[name.len()..].starts_with(']')
        });
        match hit {
            Some(name) => {
                out.push_str(&slots[*name]);
                rest = &tail[name.len() + 1..];
            }
            None => {
                out.push('[');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    let used: BTreeMap<String, String> = names
        .iter()
        .map(|name| (name.to_string(), slots[*name].clone()))
        .collect();
    Ok(Prompt {
        template,
        slots: used,
        text: out,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDescription {
    pub name: String,
    pub description: String,
}

/// Category vocabularies with their descriptions, shipped as a data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptions {
    pub level: Vec<CategoryDescription>,
    pub sector: Vec<CategoryDescription>,
    pub relation: Vec<CategoryDescription>,
}

const DEFAULT_DESCRIPTIONS: &str = include_str!("../../data/descriptions.json");

impl Default for Descriptions {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_DESCRIPTIONS).expect("bundled descriptions are valid")
    }
}

impl Descriptions {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn level_description(&self, name: &str) -> Option<&str> {
        find(&self.level, name)
    }

    pub fn sector_description(&self, name: &str) -> Option<&str> {
        find(&self.sector, name)
    }
}

fn find<'a>(list: &'a [CategoryDescription], name: &str) -> Option<&'a str> {
    list.iter()
        .find(|c| c.name.eq_ignore_ascii_case(name))
        .map(|c| c.description.as_str())
}

/// Numbered `name: description` lines closed by the N/A fallback line.
pub fn category_block(categories: &[CategoryDescription]) -> String {
    let mut lines: Vec<String> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}: {}", i + 1, c.name, c.description))
        .collect();
    lines.push(format!(
        "{}. N/A: The article does not fit any of the above categories.",
        categories.len() + 1
    ));
    lines.join("\n")
}

/// `A, B, C, or N/A`
pub fn category_choices(categories: &[CategoryDescription]) -> String {
    let mut names: Vec<&str> = categories.iter().map(|c| c.name.as_str()).collect();
    names.push("or N/A");
    names.join(", ")
}

/// Numbered article list used by the summarization prompt.
pub fn article_block<'a>(articles: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    articles
        .into_iter()
        .enumerate()
        .map(|(i, (headline, body))| {
            let n = i + 1;
            format!("{n}. Article {n}:\n   {n}-1. Headline: {headline}\n   {n}-2. Body: {body}")
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn summarize_substitutes_every_slot() {
        let articles = article_block([("Fed holds rates", "Body one"), ("CPI cools", "Body two")]);
        let prompt = render_prompt(
            TemplateId::Summarize,
            &slots(&[
                ("TAG", "Macroeconomic"),
                ("N", "5"),
                ("TAG DESCRIPTION", "News that analyzes or affects the overall U.S. economy."),
                ("ARTICLES", &articles),
            ]),
        )
        .unwrap();
        assert!(prompt.text.contains("up to 5 key categories"));
        assert!(prompt.text.contains("Fed holds rates"));
        assert!(prompt.text.contains("CPI cools"));
        assert!(!prompt.text.contains("[TAG]"));
        assert!(!prompt.text.contains("[N]"));
    }

    #[test]
    fn braces_and_brackets_in_values_pass_through() {
        let prompt = render_prompt(
            TemplateId::LevelClassify,
            &slots(&[
                ("CATEGORY_DESCRIPTIONS", "1. A: a"),
                ("CATEGORY_CHOICES", "A, or N/A"),
                ("HEADLINE", "Odd {headline} with [BODY] inside"),
                ("BODY", "b"),
            ]),
        )
        .unwrap();
        assert!(prompt.text.contains("Headline: Odd {headline} with [BODY] inside"));
    }

    #[test]
    fn missing_slot_is_named() {
        let err = render_prompt(TemplateId::FilingParse, &BTreeMap::new()).unwrap_err();
        assert_eq!(
            err,
            RenderError::MissingSlot {
                template: TemplateId::FilingParse,
                slot: "sec_filing_text".into()
            }
        );
    }

    #[test]
    fn empty_slot_is_allowed() {
        let mut s = slots(&[
            ("CATEGORY_DESCRIPTIONS", "x"),
            ("CATEGORY_CHOICES", "y"),
            ("GOVERNANCE_RISKS", "g"),
            ("OVERVIEW_PRODUCT", "o"),
            ("RECENT_EVENT_CATALYST", "r"),
            ("STRATEGY_MARKET_OPS", "s"),
            ("HEADLINE", "h"),
            ("BODY", "b"),
        ]);
        s.insert("FINANCIAL_STATEMENT".into(), String::new());
        let prompt = render_prompt(TemplateId::RelationClassify, &s).unwrap();
        assert!(prompt.text.contains("1. Financial Statement: \n"));
    }

    #[test]
    fn digest_ignores_unused_slots_and_is_stable() {
        let base = slots(&[("sec_filing_text", "abc")]);
        let mut extra = base.clone();
        extra.insert("unused".into(), "zzz".into());
        let a = render_prompt(TemplateId::FilingParse, &base).unwrap();
        let b = render_prompt(TemplateId::FilingParse, &extra).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn bundled_descriptions_cover_the_vocabularies() {
        let d = Descriptions::default();
        assert_eq!(d.level.len(), 3);
        assert_eq!(d.sector.len(), 11);
        assert_eq!(d.relation.len(), 2);
        assert!(d
            .sector_description("Energy")
            .unwrap()
            .contains("exploration, production, refining, and distribution"));
        let block = category_block(&d.level);
        assert!(block.ends_with("4. N/A: The article does not fit any of the above categories."));
        assert_eq!(category_choices(&d.level), "Macroeconomic, Sector, Company, or N/A");
    }
}
