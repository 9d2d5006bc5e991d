//! Deterministic synthetic corpus with a planted text-to-price signal.
//!
//! Every trading day draws latent events in {-2..2} for the economy, each
//! sector and each company. Articles verbalize them through fixed word
//! lists, and the close of company i moves as an arithmetic random walk
//!
//! ```text
//! close[t+1] = close[t] + z + signal·(e_i + 0.5·mean(e_competitors) + 0.5·s_sector + 0.3·m)
//! ```
//!
//! with z standard normal and the events taken on day t. An additive walk
//! keeps the planted effect the same size in z-score units in every split. About half of the company articles never name
//! the company, only its products, so keyword pairing misses them while
//! profile-based retrieval does not. Fixtures carry the true label for every
//! classification prompt the pipeline can issue.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classify::{level_prompt, relation_prompt, sector_prompt, LevelLabel, RelationLabel, SectorLabel};
use crate::corpus::{
    write_jsonl, write_price_csv, write_registry, CompanyRecord, CorpusPaths, FilingDocument, FilingType,
    GicsSector, NewsArticle, PriceBar, PriceSeries, Registry, TradingCalendar,
};
use crate::filing::{build_profile_table, text_digest, CompanyProfile, ParsedFiling};
use crate::forecast::{HORIZON, LOOKBACK};
use crate::llm::{render_prompt, Descriptions, FixtureStore, TemplateId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_companies: usize,
    pub n_sectors: usize,
    pub years: usize,
    pub days_per_year: usize,
    pub start_year: i32,
    /// Probability that a company gets an article on a given day.
    pub article_rate: f64,
    pub noise_articles_per_day: usize,
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_companies: 3,
            n_sectors: 2,
            years: 5,
            days_per_year: 250,
            start_year: 2019,
            article_rate: 0.85,
            noise_articles_per_day: 2,
            signal_strength: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("infeasible spec: {0}")]
    Infeasible(String),
    #[error("writing corpus: {0}")]
    Io(#[from] std::io::Error),
}

struct SectorVocab {
    sector: GicsSector,
    terms: [&'static str; 3],
    companies: [(&'static str, &'static str, [&'static str; 3]); 2],
    outsiders: [(&'static str, [&'static str; 2]); 2],
}

const CATALOG: [SectorVocab; 4] = [
    SectorVocab {
        sector: GicsSector::InformationTechnology,
        terms: ["semiconductor", "software", "chipmakers"],
        companies: [
            ("Quantix Systems", "QNTX", ["processors", "accelerators", "datacenter"]),
            ("Helion Micro", "HELM", ["memory", "flash", "wafers"]),
        ],
        outsiders: [("Bitloom Labs", ["firmware", "routers"]), ("Cobalt Logic", ["sensors", "modems"])],
    },
    SectorVocab {
        sector: GicsSector::HealthCare,
        terms: ["biotech", "pharma", "drugmakers"],
        companies: [
            ("Verdant Therapeutics", "VRDT", ["vaccine", "antibody", "oncology"]),
            ("Solace Medical", "SLMD", ["implants", "catheters", "stents"]),
        ],
        outsiders: [("Mirren Bio", ["enzymes", "assays"]), ("Tallis Health", ["clinics", "diagnostics"])],
    },
    SectorVocab {
        sector: GicsSector::Energy,
        terms: ["oil", "crude", "refiners"],
        companies: [
            ("Basalt Petroleum", "BSLT", ["shale", "drilling", "rigs"]),
            ("Northwind Energy", "NWND", ["pipelines", "terminals", "tankers"]),
        ],
        outsiders: [("Ember Fuels", ["propane", "lubricants"]), ("Drummond Gas", ["compressors", "wells"])],
    },
    SectorVocab {
        sector: GicsSector::Financials,
        terms: ["banks", "lenders", "insurers"],
        companies: [
            ("Harbor Trust", "HBTR", ["mortgages", "deposits", "branches"]),
            ("Keystone Assurance", "KSTN", ["annuities", "premiums", "underwriting"]),
        ],
        outsiders: [("Ledgerly", ["payments", "wallets"]), ("Alder Capital", ["brokerage", "advisory"])],
    },
];

const COMPANY_VERBS: [&str; 5] = ["plunge", "slip", "steady", "gain", "soar"];
const COMPANY_ADJ: [&str; 5] = ["dismal", "weak", "mixed", "solid", "stellar"];
const SECTOR_VERBS: [&str; 5] = ["tumble", "sag", "drift", "climb", "rally"];
const MACRO_VERBS: [&str; 5] = ["contracts", "cools", "holds", "expands", "booms"];
const MACRO_ADJ: [&str; 5] = ["recessionary", "sluggish", "stable", "firm", "overheating"];
const INDICATORS: [&str; 4] = ["payrolls", "inflation", "GDP", "retail sales"];
const NEWS_NOUNS: [&str; 4] = ["orders", "demand", "shipments", "pricing"];
const FILLER: [&str; 5] = [
    "Analysts expect more detail next quarter.",
    "Trading volume was close to its monthly average.",
    "Management did not comment further.",
    "Investors weighed the update against guidance.",
    "The report was released before the opening bell.",
];

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const LATENT_FILE: &str = "latent.csv";

/// A generated company with its product vocabulary.
#[derive(Debug, Clone)]
pub struct SyntheticCompany {
    pub record: CompanyRecord,
    pub products: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroundTruth {
    pub article_id: String,
    pub ticker: String,
    pub relation: RelationLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEvent {
    pub day: NaiveDate,
    /// `macro`, a sector name, or a ticker.
    pub key: String,
    pub value: i32,
}

pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub companies: Vec<SyntheticCompany>,
    pub calendar: TradingCalendar,
    pub articles: Vec<NewsArticle>,
    pub filings: Vec<FilingDocument>,
    pub prices: Vec<PriceSeries>,
    pub fixtures: FixtureStore,
    pub ground_truth: Vec<GroundTruth>,
    pub latent: Vec<LatentEvent>,
}

/// `n` weekdays per year starting on the first weekday of January.
pub fn synthetic_calendar(spec: &SyntheticSpec) -> TradingCalendar {
    let mut days = Vec::new();
    for y in 0..spec.years {
        let mut d = NaiveDate::from_ymd_opt(spec.start_year + y as i32, 1, 2).unwrap();
        let mut n = 0;
        while n < spec.days_per_year {
            if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                days.push(d);
                n += 1;
            }
            d = d.succ_opt().unwrap();
        }
    }
    TradingCalendar::new(days).expect("non-empty calendar")
}

fn validate(spec: &SyntheticSpec) -> Result<(), SyntheticError> {
    let bad = |m: String| Err(SyntheticError::Infeasible(m));
    if spec.n_sectors < 2 || spec.n_sectors > CATALOG.len() {
        return bad(format!("n_sectors must be within 2..={}", CATALOG.len()));
    }
    if spec.n_companies == 0 || spec.n_companies > 2 * spec.n_sectors {
        return bad(format!("n_companies must be within 1..={}", 2 * spec.n_sectors));
    }
    if spec.years < 5 {
        return bad("at least 5 years are needed for the train/val/test split".into());
    }
    if spec.days_per_year < LOOKBACK + HORIZON {
        return bad(format!(
            "days_per_year {} leaves no window in a one-year segment (need {})",
            spec.days_per_year,
            LOOKBACK + HORIZON
        ));
    }
    if spec.days_per_year > 250 {
        return bad("days_per_year must fit in a calendar year (at most 250)".into());
    }
    if !(0.0..=1.0).contains(&spec.article_rate) || !spec.signal_strength.is_finite() {
        return bad("article_rate must be a probability and signal_strength finite".into());
    }
    Ok(())
}

/// Companies 2k and 2k+1 share sector k.
fn companies(spec: &SyntheticSpec) -> Vec<SyntheticCompany> {
    (0..spec.n_companies)
        .map(|i| {
            let vocab = &CATALOG[(i / 2) % spec.n_sectors];
            let (name, ticker, products) = vocab.companies[i % 2];
            SyntheticCompany {
                record: CompanyRecord {
                    ticker: ticker.to_string(),
                    name: name.to_string(),
                    gics_sector: vocab.sector,
                },
                products: products.iter().map(|p| p.to_string()).collect(),
            }
        })
        .collect()
}

fn vocab_of(sector: GicsSector) -> &'static SectorVocab {
    CATALOG.iter().find(|v| v.sector == sector).unwrap()
}

fn event(rng: &mut ChaCha8Rng) -> i32 {
    rng.random_range(-2..=2)
}

fn filler(rng: &mut ChaCha8Rng) -> &'static str {
    FILLER.choose(rng).unwrap()
}

fn filing_text(c: &SyntheticCompany, year: i32, kind: FilingType) -> String {
    let v = vocab_of(c.record.gics_sector);
    let p = &c.products;
    match kind {
        FilingType::TenK => format!(
            "{name} designs and sells {p0}, {p1} and {p2}. {name} competes with other {t0} companies on technology and price. \
             The board appointed a new audit chair in {year}. Revenue for fiscal {prev} grew on {p0} volume. \
             In {year} the company expanded {p1} capacity.",
            name = c.record.name,
            p0 = p[0],
            p1 = p[1],
            p2 = p[2],
            t0 = v.terms[0],
            prev = year - 1,
        ),
        _ => format!(
            "Quarterly report of {name} for {year}. Sales of {p2} rose while {p0} inventory was reduced. \
             The company announced a {p1} partnership.",
            name = c.record.name,
            p0 = p[0],
            p1 = p[1],
            p2 = p[2],
        ),
    }
}

/// The profile an ideal parser extracts from [`filing_text`].
fn filing_profile(c: &SyntheticCompany, year: i32, kind: FilingType) -> CompanyProfile {
    let v = vocab_of(c.record.gics_sector);
    let p = &c.products;
    let name = &c.record.name;
    match kind {
        FilingType::TenK => CompanyProfile {
            overview_product: format!("{name} designs and sells {}, {} and {}.", p[0], p[1], p[2]),
            strategy_market_ops: format!(
                "{name} competes in {} and {} markets with {} and {} offerings.",
                v.terms[0], v.terms[1], p[0], p[1]
            ),
            governance_risks: format!("New audit chair appointed in {year}; risks include {} pricing pressure.", p[2]),
            financial_statement: format!("Fiscal {} revenue grew on {} volume.", year - 1, p[0]),
            recent_event_catalyst: format!("Expanded {} capacity in {year}.", p[1]),
        },
        _ => CompanyProfile {
            financial_statement: format!("Quarterly {} sales rose; {} inventory reduced.", p[2], p[0]),
            recent_event_catalyst: format!("Announced a {} partnership in {year}.", p[1]),
            ..Default::default()
        },
    }
}

fn profile_json(p: &CompanyProfile) -> String {
    json!({
        "overviewProduct": p.overview_product,
        "strategyMarketOps": p.strategy_market_ops,
        "financialStatement": p.financial_statement,
        "governanceRisks": p.governance_risks,
        "recentEventCatalyst": p.recent_event_catalyst,
    })
    .to_string()
}

fn category(value: &str) -> String {
    json!({ "category": value }).to_string()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, SyntheticError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let companies = companies(spec);
    let calendar = synthetic_calendar(spec);
    let descriptions = Descriptions::default();
    let sectors: Vec<GicsSector> = (0..spec.n_sectors).map(|k| CATALOG[k].sector).collect();

    let mut fixtures = FixtureStore::new();
    let mut filings = Vec::new();
    let mut parsed = Vec::new();
    for c in &companies {
        for y in 0..spec.years as i32 {
            let year = spec.start_year + y;
            for (kind, month) in [(FilingType::TenK, 1), (FilingType::TenQ, 4)] {
                let filed = NaiveDate::from_ymd_opt(year, month, 1).unwrap();
                let text = filing_text(c, year, kind);
                let profile = filing_profile(c, year, kind);
                let slots = [("sec_filing_text".to_string(), text.clone())].into();
                let prompt = render_prompt(TemplateId::FilingParse, &slots).expect("filing slots");
                fixtures.insert_for(&prompt, profile_json(&profile));
                parsed.push(ParsedFiling {
                    ticker: c.record.ticker.clone(),
                    filed,
                    filing_type: kind,
                    profile,
                    raw_digest: text_digest(&text),
                    truncated: false,
                    parse_failed: false,
                });
                filings.push(FilingDocument {
                    ticker: c.record.ticker.clone(),
                    filed,
                    filing_type: kind,
                    raw_text: text,
                });
            }
        }
    }
    let profiles: BTreeMap<String, _> = companies
        .iter()
        .map(|c| (c.record.ticker.clone(), build_profile_table(&c.record.ticker, &parsed, &calendar)))
        .collect();

    let mut articles: Vec<NewsArticle> = Vec::new();
    let mut ground_truth = Vec::new();
    let mut latent = Vec::new();
    let mut drivers: Vec<Vec<f64>> = vec![Vec::with_capacity(calendar.len()); companies.len()];

    for (t, &day) in calendar.days().iter().enumerate() {
        let mut day_articles: Vec<NewsArticle> = Vec::new();
        let m = event(&mut rng);
        latent.push(LatentEvent { day, key: "macro".into(), value: m });
        let indicator = INDICATORS.choose(&mut rng).unwrap();
        let mut a = NewsArticle::new(
            format!("d{t:04}-macro"),
            day,
            format!("Economy {}: {indicator} report", MACRO_VERBS[(m + 2) as usize]),
            format!(
                "The latest {indicator} figures point to {} conditions. {}",
                MACRO_ADJ[(m + 2) as usize],
                filler(&mut rng)
            ),
        );
        a.level = Some(LevelLabel::Macroeconomic);
        day_articles.push(a);

        let mut sector_events = BTreeMap::new();
        for &sector in &sectors {
            let s = event(&mut rng);
            sector_events.insert(sector, s);
            latent.push(LatentEvent { day, key: sector.name().into(), value: s });
            let v = vocab_of(sector);
            let verb = SECTOR_VERBS[(s + 2) as usize];
            let mut a = NewsArticle::new(
                format!("d{t:04}-sector-{}", v.terms[0]),
                day,
                format!("{} stocks {verb} as {} outlook shifts", capitalize(v.terms[0]), v.terms[1]),
                format!(
                    "Shares of {} and {} names {verb} across the group today. {}",
                    v.terms[1],
                    v.terms[2],
                    filler(&mut rng)
                ),
            );
            a.level = Some(LevelLabel::Sector);
            a.sector = Some(SectorLabel::Sector(sector));
            day_articles.push(a);
        }

        let mut company_events = Vec::with_capacity(companies.len());
        for c in &companies {
            let published = rng.random_bool(spec.article_rate);
            let e = if published { event(&mut rng) } else { 0 };
            company_events.push(e);
            latent.push(LatentEvent { day, key: c.record.ticker.clone(), value: e });
            if !published {
                continue;
            }
            let product = c.products.choose(&mut rng).unwrap();
            let noun = NEWS_NOUNS.choose(&mut rng).unwrap();
            let subject = if rng.random_bool(0.5) {
                c.record.name.clone()
            } else {
                format!("The {product} maker")
            };
            let mut a = NewsArticle::new(
                format!("d{t:04}-co-{}", c.record.ticker.to_lowercase()),
                day,
                format!("{subject} shares {} on {product} {noun}", COMPANY_VERBS[(e + 2) as usize]),
                format!(
                    "{subject} reported {} {product} {noun} this week. {}",
                    COMPANY_ADJ[(e + 2) as usize],
                    filler(&mut rng)
                ),
            );
            a.level = Some(LevelLabel::Company);
            day_articles.push(a);
        }

        for k in 0..spec.noise_articles_per_day {
            let v = vocab_of(*sectors.choose(&mut rng).unwrap());
            let (name, products) = v.outsiders.choose(&mut rng).unwrap();
            let product = products.choose(&mut rng).unwrap();
            let verb = COMPANY_VERBS[rng.random_range(0..5)];
            let mut a = NewsArticle::new(
                format!("d{t:04}-other-{k}"),
                day,
                format!("{name} shares {verb} on {product} news"),
                format!("{name}, a private {} supplier, updated its {product} plans. {}", v.terms[0], filler(&mut rng)),
            );
            a.level = Some(LevelLabel::Company);
            day_articles.push(a);
        }

        for (i, c) in companies.iter().enumerate() {
            let peers: Vec<f64> = companies
                .iter()
                .enumerate()
                .filter(|(j, o)| *j != i && o.record.gics_sector == c.record.gics_sector)
                .map(|(j, _)| company_events[j] as f64)
                .collect();
            let peer = if peers.is_empty() { 0.0 } else { peers.iter().sum::<f64>() / peers.len() as f64 };
            let s = sector_events[&c.record.gics_sector] as f64;
            drivers[i].push(company_events[i] as f64 + 0.5 * peer + 0.5 * s + 0.3 * m as f64);
        }

        // Fixtures and ground truth for every prompt the pipeline can issue.
        for a in &day_articles {
            let mut unlabeled = a.clone();
            unlabeled.level = None;
            unlabeled.sector = None;
            let level = a.level.unwrap();
            let level_name = match level {
                LevelLabel::Macroeconomic => "Macroeconomic",
                LevelLabel::Sector => "Sector",
                LevelLabel::Company => "Company",
                LevelLabel::NA => "N/A",
            };
            fixtures.insert_for(&level_prompt(&unlabeled, &descriptions), category(level_name));
            match level {
                LevelLabel::Sector => {
                    let mut sector_input = unlabeled.clone();
                    sector_input.level = Some(LevelLabel::Sector);
                    let name = a.sector.unwrap().to_string();
                    fixtures.insert_for(&sector_prompt(&sector_input, &descriptions), category(&name));
                }
                LevelLabel::Company => {
                    let mut input = unlabeled.clone();
                    input.level = Some(LevelLabel::Company);
                    let about = companies
                        .iter()
                        .find(|c| a.article_id.ends_with(&format!("-co-{}", c.record.ticker.to_lowercase())));
                    for c in &companies {
                        let relation = match about {
                            Some(o) if o.record.ticker == c.record.ticker => RelationLabel::Target,
                            Some(o) if o.record.gics_sector == c.record.gics_sector => RelationLabel::Related,
                            _ => RelationLabel::Irrelevant,
                        };
                        let profile = profiles[&c.record.ticker].on(day).cloned().unwrap_or_default();
                        let reply = match relation {
                            RelationLabel::Target => "Target",
                            RelationLabel::Related => "Related",
                            RelationLabel::Irrelevant => "N/A",
                        };
                        fixtures.insert_for(&relation_prompt(&input, &profile, &descriptions), category(reply));
                        ground_truth.push(GroundTruth {
                            article_id: a.article_id.clone(),
                            ticker: c.record.ticker.clone(),
                            relation,
                        });
                    }
                }
                _ => {}
            }
        }
        articles.extend(day_articles.into_iter().map(|mut a| {
            a.level = None;
            a.sector = None;
            a
        }));
    }

    let prices = companies
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut close: f64 = rng.random_range(300.0..500.0);
            let bars = calendar
                .days()
                .iter()
                .enumerate()
                .map(|(t, &date)| {
                    let prev = close;
                    if t > 0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        close = (prev + z + spec.signal_strength * drivers[i][t - 1]).max(1.0);
                    }
                    let gap: f64 = StandardNormal.sample(&mut rng);
                    let open = (prev + 0.2 * gap).max(0.5);
                    let wick = |rng: &mut ChaCha8Rng| {
                        let z: f64 = StandardNormal.sample(rng);
                        0.3 * z.abs()
                    };
                    let high = open.max(close) + wick(&mut rng);
                    let low = (open.min(close) - wick(&mut rng)).max(0.1);
                    PriceBar { date, open, high, low, close }
                })
                .collect();
            PriceSeries {
                ticker: c.record.ticker.clone(),
                bars,
            }
        })
        .collect();

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        companies,
        calendar,
        articles,
        filings,
        prices,
        fixtures,
        ground_truth,
        latent,
    })
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Relative file locations inside a generated corpus directory.
pub fn corpus_paths(dir: &Path) -> CorpusPaths {
    CorpusPaths {
        news: dir.join("news.jsonl"),
        filings: dir.join("filings.jsonl"),
        prices_dir: dir.join("prices"),
        registry: dir.join("registry.csv"),
    }
}

impl SyntheticCorpus {
    pub fn registry(&self) -> Registry {
        Registry::new(self.companies.iter().map(|c| c.record.clone()).collect()).expect("unique tickers")
    }

    /// Writes corpus files, `fixtures/`, ground truth and latent events.
    pub fn write(&self, dir: &Path) -> Result<CorpusPaths, SyntheticError> {
        fs::create_dir_all(dir)?;
        let paths = corpus_paths(dir);
        write_jsonl(&paths.news, &self.articles)?;
        write_jsonl(&paths.filings, &self.filings)?;
        for series in &self.prices {
            write_price_csv(&paths.prices_dir, series)?;
        }
        write_registry(&paths.registry, &self.registry())?;
        self.fixtures.write(&dir.join("fixtures"))?;
        let mut w = csv::Writer::from_path(dir.join(GROUND_TRUTH_FILE)).map_err(std::io::Error::other)?;
        for row in &self.ground_truth {
            w.serialize(row).map_err(std::io::Error::other)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join(LATENT_FILE)).map_err(std::io::Error::other)?;
        for row in &self.latent {
            w.serialize(row).map_err(std::io::Error::other)?;
        }
        w.flush()?;
        fs::write(
            dir.join("synthetic.json"),
            serde_json::to_string_pretty(&self.spec).map_err(std::io::Error::other)? + "\n",
        )?;
        Ok(paths)
    }
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruth>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
