mod common;

use std::collections::BTreeMap;
use std::fs;

use chrono::{Days, NaiveDate};
use proptest::prelude::*;

use textseries::classify::level_prompt;
use textseries::corpus::{align_to_trading_day, forward_fill, FilingType, NewsArticle, TradingCalendar};
use textseries::embed::HashEmbedder;
use textseries::encode::{LevelMask, TextEncoder};
use textseries::evaluation::{aggregate, minmax_normalize, regenerate_report, write_metrics_csv, write_report, RunMetric};
use textseries::filing::{build_profile_table, CompanyProfile, ParsedFiling, ProfileComponent};
use textseries::forecast::{make_windows, ForecastModel, ModelShape, WindowSample, CHANNELS};
use textseries::llm::mock::mock_complete;
use textseries::llm::{ChatRequest, Descriptions, FixtureStore, HeuristicRule};
use textseries::pairing::{CategorySummary, Level, PairedDayRecord};
use textseries::retrieval::{nt_xent_loss, retrieve_top_n, Adapter};

fn day(offset: u64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + Days::new(offset)
}

/// A calendar from a set of distinct day offsets.
fn calendar_strategy() -> impl Strategy<Value = TradingCalendar> {
    prop::collection::btree_set(0u64..120, 1..40)
        .prop_map(|s| TradingCalendar::new(s.into_iter().map(day).collect()).unwrap())
}

proptest! {
    #[test]
    fn forward_fill_takes_latest_earlier_value(
        cal in calendar_strategy(),
        mut values in prop::collection::vec((0u64..130, 0u32..1000), 0..20),
    ) {
        values.sort_by_key(|v| v.0);
        let dated: Vec<(NaiveDate, u32)> = values.iter().map(|(d, v)| (day(*d), *v)).collect();
        let filled = forward_fill(&dated, &cal);
        for &d in cal.days() {
            let want = dated.iter().filter(|(s, _)| *s <= d).last().map(|(_, v)| *v);
            prop_assert_eq!(filled.get(&d).copied(), want);
        }
        prop_assert!(filled.keys().all(|d| cal.contains(*d)));
    }

    #[test]
    fn alignment_is_idempotent_and_monotone(cal in calendar_strategy(), a in 0u64..130, b in 0u64..130) {
        for &d in cal.days() {
            prop_assert_eq!(align_to_trading_day(d, &cal), Some(d));
        }
        let (lo, hi) = (day(a.min(b)), day(a.max(b)));
        match (align_to_trading_day(lo, &cal), align_to_trading_day(hi, &cal)) {
            (Some(x), Some(y)) => prop_assert!(x <= y),
            (None, Some(_)) => prop_assert!(false, "earlier date past the calendar but later one inside"),
            _ => {}
        }
    }

    #[test]
    fn window_count_formula(len in 0usize..150, lookback in 1usize..40, horizon in 1usize..6) {
        let rows: Vec<(NaiveDate, [f64; CHANNELS])> = (0..len).map(|i| (day(i as u64), [i as f64; CHANNELS])).collect();
        let n = make_windows("X", &rows, lookback, horizon, &|_| vec![0.0]).len();
        prop_assert_eq!(n, (len + 1).saturating_sub(lookback + horizon));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_matches_oracle(seed in any::<u64>()) {
        let (queries, pool, n) = common::retrieval_instance(seed);
        prop_assert_eq!(retrieve_top_n(&queries, &pool, n), common::brute_force_top_n(&queries, &pool, n));
    }

    #[test]
    fn retrieval_ignores_pool_order(seed in any::<u64>(), rotate in 0usize..1000) {
        let (queries, mut pool, n) = common::retrieval_instance(seed);
        let before = retrieve_top_n(&queries, &pool, n);
        let k = rotate % pool.len();
        pool.rotate_left(k);
        pool.reverse();
        prop_assert_eq!(before, retrieve_top_n(&queries, &pool, n));
    }

    #[test]
    fn adapter_outputs_are_unit_norm(
        dim in 2usize..8,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let adapter = Adapter::from_weights(dim, w).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| adapter.apply(x)).collect();
        for z in &zs {
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9, "norm {}", norm);
        }
        for a in &zs {
            for b in &zs {
                let c = textseries::embed::cosine(a, b);
                prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
            }
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences(seed in any::<u64>(), tau in 0.1f64..1.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dim = 3;
        let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = [0, 0, 1, 1, 2, 2];
        let w: Vec<f64> = (0..dim * dim)
            .map(|k| if k % (dim + 1) == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.2..0.2))
            .collect();
        let adapter = Adapter::from_weights(dim, w.clone()).unwrap();
        let (_, grad) = nt_xent_loss(&xs, &labels, &adapter, tau).unwrap();
        let e = common::max_rel_error(&w, &grad, 1e-5, |p| {
            nt_xent_loss(&xs, &labels, &Adapter::from_weights(dim, p.to_vec()).unwrap(), tau).unwrap().0
        });
        prop_assert!(e < 1e-4, "relative error {}", e);
    }

    #[test]
    fn zero_ratio_forward_is_the_backbone(seed in any::<u64>(), decompose in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut model = ForecastModel::new(ModelShape::new(3, decompose), 0.0).unwrap();
        model.params.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let sample = WindowSample {
            ticker: "X".into(),
            anchor_day: day(0),
            target_days: vec![],
            input: v(model.shape.lookback * CHANNELS),
            target: v(model.shape.horizon * CHANNELS),
            text: v(3),
        };
        prop_assert_eq!(model.forward(&sample).unwrap(), model.backbone_forward(&sample).unwrap());
    }
}

fn finite_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, 2..12)
}

proptest! {
    #[test]
    fn minmax_preserves_order(values in finite_values()) {
        let norm = minmax_normalize(&values).unwrap();
        for i in 0..values.len() {
            prop_assert!((0.0..=1.0).contains(&norm[i]));
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(norm[i] <= norm[j]);
                }
            }
        }
    }

    #[test]
    fn minmax_ignores_affine_rescaling(values in finite_values(), scale in 0.01f64..100.0, shift in -100.0f64..100.0) {
        let norm = minmax_normalize(&values).unwrap();
        let moved: Vec<f64> = values.iter().map(|v| scale * v + shift).collect();
        let again = minmax_normalize(&moved).unwrap();
        let span = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(span > 1e-6);
        for (a, b) in norm.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}

fn runs_strategy() -> impl Strategy<Value = Vec<RunMetric>> {
    prop::collection::vec(prop::option::weighted(0.9, 0.001f64..1.0), 2 * 3 * 4).prop_map(|mses| {
        let mut runs = Vec::new();
        let mut it = mses.into_iter();
        for model in ["linear", "dlinear"] {
            for arm in ["①", "①②", "④"] {
                for seed in 1..=4 {
                    let mse = it.next().unwrap();
                    runs.push(RunMetric {
                        model: model.into(),
                        arm: arm.into(),
                        seed,
                        mse,
                        mae: mse.map(f64::sqrt),
                    });
                }
            }
        }
        runs
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregation_ignores_seed_order(runs in runs_strategy(), perm in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let base = aggregate(runs.clone());
        // Shuffle seeds within each (model, arm) group; first-seen order of
        // models and arms is kept.
        let mut shuffled = Vec::new();
        for chunk in runs.chunks(4) {
            let mut c = chunk.to_vec();
            c.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm));
            shuffled.extend(c);
        }
        let again = aggregate(shuffled);
        prop_assert_eq!(base.cells, again.cells);
    }

    #[test]
    fn reports_regenerate_byte_identically(runs in runs_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let metrics = dir.path().join("metrics.csv");
        write_metrics_csv(&metrics, &runs).unwrap();
        write_report(&aggregate(runs), &dir.path().join("a")).unwrap();
        regenerate_report(&metrics, &dir.path().join("b")).unwrap();
        for entry in fs::read_dir(dir.path().join("a")).unwrap() {
            let name = entry.unwrap().file_name();
            prop_assert_eq!(
                fs::read(dir.path().join("a").join(&name)).unwrap(),
                fs::read(dir.path().join("b").join(&name)).unwrap()
            );
        }
    }
}

fn summaries(tag: &str, n: usize) -> Vec<CategorySummary> {
    (0..n)
        .map(|i| CategorySummary {
            category: format!("{tag}{i}"),
            summary: format!("{tag} summary {i}"),
        })
        .collect()
}

fn record(counts: [usize; 4], tag: &str) -> PairedDayRecord {
    PairedDayRecord {
        ticker: "T".into(),
        trading_day: day(0),
        macro_level: summaries(&format!("m{tag}"), counts[0]),
        sector: summaries(&format!("s{tag}"), counts[1]),
        related_company: summaries(&format!("r{tag}"), counts[2]),
        target_company: summaries(&format!("t{tag}"), counts[3]),
        profile: CompanyProfile::default(),
        article_ids: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_out_slots_do_not_move_the_vector(
        bits in 0u8..16,
        counts in prop::array::uniform4(0usize..4),
        other in prop::array::uniform4(0usize..4),
    ) {
        let levels: Vec<Level> = Level::ALL.into_iter().enumerate().filter(|(i, _)| bits & (1 << i) != 0).map(|(_, l)| l).collect();
        let mask = LevelMask::of(&levels);
        let a = record(counts, "a");
        // Same masked slots, different everything else.
        let mut b = record(other, "b");
        for level in mask.levels() {
            match level {
                Level::Macro => b.macro_level = a.macro_level.clone(),
                Level::Sector => b.sector = a.sector.clone(),
                Level::Related => b.related_company = a.related_company.clone(),
                Level::Target => b.target_company = a.target_company.clone(),
            }
        }
        let embedder = HashEmbedder::new(16);
        let enc = TextEncoder::build([&a, &b], &embedder, "m", 16).unwrap();
        prop_assert_eq!(enc.encode(&a, mask), enc.encode(&b, mask));
    }

    #[test]
    fn mock_completion_is_deterministic(headline in "[a-zA-Z ]{1,40}", body in "[a-zA-Z .]{0,80}") {
        let article = NewsArticle::new("x", day(0), headline, body);
        let request = ChatRequest {
            model_id: "m".into(),
            prompt: level_prompt(&article, &Descriptions::default()),
            max_retries: 0,
            temperature: 0.0,
            attempt: 0,
        };
        let rule = HeuristicRule::default();
        let store = FixtureStore::new();
        let first = mock_complete(&request, &store, Some(&rule)).unwrap();
        prop_assert_eq!(first, mock_complete(&request, &store, Some(&rule)).unwrap());
    }

    #[test]
    fn profile_components_trace_to_one_earlier_filing(
        filings in prop::collection::vec((0u64..60, 0usize..3, prop::array::uniform5(prop::option::of("[a-z]{1,6}"))), 0..8),
    ) {
        let kinds = [FilingType::TenK, FilingType::TenQ, FilingType::EightK];
        let parsed: Vec<ParsedFiling> = filings
            .iter()
            .map(|(d, k, parts)| {
                let text = |i: usize| parts[i].clone().unwrap_or_default();
                ParsedFiling {
                    ticker: "ACME".into(),
                    filed: day(*d),
                    filing_type: kinds[*k],
                    profile: CompanyProfile {
                        overview_product: text(0),
                        strategy_market_ops: text(1),
                        governance_risks: text(2),
                        financial_statement: text(3),
                        recent_event_catalyst: text(4),
                    },
                    raw_digest: String::new(),
                    truncated: false,
                    parse_failed: false,
                }
            })
            .collect();
        let cal = TradingCalendar::new((0..70).map(day).collect()).unwrap();
        let table = build_profile_table("ACME", &parsed, &cal);
        let again = build_profile_table("ACME", &parsed, &cal);
        prop_assert_eq!(table.days(), again.days());
        let mut ordered: Vec<&ParsedFiling> = parsed.iter().collect();
        ordered.sort_by_key(|p| (p.filed, p.filing_type.order()));
        let empty = BTreeMap::new();
        let days = if parsed.is_empty() { &empty } else { table.days() };
        for (&d, profile) in days {
            for component in ProfileComponent::ALL {
                let want = ordered
                    .iter()
                    .filter(|p| p.filed <= d && !p.profile.get(component).is_empty())
                    .last()
                    .map_or("", |p| p.profile.get(component));
                prop_assert_eq!(profile.get(component), want);
            }
        }
    }
}
