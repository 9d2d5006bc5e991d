//! Text vectors for forecasting: mean-pooled summary embeddings under a
//! level mask.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{embed, EmbedError, EmbeddingProvider};
use crate::pairing::{CategorySummary, Level, PairedDayRecord};

/// A subset of the four levels. The empty mask is the no-text arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LevelMask(u8);

fn bit(level: Level) -> u8 {
    1 << Level::ALL.iter().position(|l| *l == level).unwrap()
}

impl LevelMask {
    pub const NONE: LevelMask = LevelMask(0);
    pub const ALL: LevelMask = LevelMask(0b1111);

    pub fn of(levels: &[Level]) -> Self {
        LevelMask(levels.iter().fold(0, |m, l| m | bit(*l)))
    }

    pub fn contains(self, level: Level) -> bool {
        self.0 & bit(level) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn levels(self) -> impl Iterator<Item = Level> {
        Level::ALL.into_iter().filter(move |l| self.contains(*l))
    }
}

/// The seven multi-level arms in report order.
pub const MULTILEVEL_ARMS: [LevelMask; 7] = [
    LevelMask(0b0001),
    LevelMask(0b0011),
    LevelMask(0b0111),
    LevelMask(0b1111),
    LevelMask(0b1110),
    LevelMask(0b1100),
    LevelMask(0b1000),
];

impl fmt::Display for LevelMask {
    /// `①②③④` style; the empty mask prints as `none`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        for l in self.levels() {
            write!(f, "{}", l.symbol())?;
        }
        Ok(())
    }
}

impl FromStr for LevelMask {
    type Err = String;

    /// Accepts `none`, circled digits, or plain digits 1-4.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(LevelMask::NONE);
        }
        let mut levels = Vec::new();
        for c in s.chars() {
            let level = match c {
                '①' | '1' => Level::Macro,
                '②' | '2' => Level::Sector,
                '③' | '3' => Level::Related,
                '④' | '4' => Level::Target,
                _ => return Err(format!("bad level mask {s:?}")),
            };
            levels.push(level);
        }
        if levels.is_empty() {
            return Err("empty level mask; use \"none\"".into());
        }
        Ok(LevelMask::of(&levels))
    }
}

impl Serialize for LevelMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LevelMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// What gets embedded for one summary.
pub fn summary_text(s: &CategorySummary) -> String {
    format!("{}: {}", s.category, s.summary)
}

/// Embeddings of every distinct summary text, computed once.
pub struct TextEncoder {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl TextEncoder {
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a PairedDayRecord>,
        provider: &dyn EmbeddingProvider,
        model_id: &str,
        dim: usize,
    ) -> Result<Self, EmbedError> {
        let mut texts: Vec<String> = records
            .into_iter()
            .flat_map(|r| Level::ALL.into_iter().flat_map(move |l| r.slot(l).iter().map(summary_text)))
            .collect();
        texts.sort();
        texts.dedup();
        let mut vectors = HashMap::with_capacity(texts.len());
        for chunk in texts.chunks(256) {
            for (t, v) in chunk.iter().zip(embed(chunk, provider, model_id)?) {
                if v.len() != dim {
                    return Err(EmbedError::Malformed(format!("expected dimension {dim}, got {}", v.len())));
                }
                vectors.insert(t.clone(), v);
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean of the summary vectors in the masked slots; zeros when there are
    /// none. Records not seen by [`TextEncoder::build`] panic.
    pub fn encode(&self, record: &PairedDayRecord, mask: LevelMask) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        let mut n = 0usize;
        for level in mask.levels() {
            for s in record.slot(level) {
                let v = &self.vectors[&summary_text(s)];
                sum.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                n += 1;
            }
        }
        if n > 0 {
            sum.iter_mut().for_each(|x| *x /= n as f64);
        }
        sum
    }
}

/// One-off encoding of a single record.
pub fn encode_text(
    record: &PairedDayRecord,
    mask: LevelMask,
    provider: &dyn EmbeddingProvider,
    model_id: &str,
    dim: usize,
) -> Result<Vec<f64>, EmbedError> {
    Ok(TextEncoder::build([record], provider, model_id, dim)?.encode(record, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use chrono::NaiveDate;

    struct Fixed;

    impl EmbeddingProvider for Fixed {
        fn embed_batch(&self, _: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
            Ok(texts
                .iter()
                .map(|t| if t.starts_with('a') { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
                .collect())
        }
    }

    fn cs(category: &str) -> CategorySummary {
        CategorySummary {
            category: category.into(),
            summary: "x".into(),
        }
    }

    fn record() -> PairedDayRecord {
        PairedDayRecord {
            ticker: "T".into(),
            trading_day: NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(),
            macro_level: vec![cs("a")],
            sector: vec![cs("b")],
            related_company: vec![],
            target_company: vec![],
            profile: Default::default(),
            article_ids: None,
        }
    }

    #[test]
    fn orthogonal_pair_averages() {
        let v = encode_text(&record(), LevelMask::ALL, &Fixed, "m", 2).unwrap();
        assert_eq!(v, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_slots_give_zeros() {
        let v = encode_text(&record(), LevelMask::of(&[Level::Target]), &Fixed, "m", 2).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        let v = encode_text(&record(), LevelMask::NONE, &Fixed, "m", 2).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn macro_only_record_ignores_mask_breadth() {
        let mut r = record();
        r.sector.clear();
        let e = HashEmbedder::new(8);
        let a = encode_text(&r, LevelMask::of(&[Level::Macro]), &e, "m", 8).unwrap();
        let b = encode_text(&r, LevelMask::ALL, &e, "m", 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_labels_round_trip() {
        for m in MULTILEVEL_ARMS.into_iter().chain([LevelMask::NONE]) {
            assert_eq!(m.to_string().parse::<LevelMask>().unwrap(), m);
        }
        assert_eq!(MULTILEVEL_ARMS[3].to_string(), "①②③④");
        assert_eq!("24".parse::<LevelMask>().unwrap().to_string(), "②④");
    }
}
