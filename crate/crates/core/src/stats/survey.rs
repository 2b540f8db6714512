//! SUS, KM-SUS and raw NASA-TLX scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::StatsError;

pub const SUS_ITEMS: usize = 10;
pub const KM_SUS_ITEMS: usize = 25;
pub const TLX_DIMENSIONS: [&str; 6] = [
    "mental_demand",
    "physical_demand",
    "temporal_demand",
    "performance",
    "effort",
    "frustration",
];
const LO: i64 = 1;
const HI: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instrument {
    Sus,
    KmSus,
    NasaTlx,
}

impl Instrument {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "sus" => Some(Instrument::Sus),
            "km_sus" | "kmsus" => Some(Instrument::KmSus),
            "nasa_tlx" | "tlx" => Some(Instrument::NasaTlx),
            _ => None,
        }
    }

    pub fn item_count(self) -> usize {
        match self {
            Instrument::Sus => SUS_ITEMS,
            Instrument::KmSus => KM_SUS_ITEMS,
            Instrument::NasaTlx => TLX_DIMENSIONS.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Practice {
    Access,
    Storage,
    Sharing,
    Application,
}

impl Practice {
    pub const ALL: [Practice; 4] = [
        Practice::Access,
        Practice::Storage,
        Practice::Sharing,
        Practice::Application,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Practice::Access => "access",
            Practice::Storage => "storage",
            Practice::Sharing => "sharing",
            Practice::Application => "application",
        }
    }
}

/// One participant's answers to one instrument; `items[k]` is item `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub participant: String,
    pub instrument: Instrument,
    #[serde(default)]
    pub condition: Option<String>,
    pub items: Vec<i64>,
}

impl SurveyResponse {
    pub fn new(participant: &str, instrument: Instrument, items: Vec<i64>) -> Self {
        SurveyResponse {
            participant: participant.to_string(),
            instrument,
            condition: None,
            items,
        }
    }

    fn check(&self, expected: usize) -> Result<(), StatsError> {
        if self.items.len() != expected {
            return Err(StatsError::WrongItemCount {
                expected,
                got: self.items.len(),
            });
        }
        for (k, &v) in self.items.iter().enumerate() {
            if !(LO..=HI).contains(&v) {
                return Err(StatsError::OutOfRange {
                    item: k + 1,
                    value: v,
                    lo: LO,
                    hi: HI,
                });
            }
        }
        Ok(())
    }
}

/// Positively worded (odd) items contribute `v − 1`, negatively worded (even) items `5 − v`.
fn contribution(item: usize, v: i64) -> f64 {
    if item % 2 == 1 {
        (v - 1) as f64
    } else {
        (5 - v) as f64
    }
}

pub fn score_sus(r: &SurveyResponse) -> Result<f64, StatsError> {
    r.check(SUS_ITEMS)?;
    let sum: f64 = r.items.iter().enumerate().map(|(k, &v)| contribution(k + 1, v)).sum();
    Ok(sum * 2.5)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmSusScore {
    pub overall: f64,
    pub subscales: BTreeMap<Practice, f64>,
}

/// Contiguous blocks of 7, 6, 6 and 6 items.
pub fn default_km_sus_groups() -> BTreeMap<usize, Practice> {
    (1..=KM_SUS_ITEMS)
        .map(|i| {
            let p = match i {
                1..=7 => Practice::Access,
                8..=13 => Practice::Storage,
                14..=19 => Practice::Sharing,
                _ => Practice::Application,
            };
            (i, p)
        })
        .collect()
}

/// Each subscale rescales its own items to [0, 100]; the overall score is the
/// unweighted mean of the four subscales. `groups` maps 1-based item numbers.
pub fn score_km_sus(r: &SurveyResponse, groups: &BTreeMap<usize, Practice>) -> Result<KmSusScore, StatsError> {
    for i in 1..=KM_SUS_ITEMS {
        if !groups.contains_key(&i) {
            return Err(StatsError::IncompleteGroupMap(format!("item {i} unmapped")));
        }
    }
    if let Some(i) = groups.keys().find(|&&i| i == 0 || i > KM_SUS_ITEMS) {
        return Err(StatsError::IncompleteGroupMap(format!("item {i} out of range")));
    }
    for p in Practice::ALL {
        if !groups.values().any(|&q| q == p) {
            return Err(StatsError::IncompleteGroupMap(format!("no items for {}", p.as_str())));
        }
    }
    r.check(KM_SUS_ITEMS)?;
    let mut sums: BTreeMap<Practice, (f64, usize)> = BTreeMap::new();
    for (k, &v) in r.items.iter().enumerate() {
        let e = sums.entry(groups[&(k + 1)]).or_default();
        e.0 += contribution(k + 1, v);
        e.1 += 1;
    }
    let subscales: BTreeMap<Practice, f64> = sums
        .into_iter()
        .map(|(p, (s, n))| (p, s / (4.0 * n as f64) * 100.0))
        .collect();
    let overall = subscales.values().sum::<f64>() / subscales.len() as f64;
    Ok(KmSusScore { overall, subscales })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionSummary {
    pub dimension: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single response.
    pub sd: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TlxSummary {
    pub dimensions: Vec<DimensionSummary>,
}

impl TlxSummary {
    pub fn dimension(&self, name: &str) -> Option<&DimensionSummary> {
        self.dimensions.iter().find(|d| d.dimension == name)
    }
}

/// Linear-interpolation quantile over sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Unweighted per-dimension aggregates.
pub fn score_tlx(responses: &[SurveyResponse]) -> Result<TlxSummary, StatsError> {
    if responses.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    for r in responses {
        r.check(TLX_DIMENSIONS.len())?;
    }
    let n = responses.len();
    let dimensions = TLX_DIMENSIONS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut xs: Vec<f64> = responses.iter().map(|r| r.items[k] as f64).collect();
            xs.sort_by(f64::total_cmp);
            let mean = xs.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            DimensionSummary {
                dimension: name.to_string(),
                n,
                mean,
                sd,
                min: xs[0],
                q1: quantile(&xs, 0.25),
                median: quantile(&xs, 0.5),
                q3: quantile(&xs, 0.75),
                max: xs[n - 1],
            }
        })
        .collect();
    Ok(TlxSummary { dimensions })
}

/// Box-plot export, one CSV row per dimension.
pub fn tlx_boxplot_table(s: &TlxSummary) -> String {
    let mut out = String::from("dimension,n,mean,sd,min,q1,median,q3,max\n");
    for d in &s.dimensions {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{},{},{},{},{}",
            d.dimension, d.n, d.mean, d.sd, d.min, d.q1, d.median, d.q3, d.max
        );
    }
    out
}

#[derive(Debug, Deserialize)]
struct Row {
    participant: String,
    instrument: String,
    item: String,
    value: i64,
    #[serde(default)]
    condition: Option<String>,
}

/// Reads a long-format CSV with columns `participant,instrument,item,value`
/// and an optional `condition`. TLX items may be named by dimension.
pub fn parse_survey_table(text: &str) -> Result<Vec<SurveyResponse>, StatsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    type Key = (String, Instrument, Option<String>);
    let mut order: Vec<Key> = Vec::new();
    let mut cells: BTreeMap<Key, BTreeMap<usize, i64>> = BTreeMap::new();
    for (line, rec) in rdr.deserialize::<Row>().enumerate() {
        let row = rec.map_err(|e| StatsError::Table(format!("row {}: {e}", line + 2)))?;
        let instrument = Instrument::parse(&row.instrument)
            .ok_or_else(|| StatsError::Table(format!("row {}: unknown instrument {:?}", line + 2, row.instrument)))?;
        let item = match row.item.parse::<usize>() {
            Ok(i) => i,
            Err(_) => TLX_DIMENSIONS
                .iter()
                .position(|d| *d == row.item.to_ascii_lowercase().replace([' ', '-'], "_"))
                .map(|p| p + 1)
                .ok_or_else(|| StatsError::Table(format!("row {}: unknown item {:?}", line + 2, row.item)))?,
        };
        if item == 0 || item > instrument.item_count() {
            return Err(StatsError::Table(format!("row {}: item {item} out of range", line + 2)));
        }
        let condition = row.condition.filter(|c| !c.is_empty());
        let key = (row.participant, instrument, condition);
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        if cells.entry(key).or_default().insert(item, row.value).is_some() {
            return Err(StatsError::Table(format!("row {}: duplicate item {item}", line + 2)));
        }
    }
    order
        .into_iter()
        .map(|key| {
            let items = &cells[&key];
            let expected = key.1.item_count();
            if items.len() != expected {
                return Err(StatsError::WrongItemCount { expected, got: items.len() });
            }
            Ok(SurveyResponse {
                participant: key.0,
                instrument: key.1,
                condition: key.2,
                items: items.values().copied().collect(),
            })
        })
        .collect()
}
