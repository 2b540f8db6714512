use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::StatsError;

/// One row of model data: outcome, grouping label and categorical factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    #[serde(default)]
    pub group: String,
    pub factors: BTreeMap<String, String>,
}

impl Observation {
    pub fn new(y: f64, group: &str, factors: &[(&str, &str)]) -> Self {
        Observation {
            y,
            group: group.to_string(),
            factors: factors.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Main(String),
    Interaction(String, String),
}

/// Fixed effects (treatment-coded factors), optional random-intercept grouping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub outcome: String,
    pub terms: Vec<Term>,
    /// Random-intercept grouping; `None` for fixed-effects-only models.
    pub random_intercept: Option<String>,
    /// Reference level per factor; defaults to the first level in sorted order.
    pub references: BTreeMap<String, String>,
}

pub const CONDITION: &str = "condition";
pub const TASK: &str = "task";
pub const START: &str = "start";
pub const OUTCOME: &str = "outcome";

fn main(f: &str) -> Term {
    Term::Main(f.to_string())
}

impl RegressionSpec {
    pub fn new(outcome: &str, terms: Vec<Term>, random_intercept: Option<&str>) -> Self {
        RegressionSpec {
            outcome: outcome.to_string(),
            terms,
            random_intercept: random_intercept.map(str::to_string),
            references: BTreeMap::new(),
        }
    }

    pub fn with_reference(mut self, factor: &str, level: &str) -> Self {
        self.references.insert(factor.to_string(), level.to_string());
        self
    }

    /// `y = b0 + b1 c + participant + e`
    pub fn condition_only(outcome: &str) -> Self {
        Self::new(outcome, vec![main(CONDITION)], Some("participant"))
    }

    /// `y = b0 + b1 c + b2 t + participant + e`
    pub fn condition_task(outcome: &str) -> Self {
        Self::new(outcome, vec![main(CONDITION), main(TASK)], Some("participant"))
    }

    /// `logit(p) = b0 + b1 c`
    pub fn logistic_condition(outcome: &str) -> Self {
        Self::new(outcome, vec![main(CONDITION)], None)
    }

    /// Condition, start condition and task with c×s and c×t interactions.
    pub fn condition_order_task_interactions(outcome: &str) -> Self {
        Self::new(
            outcome,
            vec![
                main(CONDITION),
                main(START),
                main(TASK),
                Term::Interaction(CONDITION.into(), START.into()),
                Term::Interaction(CONDITION.into(), TASK.into()),
            ],
            Some("participant"),
        )
    }

    /// Network position on MR1 against condition, task, order and outcome.
    pub fn network_position(outcome: &str) -> Self {
        Self::new(
            outcome,
            vec![main(CONDITION), main(TASK), main(START), main(OUTCOME)],
            Some("participant"),
        )
    }

    fn factors(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        for t in &self.terms {
            match t {
                Term::Main(f) => {
                    out.insert(f.as_str());
                }
                Term::Interaction(a, b) => {
                    out.insert(a.as_str());
                    out.insert(b.as_str());
                }
            }
        }
        out
    }
}

/// Encoded design: column names, X, y and group index per row.
type Maker = Box<dyn Fn(&Observation) -> f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub columns: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub groups: Vec<usize>,
    pub group_labels: Vec<String>,
}

impl Design {
    pub fn build(spec: &RegressionSpec, data: &[Observation]) -> Result<Design, StatsError> {
        let mut levels: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for f in spec.factors() {
            let mut set = BTreeSet::new();
            for (i, o) in data.iter().enumerate() {
                let v = o.factors.get(f).ok_or_else(|| StatsError::MissingFactor {
                    index: i,
                    factor: f.to_string(),
                })?;
                set.insert(v.clone());
            }
            let mut lv: Vec<String> = set.into_iter().collect();
            if let Some(r) = spec.references.get(f) {
                if let Some(pos) = lv.iter().position(|l| l == r) {
                    let r = lv.remove(pos);
                    lv.insert(0, r);
                }
            }
            levels.insert(f, lv);
        }
        // Dummy columns (name, factor, level) for every non-reference level.
        let dummies = |f: &str| -> Vec<(String, String)> {
            levels[f][1..].iter().map(|l| (format!("{f}[{l}]"), l.clone())).collect()
        };
        let mut columns = vec!["(Intercept)".to_string()];
        let mut makers: Vec<Maker> = vec![Box::new(|_| 1.0)];
        for t in &spec.terms {
            match t {
                Term::Main(f) => {
                    for (name, level) in dummies(f) {
                        let f = f.clone();
                        columns.push(name);
                        makers.push(Box::new(move |o| f64::from(o.factors[&f] == level)));
                    }
                }
                Term::Interaction(a, b) => {
                    for (na, la) in dummies(a) {
                        for (nb, lb) in dummies(b) {
                            let (a, b, la, lb) = (a.clone(), b.clone(), la.clone(), lb.clone());
                            columns.push(format!("{na}:{nb}"));
                            makers.push(Box::new(move |o| {
                                f64::from(o.factors[&a] == la && o.factors[&b] == lb)
                            }));
                        }
                    }
                }
            }
        }
        let n = data.len();
        let x = DMatrix::from_fn(n, columns.len(), |i, j| makers[j](&data[i]));
        let y = DVector::from_iterator(n, data.iter().map(|o| o.y));
        let mut group_labels: Vec<String> = Vec::new();
        let mut groups = Vec::with_capacity(n);
        if spec.random_intercept.is_some() {
            let mut index: BTreeMap<&str, usize> = BTreeMap::new();
            let mut sorted: Vec<&str> = data.iter().map(|o| o.group.as_str()).collect();
            sorted.sort_unstable();
            sorted.dedup();
            for (i, g) in sorted.iter().enumerate() {
                index.insert(g, i);
                group_labels.push(g.to_string());
            }
            for (i, o) in data.iter().enumerate() {
                if o.group.is_empty() {
                    return Err(StatsError::MissingGroup(i));
                }
                groups.push(index[o.group.as_str()]);
            }
        }
        Ok(Design { columns, x, y, groups, group_labels })
    }

    pub fn rank(&self) -> usize {
        let svd = self.x.clone().svd(false, false);
        let scale = svd.singular_values.max().max(1.0);
        let tol = 1e-10 * scale * (self.x.nrows().max(self.x.ncols()) as f64);
        svd.singular_values.iter().filter(|&&s| s > tol).count()
    }

    pub fn check_rank(&self) -> Result<(), StatsError> {
        let (n, p) = self.x.shape();
        if n <= p {
            return Err(StatsError::TooFewObservations { n, p });
        }
        let rank = self.rank();
        if rank < p {
            return Err(StatsError::RankDeficientDesign { rank, columns: p });
        }
        Ok(())
    }
}
