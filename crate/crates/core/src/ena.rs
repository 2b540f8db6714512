//! Epistemic network analysis over coded lines.
//!
//! Pipeline: moving-stanza accumulation per unit → spherical normalization →
//! two-group means rotation → least-squares node placement, plus mean and
//! subtracted networks for comparing the groups.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coder::{CodedLine, ConversationKey, KmCode, UnitKey};
use crate::trace::Outcome;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnaError {
    #[error("group means coincide; no rotation direction")]
    DegenerateRotation,
    #[error("means rotation needs two non-empty groups")]
    SingleGroup,
    #[error("node placement has no units with non-zero weight")]
    UnderdeterminedPlacement,
    #[error("network group is empty")]
    EmptyGroup,
    #[error("vectors have mismatched dimensions")]
    DimensionMismatch,
    #[error("invalid ENA config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnaConfig {
    /// Lines per moving stanza, including the current line.
    pub window: usize,
    pub code_set: Vec<KmCode>,
}

impl Default for EnaConfig {
    fn default() -> Self {
        EnaConfig {
            window: 40,
            code_set: KmCode::ALL.to_vec(),
        }
    }
}

impl EnaConfig {
    pub fn check(&self) -> Result<(), EnaError> {
        if self.window == 0 {
            return Err(EnaError::InvalidConfig("window must be >= 1".into()));
        }
        if self.code_set.is_empty() {
            return Err(EnaError::InvalidConfig("code_set is empty".into()));
        }
        let mut seen = self.code_set.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.code_set.len() {
            return Err(EnaError::InvalidConfig("code_set has duplicates".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        let k = self.code_set.len();
        k * (k - 1) / 2
    }

    /// Unordered code pairs in vector order: (0,1), (0,2), …, (1,2), …
    pub fn pairs(&self) -> Vec<(KmCode, KmCode)> {
        let mut out = Vec::with_capacity(self.dimension());
        for i in 0..self.code_set.len() {
            for j in i + 1..self.code_set.len() {
                out.push((self.code_set[i], self.code_set[j]));
            }
        }
        out
    }
}

/// Index of the unordered pair `(i, j)` among `k` codes, `i != j`.
pub fn pair_index(i: usize, j: usize, k: usize) -> usize {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    a * k - a * (a + 1) / 2 + (b - a - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyVector {
    pub unit: UnitKey,
    pub entries: Vec<f64>,
    pub outcome: Outcome,
    pub order_index: u32,
}

/// Moving-stanza accumulation. Lines are ordered by `line_index` within each
/// conversation; each line connects its own code to every other distinct code
/// among itself and the `window - 1` lines before it, once per window, and the
/// connection is credited to the line's unit. Lines with codes outside the
/// code set still occupy window slots but contribute no connections.
pub fn accumulate(lines: &[CodedLine], cfg: &EnaConfig) -> Result<Vec<AdjacencyVector>, EnaError> {
    cfg.check()?;
    let k = cfg.code_set.len();
    let code_pos: BTreeMap<KmCode, usize> =
        cfg.code_set.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut conversations: BTreeMap<&ConversationKey, Vec<&CodedLine>> = BTreeMap::new();
    for l in lines {
        conversations.entry(&l.conversation).or_default().push(l);
    }
    let mut units: BTreeMap<UnitKey, AdjacencyVector> = BTreeMap::new();
    for l in lines {
        units.entry(l.unit.clone()).or_insert_with(|| AdjacencyVector {
            unit: l.unit.clone(),
            entries: vec![0.0; cfg.dimension()],
            outcome: l.outcome,
            order_index: l.order_index,
        });
    }
    for conv in conversations.values_mut() {
        conv.sort_by_key(|l| l.line_index);
        let mut in_window: VecDeque<Option<usize>> = VecDeque::with_capacity(cfg.window);
        let mut counts = vec![0usize; k];
        for line in conv.iter() {
            let own = code_pos.get(&line.code).copied();
            if in_window.len() == cfg.window {
                if let Some(Some(old)) = in_window.pop_front() {
                    counts[old] -= 1;
                }
            }
            in_window.push_back(own);
            if let Some(c) = own {
                counts[c] += 1;
                let v = units.get_mut(&line.unit).expect("unit registered above");
                for (other, &n) in counts.iter().enumerate() {
                    if other != c && n > 0 {
                        v.entries[pair_index(c, other, k)] += 1.0;
                    }
                }
            }
        }
    }
    Ok(units.into_values().collect())
}

pub fn normalize_sphere(v: &AdjacencyVector) -> AdjacencyVector {
    let norm = v.entries.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = v.clone();
    if norm > 0.0 {
        out.entries.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnaSpace {
    /// Orthonormal basis vectors (rows), MR1 first.
    pub basis: Vec<Vec<f64>>,
    /// Column means subtracted before projection.
    pub center: Vec<f64>,
    /// One point per input vector, in input order.
    pub scores: Vec<Vec<f64>>,
    /// Mean score of the first and second group.
    pub group_means: [Vec<f64>; 2],
    /// Variance of the scores along each basis vector.
    pub variance: Vec<f64>,
}

impl EnaSpace {
    pub fn dims(&self) -> usize {
        self.basis.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|b| b.iter().zip(v).zip(&self.center).map(|((b, x), c)| b * (x - c)).sum())
            .collect()
    }
}

const RANK_TOL: f64 = 1e-10;

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, EnaError> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(EnaError::DimensionMismatch);
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn fix_sign(v: &mut DVector<f64>) {
    let (mut best, mut idx) = (0.0, 0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best + 1e-12 {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        *v = -v.clone();
    }
}

/// Two-group means rotation. `in_first_group[i]` says which group vector `i`
/// belongs to; the first group ends up on the positive side of MR1.
pub fn means_rotation(vectors: &[Vec<f64>], in_first_group: &[bool]) -> Result<EnaSpace, EnaError> {
    if vectors.len() != in_first_group.len() {
        return Err(EnaError::DimensionMismatch);
    }
    let n_a = in_first_group.iter().filter(|&&g| g).count();
    let n_b = vectors.len() - n_a;
    if n_a == 0 || n_b == 0 {
        return Err(EnaError::SingleGroup);
    }
    let x = to_matrix(vectors)?;
    let (n, d) = x.shape();
    let center = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= center.transpose();
    }
    let group_mean = |flag: bool| {
        let mut m = DVector::zeros(d);
        for (i, _) in in_first_group.iter().enumerate().filter(|(_, &g)| g == flag) {
            m += xc.row(i).transpose();
        }
        m / in_first_group.iter().filter(|&&g| g == flag).count() as f64
    };
    let diff = group_mean(true) - group_mean(false);
    let norm = diff.norm();
    if norm < 1e-12 {
        return Err(EnaError::DegenerateRotation);
    }
    let mr1 = diff / norm;

    // Remove the MR1 component, then take the principal directions of what remains.
    let along = &xc * &mr1;
    let residual = &xc - &along * mr1.transpose();
    let mut basis: Vec<DVector<f64>> = vec![mr1.clone()];
    if n > 0 && d > 1 {
        let svd = residual.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let scale = svd.singular_values.max().max(1.0);
        for i in order {
            if svd.singular_values[i] <= RANK_TOL * scale {
                continue;
            }
            let mut v: DVector<f64> = v_t.row(i).transpose();
            for b in &basis {
                let p = b.dot(&v);
                v -= b * p;
            }
            let vn = v.norm();
            if vn < 1e-8 {
                continue;
            }
            v /= vn;
            fix_sign(&mut v);
            basis.push(v);
        }
    }
    let b = DMatrix::from_fn(basis.len(), d, |i, j| basis[i][j]);
    let scores_m = &xc * b.transpose();
    let scores: Vec<Vec<f64>> = scores_m.row_iter().map(|r| r.iter().copied().collect()).collect();
    let dims = basis.len();
    let mean_of = |flag: bool, count: usize| {
        let mut m = vec![0.0; dims];
        for (s, _) in scores.iter().zip(in_first_group).filter(|(_, &g)| g == flag) {
            for (acc, x) in m.iter_mut().zip(s) {
                *acc += x;
            }
        }
        m.iter_mut().for_each(|x| *x /= count as f64);
        m
    };
    let variance = (0..dims)
        .map(|j| {
            let col = scores_m.column(j);
            let mu = col.mean();
            col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n.max(1) as f64
        })
        .collect();
    Ok(EnaSpace {
        basis: basis.iter().map(|v| v.iter().copied().collect()).collect(),
        center: center.iter().copied().collect(),
        group_means: [mean_of(true, n_a), mean_of(false, n_b)],
        scores,
        variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePlacement {
    /// One position per code, in code-set order.
    pub positions: Vec<Vec<f64>>,
    /// Units that took part in the fit.
    pub units_used: usize,
    /// Fewer independent units than codes; positions are the minimum-norm solution.
    pub underdetermined: bool,
}

/// Row of centroid weights for one unit: code `k` gets half the weight of
/// every pair it belongs to, divided by the unit's total weight.
pub fn centroid_weights(entries: &[f64], k: usize) -> Option<Vec<f64>> {
    let total: f64 = entries.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut row = vec![0.0; k];
    for i in 0..k {
        for j in i + 1..k {
            let w = entries[pair_index(i, j, k)];
            row[i] += w / (2.0 * total);
            row[j] += w / (2.0 * total);
        }
    }
    Some(row)
}

/// Least-squares co-registration of code nodes: positions whose
/// weight-averaged pair midpoints best reproduce each unit's score.
pub fn place_nodes(
    space: &EnaSpace,
    vectors: &[Vec<f64>],
    codes: usize,
) -> Result<NodePlacement, EnaError> {
    if vectors.len() != space.scores.len() {
        return Err(EnaError::DimensionMismatch);
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (v, s) in vectors.iter().zip(&space.scores) {
        if v.len() != codes * (codes - 1) / 2 {
            return Err(EnaError::DimensionMismatch);
        }
        if let Some(r) = centroid_weights(v, codes) {
            rows.push(r);
            targets.push(s.clone());
        }
    }
    if rows.is_empty() {
        return Err(EnaError::UnderdeterminedPlacement);
    }
    let a = to_matrix(&rows)?;
    let s = to_matrix(&targets)?;
    let svd = a.clone().svd(true, true);
    let scale = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&x| x > RANK_TOL * scale).count();
    let x = svd
        .solve(&s, RANK_TOL * scale)
        .map_err(|_| EnaError::UnderdeterminedPlacement)?;
    Ok(NodePlacement {
        positions: x.row_iter().map(|r| r.iter().copied().collect()).collect(),
        units_used: rows.len(),
        underdetermined: rank < codes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub weights: Vec<f64>,
}

pub fn mean_network(vectors: &[Vec<f64>]) -> Result<NetworkSummary, EnaError> {
    let first = vectors.first().ok_or(EnaError::EmptyGroup)?;
    let mut weights = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != weights.len() {
            return Err(EnaError::DimensionMismatch);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (w, x) in weights.iter_mut().zip(v) {
            if norm > 0.0 {
                *w += x / norm;
            }
        }
    }
    weights.iter_mut().for_each(|w| *w /= vectors.len() as f64);
    Ok(NetworkSummary { weights })
}

pub fn subtract_networks(a: &NetworkSummary, b: &NetworkSummary) -> Result<NetworkSummary, EnaError> {
    if a.weights.len() != b.weights.len() {
        return Err(EnaError::DimensionMismatch);
    }
    Ok(NetworkSummary {
        weights: a.weights.iter().zip(&b.weights).map(|(x, y)| x - y).collect(),
    })
}

/// Full two-group model over coded lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnaModel {
    pub config: EnaConfig,
    pub groups: [String; 2],
    pub units: Vec<AdjacencyVector>,
    pub normalized: Vec<Vec<f64>>,
    pub space: EnaSpace,
    pub nodes: NodePlacement,
    pub mean_networks: [NetworkSummary; 2],
    pub subtracted: NetworkSummary,
}

/// Builds the model with units grouped by condition: `groups[0]` vs `groups[1]`.
/// Units in other conditions are left out.
pub fn build_model(lines: &[CodedLine], cfg: &EnaConfig, groups: [&str; 2]) -> Result<EnaModel, EnaError> {
    let units: Vec<AdjacencyVector> = accumulate(lines, cfg)?
        .into_iter()
        .filter(|u| groups.contains(&u.unit.condition.as_str()))
        .collect();
    let normalized: Vec<Vec<f64>> = units.iter().map(|u| normalize_sphere(u).entries).collect();
    let flags: Vec<bool> = units.iter().map(|u| u.unit.condition == groups[0]).collect();
    let space = means_rotation(&normalized, &flags)?;
    let nodes = place_nodes(&space, &normalized, cfg.code_set.len())?;
    let pick = |flag: bool| -> Vec<Vec<f64>> {
        normalized.iter().zip(&flags).filter(|(_, &f)| f == flag).map(|(v, _)| v.clone()).collect()
    };
    let a = mean_network(&pick(true))?;
    let b = mean_network(&pick(false))?;
    let subtracted = subtract_networks(&a, &b)?;
    Ok(EnaModel {
        config: cfg.clone(),
        groups: [groups[0].to_string(), groups[1].to_string()],
        units,
        normalized,
        space,
        nodes,
        mean_networks: [a, b],
        subtracted,
    })
}

impl EnaModel {
    pub fn scores_table(&self) -> String {
        let dims = self.space.dims().min(2);
        let mut out = String::from("participant,task,condition,outcome,order");
        for d in 0..dims {
            let _ = write!(out, ",MR{}", d + 1);
        }
        out.push('\n');
        for (u, s) in self.units.iter().zip(&self.space.scores) {
            let _ = write!(
                out,
                "{},{},{},{:?},{}",
                u.unit.participant_id, u.unit.task_id, u.unit.condition, u.outcome, u.order_index
            );
            for x in s.iter().take(dims) {
                let _ = write!(out, ",{x:.10}");
            }
            out.push('\n');
        }
        out
    }

    pub fn nodes_table(&self) -> String {
        let mut out = String::from("code,MR1,MR2\n");
        for (c, p) in self.config.code_set.iter().zip(&self.nodes.positions) {
            let y = p.get(1).copied().unwrap_or(0.0);
            let _ = writeln!(out, "{c},{:.10},{y:.10}", p[0]);
        }
        out
    }

    pub fn edges_table(&self) -> String {
        let mut out = format!("code_a,code_b,{},{},subtracted\n", self.groups[0], self.groups[1]);
        for (i, (a, b)) in self.config.pairs().into_iter().enumerate() {
            let _ = writeln!(
                out,
                "{a},{b},{:.10},{:.10},{:.10}",
                self.mean_networks[0].weights[i], self.mean_networks[1].weights[i], self.subtracted.weights[i]
            );
        }
        out
    }

    /// Static SVG of the subtracted network: nodes at their placed positions,
    /// edge width proportional to |weight|, colour by the group it favours.
    pub fn network_svg(&self) -> String {
        let size = 640.0;
        let pos: Vec<(f64, f64)> = self
            .nodes
            .positions
            .iter()
            .map(|p| (p[0], p.get(1).copied().unwrap_or(0.0)))
            .collect();
        let extent = pos
            .iter()
            .flat_map(|(x, y)| [x.abs(), y.abs()])
            .fold(1e-9, f64::max);
        let map = |(x, y): (f64, f64)| (size / 2.0 + x / extent * size * 0.4, size / 2.0 - y / extent * size * 0.4);
        let max_w = self.subtracted.weights.iter().fold(1e-12_f64, |m, w| m.max(w.abs()));
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        let k = self.config.code_set.len();
        for i in 0..k {
            for j in i + 1..k {
                let w = self.subtracted.weights[pair_index(i, j, k)];
                if w.abs() < 1e-12 {
                    continue;
                }
                let (x1, y1) = map(pos[i]);
                let (x2, y2) = map(pos[j]);
                let colour = if w > 0.0 { "#e07b5f" } else { "#7b3fa0" };
                let _ = writeln!(
                    svg,
                    "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{colour}\" stroke-width=\"{:.2}\" stroke-opacity=\"0.8\"/>",
                    0.5 + 8.0 * w.abs() / max_w
                );
            }
        }
        for (c, p) in self.config.code_set.iter().zip(&pos) {
            let (x, y) = map(*p);
            let _ = writeln!(
                svg,
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"6\" fill=\"#222\"/><text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\">{c}</text>",
                x + 8.0,
                y - 8.0
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}
