//! Retrieval evaluation: Euclidean distances, CMC curves and mean average precision.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identity and camera of a query or gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemMeta {
    pub identity: usize,
    pub camera: usize,
}

impl ItemMeta {
    pub fn new(identity: usize, camera: usize) -> Self {
        Self { identity, camera }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Drop gallery items sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exclude_same_camera: true,
        }
    }
}

/// Rates at the conventional reporting ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    /// `cmc[k]` is the fraction of queries matched within the top `k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub rank_table: RankTable,
    pub per_query_ap: Vec<f64>,
    pub num_query: usize,
    pub num_gallery: usize,
}

/// JSON summary written next to the CMC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_query: usize,
    pub num_gallery: usize,
}

impl RetrievalReport {
    /// CMC value at 1-based `rank`, saturating past the end of the curve.
    pub fn cmc_at(&self, rank: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[rank.clamp(1, n) - 1],
        }
    }

    pub fn summary(&self) -> Summary {
        Summary {
            rank1: self.rank_table.rank1,
            rank5: self.rank_table.rank5,
            rank10: self.rank_table.rank10,
            rank20: self.rank_table.rank20,
            map: self.map,
            num_query: self.num_query,
            num_gallery: self.num_gallery,
        }
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            s.push_str(&format!("{},{v}\n", k + 1));
        }
        s
    }

    /// Write `cmc.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("cmc.csv");
        fs::write(&csv, self.cmc_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&self.summary())?;
        text.push('\n');
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// `D[i, j] = ‖q_i − g_j‖₂` for `[nq, d]` queries and `[ng, d]` gallery features.
pub fn pairwise_distances(queries: &Tensor<f32>, gallery: &Tensor<f32>) -> Result<Tensor<f64>> {
    let (nq, d) = queries.dims2()?;
    let (ng, dg) = gallery.dims2()?;
    if d != dg {
        return Err(Error::ShapeMismatch(format!("query dimension {d} vs gallery dimension {dg}")));
    }
    let rows: Vec<f64> = (0..nq)
        .into_par_iter()
        .flat_map_iter(|i| {
            let q = queries.row(i);
            (0..ng).map(move |j| {
                q.iter()
                    .zip(gallery.row(j))
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect();
    Tensor::from_vec(&[nq, ng], rows)
}

/// 1-based ranks of the correct matches for one query, after exclusion.
fn correct_ranks(dist: &[f64], query: ItemMeta, gallery: &[ItemMeta], opts: EvalOptions) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(opts.exclude_same_camera && gallery[j] == query))
        .collect();
    // stable sort: equal distances keep ascending gallery index
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap_or(Ordering::Equal));
    order
        .iter()
        .enumerate()
        .filter(|(_, &j)| gallery[j].identity == query.identity)
        .map(|(r, _)| r + 1)
        .collect()
}

/// Average precision from the sorted 1-based ranks of the correct matches.
pub fn average_precision(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64
}

/// Rank every gallery item for every query and aggregate CMC and mAP.
pub fn evaluate(distances: &Tensor<f64>, queries: &[ItemMeta], gallery: &[ItemMeta], opts: EvalOptions) -> Result<RetrievalReport> {
    let (nq, ng) = distances.dims2()?;
    if nq != queries.len() || ng != gallery.len() {
        return Err(Error::ShapeMismatch(format!(
            "distance matrix [{nq}, {ng}] vs {} queries and {} gallery items",
            queries.len(),
            gallery.len()
        )));
    }
    if nq == 0 || ng == 0 {
        return Err(Error::Dataset("evaluation needs at least one query and one gallery item".into()));
    }
    if !distances.is_finite() {
        return Err(Error::Dataset("distance matrix contains non-finite values".into()));
    }
    let ranks: Vec<Vec<usize>> = (0..nq)
        .into_par_iter()
        .map(|i| correct_ranks(distances.row(i), queries[i], gallery, opts))
        .collect();
    let offenders: Vec<usize> = (0..nq).filter(|&i| ranks[i].is_empty()).collect();
    if !offenders.is_empty() {
        return Err(Error::Protocol(offenders));
    }
    let mut hits = vec![0usize; ng];
    for r in &ranks {
        hits[r[0] - 1] += 1;
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / nq as f64);
    }
    let per_query_ap: Vec<f64> = ranks.iter().map(|r| average_precision(r)).collect();
    let map = per_query_ap.iter().sum::<f64>() / nq as f64;
    let mut report = RetrievalReport {
        cmc,
        map,
        rank_table: RankTable {
            rank1: 0.0,
            rank5: 0.0,
            rank10: 0.0,
            rank20: 0.0,
        },
        per_query_ap,
        num_query: nq,
        num_gallery: ng,
    };
    report.rank_table = RankTable {
        rank1: report.cmc_at(1),
        rank5: report.cmc_at(5),
        rank10: report.cmc_at(10),
        rank20: report.cmc_at(20),
    };
    Ok(report)
}

/// Average the features of each `(identity, camera)` group and L2-normalize
/// the mean. Groups come out in order of first appearance. A group with a
/// single member passes its feature through untouched.
pub fn multi_query_pool(features: &Tensor<f32>, meta: &[ItemMeta]) -> Result<(Tensor<f32>, Vec<ItemMeta>)> {
    let (n, d) = features.dims2()?;
    if n != meta.len() {
        return Err(Error::ShapeMismatch(format!("{n} features vs {} metadata entries", meta.len())));
    }
    let mut keys: Vec<ItemMeta> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, m) in meta.iter().enumerate() {
        match keys.iter().position(|k| k == m) {
            Some(g) => members[g].push(i),
            None => {
                keys.push(*m);
                members.push(vec![i]);
            }
        }
    }
    let mut out = Vec::with_capacity(keys.len() * d);
    for group in &members {
        if let [only] = group.as_slice() {
            out.extend_from_slice(features.row(*only));
            continue;
        }
        let mut mean = vec![0.0f64; d];
        for &i in group {
            for (m, &v) in mean.iter_mut().zip(features.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= group.len() as f64);
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        // a zero mean (e.g. two opposite vectors) stays zero
        let denom = if norm > 1e-12 { norm } else { 1.0 };
        out.extend(mean.iter().map(|v| (v / denom) as f32));
    }
    Ok((Tensor::from_vec(&[keys.len(), d], out)?, keys))
}
