//! All-pairs action-sequence distance mining, quantile-threshold positive
//! selection, and the empirical-CDF soft weights derived from the retained
//! distances.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use thiserror::Error;

use crate::demo::ActionWindow;
use crate::dtw::{DtwError, SeqDistanceConfig};

const PAIR_TABLE_MAGIC: &[u8; 8] = b"CLSPAIR\0";
const PAIR_TABLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("fewer than 2 eligible pairs ({0} found)")]
    TooFewPairs(usize),
    #[error("pair table is empty")]
    EmptyTable,
    #[error("distance computation failed: {0}")]
    Distance(#[from] DtwError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt pair-table file: {0}")]
    Corrupt(String),
}

/// One retained positive pair; `i < j` are window ordinals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRecord {
    pub i: usize,
    pub j: usize,
    pub dist: f64,
}

/// Positive pairs mined under the quantile threshold, in canonical
/// (i, j) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    pub window_count: usize,
    pub pairs: Vec<PairRecord>,
    pub threshold: f64,
    pub metric_tag: String,
    pub k_quantile: f64,
}

/// Empirical CDF support: the sorted retained distances.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfModel {
    pub sorted_dists: Vec<f64>,
}

/// Lookup from unordered window pair to its soft weight; absent pairs have
/// implicit weight 0.
#[derive(Debug, Clone, Default)]
pub struct SoftWeights {
    weights: HashMap<(usize, usize), f64>,
}

impl SoftWeights {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let key = (i.min(j), i.max(j));
        self.weights.get(&key).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Replaces every stored weight with 1.0 (the hard-contrastive ablation).
    pub fn hardened(&self) -> SoftWeights {
        SoftWeights {
            weights: self.weights.keys().map(|&k| (k, 1.0)).collect(),
        }
    }
}

/// Computes every eligible pairwise distance, thresholds at the nearest-rank
/// K-quantile, and retains the pairs at or below it. Pairs from the same
/// demonstration with |t_i - t_j| <= exclusion_margin are skipped.
pub fn mine_pairs(
    windows: &[ActionWindow],
    cfg: &SeqDistanceConfig,
    k_quantile: f64,
    exclusion_margin: usize,
) -> Result<PairTable, MiningError> {
    assert!(k_quantile > 0.0 && k_quantile <= 1.0, "K must be in (0, 1]");
    // Pair blocks are row-parallel; each row is assembled independently and
    // concatenated in canonical (i, j) order, so the result is deterministic.
    let rows: Vec<Vec<PairRecord>> = (0..windows.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            for j in (i + 1)..windows.len() {
                let (wi, wj) = (&windows[i], &windows[j]);
                if wi.index.demo_ord == wj.index.demo_ord {
                    let dt = wi.index.t.abs_diff(wj.index.t);
                    if dt <= exclusion_margin {
                        continue;
                    }
                }
                let dist = cfg
                    .distance(&wi.actions, &wj.actions)
                    .expect("windows share dimension with dim_scale");
                row.push(PairRecord { i, j, dist });
            }
            row
        })
        .collect();
    let all: Vec<PairRecord> = rows.into_iter().flatten().collect();
    if all.len() < 2 {
        return Err(MiningError::TooFewPairs(all.len()));
    }

    let mut dists: Vec<f64> = all.iter().map(|p| p.dist).collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = nearest_rank_quantile(&dists, k_quantile);

    let pairs: Vec<PairRecord> = all.into_iter().filter(|p| p.dist <= threshold).collect();
    Ok(PairTable {
        window_count: windows.len(),
        pairs,
        threshold,
        metric_tag: cfg.metric.tag().to_string(),
        k_quantile,
    })
}

/// Nearest-rank quantile of a sorted nonempty slice: the element at rank
/// ceil(k * n).
fn nearest_rank_quantile(sorted: &[f64], k: f64) -> f64 {
    let n = sorted.len();
    let rank = ((k * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Sorted copy of the retained pair distances.
pub fn fit_cdf(table: &PairTable) -> Result<CdfModel, MiningError> {
    if table.pairs.is_empty() {
        return Err(MiningError::EmptyTable);
    }
    let mut sorted_dists: Vec<f64> = table.pairs.iter().map(|p| p.dist).collect();
    sorted_dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(CdfModel { sorted_dists })
}

/// 1 - CDF(dist) with mid-rank tie handling:
/// CDF(x) = (count(< x) + 0.5 * count(= x)) / n. The mid-rank convention
/// keeps both the minimum and the threshold distance at a nonzero,
/// non-unit weight.
pub fn soft_weight(dist: f64, cdf: &CdfModel) -> f64 {
    let n = cdf.sorted_dists.len();
    debug_assert!(n > 0);
    let below = cdf.sorted_dists.partition_point(|&d| d < dist);
    let at_or_below = cdf.sorted_dists.partition_point(|&d| d <= dist);
    let equal = at_or_below - below;
    let cdf_val = (below as f64 + 0.5 * equal as f64) / n as f64;
    (1.0 - cdf_val).clamp(0.0, 1.0)
}

/// Soft weight for every retained pair; everything else is implicitly 0.
pub fn build_soft_weights(table: &PairTable, cdf: &CdfModel) -> SoftWeights {
    let weights = table
        .pairs
        .iter()
        .map(|p| ((p.i, p.j), soft_weight(p.dist, cdf)))
        .collect();
    SoftWeights { weights }
}

/// Writes the table and weights as little-endian binary: 8-byte magic,
/// u32 version, u64 window_count, f64 threshold, u64 pair count, then
/// (u64 i, u64 j, f64 dist, f64 weight) records.
pub fn save_pair_table(
    table: &PairTable,
    weights: &SoftWeights,
    path: impl AsRef<Path>,
) -> Result<(), MiningError> {
    if table.pairs.is_empty() {
        return Err(MiningError::EmptyTable);
    }
    let path = path.as_ref();
    let io_err = |source| MiningError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut write = || -> std::io::Result<()> {
        w.write_all(PAIR_TABLE_MAGIC)?;
        w.write_u32::<LittleEndian>(PAIR_TABLE_VERSION)?;
        w.write_u64::<LittleEndian>(table.window_count as u64)?;
        w.write_f64::<LittleEndian>(table.threshold)?;
        w.write_u64::<LittleEndian>(table.pairs.len() as u64)?;
        for p in &table.pairs {
            w.write_u64::<LittleEndian>(p.i as u64)?;
            w.write_u64::<LittleEndian>(p.j as u64)?;
            w.write_f64::<LittleEndian>(p.dist)?;
            w.write_f64::<LittleEndian>(weights.get(p.i, p.j))?;
        }
        w.flush()
    };
    write().map_err(io_err)
}

/// Reads a pair-table file back. The metric tag and quantile are not part of
/// the on-disk format; the loaded table carries placeholder values for them.
pub fn load_pair_table(path: impl AsRef<Path>) -> Result<(PairTable, SoftWeights), MiningError> {
    let path = path.as_ref();
    let io_err = |source| MiningError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| MiningError::Corrupt("file shorter than header".into()))?;
    if &magic != PAIR_TABLE_MAGIC {
        return Err(MiningError::Corrupt("bad magic".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| MiningError::Corrupt("truncated header".into()))?;
    if version != PAIR_TABLE_VERSION {
        return Err(MiningError::Corrupt(format!("unsupported version {version}")));
    }
    let mut read = || -> std::io::Result<(PairTable, SoftWeights)> {
        let window_count = r.read_u64::<LittleEndian>()? as usize;
        let threshold = r.read_f64::<LittleEndian>()?;
        let pair_count = r.read_u64::<LittleEndian>()? as usize;
        let mut pairs = Vec::with_capacity(pair_count);
        let mut weights = HashMap::with_capacity(pair_count);
        for _ in 0..pair_count {
            let i = r.read_u64::<LittleEndian>()? as usize;
            let j = r.read_u64::<LittleEndian>()? as usize;
            let dist = r.read_f64::<LittleEndian>()?;
            let weight = r.read_f64::<LittleEndian>()?;
            pairs.push(PairRecord { i, j, dist });
            weights.insert((i, j), weight);
        }
        Ok((
            PairTable {
                window_count,
                pairs,
                threshold,
                metric_tag: "unknown".to_string(),
                k_quantile: 1.0,
            },
            SoftWeights { weights },
        ))
    };
    let (table, weights) =
        read().map_err(|_| MiningError::Corrupt("truncated record section".into()))?;
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing).map_err(io_err)?;
    if !trailing.is_empty() {
        return Err(MiningError::Corrupt("trailing bytes after records".into()));
    }
    Ok((table, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::WindowIndex;
    use crate::dtw::SeqMetric;

    fn window(demo_ord: usize, t: usize, vals: &[f64]) -> ActionWindow {
        ActionWindow {
            index: WindowIndex { demo_ord, t },
            actions: vals.iter().map(|&v| vec![v]).collect(),
        }
    }

    /// Four single-step windows at 0, 1, 4, 6 on a line: a perfect difference
    /// set, so the pairwise distances are exactly {1, 2, 3, 4, 5, 6}.
    fn ladder_windows() -> Vec<ActionWindow> {
        vec![
            window(0, 0, &[0.0]),
            window(1, 0, &[1.0]),
            window(2, 0, &[4.0]),
            window(3, 0, &[6.0]),
        ]
    }

    #[test]
    fn quantile_threshold_nearest_rank() {
        let windows = ladder_windows();
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        // K = 0.5 over {1,..,6}: rank ceil(3) = 3, threshold 3, keep the
        // 3 smallest.
        let table = mine_pairs(&windows, &cfg, 0.5, 0).unwrap();
        assert_eq!(table.threshold, 3.0);
        assert_eq!(table.pairs.len(), 3);
        assert!(table.pairs.iter().all(|p| p.dist <= 3.0));
    }

    #[test]
    fn k_one_keeps_all_pairs() {
        let windows = ladder_windows();
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        let table = mine_pairs(&windows, &cfg, 1.0, 0).unwrap();
        assert_eq!(table.pairs.len(), 6);
    }

    #[test]
    fn identical_cross_demo_windows_always_retained() {
        let windows = vec![
            window(0, 0, &[0.7]),
            window(1, 0, &[0.7]),
            window(2, 0, &[5.0]),
        ];
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        let table = mine_pairs(&windows, &cfg, 0.34, 0).unwrap();
        assert!(table
            .pairs
            .iter()
            .any(|p| p.i == 0 && p.j == 1 && p.dist == 0.0));
    }

    #[test]
    fn exclusion_margin_skips_same_demo_neighbors() {
        let windows = vec![
            window(0, 0, &[0.0]),
            window(0, 1, &[0.0]),
            window(0, 5, &[0.0]),
            window(1, 0, &[0.0]),
        ];
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        let table = mine_pairs(&windows, &cfg, 1.0, 2).unwrap();
        // (0,1) excluded (same demo, dt=1 <= 2); (0,2) dt=5 kept; cross-demo kept.
        assert!(!table.pairs.iter().any(|p| p.i == 0 && p.j == 1));
        assert!(table.pairs.iter().any(|p| p.i == 0 && p.j == 2));
        assert_eq!(table.pairs.len(), 5);
    }

    #[test]
    fn too_few_pairs_errors() {
        let windows = vec![window(0, 0, &[0.0]), window(0, 1, &[1.0])];
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        assert!(matches!(
            mine_pairs(&windows, &cfg, 1.0, 1),
            Err(MiningError::TooFewPairs(0))
        ));
    }

    #[test]
    fn cdf_is_sorted_copy() {
        let table = PairTable {
            window_count: 3,
            pairs: vec![
                PairRecord { i: 0, j: 1, dist: 3.0 },
                PairRecord { i: 0, j: 2, dist: 1.0 },
                PairRecord { i: 1, j: 2, dist: 2.0 },
            ],
            threshold: 3.0,
            metric_tag: "dtw".into(),
            k_quantile: 1.0,
        };
        let cdf = fit_cdf(&table).unwrap();
        assert_eq!(cdf.sorted_dists, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn mid_rank_weights() {
        let cdf = CdfModel {
            sorted_dists: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert!((soft_weight(1.0, &cdf) - 0.875).abs() < 1e-15);
        assert!((soft_weight(4.0, &cdf) - 0.125).abs() < 1e-15);
        assert_eq!(soft_weight(0.5, &cdf), 1.0);
    }

    #[test]
    fn weights_monotone_in_distance() {
        let windows = ladder_windows();
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        let table = mine_pairs(&windows, &cfg, 1.0, 0).unwrap();
        let cdf = fit_cdf(&table).unwrap();
        let sw = build_soft_weights(&table, &cdf);
        let mut recs: Vec<&PairRecord> = table.pairs.iter().collect();
        recs.sort_by(|a, b| a.dist.partial_cmp(&b.dist).unwrap());
        for pair in recs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            assert!(sw.get(a.i, a.j) >= sw.get(b.i, b.j));
        }
        // Smallest distance gets the largest weight, absent pair gets 0.
        assert_eq!(sw.get(0, 0), 0.0);
        assert!(sw.get(recs[0].i, recs[0].j) >= sw.get(recs[5].i, recs[5].j));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let windows = ladder_windows();
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        let table = mine_pairs(&windows, &cfg, 1.0, 0).unwrap();
        let cdf = fit_cdf(&table).unwrap();
        let sw = build_soft_weights(&table, &cdf);
        let tmp = tempfile::NamedTempFile::new().unwrap();
        save_pair_table(&table, &sw, tmp.path()).unwrap();
        let (loaded, loaded_sw) = load_pair_table(tmp.path()).unwrap();
        assert_eq!(loaded.window_count, table.window_count);
        assert_eq!(loaded.threshold.to_bits(), table.threshold.to_bits());
        assert_eq!(loaded.pairs, table.pairs);
        for p in &table.pairs {
            assert_eq!(
                loaded_sw.get(p.i, p.j).to_bits(),
                sw.get(p.i, p.j).to_bits()
            );
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let windows = ladder_windows();
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        let table = mine_pairs(&windows, &cfg, 1.0, 0).unwrap();
        let sw = build_soft_weights(&table, &fit_cdf(&table).unwrap());
        let tmp = tempfile::NamedTempFile::new().unwrap();
        save_pair_table(&table, &sw, tmp.path()).unwrap();
        let bytes = std::fs::read(tmp.path()).unwrap();
        std::fs::write(tmp.path(), &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_pair_table(tmp.path()),
            Err(MiningError::Corrupt(_))
        ));
    }

    #[test]
    fn empty_table_rejected_on_save() {
        let table = PairTable {
            window_count: 0,
            pairs: vec![],
            threshold: 0.0,
            metric_tag: "dtw".into(),
            k_quantile: 1.0,
        };
        let tmp = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(
            save_pair_table(&table, &SoftWeights::default(), tmp.path()),
            Err(MiningError::EmptyTable)
        ));
    }

    #[test]
    fn mining_invariant_to_demo_relabeling() {
        let cfg = SeqDistanceConfig::unit(SeqMetric::Dtw, 1);
        let a = vec![
            window(0, 0, &[0.0]),
            window(1, 0, &[1.0]),
            window(2, 0, &[3.0]),
        ];
        let b = vec![
            window(2, 0, &[3.0]),
            window(0, 0, &[0.0]),
            window(1, 0, &[1.0]),
        ];
        let ta = mine_pairs(&a, &cfg, 1.0, 0).unwrap();
        let tb = mine_pairs(&b, &cfg, 1.0, 0).unwrap();
        let mut da: Vec<f64> = ta.pairs.iter().map(|p| p.dist).collect();
        let mut db: Vec<f64> = tb.pairs.iter().map(|p| p.dist).collect();
        da.sort_by(|a, b| a.partial_cmp(b).unwrap());
        db.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(da, db);
        assert_eq!(ta.threshold, tb.threshold);
    }
}
