//! Interaction ingestion and preprocessing.
//!
//! The pipeline is: [`load_interactions`] → [`dedup_records`] → [`binarize`] →
//! [`DomainDataset::from_records`] → [`k_core_filter`] → [`split_per_user`], run
//! independently per domain, followed by [`build_cross`] which links the two
//! domains through users whose external id occurs in both.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Tab,
    Comma,
    /// Tab if the first non-empty line contains one, otherwise comma.
    #[default]
    Auto,
}

impl Delimiter {
    fn resolve(self, first_line: &str) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
            Delimiter::Auto => {
                if first_line.contains('\t') {
                    '\t'
                } else {
                    ','
                }
            }
        }
    }
}

pub fn load_interactions(path: impl AsRef<Path>, delimiter: Delimiter) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), delimiter).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses `user<d>item<d>rating[<d>timestamp]` lines. Blank lines are skipped;
/// line numbers in errors are 1-based.
pub fn parse_interactions<R: Read>(reader: BufReader<R>, delimiter: Delimiter) -> Result<Vec<InteractionRecord>> {
    let mut records = Vec::new();
    let mut sep = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let sep = *sep.get_or_insert_with(|| delimiter.resolve(line));
        records.push(parse_line(line, sep, line_no)?);
    }
    Ok(records)
}

fn parse_line(line: &str, sep: char, line_no: usize) -> Result<InteractionRecord> {
    let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
    if fields.len() < 3 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected at least 3 fields, found {}", fields.len()),
        });
    }
    let (user, item) = (fields[0], fields[1]);
    if user.is_empty() || item.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            message: "empty user or item id".into(),
        });
    }
    let rating: f64 = fields[2].parse().map_err(|_| Error::Parse {
        line: line_no,
        message: format!("invalid rating `{}`", fields[2]),
    })?;
    if !rating.is_finite() {
        return Err(Error::Parse {
            line: line_no,
            message: format!("non-finite rating `{}`", fields[2]),
        });
    }
    let timestamp = match fields.get(3) {
        Some(ts) if !ts.is_empty() => Some(ts.parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid timestamp `{ts}`"),
        })?),
        _ => None,
    };
    Ok(InteractionRecord {
        user: user.to_string(),
        item: item.to_string(),
        rating,
        timestamp,
    })
}

/// Collapses repeated (user, item) pairs. The record with the latest timestamp
/// wins; without timestamps (or on equal timestamps) the later line wins.
/// Output keeps the position of each pair's first occurrence.
pub fn dedup_records(records: Vec<InteractionRecord>) -> Vec<InteractionRecord> {
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    let mut out: Vec<InteractionRecord> = Vec::with_capacity(records.len());
    for rec in records {
        let key = (rec.user.clone(), rec.item.clone());
        match slot.get(&key) {
            Some(&pos) => {
                let keep_old = matches!(
                    (out[pos].timestamp, rec.timestamp),
                    (Some(old), Some(new)) if old > new
                );
                if !keep_old {
                    out[pos] = rec;
                }
            }
            None => {
                slot.insert(key, out.len());
                out.push(rec);
            }
        }
    }
    out
}

/// Keeps records rated at or above `threshold`; everything kept is an implicit positive.
pub fn binarize(records: Vec<InteractionRecord>, threshold: f64) -> Vec<InteractionRecord> {
    records.into_iter().filter(|r| r.rating >= threshold).collect()
}

/// One domain's positives over densely indexed users and items.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    interactions: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl DomainDataset {
    /// Builds from external-id pairs. Indices follow first appearance;
    /// duplicate pairs are dropped.
    pub fn from_records(records: &[InteractionRecord]) -> Self {
        let mut user_index = HashMap::new();
        let mut item_index = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut pairs = Vec::with_capacity(records.len());
        for r in records {
            let u = *user_index.entry(r.user.clone()).or_insert_with(|| {
                user_ids.push(r.user.clone());
                user_ids.len() - 1
            });
            let i = *item_index.entry(r.item.clone()).or_insert_with(|| {
                item_ids.push(r.item.clone());
                item_ids.len() - 1
            });
            pairs.push((u, i));
        }
        Self::new(user_ids, item_ids, pairs).expect("indices constructed in range")
    }

    /// Users or items without interactions are allowed (they are isolated).
    pub fn new(user_ids: Vec<String>, item_ids: Vec<String>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        let mut interactions = Vec::with_capacity(pairs.len());
        let mut adjacency = vec![Vec::new(); user_ids.len()];
        for (u, i) in pairs {
            if u >= user_ids.len() || i >= item_ids.len() {
                return Err(Error::invalid(format!("interaction ({u}, {i}) out of range")));
            }
            if seen.insert((u, i)) {
                interactions.push((u, i));
                adjacency[u].push(i);
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        let user_index = user_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            user_ids,
            item_ids,
            user_index,
            interactions,
            adjacency,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.interactions.len()
    }

    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    /// Sorted item indices of `user`.
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.adjacency[user]
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.item_ids[item]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    /// Keeps only the first `max_users` users (by index) and their interactions.
    pub fn truncate_users(&self, max_users: usize) -> Self {
        if max_users >= self.n_users() {
            return self.clone();
        }
        let pairs = self
            .interactions
            .iter()
            .copied()
            .filter(|&(u, _)| u < max_users)
            .collect();
        Self::new(self.user_ids[..max_users].to_vec(), self.item_ids.clone(), pairs)
            .expect("subset of valid indices")
            .densified()
    }

    /// Drops isolated users and items, preserving the relative order of survivors.
    fn densified(&self) -> Self {
        let mut user_deg = vec![0usize; self.n_users()];
        let mut item_deg = vec![0usize; self.n_items()];
        for &(u, i) in &self.interactions {
            user_deg[u] += 1;
            item_deg[i] += 1;
        }
        let (user_map, user_ids) = remap(&self.user_ids, &user_deg);
        let (item_map, item_ids) = remap(&self.item_ids, &item_deg);
        let pairs = self
            .interactions
            .iter()
            .map(|&(u, i)| (user_map[u].unwrap(), item_map[i].unwrap()))
            .collect();
        Self::new(user_ids, item_ids, pairs).expect("remapped indices in range")
    }
}

fn remap(ids: &[String], degree: &[usize]) -> (Vec<Option<usize>>, Vec<String>) {
    let mut map = vec![None; ids.len()];
    let mut kept = Vec::new();
    for (idx, id) in ids.iter().enumerate() {
        if degree[idx] > 0 {
            map[idx] = Some(kept.len());
            kept.push(id.clone());
        }
    }
    (map, kept)
}

/// Iteratively removes users and items with fewer than `k` interactions until
/// no more can be removed, then re-densifies the indices.
pub fn k_core_filter(ds: &DomainDataset, k: usize) -> Result<DomainDataset> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut alive: Vec<(usize, usize)> = ds.interactions.clone();
    loop {
        let mut user_deg = vec![0usize; ds.n_users()];
        let mut item_deg = vec![0usize; ds.n_items()];
        for &(u, i) in &alive {
            user_deg[u] += 1;
            item_deg[i] += 1;
        }
        let before = alive.len();
        alive.retain(|&(u, i)| user_deg[u] >= k && item_deg[i] >= k);
        if alive.len() == before {
            break;
        }
    }
    let pruned = DomainDataset::new(ds.user_ids.clone(), ds.item_ids.clone(), alive)?;
    Ok(pruned.densified())
}

/// Per-user train/valid/test partition of one domain's positives.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub ratios: (f64, f64, f64),
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    /// Users with no interactions at all; they appear with empty lists.
    pub skipped_users: usize,
}

impl SplitDataset {
    pub fn is_train_positive(&self, user: usize, item: usize) -> bool {
        self.train[user].binary_search(&item).is_ok()
    }

    /// Flattened (user, item) training pairs in user order.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    }

    pub fn n_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

/// Shuffles each user's positives with a seeded generator and cuts them by
/// `ratios`: valid and test get `floor(n * r)` items, train gets the rest.
pub fn split_per_user(ds: &DomainDataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitDataset> {
    let (r_train, r_valid, r_test) = ratios;
    if [r_train, r_valid, r_test].iter().any(|r| !(0.0..=1.0).contains(r))
        || ((r_train + r_valid + r_test) - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = ds.n_users();
    let mut out = SplitDataset {
        n_users,
        n_items: ds.n_items(),
        ratios,
        train: Vec::with_capacity(n_users),
        valid: Vec::with_capacity(n_users),
        test: Vec::with_capacity(n_users),
        skipped_users: 0,
    };
    for u in 0..n_users {
        let mut items = ds.items_of(u).to_vec();
        if items.is_empty() {
            out.skipped_users += 1;
            out.train.push(Vec::new());
            out.valid.push(Vec::new());
            out.test.push(Vec::new());
            continue;
        }
        items.shuffle(&mut rng);
        let n = items.len() as f64;
        // The small epsilon keeps e.g. 10 * 0.1 from flooring to 0 on roundoff.
        let n_valid = (n * r_valid + 1e-9).floor() as usize;
        let n_test = (n * r_test + 1e-9).floor() as usize;
        let mut test = items.split_off(items.len() - n_test);
        let mut valid = items.split_off(items.len() - n_valid);
        let mut train = items;
        train.sort_unstable();
        valid.sort_unstable();
        test.sort_unstable();
        out.train.push(train);
        out.valid.push(valid);
        out.test.push(test);
    }
    if out.skipped_users > 0 {
        log::warn!("split_per_user: {} users without interactions excluded", out.skipped_users);
    }
    Ok(out)
}

/// Source and target domains linked by their shared users.
#[derive(Debug, Clone)]
pub struct CrossDomainDataset {
    pub source: DomainDataset,
    pub target: DomainDataset,
    /// (source index, target index), sorted by target index.
    pub overlap: Vec<(usize, usize)>,
    /// Target users absent from the source domain, ascending.
    pub target_nonoverlap: Vec<usize>,
}

impl CrossDomainDataset {
    /// Source index of a target user, if it is overlapping.
    pub fn source_of_target(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.target.n_users()];
        for &(s, t) in &self.overlap {
            map[t] = Some(s);
        }
        map
    }

    pub fn stats(&self) -> [DomainStats; 2] {
        let n_overlap = self.overlap.len();
        [
            DomainStats::new("source", &self.source, n_overlap),
            DomainStats::new("target", &self.target, n_overlap),
        ]
    }
}

pub fn build_cross(source: DomainDataset, target: DomainDataset) -> CrossDomainDataset {
    let mut overlap = Vec::new();
    let mut target_nonoverlap = Vec::new();
    for t in 0..target.n_users() {
        match source.user_index(target.user_id(t)) {
            Some(s) => overlap.push((s, t)),
            None => target_nonoverlap.push(t),
        }
    }
    CrossDomainDataset {
        source,
        target,
        overlap,
        target_nonoverlap,
    }
}

/// One row of the dataset statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain: String,
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    /// Overlapping users over all users of this domain.
    pub overlap_ratio: f64,
}

impl DomainStats {
    fn new(domain: &str, ds: &DomainDataset, n_overlap: usize) -> Self {
        let ratio = if ds.n_users() == 0 {
            0.0
        } else {
            n_overlap as f64 / ds.n_users() as f64
        };
        Self {
            domain: domain.to_string(),
            n_users: ds.n_users(),
            n_items: ds.n_items(),
            n_interactions: ds.n_interactions(),
            overlap_ratio: ratio,
        }
    }
}

pub const TARGET_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);
pub const SOURCE_SPLIT: (f64, f64, f64) = (0.8, 0.2, 0.0);

/// A cross-domain dataset together with both domains' splits.
#[derive(Debug, Clone)]
pub struct CdrData {
    pub cross: CrossDomainDataset,
    pub source_split: SplitDataset,
    pub target_split: SplitDataset,
}

impl CdrData {
    pub fn new(cross: CrossDomainDataset, seed: u64) -> Result<Self> {
        let source_split = split_per_user(&cross.source, SOURCE_SPLIT, seed)?;
        let target_split = split_per_user(&cross.target, TARGET_SPLIT, seed.wrapping_add(1))?;
        Ok(Self {
            cross,
            source_split,
            target_split,
        })
    }
}

/// Raw records of both domains → filtered, linked, split data.
/// Filtering happens per domain before the overlap is identified.
pub fn prepare(
    source: Vec<InteractionRecord>,
    target: Vec<InteractionRecord>,
    threshold: f64,
    k_core: usize,
    max_users: Option<usize>,
    seed: u64,
) -> Result<CdrData> {
    let domain = |records: Vec<InteractionRecord>| -> Result<DomainDataset> {
        let ds = DomainDataset::from_records(&binarize(dedup_records(records), threshold));
        let ds = match max_users {
            Some(m) => ds.truncate_users(m),
            None => ds,
        };
        k_core_filter(&ds, k_core)
    };
    let cross = build_cross(domain(source)?, domain(target)?);
    CdrData::new(cross, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, item: &str, rating: f64, ts: Option<i64>) -> InteractionRecord {
        InteractionRecord {
            user: user.into(),
            item: item.into(),
            rating,
            timestamp: ts,
        }
    }

    fn parse(text: &str) -> Result<Vec<InteractionRecord>> {
        parse_interactions(BufReader::new(text.as_bytes()), Delimiter::Auto)
    }

    fn ds_from_pairs(pairs: &[(&str, &str)]) -> DomainDataset {
        let recs: Vec<_> = pairs.iter().map(|(u, i)| rec(u, i, 5.0, None)).collect();
        DomainDataset::from_records(&recs)
    }

    #[test]
    fn parses_full_and_partial_lines() {
        let recs = parse("u1\ti9\t4.0\t100\nu1\ti9\t4.0\n").unwrap();
        assert_eq!(recs[0], rec("u1", "i9", 4.0, Some(100)));
        assert_eq!(recs[1], rec("u1", "i9", 4.0, None));
    }

    #[test]
    fn comma_delimiter_is_detected() {
        let recs = parse("a,b,3\n").unwrap();
        assert_eq!(recs[0], rec("a", "b", 3.0, None));
    }

    #[test]
    fn nan_rating_names_line() {
        let err = parse("u0\ti0\t5\nu1\ti9\tNaN\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse("u1\ti9\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_interactions("/nonexistent/file.tsv", Delimiter::Auto).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn binarize_threshold() {
        let recs: Vec<_> = (1..=5).map(|r| rec("u", &format!("i{r}"), r as f64, None)).collect();
        assert_eq!(binarize(recs, 3.0).len(), 3);
        assert!(binarize(vec![], 3.0).is_empty());
        assert!(binarize(vec![rec("u", "i", 2.0, None); 4], 3.0).is_empty());
    }

    #[test]
    fn dedup_prefers_latest_timestamp_then_last_line() {
        let out = dedup_records(vec![
            rec("u", "i", 5.0, Some(10)),
            rec("u", "i", 1.0, Some(3)),
            rec("v", "i", 2.0, None),
            rec("v", "i", 4.0, None),
        ]);
        assert_eq!(out, vec![rec("u", "i", 5.0, Some(10)), rec("v", "i", 4.0, None)]);
    }

    #[test]
    fn star_graph_collapses_under_2_core() {
        let ds = ds_from_pairs(&[("u", "a"), ("u", "b"), ("u", "c"), ("u", "d"), ("u", "e")]);
        let out = k_core_filter(&ds, 2).unwrap();
        assert_eq!((out.n_users(), out.n_items(), out.n_interactions()), (0, 0, 0));
    }

    #[test]
    fn complete_bipartite_5x5_survives_5_core() {
        let mut pairs = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                pairs.push((format!("u{u}"), format!("i{i}")));
            }
        }
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let ds = ds_from_pairs(&refs);
        assert_eq!(k_core_filter(&ds, 5).unwrap(), ds);
    }

    #[test]
    fn one_core_drops_only_isolated() {
        let ds = DomainDataset::new(
            vec!["a".into(), "lonely".into(), "b".into()],
            vec!["x".into(), "y".into(), "unused".into()],
            vec![(0, 0), (2, 1)],
        )
        .unwrap();
        let out = k_core_filter(&ds, 1).unwrap();
        assert_eq!(out.user_ids(), &["a".to_string(), "b".to_string()]);
        assert_eq!(out.item_ids(), &["x".to_string(), "y".to_string()]);
        assert_eq!(out.n_interactions(), 2);
        assert!(k_core_filter(&ds, 0).is_err());
    }

    #[test]
    fn split_counts_follow_floor_rule() {
        let items: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let mut pairs: Vec<(&str, &str)> = items.iter().map(|i| ("ten", i.as_str())).collect();
        pairs.extend(items[..3].iter().map(|i| ("three", i.as_str())));
        let ds = ds_from_pairs(&pairs);
        let split = split_per_user(&ds, TARGET_SPLIT, 7).unwrap();
        let counts = |u: usize| (split.train[u].len(), split.valid[u].len(), split.test[u].len());
        assert_eq!(counts(0), (8, 1, 1));
        assert_eq!(counts(1), (3, 0, 0));

        let again = split_per_user(&ds, TARGET_SPLIT, 7).unwrap();
        assert_eq!(split.train, again.train);
        assert_eq!(split.test, again.test);
        assert!(split_per_user(&ds, (0.5, 0.1, 0.1), 7).is_err());
    }

    #[test]
    fn isolated_user_is_skipped_in_split() {
        let ds = DomainDataset::new(vec!["a".into(), "b".into()], vec!["x".into()], vec![(0, 0)]).unwrap();
        let split = split_per_user(&ds, TARGET_SPLIT, 1).unwrap();
        assert_eq!(split.skipped_users, 1);
        assert!(split.train[1].is_empty());
    }

    #[test]
    fn cross_overlap_by_external_id() {
        let src = ds_from_pairs(&[("a", "s"), ("b", "s"), ("c", "s")]);
        let tgt = ds_from_pairs(&[("b", "t"), ("c", "t"), ("d", "t")]);
        let cross = build_cross(src.clone(), tgt);
        assert_eq!(cross.overlap, vec![(1, 0), (2, 1)]);
        assert_eq!(cross.target_nonoverlap, vec![2]);

        let disjoint = build_cross(src.clone(), ds_from_pairs(&[("x", "t")]));
        assert!(disjoint.overlap.is_empty());
        let same = build_cross(src.clone(), src);
        assert!(same.target_nonoverlap.is_empty());
        assert_eq!(same.stats()[1].overlap_ratio, 1.0);
    }

    #[test]
    fn stats_serialize_with_expected_keys() {
        let cross = build_cross(ds_from_pairs(&[("a", "s")]), ds_from_pairs(&[("a", "t"), ("b", "t")]));
        let json = serde_json::to_value(&cross.stats()[1]).unwrap();
        for key in ["domain", "n_users", "n_items", "n_interactions", "overlap_ratio"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["overlap_ratio"], 0.5);
    }
}
