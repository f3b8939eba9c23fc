//! Interaction corpus: ingestion, subsetting, splitting, statistics.
//!
//! Three on-disk shapes are accepted — Amazon-style review JSONL (plus an
//! optional metadata JSONL next to it), a generic `user,item,timestamp,value`
//! CSV, and the crate's own canonical snapshot JSONL. All of them land in one
//! [`InteractionMatrix`], and writing a matrix back out as a canonical
//! snapshot round-trips exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textutil;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no usable interaction records")]
    EmptyCorpus { path: String },
    #[error("cannot sample {requested} users from a corpus with {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("csv header must be user,item,timestamp,value (got {0:?})")]
    BadCsvHeader(String),
    #[error("item {0} has no metadata entry")]
    MissingMetadata(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

/// One user–item event. `value` is the recorded feedback (a rating for the
/// Amazon corpora); zero-valued records are dropped at ingest because they
/// denote "no interaction".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    pub value: f64,
}

/// Catalog entry for an item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item: String,
    pub title: String,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub description: String,
}

/// The in-memory corpus: interaction records in ingest order plus the item
/// catalog. User and item universes are derived from the records.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub records: Vec<Interaction>,
    pub catalog: BTreeMap<String, ItemMeta>,
}

impl InteractionMatrix {
    pub fn users(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.user.as_str()).collect()
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.item.as_str()).collect()
    }

    /// A user's records sorted by timestamp (ingest order breaks ties), i.e.
    /// their chronological profile.
    pub fn profile(&self, user: &str) -> Vec<&Interaction> {
        let mut out: Vec<&Interaction> = self.records.iter().filter(|r| r.user == user).collect();
        out.sort_by_key(|r| r.timestamp);
        out
    }

    pub fn meta(&self, item: &str) -> Result<&ItemMeta, CorpusError> {
        self.catalog.get(item).ok_or_else(|| CorpusError::MissingMetadata(item.to_string()))
    }

    /// `1 − interactions / (users × items)`: the fraction of the user–item
    /// grid with no recorded event.
    pub fn sparsity(&self) -> f64 {
        let users = self.users().len();
        let items = self.items().len();
        if users == 0 || items == 0 {
            return 1.0;
        }
        1.0 - self.records.len() as f64 / (users as f64 * items as f64)
    }

    /// Items ordered by how many distinct users interacted with them, most
    /// popular first; ties break on the lexicographically smaller item id.
    /// Items with no interactions are absent.
    pub fn popularity_ranking(&self) -> Vec<String> {
        let mut audiences: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for record in &self.records {
            audiences.entry(&record.item).or_default().insert(&record.user);
        }
        let mut ranked: Vec<(&str, usize)> =
            audiences.into_iter().map(|(item, users)| (item, users.len())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.into_iter().map(|(item, _)| item.to_string()).collect()
    }

    /// Keeps the records of `count` users drawn without replacement from the
    /// lexicographically sorted user list, using a ChaCha20 stream seeded by
    /// `seed`. Record order is preserved, so sampling every user returns the
    /// matrix unchanged. The catalog keeps entries for surviving items only.
    pub fn sample_subset(&self, count: usize, seed: u64) -> Result<InteractionMatrix, CorpusError> {
        let users: Vec<&str> = self.users().into_iter().collect();
        if count > users.len() {
            return Err(CorpusError::SampleTooLarge { requested: count, available: users.len() });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(textutil::derive_seed(seed, "corpus:sample"));
        let picked = rand::seq::index::sample(&mut rng, users.len(), count);
        let keep: BTreeSet<&str> = picked.iter().map(|i| users[i]).collect();
        let records: Vec<Interaction> =
            self.records.iter().filter(|r| keep.contains(r.user.as_str())).cloned().collect();
        let items: BTreeSet<&str> = records.iter().map(|r| r.item.as_str()).collect();
        let catalog = self
            .catalog
            .iter()
            .filter(|(id, _)| items.contains(id.as_str()))
            .map(|(id, meta)| (id.clone(), meta.clone()))
            .collect();
        Ok(InteractionMatrix { records, catalog })
    }

    /// Holds out each user's latest interaction as the test item. Users with
    /// fewer than two records cannot be split and are excluded (counted, not
    /// silently dropped). Among equal latest timestamps the last-ingested
    /// record wins.
    pub fn leave_one_out(&self) -> DatasetSplit {
        let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (idx, record) in self.records.iter().enumerate() {
            by_user.entry(&record.user).or_default().push(idx);
        }
        let mut test_indices: BTreeSet<usize> = BTreeSet::new();
        let mut test: BTreeMap<String, Interaction> = BTreeMap::new();
        let mut excluded_users = Vec::new();
        let mut excluded_records = 0usize;
        for (user, indices) in &by_user {
            if indices.len() < 2 {
                excluded_users.push(user.to_string());
                excluded_records += indices.len();
                continue;
            }
            let held = *indices
                .iter()
                .max_by(|&&a, &&b| {
                    self.records[a]
                        .timestamp
                        .cmp(&self.records[b].timestamp)
                        .then(a.cmp(&b))
                })
                .expect("non-empty profile");
            test_indices.insert(held);
            test.insert(user.to_string(), self.records[held].clone());
        }
        let excluded: BTreeSet<&str> = excluded_users.iter().map(String::as_str).collect();
        let train: Vec<Interaction> = self
            .records
            .iter()
            .enumerate()
            .filter(|(idx, r)| !test_indices.contains(idx) && !excluded.contains(r.user.as_str()))
            .map(|(_, r)| r.clone())
            .collect();
        DatasetSplit { train, test, excluded_users, excluded_records }
    }
}

/// Train/test partition from [`InteractionMatrix::leave_one_out`]. Every
/// ingested record of a kept user is in exactly one side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Interaction>,
    /// Held-out latest interaction per user.
    pub test: BTreeMap<String, Interaction>,
    pub excluded_users: Vec<String>,
    pub excluded_records: usize,
}

impl DatasetSplit {
    pub fn train_fraction(&self) -> f64 {
        let total = self.train.len() + self.test.len();
        if total == 0 {
            return 0.0;
        }
        self.train.len() as f64 / total as f64
    }
}

/// Supported input shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// One review object per line: `reviewerID`, `asin`, `overall`,
    /// `unixReviewTime`.
    AmazonJsonl,
    /// CSV with header `user,item,timestamp,value`.
    GenericCsv,
    /// This crate's snapshot JSONL (canonical [`Interaction`] records).
    CanonicalJsonl,
}

/// What ingestion kept and what it had to drop.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestStats {
    pub malformed: usize,
    pub duplicates: usize,
    pub zero_valued: usize,
}

/// A loaded corpus plus its ingest accounting.
#[derive(Debug)]
pub struct IngestOutcome {
    pub matrix: InteractionMatrix,
    pub stats: IngestStats,
}

/// Loads interactions from `path` in the given format. Malformed lines are
/// skipped and counted; exact `(user, item, timestamp)` duplicates keep the
/// first occurrence. Item metadata is read from `metadata.jsonl` next to the
/// input when present (see [`ingest_with_metadata`] to point elsewhere).
pub fn ingest(path: &Path, format: DatasetFormat) -> Result<IngestOutcome, CorpusError> {
    let sibling = path.parent().map(|dir| dir.join("metadata.jsonl")).filter(|p| p.is_file());
    ingest_with_metadata(path, format, sibling.as_deref())
}

/// [`ingest`] with an explicit metadata path.
pub fn ingest_with_metadata(
    path: &Path,
    format: DatasetFormat,
    metadata: Option<&Path>,
) -> Result<IngestOutcome, CorpusError> {
    let mut stats = IngestStats::default();
    let mut records = Vec::new();
    let mut seen: BTreeSet<(String, String, i64)> = BTreeSet::new();
    let mut catalog: BTreeMap<String, ItemMeta> = BTreeMap::new();

    let mut push = |record: Interaction, stats: &mut IngestStats| {
        if record.value == 0.0 {
            stats.zero_valued += 1;
            return;
        }
        let key = (record.user.clone(), record.item.clone(), record.timestamp);
        if !seen.insert(key) {
            stats.duplicates += 1;
            return;
        }
        records.push(record);
    };

    match format {
        DatasetFormat::AmazonJsonl => {
            let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| io_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match parse_amazon_review(&line) {
                    Some(record) => push(record, &mut stats),
                    None => stats.malformed += 1,
                }
            }
        }
        DatasetFormat::GenericCsv => {
            let mut reader = csv::ReaderBuilder::new()
                .flexible(true)
                .from_path(path)
                .map_err(|e| CorpusError::BadCsvHeader(e.to_string()))?;
            let headers = reader.headers().map_err(|e| CorpusError::BadCsvHeader(e.to_string()))?;
            let expected = ["user", "item", "timestamp", "value"];
            let got: Vec<&str> = headers.iter().collect();
            if got != expected {
                return Err(CorpusError::BadCsvHeader(got.join(",")));
            }
            for row in reader.records() {
                let Ok(row) = row else {
                    stats.malformed += 1;
                    continue;
                };
                let parsed = (|| {
                    let user = row.get(0)?.trim();
                    let item = row.get(1)?.trim();
                    let ts: i64 = row.get(2)?.trim().parse().ok()?;
                    let value: f64 = row.get(3)?.trim().parse().ok()?;
                    if user.is_empty() || item.is_empty() {
                        return None;
                    }
                    Some(Interaction {
                        user: user.to_string(),
                        item: item.to_string(),
                        timestamp: ts,
                        value,
                    })
                })();
                match parsed {
                    Some(record) => push(record, &mut stats),
                    None => stats.malformed += 1,
                }
            }
        }
        DatasetFormat::CanonicalJsonl => {
            let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| io_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Interaction>(&line) {
                    Ok(record) => push(record, &mut stats),
                    Err(_) => stats.malformed += 1,
                }
            }
        }
    }

    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus { path: path.display().to_string() });
    }

    if let Some(meta_path) = metadata {
        let file = std::fs::File::open(meta_path).map_err(|e| io_err(meta_path, e))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| io_err(meta_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match parse_item_meta(&line) {
                Some(meta) => {
                    catalog.insert(meta.item.clone(), meta);
                }
                None => stats.malformed += 1,
            }
        }
    }

    Ok(IngestOutcome { matrix: InteractionMatrix { records, catalog }, stats })
}

/// Amazon review line → interaction. Tolerates `overall` as number or
/// numeric string; all four fields are required.
fn parse_amazon_review(line: &str) -> Option<Interaction> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    let user = value.get("reviewerID")?.as_str()?.to_string();
    let item = value.get("asin")?.as_str()?.to_string();
    let overall = match value.get("overall")? {
        serde_json::Value::Number(n) => n.as_f64()?,
        serde_json::Value::String(s) => s.parse().ok()?,
        _ => return None,
    };
    let timestamp = value.get("unixReviewTime")?.as_i64()?;
    if user.is_empty() || item.is_empty() {
        return None;
    }
    Some(Interaction { user, item, timestamp, value: overall })
}

/// Metadata line → catalog entry. Accepts both the crate's canonical shape
/// and Amazon metadata exports, where `category` may be a string, a list, or
/// a list of lists, and `description` a string or a list of strings.
fn parse_item_meta(line: &str) -> Option<ItemMeta> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    let item = value
        .get("item")
        .or_else(|| value.get("asin"))?
        .as_str()?
        .to_string();
    let title = value.get("title")?.as_str()?.to_string();
    if item.is_empty() || title.is_empty() {
        return None;
    }
    let mut categories = Vec::new();
    let raw_cats = value.get("categories").or_else(|| value.get("category"));
    if let Some(raw) = raw_cats {
        flatten_strings(raw, &mut categories);
    }
    let mut description_parts = Vec::new();
    if let Some(raw) = value.get("description") {
        flatten_strings(raw, &mut description_parts);
    }
    Some(ItemMeta { item, title, categories, description: description_parts.join(" ") })
}

fn flatten_strings(value: &serde_json::Value, out: &mut Vec<String>) {
    match value {
        serde_json::Value::String(s) => {
            let trimmed = s.trim();
            if !trimmed.is_empty() {
                out.push(trimmed.to_string());
            }
        }
        serde_json::Value::Array(items) => {
            for item in items {
                flatten_strings(item, out);
            }
        }
        _ => {}
    }
}

/// Writes the canonical snapshot (one [`Interaction`] per line, ingest
/// order) and the catalog (`metadata.jsonl`, sorted by item id) into `dir`.
/// Returns the snapshot path. Re-ingesting the snapshot reproduces the
/// matrix exactly.
pub fn write_snapshot(matrix: &InteractionMatrix, dir: &Path) -> Result<std::path::PathBuf, CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let snapshot_path = dir.join("snapshot.jsonl");
    let mut out = Vec::new();
    for record in &matrix.records {
        serde_json::to_writer(&mut out, record).expect("interaction serialises");
        out.push(b'\n');
    }
    std::fs::write(&snapshot_path, out).map_err(|e| io_err(&snapshot_path, e))?;

    let meta_path = dir.join("metadata.jsonl");
    let mut file = std::fs::File::create(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    for meta in matrix.catalog.values() {
        let line = serde_json::to_string(meta).expect("metadata serialises");
        writeln!(file, "{line}").map_err(|e| io_err(&meta_path, e))?;
    }
    Ok(snapshot_path)
}

/// Corpus-level numbers surfaced in reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
}

impl CorpusStats {
    pub fn of(matrix: &InteractionMatrix) -> Self {
        CorpusStats {
            users: matrix.users().len(),
            items: matrix.items().len(),
            interactions: matrix.records.len(),
            sparsity: matrix.sparsity(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(user: &str, item: &str, ts: i64) -> Interaction {
        Interaction { user: user.into(), item: item.into(), timestamp: ts, value: 5.0 }
    }

    fn matrix(records: Vec<Interaction>) -> InteractionMatrix {
        InteractionMatrix { records, catalog: BTreeMap::new() }
    }

    #[test]
    fn amazon_lines_parse_and_malformed_lines_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reviews.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"reviewerID":"u1","asin":"i1","overall":5.0,"unixReviewTime":100}"#, "\n",
                r#"{"reviewerID":"u1","asin":"i2","overall":"4","unixReviewTime":200}"#, "\n",
                r#"{"reviewerID":"u2","overall":3.0,"unixReviewTime":300}"#, "\n",
                r#"{"reviewerID":"u2","asin":"i1","overall":3.0,"unixReviewTime":300}"#, "\n",
            ),
        )
        .unwrap();
        let outcome = ingest(&path, DatasetFormat::AmazonJsonl).unwrap();
        assert_eq!(outcome.matrix.records.len(), 3);
        assert_eq!(outcome.stats.malformed, 1, "the line without asin");
        assert_eq!(outcome.matrix.records[1].value, 4.0, "numeric strings accepted");
    }

    #[test]
    fn duplicates_and_zero_values_are_dropped_with_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reviews.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"reviewerID":"u1","asin":"i1","overall":5.0,"unixReviewTime":100}"#, "\n",
                r#"{"reviewerID":"u1","asin":"i1","overall":5.0,"unixReviewTime":100}"#, "\n",
                r#"{"reviewerID":"u1","asin":"i2","overall":0.0,"unixReviewTime":150}"#, "\n",
            ),
        )
        .unwrap();
        let outcome = ingest(&path, DatasetFormat::AmazonJsonl).unwrap();
        assert_eq!(outcome.matrix.records.len(), 1);
        assert_eq!(outcome.stats.duplicates, 1);
        assert_eq!(outcome.stats.zero_valued, 1);
    }

    #[test]
    fn csv_header_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "user,item,when,value\nu1,i1,1,5\n").unwrap();
        assert!(matches!(
            ingest(&path, DatasetFormat::GenericCsv),
            Err(CorpusError::BadCsvHeader(_))
        ));
        std::fs::write(&path, "user,item,timestamp,value\nu1,i1,1,5\nu1,i2,oops,5\n").unwrap();
        let outcome = ingest(&path, DatasetFormat::GenericCsv).unwrap();
        assert_eq!(outcome.matrix.records.len(), 1);
        assert_eq!(outcome.stats.malformed, 1);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = matrix(vec![record("u2", "i1", 5), record("u1", "i2", 3), record("u1", "i1", 9)]);
        m.catalog.insert(
            "i1".into(),
            ItemMeta {
                item: "i1".into(),
                title: "First".into(),
                categories: vec!["Rock".into()],
                description: "A record.".into(),
            },
        );
        let snapshot = write_snapshot(&m, dir.path()).unwrap();
        let reloaded = ingest(&snapshot, DatasetFormat::CanonicalJsonl).unwrap();
        assert_eq!(reloaded.matrix.records, m.records);
        assert_eq!(reloaded.matrix.catalog, m.catalog);
    }

    #[test]
    fn sampling_every_user_is_the_identity() {
        let m = matrix(vec![record("u2", "i1", 5), record("u1", "i2", 3), record("u3", "i1", 9)]);
        let sampled = m.sample_subset(3, 42).unwrap();
        assert_eq!(sampled.records, m.records);
        assert!(m.sample_subset(4, 42).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let records: Vec<Interaction> =
            (0..20).map(|i| record(&format!("u{i:02}"), "i1", i)).collect();
        let m = matrix(records);
        let a = m.sample_subset(5, 7).unwrap();
        let b = m.sample_subset(5, 7).unwrap();
        let c = m.sample_subset(5, 8).unwrap();
        assert_eq!(a.records, b.records);
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn leave_one_out_holds_exactly_the_latest_record() {
        let m = matrix(vec![
            record("u1", "i1", 10),
            record("u1", "i2", 30),
            record("u1", "i3", 20),
            record("u2", "i1", 5),
        ]);
        let split = m.leave_one_out();
        assert_eq!(split.test.get("u1").unwrap().item, "i2");
        assert_eq!(split.excluded_users, vec!["u2".to_string()]);
        assert_eq!(split.excluded_records, 1);
        // Conservation: every record of a kept user lands on exactly one side.
        assert_eq!(split.train.len() + split.test.len(), 3);
    }

    #[test]
    fn leave_one_out_breaks_timestamp_ties_by_ingest_order() {
        let m = matrix(vec![record("u1", "i1", 10), record("u1", "i2", 10)]);
        let split = m.leave_one_out();
        assert_eq!(split.test.get("u1").unwrap().item, "i2", "later-ingested record wins");
    }

    #[test]
    fn popularity_counts_distinct_users_and_breaks_ties_lexicographically() {
        let m = matrix(vec![
            record("u1", "iB", 1),
            record("u2", "iB", 2),
            record("u2", "iB", 3), // same user again: no extra credit
            record("u1", "iA", 4),
            record("u2", "iA", 5),
            record("u1", "iC", 6),
        ]);
        assert_eq!(m.popularity_ranking(), vec!["iA", "iB", "iC"]);
    }

    #[test]
    fn popularity_ignores_record_order() {
        let mut records = vec![
            record("u1", "iB", 1),
            record("u2", "iB", 2),
            record("u3", "iA", 3),
            record("u1", "iA", 4),
        ];
        let forward = matrix(records.clone()).popularity_ranking();
        records.reverse();
        let backward = matrix(records).popularity_ranking();
        assert_eq!(forward, backward);
    }

    #[test]
    fn sparsity_matches_the_hand_computed_grid() {
        // 3 users × 4 items, 5 interactions → 1 − 5/12.
        let m = matrix(vec![
            record("u1", "i1", 1),
            record("u1", "i2", 2),
            record("u2", "i3", 3),
            record("u3", "i4", 4),
            record("u3", "i1", 5),
        ]);
        assert!((m.sparsity() - (1.0 - 5.0 / 12.0)).abs() < 1e-12);
    }
}
