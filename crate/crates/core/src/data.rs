//! Interaction ingestion and train/validation/test views.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: u32,
    pub timestamp: Option<i64>,
}

/// One parsed input row, before indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub timestamp: Option<i64>,
}

/// Users and items mapped to dense indices, with per-user interactions
/// sorted by item index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    interactions: Vec<Vec<Interaction>>,
    has_timestamps: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Tsv,
}

impl Format {
    pub fn delimiter(self) -> &'static str {
        match self {
            Self::Csv => ",",
            Self::Tsv => "\t",
        }
    }
}

/// A column addressed by zero-based position or by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl From<usize> for Column {
    fn from(i: usize) -> Self {
        Self::Index(i)
    }
}

impl From<&str> for Column {
    fn from(s: &str) -> Self {
        match s.parse::<usize>() {
            Ok(i) => Self::Index(i),
            Err(_) => Self::Name(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub format: Format,
    /// Overrides the format's delimiter, e.g. `"::"` for MovieLens `.dat` files.
    pub delimiter: Option<String>,
    pub has_header: bool,
    pub user: Column,
    pub item: Column,
    pub rating: Option<Column>,
    pub timestamp: Option<Column>,
    /// Rows rated below this are dropped. `None` keeps every row.
    pub min_rating: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: Format::Csv,
            delimiter: None,
            has_header: false,
            user: Column::Index(0),
            item: Column::Index(1),
            rating: None,
            timestamp: None,
            min_rating: None,
        }
    }
}

impl LoadOptions {
    /// MovieLens `ratings.dat`: `user::item::rating::timestamp`.
    pub fn movielens() -> Self {
        Self {
            delimiter: Some("::".into()),
            rating: Some(Column::Index(2)),
            timestamp: Some(Column::Index(3)),
            ..Self::default()
        }
    }
}

fn resolve(col: &Column, header: Option<&[&str]>, path: &Path) -> Result<usize> {
    match col {
        Column::Index(i) => Ok(*i),
        Column::Name(name) => header
            .and_then(|h| h.iter().position(|c| c.trim() == name))
            .ok_or_else(|| {
                if header.is_none() {
                    KanError::Parse { path: path.to_path_buf(), line: 1, msg: format!("column `{name}` needs a header row") }
                } else {
                    KanError::MissingColumn(name.clone())
                }
            }),
    }
}

impl InteractionDataset {
    /// Reads a delimited interaction file.
    pub fn load(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let delim = opts.delimiter.as_deref().unwrap_or(opts.format.delimiter());
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

        let header_fields: Option<Vec<&str>> = if opts.has_header {
            lines.next().map(|(_, l)| l.split(delim).collect())
        } else {
            None
        };
        let header = header_fields.as_deref();
        let user_col = resolve(&opts.user, header, path)?;
        let item_col = resolve(&opts.item, header, path)?;
        let rating_col = opts.rating.as_ref().map(|c| resolve(c, header, path)).transpose()?;
        let ts_col = opts.timestamp.as_ref().map(|c| resolve(c, header, path)).transpose()?;

        let mut rows = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
            let field = |c: usize, what: &str| -> Result<&str> {
                fields.get(c).copied().ok_or_else(|| KanError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("missing {what} column {c}"),
                })
            };
            let user = field(user_col, "user")?;
            let item = field(item_col, "item")?;
            if let (Some(c), Some(min)) = (rating_col, opts.min_rating) {
                let raw = field(c, "rating")?;
                let rating: f64 = raw.parse().map_err(|_| KanError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("bad rating `{raw}`"),
                })?;
                if rating < min {
                    continue;
                }
            }
            let timestamp = match ts_col {
                Some(c) => {
                    let raw = field(c, "timestamp")?;
                    Some(raw.parse::<i64>().map_err(|_| KanError::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        msg: format!("bad timestamp `{raw}`"),
                    })?)
                }
                None => None,
            };
            rows.push(RawInteraction { user: user.to_string(), item: item.to_string(), timestamp });
        }
        Self::from_records(rows)
    }

    /// Indexes raw rows: ids numbered by first appearance, duplicate pairs
    /// collapsed to their earliest timestamp.
    pub fn from_records(rows: impl IntoIterator<Item = RawInteraction>) -> Result<Self> {
        let mut user_index: HashMap<String, u32> = HashMap::new();
        let mut item_index: HashMap<String, u32> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut per_user: Vec<HashMap<u32, Option<i64>>> = Vec::new();
        let mut with_ts = 0usize;
        let mut total = 0usize;

        for row in rows {
            let u = *user_index.entry(row.user.clone()).or_insert_with(|| {
                user_ids.push(row.user.clone());
                per_user.push(HashMap::new());
                (user_ids.len() - 1) as u32
            });
            let i = *item_index.entry(row.item.clone()).or_insert_with(|| {
                item_ids.push(row.item.clone());
                (item_ids.len() - 1) as u32
            });
            total += 1;
            with_ts += usize::from(row.timestamp.is_some());
            per_user[u as usize]
                .entry(i)
                .and_modify(|ts| {
                    if let (Some(old), Some(new)) = (*ts, row.timestamp) {
                        *ts = Some(old.min(new));
                    }
                })
                .or_insert(row.timestamp);
        }
        if with_ts != 0 && with_ts != total {
            return Err(KanError::InvalidArgument("timestamps must be present on all rows or none".into()));
        }
        let interactions = per_user
            .into_iter()
            .map(|m| {
                let mut v: Vec<Interaction> = m.into_iter().map(|(item, timestamp)| Interaction { item, timestamp }).collect();
                v.sort_unstable_by_key(|x| x.item);
                v
            })
            .collect();
        Ok(Self { user_ids, item_ids, interactions, has_timestamps: with_ts > 0 })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }

    pub fn has_timestamps(&self) -> bool {
        self.has_timestamps
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_ids.iter().position(|x| x == id)
    }

    pub fn user_interactions(&self, user: usize) -> &[Interaction] {
        &self.interactions[user]
    }

    pub fn user_items(&self, user: usize) -> Vec<u32> {
        self.interactions[user].iter().map(|x| x.item).collect()
    }

    /// Restriction to the first `n` users and first `m` items (by index);
    /// users left without interactions are dropped.
    pub fn truncated(&self, n_users: usize, n_items: usize) -> Self {
        let mut user_ids = Vec::new();
        let mut interactions = Vec::new();
        for u in 0..self.n_users().min(n_users) {
            let kept: Vec<Interaction> =
                self.interactions[u].iter().filter(|x| (x.item as usize) < n_items).copied().collect();
            if !kept.is_empty() {
                user_ids.push(self.user_ids[u].clone());
                interactions.push(kept);
            }
        }
        Self {
            user_ids,
            item_ids: self.item_ids[..self.n_items().min(n_items)].to_vec(),
            interactions,
            has_timestamps: self.has_timestamps,
        }
    }
}

/// Per-user disjoint train/validation/test item lists over one dataset's
/// index space.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitView {
    n_users: usize,
    n_items: usize,
    train: Vec<Vec<u32>>,
    valid: Vec<Vec<u32>>,
    test: Vec<Vec<u32>>,
}

impl SplitView {
    pub fn from_parts(n_items: usize, train: Vec<Vec<u32>>, valid: Vec<Vec<u32>>, test: Vec<Vec<u32>>) -> Result<Self> {
        let n_users = train.len();
        if valid.len() != n_users || test.len() != n_users {
            return Err(KanError::InvalidArgument("train/valid/test must cover the same users".into()));
        }
        let in_range = train.iter().chain(&valid).chain(&test).flatten().all(|i| (*i as usize) < n_items);
        if !in_range {
            return Err(KanError::InvalidArgument("item index out of range".into()));
        }
        Ok(Self { n_users, n_items, train, valid, test })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn train(&self, user: usize) -> &[u32] {
        &self.train[user]
    }

    pub fn valid(&self, user: usize) -> &[u32] {
        &self.valid[user]
    }

    pub fn test(&self, user: usize) -> &[u32] {
        &self.test[user]
    }

    pub fn total(&self) -> usize {
        [&self.train, &self.valid, &self.test].iter().flat_map(|s| s.iter()).map(Vec::len).sum()
    }

    pub fn train_count(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    /// Users with at least one training item.
    pub fn train_users(&self) -> Vec<usize> {
        (0..self.n_users).filter(|u| !self.train[*u].is_empty()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(KanError::InvalidRatio(format!("{ratios:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Part sizes for `n` items at `ratios`, by largest remainder. Ties in the
/// remainder go to the earlier part.
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[j] += 1;
        left -= 1;
    }
    sizes
}

fn split_users<R: rand::Rng>(per_user: &[Vec<u32>], n_items: usize, ratios: [f64; 3], rng: &mut R) -> SplitView {
    let n_users = per_user.len();
    let mut view = SplitView {
        n_users,
        n_items,
        train: vec![Vec::new(); n_users],
        valid: vec![Vec::new(); n_users],
        test: vec![Vec::new(); n_users],
    };
    for (u, items) in per_user.iter().enumerate() {
        if items.len() < 3 {
            view.train[u] = items.clone();
            continue;
        }
        let mut shuffled = items.clone();
        shuffled.shuffle(rng);
        let [a, b, _] = largest_remainder(items.len(), ratios);
        let part = |s: &[u32]| {
            let mut v = s.to_vec();
            v.sort_unstable();
            v
        };
        view.train[u] = part(&shuffled[..a]);
        view.valid[u] = part(&shuffled[a..a + b]);
        view.test[u] = part(&shuffled[a + b..]);
    }
    view
}

/// Random per-user split at `ratios` (train, validation, test). Users with
/// fewer than three interactions go entirely to train.
pub fn split_static(dataset: &InteractionDataset, ratios: [f64; 3], seed: u64) -> Result<SplitView> {
    check_ratios(ratios)?;
    let per_user: Vec<Vec<u32>> = (0..dataset.n_users()).map(|u| dataset.user_items(u)).collect();
    let mut r = rng::stream(seed, rng::STREAM_SPLIT);
    Ok(split_users(&per_user, dataset.n_items(), ratios, &mut r))
}

/// Timestamp-ordered blocks: a base block `D0` followed by equal-count
/// incremental blocks `D1..Dn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualBlocks {
    pub blocks: Vec<SplitView>,
    /// `(first, last)` timestamps per block.
    pub time_ranges: Vec<(i64, i64)>,
}

impl ContinualBlocks {
    pub fn base(&self) -> &SplitView {
        &self.blocks[0]
    }

    pub fn incremental(&self) -> &[SplitView] {
        &self.blocks[1..]
    }

    pub fn n_incremental(&self) -> usize {
        self.blocks.len() - 1
    }
}

/// Sorts all interactions by `(timestamp, user, item)`, puts the first
/// `base_fraction` into `D0` and divides the rest into `n_blocks` contiguous
/// blocks of equal count. Each block gets its own per-user inner split.
pub fn split_continual(
    dataset: &InteractionDataset,
    base_fraction: f64,
    n_blocks: usize,
    inner_ratios: [f64; 3],
    seed: u64,
) -> Result<ContinualBlocks> {
    if !dataset.has_timestamps() {
        return Err(KanError::NoTimestamps);
    }
    check_ratios(inner_ratios)?;
    if !(0.0..1.0).contains(&base_fraction) || n_blocks == 0 {
        return Err(KanError::InvalidArgument(format!(
            "need 0 <= base fraction < 1 and at least one block, got {base_fraction} and {n_blocks}"
        )));
    }
    let mut all: Vec<(i64, u32, u32)> = (0..dataset.n_users())
        .flat_map(|u| {
            dataset.user_interactions(u).iter().map(move |x| (x.timestamp.expect("checked above"), u as u32, x.item))
        })
        .collect();
    all.sort_unstable();
    let n = all.len();
    let n_base = (n as f64 * base_fraction).round() as usize;
    let rest = n - n_base;
    let mut bounds = vec![0, n_base];
    for b in 1..=n_blocks {
        bounds.push(n_base + rest * b / n_blocks);
    }

    let mut blocks = Vec::with_capacity(n_blocks + 1);
    let mut time_ranges = Vec::with_capacity(n_blocks + 1);
    for (b, w) in bounds.windows(2).enumerate() {
        let slice = &all[w[0]..w[1]];
        let mut per_user = vec![Vec::new(); dataset.n_users()];
        for &(_, u, i) in slice {
            per_user[u as usize].push(i);
        }
        for items in &mut per_user {
            items.sort_unstable();
        }
        let mut r = rng::substream(seed, rng::STREAM_SPLIT, b as u64);
        blocks.push(split_users(&per_user, dataset.n_items(), inner_ratios, &mut r));
        time_ranges.push(match (slice.first(), slice.last()) {
            (Some(f), Some(l)) => (f.0, l.0),
            _ => (0, 0),
        });
    }
    Ok(ContinualBlocks { blocks, time_ranges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn raw(u: &str, i: &str, t: Option<i64>) -> RawInteraction {
        RawInteraction { user: u.into(), item: i.into(), timestamp: t }
    }

    #[test]
    fn loads_small_csv() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "u1,a\nu1,b\nu2,c\nu2,a").unwrap();
        let d = InteractionDataset::load(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!((d.n_users(), d.n_items(), d.n_interactions()), (2, 3, 4));
        assert_eq!(d.item_ids(), &["a", "b", "c"]);
        assert_eq!(d.user_items(1), vec![0, 2]);
    }

    #[test]
    fn loads_movielens_with_threshold_and_header_names() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1::10::5::100\n1::11::2::101\n2::10::4::99").unwrap();
        let mut opts = LoadOptions::movielens();
        opts.min_rating = Some(4.0);
        let d = InteractionDataset::load(f.path(), &opts).unwrap();
        assert_eq!((d.n_users(), d.n_items()), (2, 1));
        assert!(d.has_timestamps());

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "item\tuser\tts\nx\tA\t5\ny\tA\t6").unwrap();
        let opts = LoadOptions {
            format: Format::Tsv,
            has_header: true,
            user: "user".into(),
            item: "item".into(),
            timestamp: Some("ts".into()),
            ..LoadOptions::default()
        };
        let d = InteractionDataset::load(g.path(), &opts).unwrap();
        assert_eq!((d.n_users(), d.n_items()), (1, 2));

        let opts = LoadOptions { rating: Some("stars".into()), min_rating: Some(1.0), ..opts };
        assert!(matches!(InteractionDataset::load(g.path(), &opts), Err(KanError::MissingColumn(_))));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1::10::5::100\n1::11::2::notatime").unwrap();
        match InteractionDataset::load(f.path(), &LoadOptions::movielens()) {
            Err(KanError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicates_keep_earliest_timestamp() {
        let d = InteractionDataset::from_records(vec![raw("u", "i", Some(9)), raw("u", "i", Some(3)), raw("u", "j", Some(5))])
            .unwrap();
        assert_eq!(d.n_interactions(), 2);
        assert_eq!(d.user_interactions(0)[0].timestamp, Some(3));
    }

    #[test]
    fn mixed_timestamps_are_rejected() {
        assert!(InteractionDataset::from_records(vec![raw("u", "i", Some(1)), raw("u", "j", None)]).is_err());
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(largest_remainder(3, [0.8, 0.1, 0.1]), [3, 0, 0]);
        assert_eq!(largest_remainder(7, [0.8, 0.1, 0.1]), [5, 1, 1]);
        for n in 0..50 {
            assert_eq!(largest_remainder(n, [0.8, 0.1, 0.1]).iter().sum::<usize>(), n);
        }
    }

    fn dataset(users: usize, per_user: usize) -> InteractionDataset {
        let rows = (0..users).flat_map(|u| {
            (0..per_user).map(move |k| raw(&format!("u{u}"), &format!("i{}", (u * 7 + k * 3) % 40), Some((u * 31 + k * 17) as i64 % 97)))
        });
        InteractionDataset::from_records(rows).unwrap()
    }

    #[test]
    fn static_split_rules() {
        let d = dataset(5, 10);
        let s = split_static(&d, [0.8, 0.1, 0.1], 3).unwrap();
        for u in 0..5 {
            assert_eq!((s.train(u).len(), s.valid(u).len(), s.test(u).len()), (8, 1, 1));
        }
        assert_eq!(s, split_static(&d, [0.8, 0.1, 0.1], 3).unwrap());
        assert!(split_static(&d, [0.8, 0.1, 0.2], 3).is_err());

        let small = InteractionDataset::from_records(vec![raw("u", "a", None), raw("u", "b", None)]).unwrap();
        let s = split_static(&small, [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!(s.train(0), &[0, 1]);
        assert!(s.valid(0).is_empty() && s.test(0).is_empty());
    }

    #[test]
    fn continual_split_counts_and_order() {
        let rows = (0..1000).map(|k| raw(&format!("u{}", k % 37), &format!("i{k}"), Some((k * 7919 % 1000) as i64)));
        let d = InteractionDataset::from_records(rows).unwrap();
        let blocks = split_continual(&d, 0.5, 5, [0.8, 0.1, 0.1], 1).unwrap();
        let sizes: Vec<usize> = blocks.blocks.iter().map(SplitView::total).collect();
        assert_eq!(sizes, vec![500, 100, 100, 100, 100, 100]);
        for w in blocks.time_ranges.windows(2) {
            assert!(w[0].1 <= w[1].0);
        }

        let same_time = (0..60).map(|k| raw(&format!("u{}", k % 4), &format!("i{k}"), Some(42)));
        let d = InteractionDataset::from_records(same_time).unwrap();
        let blocks = split_continual(&d, 0.5, 5, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(blocks.blocks.iter().map(SplitView::total).sum::<usize>(), 60);

        let untimed = InteractionDataset::from_records(vec![raw("u", "a", None)]).unwrap();
        assert!(matches!(split_continual(&untimed, 0.5, 5, [0.8, 0.1, 0.1], 1), Err(KanError::NoTimestamps)));
    }
}
