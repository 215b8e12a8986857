//! Dataset reduction: category-balanced and uncertainty-balanced subsets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemId {
    Num(u64),
    Text(String),
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemId::Num(n) => write!(f, "{n}"),
            ItemId::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledItem {
    pub id: ItemId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// How many of `n` sampled answers were correct.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
}

#[derive(Debug, Error)]
pub enum SubsampleError {
    #[error("asked for {k} items but only {available} are available")]
    TooMany { k: usize, available: usize },
    #[error("item {0} has no category")]
    MissingCategory(ItemId),
    #[error("item {0} has no correct_count")]
    MissingCount(ItemId),
    #[error("item {id} has n = {found}, expected {expected}")]
    SampleCount { id: ItemId, found: u32, expected: u32 },
    #[error("correct_count {correct_count} outside [0, {n}]")]
    CountOutOfRange { correct_count: u32, n: u32 },
    #[error("category {category:?} needs {quota} items but has {available} (short by {})", quota - available)]
    Deficit {
        category: String,
        quota: usize,
        available: usize,
    },
    #[error("duplicate item id {0}")]
    DuplicateId(ItemId),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parses one JSONL line.
pub fn parse_item(line: &str, line_no: usize) -> Result<LabeledItem, SubsampleError> {
    serde_json::from_str(line).map_err(|source| SubsampleError::Json {
        line: line_no,
        source,
    })
}

/// Reads items from JSONL, skipping blank lines.
pub fn read_items<R: BufRead>(r: R) -> Result<Vec<LabeledItem>, SubsampleError> {
    let mut items = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(parse_item(&line, i + 1)?);
    }
    Ok(items)
}

pub fn uncertainty_bucket(correct_count: u32, n: u32) -> Result<usize, SubsampleError> {
    if correct_count > n {
        return Err(SubsampleError::CountOutOfRange { correct_count, n });
    }
    Ok(correct_count as usize)
}

fn check_request(items: &[LabeledItem], k: usize) -> Result<(), SubsampleError> {
    if k > items.len() {
        return Err(SubsampleError::TooMany {
            k,
            available: items.len(),
        });
    }
    let mut seen = HashSet::new();
    for it in items {
        if !seen.insert(&it.id) {
            return Err(SubsampleError::DuplicateId(it.id.clone()));
        }
    }
    Ok(())
}

/// Draws `quota[g]` members of each group uniformly without replacement and
/// returns the chosen ids in input order.
fn draw<R: Rng + ?Sized>(
    items: &[LabeledItem],
    groups: &[Vec<usize>],
    quotas: &[usize],
    rng: &mut R,
) -> Vec<ItemId> {
    let mut picked = Vec::new();
    for (members, &q) in groups.iter().zip(quotas) {
        picked.extend(index::sample(rng, members.len(), q).into_iter().map(|i| members[i]));
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].id.clone()).collect()
}

/// `k` items spread as evenly as possible across categories.
///
/// Every category gets `k / C`; the `k % C` extra slots go to categories
/// picked by shuffling the sorted category names.
pub fn layered_subsample<R: Rng + ?Sized>(
    items: &[LabeledItem],
    k: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>, SubsampleError> {
    check_request(items, k)?;
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        let cat = it
            .category
            .as_deref()
            .ok_or_else(|| SubsampleError::MissingCategory(it.id.clone()))?;
        by_cat.entry(cat).or_default().push(i);
    }
    if by_cat.is_empty() {
        return Ok(Vec::new());
    }
    let n_cat = by_cat.len();
    let mut quotas = vec![k / n_cat; n_cat];
    let mut order: Vec<usize> = (0..n_cat).collect();
    order.shuffle(rng);
    for &c in &order[..k % n_cat] {
        quotas[c] += 1;
    }
    for ((name, members), &q) in by_cat.iter().zip(&quotas) {
        if members.len() < q {
            return Err(SubsampleError::Deficit {
                category: name.to_string(),
                quota: q,
                available: members.len(),
            });
        }
    }
    let groups: Vec<Vec<usize>> = by_cat.into_values().collect();
    Ok(draw(items, &groups, &quotas, rng))
}

/// Splits `k` across groups with the given capacities: equal shares, a short
/// group's unmet share flowing to the others, leftover single slots assigned
/// by a seeded shuffle. Requires `k <= capacities.sum()`.
pub fn water_fill<R: Rng + ?Sized>(capacities: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(k <= capacities.iter().sum());
    let mut alloc = vec![0usize; capacities.len()];
    let mut remaining = k;
    loop {
        let open: Vec<usize> = (0..capacities.len())
            .filter(|&g| alloc[g] < capacities[g])
            .collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let share = remaining / open.len();
        if share == 0 {
            let mut open = open;
            open.shuffle(rng);
            for &g in &open[..remaining] {
                alloc[g] += 1;
            }
            break;
        }
        for &g in &open {
            let give = share.min(capacities[g] - alloc[g]);
            alloc[g] += give;
            remaining -= give;
        }
    }
    alloc
}

/// `k` items spread evenly over the `n + 1` correctness buckets. Empty or
/// short buckets hand their unmet quota to the remaining non-empty ones.
pub fn uncertainty_subsample<R: Rng + ?Sized>(
    items: &[LabeledItem],
    k: usize,
    n: u32,
    rng: &mut R,
) -> Result<Vec<ItemId>, SubsampleError> {
    check_request(items, k)?;
    let mut groups = vec![Vec::new(); n as usize + 1];
    for (i, it) in items.iter().enumerate() {
        let c = it
            .correct_count
            .ok_or_else(|| SubsampleError::MissingCount(it.id.clone()))?;
        if let Some(found) = it.n {
            if found != n {
                return Err(SubsampleError::SampleCount {
                    id: it.id.clone(),
                    found,
                    expected: n,
                });
            }
        }
        groups[uncertainty_bucket(c, n)?].push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    let caps: Vec<usize> = groups.iter().map(Vec::len).collect();
    let quotas = water_fill(&caps, k, rng);
    Ok(draw(items, &groups, &quotas, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn cat_items(sizes: &[usize]) -> Vec<LabeledItem> {
        let mut out = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                out.push(LabeledItem {
                    id: ItemId::Num(out.len() as u64),
                    category: Some(format!("cat{c}")),
                    correct_count: None,
                    n: None,
                });
            }
        }
        out
    }

    fn bucket_items(sizes: &[usize], n: u32) -> Vec<LabeledItem> {
        let mut out = Vec::new();
        for (b, &m) in sizes.iter().enumerate() {
            for _ in 0..m {
                out.push(LabeledItem {
                    id: ItemId::Num(out.len() as u64),
                    category: None,
                    correct_count: Some(b as u32),
                    n: Some(n),
                });
            }
        }
        out
    }

    fn counts<F: Fn(&LabeledItem) -> String>(items: &[LabeledItem], ids: &[ItemId], key: F) -> Vec<usize> {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for it in items {
            m.entry(key(it)).or_default();
        }
        let by_id: HashMap<&ItemId, &LabeledItem> = items.iter().map(|i| (&i.id, i)).collect();
        for id in ids {
            *m.get_mut(&key(by_id[id])).unwrap() += 1;
        }
        m.into_values().collect()
    }

    #[test]
    fn layered_examples() {
        let mut rng = derive_stream(1, b"sub");
        let items = cat_items(&[10, 10]);
        let ids = layered_subsample(&items, 10, &mut rng).unwrap();
        assert_eq!(counts(&items, &ids, |i| i.category.clone().unwrap()), vec![5, 5]);

        let items = cat_items(&[10, 10, 10]);
        let ids = layered_subsample(&items, 10, &mut rng).unwrap();
        let mut c = counts(&items, &ids, |i| i.category.clone().unwrap());
        c.sort();
        assert_eq!(c, vec![3, 3, 4]);

        let ids = layered_subsample(&items, 30, &mut rng).unwrap();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn layered_errors() {
        let mut rng = derive_stream(1, b"sub");
        let items = cat_items(&[2, 10]);
        assert!(matches!(
            layered_subsample(&items, 13, &mut rng),
            Err(SubsampleError::TooMany { k: 13, available: 12 })
        ));
        match layered_subsample(&items, 10, &mut rng) {
            Err(SubsampleError::Deficit {
                category,
                quota,
                available,
            }) => assert_eq!((category.as_str(), quota, available), ("cat0", 5, 2)),
            other => panic!("{other:?}"),
        }
        let mut bad = cat_items(&[3]);
        bad[1].category = None;
        assert!(matches!(
            layered_subsample(&bad, 1, &mut rng),
            Err(SubsampleError::MissingCategory(ItemId::Num(1)))
        ));
    }

    #[test]
    fn layered_remainder_is_spread_over_categories() {
        let items = cat_items(&[5, 5, 5]);
        let mut extra = [0usize; 3];
        for seed in 0..300 {
            let ids = layered_subsample(&items, 4, &mut derive_stream(seed, b"sub")).unwrap();
            let c = counts(&items, &ids, |i| i.category.clone().unwrap());
            extra[c.iter().position(|&x| x == 2).unwrap()] += 1;
        }
        assert!(extra.iter().all(|&e| e > 60), "{extra:?}");
    }

    #[test]
    fn buckets() {
        assert_eq!(uncertainty_bucket(7, 10).unwrap(), 7);
        assert_eq!(uncertainty_bucket(0, 10).unwrap(), 0);
        assert_eq!(uncertainty_bucket(10, 10).unwrap(), 10);
        assert!(uncertainty_bucket(11, 10).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let mut rng = derive_stream(2, b"sub");
        let items = bucket_items(&[5; 11], 10);
        let ids = uncertainty_subsample(&items, 22, 10, &mut rng).unwrap();
        assert_eq!(
            counts(&items, &ids, |i| i.correct_count.unwrap().to_string()),
            vec![2; 11]
        );

        let mut sizes = [5; 11];
        sizes[4] = 0;
        let items = bucket_items(&sizes, 10);
        let ids = uncertainty_subsample(&items, 20, 10, &mut rng).unwrap();
        assert_eq!(
            counts(&items, &ids, |i| i.correct_count.unwrap().to_string()),
            vec![2; 10]
        );

        let ids = uncertainty_subsample(&items, items.len(), 10, &mut rng).unwrap();
        assert_eq!(ids.len(), items.len());
    }

    #[test]
    fn short_bucket_overflows_to_others() {
        let mut rng = derive_stream(3, b"sub");
        let items = bucket_items(&[1, 10, 10], 2);
        let ids = uncertainty_subsample(&items, 9, 2, &mut rng).unwrap();
        let c = counts(&items, &ids, |i| i.correct_count.unwrap().to_string());
        assert_eq!(c, vec![1, 4, 4]);
    }

    #[test]
    fn uncertainty_rejects_inconsistent_n() {
        let mut rng = derive_stream(3, b"sub");
        let mut items = bucket_items(&[2, 2], 1);
        assert!(uncertainty_subsample(&items, 2, 1, &mut rng).is_ok());
        items[0].n = Some(5);
        assert!(matches!(
            uncertainty_subsample(&items, 2, 1, &mut rng),
            Err(SubsampleError::SampleCount { .. })
        ));
    }

    #[test]
    fn reads_jsonl() {
        let text = "{\"id\": 1, \"category\": \"algebra\"}\n\n{\"id\": \"q-7\", \"correct_count\": 3, \"n\": 10}\n";
        let items = read_items(text.as_bytes()).unwrap();
        assert_eq!(items[1].id, ItemId::Text("q-7".into()));
        assert!(matches!(
            read_items("{\"id\": 1}\n{\"idx\": 2}".as_bytes()),
            Err(SubsampleError::Json { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn layered_is_balanced_distinct_and_deterministic(
            sizes in prop::collection::vec(1usize..12, 1..6),
            frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let items = cat_items(&sizes);
            let min = *sizes.iter().min().unwrap();
            let k = ((min * sizes.len()) as f64 * frac) as usize;
            let a = layered_subsample(&items, k, &mut derive_stream(seed, b"p")).unwrap();
            let b = layered_subsample(&items, k, &mut derive_stream(seed, b"p")).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), k);
            prop_assert_eq!(a.iter().collect::<HashSet<_>>().len(), k);
            let c = counts(&items, &a, |i| i.category.clone().unwrap());
            prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        }

        #[test]
        fn uncertainty_is_distinct_and_near_equal(
            sizes in prop::collection::vec(0usize..8, 1..8),
            frac in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let n = sizes.len() as u32 - 1;
            let items = bucket_items(&sizes, n);
            let k = (items.len() as f64 * frac) as usize;
            let ids = uncertainty_subsample(&items, k, n, &mut derive_stream(seed, b"p")).unwrap();
            prop_assert_eq!(ids.len(), k);
            prop_assert_eq!(ids.iter().collect::<HashSet<_>>().len(), k);
            // a bucket below the top allocation must be exhausted
            let c = counts(&items, &ids, |i| i.correct_count.unwrap().to_string());
            let full: BTreeMap<String, usize> = sizes.iter().enumerate().filter(|(_, &s)| s > 0).map(|(b, &s)| (b.to_string(), s)).collect();
            let top = *c.iter().max().unwrap_or(&0);
            for (got, cap) in c.iter().zip(full.values()) {
                prop_assert!(*got + 1 >= top || got == cap);
            }
        }
    }
}
