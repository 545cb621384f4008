//! Synthetic interaction logs with planted item groups.

use std::io::Write;
use std::ops::RangeInclusive;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::RawEvent;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_latent_groups: usize,
    /// Interactions per user, inclusive.
    pub history_len_range: RangeInclusive<usize>,
    /// Probability that an interaction is drawn from the user's own group.
    pub group_stickiness: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 200,
            n_latent_groups: 10,
            history_len_range: 8..=16,
            group_stickiness: 0.8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("synth spec needs at least one user and one item");
        }
        if self.n_latent_groups == 0 || self.n_latent_groups > self.n_items {
            return bad("n_latent_groups must lie in 1..=n_items");
        }
        if !(0.0..=1.0).contains(&self.group_stickiness) {
            return bad("group_stickiness must lie in [0, 1]");
        }
        if *self.history_len_range.start() == 0 || self.history_len_range.is_empty() {
            return bad("history_len_range must be a non-empty range of positive lengths");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Chronological per user, users in order.
    pub events: Vec<RawEvent>,
    /// Ground-truth group of item `i` (key [`item_key`]`(i)`).
    pub item_groups: Vec<usize>,
    pub user_groups: Vec<usize>,
}

pub fn item_key(i: usize) -> String {
    format!("item-{i:05}")
}

pub fn user_key(u: usize) -> String {
    format!("user-{u:05}")
}

/// Items are dealt round-robin into groups, so group sizes differ by at most one.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let g = spec.n_latent_groups;
    let item_groups: Vec<usize> = (0..spec.n_items).map(|i| i % g).collect();
    let mut members = vec![Vec::new(); g];
    for (i, &grp) in item_groups.iter().enumerate() {
        members[grp].push(i);
    }
    let titles: Vec<String> = (0..spec.n_items).map(|i| format!("group-{} word-{}", item_groups[i], i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut events = Vec::new();
    let mut user_groups = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let grp = rng.gen_range(0..g);
        user_groups.push(grp);
        let len = rng.gen_range(spec.history_len_range.clone());
        for t in 0..len {
            let item = if rng.gen_bool(spec.group_stickiness) {
                members[grp][rng.gen_range(0..members[grp].len())]
            } else {
                rng.gen_range(0..spec.n_items)
            };
            events.push(RawEvent {
                user: user_key(u),
                item: item_key(item),
                timestamp: t as i64,
                title: Some(titles[item].clone()),
                brand: None,
                price: None,
                category: None,
            });
        }
    }
    Ok(SynthData {
        events,
        item_groups,
        user_groups,
    })
}

impl SynthData {
    pub fn write_ground_truth_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "item,group")?;
        for (i, g) in self.item_groups.iter().enumerate() {
            writeln!(out, "{},{}", item_key(i), g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ingest_reader;
    use std::collections::HashMap;

    fn item_index(key: &str) -> usize {
        key.trim_start_matches("item-").parse::<usize>().unwrap()
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec {
            n_users: 50,
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().events, generate(&other).unwrap().events);
    }

    #[test]
    fn ingested_counts_match_spec() {
        let spec = SynthSpec::default();
        let data = generate(&spec).unwrap();
        let mut buf = Vec::new();
        RawEvent::write_jsonl(&data.events, &mut buf).unwrap();
        let corpus = ingest_reader(buf.as_slice()).unwrap();
        assert_eq!(corpus.sequences.len(), spec.n_users);
        assert_eq!(corpus.n_interactions(), data.events.len());
        assert!(corpus.catalog.len() <= spec.n_items);
        for (_, seq) in &corpus.sequences {
            assert!(spec.history_len_range.contains(&seq.len()));
        }
        let rec = corpus.catalog.get(0);
        assert!(rec.title.as_deref().unwrap().starts_with("group-"));
    }

    #[test]
    fn full_stickiness_with_singleton_groups_repeats_one_item() {
        let spec = SynthSpec {
            n_users: 30,
            n_items: 10,
            n_latent_groups: 10,
            group_stickiness: 1.0,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let mut per_user: HashMap<&str, Vec<&str>> = HashMap::new();
        for e in &data.events {
            per_user.entry(&e.user).or_default().push(&e.item);
        }
        for items in per_user.values() {
            assert!(items.iter().all(|i| i == &items[0]));
        }
    }

    #[test]
    fn within_group_frequency_matches_counting_oracle() {
        let spec = SynthSpec::default();
        let data = generate(&spec).unwrap();
        let mut user_idx = HashMap::new();
        for (u, g) in data.user_groups.iter().enumerate() {
            user_idx.insert(user_key(u), *g);
        }
        let n = data.events.len() as f64;
        let hits = data
            .events
            .iter()
            .filter(|e| data.item_groups[item_index(&e.item)] == user_idx[&e.user])
            .count() as f64;
        // a uniform draw also lands in the user's group with probability 1/G
        let s = spec.group_stickiness;
        let p = s + (1.0 - s) / spec.n_latent_groups as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((hits / n - p).abs() <= 3.0 * sigma, "{} vs {p}", hits / n);
    }

    #[test]
    fn zero_stickiness_is_uniform() {
        let spec = SynthSpec {
            n_users: 2000,
            n_items: 20,
            n_latent_groups: 4,
            group_stickiness: 0.0,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let mut counts = vec![0usize; spec.n_items];
        for e in &data.events {
            counts[item_index(&e.item)] += 1;
        }
        let n = data.events.len() as f64;
        let p = 1.0 / spec.n_items as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() <= 4.5 * sigma);
        }
    }

    #[test]
    fn ground_truth_csv() {
        let spec = SynthSpec {
            n_users: 1,
            n_items: 3,
            n_latent_groups: 2,
            ..Default::default()
        };
        let mut out = Vec::new();
        generate(&spec).unwrap().write_ground_truth_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "item,group\nitem-00000,0\nitem-00001,1\nitem-00002,0\n");
    }

    #[test]
    fn rejects_invalid_specs() {
        let base = SynthSpec::default();
        assert!(generate(&SynthSpec { n_latent_groups: 201, ..base.clone() }).is_err());
        assert!(generate(&SynthSpec { group_stickiness: 1.1, ..base.clone() }).is_err());
        assert!(generate(&SynthSpec { history_len_range: 0..=3, ..base }).is_err());
    }
}
