use super::{Catalog, Corpus, SequenceExample};
use crate::error::{Error, Result};

/// Leave-one-out partition of one user's chronological sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: String,
    pub train: Vec<usize>,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LeaveOneOut {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three interactions.
    pub dropped_users: usize,
}

impl LeaveOneOut {
    pub fn n_train_events(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }

    /// Total events across all three splits.
    pub fn n_events(&self) -> usize {
        self.n_train_events() + 2 * self.users.len()
    }

    /// Validation examples: history is the train prefix.
    pub fn validation_examples(&self, catalog: &Catalog) -> Vec<SequenceExample> {
        self.users
            .iter()
            .map(|u| SequenceExample::new(&u.user, &u.train, u.validation, catalog))
            .collect()
    }

    /// Test examples: history is train plus the validation event.
    pub fn test_examples(&self, catalog: &Catalog) -> Vec<SequenceExample> {
        self.users
            .iter()
            .map(|u| {
                let mut history = u.train.clone();
                history.push(u.validation);
                SequenceExample::new(&u.user, &history, u.test, catalog)
            })
            .collect()
    }

    /// Per-item interaction counts over the train split.
    pub fn train_counts(&self, n_items: usize) -> Vec<u64> {
        let mut counts = vec![0u64; n_items];
        for u in &self.users {
            for &i in &u.train {
                counts[i] += 1;
            }
        }
        counts
    }
}

pub fn split_leave_one_out(corpus: &Corpus) -> Result<LeaveOneOut> {
    if corpus.sequences.is_empty() {
        return Err(Error::EmptyCorpus("no interactions to split".into()));
    }
    let mut out = LeaveOneOut::default();
    for (user, seq) in &corpus.sequences {
        if seq.len() < 3 {
            out.dropped_users += 1;
            continue;
        }
        let n = seq.len();
        out.users.push(UserSplit {
            user: user.clone(),
            train: seq[..n - 2].to_vec(),
            validation: seq[n - 2],
            test: seq[n - 1],
        });
    }
    if out.users.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "all {} users have fewer than 3 interactions",
            out.dropped_users
        )));
    }
    Ok(out)
}
