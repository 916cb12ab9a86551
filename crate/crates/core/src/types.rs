//! Identifiers and the action record shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stream time in integer units (years, seconds, ... ; the decay constant is
/// interpreted per unit).
pub type Timestamp = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// External subscription identifier, as given in the subscriptions file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubscriptionId(pub u64);

impl fmt::Display for SubscriptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Dense internal id of a distinct keyword query. Several external
/// subscriptions with identical keyword sets share one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId(pub u32);

impl QueryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One response event: `influencee` responded at `t_e` to an activity that
/// `influencer` performed at `t_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Action {
    pub influencer: UserId,
    pub influencee: UserId,
    pub t_r: Timestamp,
    pub t_e: Timestamp,
}

impl Action {
    pub fn new(influencer: UserId, influencee: UserId, t_r: Timestamp, t_e: Timestamp) -> Result<Self> {
        let action = Action {
            influencer,
            influencee,
            t_r,
            t_e,
        };
        action.validate()?;
        Ok(action)
    }

    pub fn validate(&self) -> Result<()> {
        if self.influencer == self.influencee {
            return Err(Error::SelfAction(self.influencer.0));
        }
        if self.t_r < 0 || self.t_e < 0 {
            return Err(Error::contract(format!(
                "negative timestamp in action {} -> {}",
                self.influencer, self.influencee
            )));
        }
        Ok(())
    }

    /// The latest of the two timestamps; the stream clock never lags it.
    pub fn latest(&self) -> Timestamp {
        self.t_r.max(self.t_e)
    }
}

/// Sorted-slice intersection of two ascending query sets.
pub fn intersect_sorted(a: &[QueryId], b: &[QueryId]) -> Vec<QueryId> {
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}
