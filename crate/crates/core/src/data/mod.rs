//! Engagement records, the synthetic generator and JSONL persistence.

mod generator;
mod io;
mod split;

pub use generator::{
    generate_catalog, generate_users, GeneratedUsers, GeneratorConfig, IntentProfile, LatentIntent,
    CATALOG_ANCHOR_TS,
};
pub use io::{
    latent_path, read_catalog, read_jsonl, read_latent_jsonl, write_catalog, write_jsonl,
    write_latent_jsonl, LatentLabels,
};
pub use split::{split_dataset, Split};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTION_TYPES: usize = 11;
pub const NUM_GENRES: usize = 21;
pub const NUM_MOVIE_SHOW: usize = 2;
pub const NUM_TSR: usize = 3;
/// Play-related action types; evaluation of the action head is restricted to these.
pub const CORE_ACTION_TYPES: [usize; 5] = [0, 1, 2, 3, 4];
pub const MAX_GENRES_PER_ITEM: usize = 3;

pub const HOUR: i64 = 3600;
pub const DAY: i64 = 24 * HOUR;
pub const WEEK: i64 = 7 * DAY;
pub const MONTH: i64 = 30 * DAY;

/// Recency bucket of an item at engagement time:
/// 0 = released within a week, 1 = within a month, 2 = older.
pub fn tsr_bucket(age_secs: i64) -> usize {
    if age_secs <= WEEK {
        0
    } else if age_secs <= MONTH {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub item_id: usize,
    pub action_type: usize,
    pub genres: Vec<usize>,
    pub movie_show: usize,
    #[serde(rename = "tsr")]
    pub time_since_release: usize,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    #[serde(rename = "dur")]
    pub duration: f64,
    #[serde(rename = "ep")]
    pub episode_position: f64,
}

impl Interaction {
    /// Checks the categorical cardinalities and numeric ranges.
    pub fn validate(&self, num_items: Option<usize>) -> Result<()> {
        if let Some(n) = num_items {
            if self.item_id >= n {
                return Err(Error::validation(
                    "item_id",
                    format!("{} not in [0, {n})", self.item_id),
                ));
            }
        }
        check_range("action_type", self.action_type, NUM_ACTION_TYPES)?;
        check_range("movie_show", self.movie_show, NUM_MOVIE_SHOW)?;
        check_range("tsr", self.time_since_release, NUM_TSR)?;
        if self.genres.is_empty() || self.genres.len() > MAX_GENRES_PER_ITEM {
            return Err(Error::validation(
                "genres",
                format!(
                    "expected 1..={MAX_GENRES_PER_ITEM} labels, got {}",
                    self.genres.len()
                ),
            ));
        }
        for &g in &self.genres {
            check_range("genres", g, NUM_GENRES)?;
        }
        let mut sorted = self.genres.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.genres.len() {
            return Err(Error::validation("genres", "duplicate genre label"));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(Error::validation(
                "dur",
                format!("{} must be finite and >= 0", self.duration),
            ));
        }
        if !(0.0..=1.0).contains(&self.episode_position) {
            return Err(Error::validation(
                "ep",
                format!("{} not in [0, 1]", self.episode_position),
            ));
        }
        Ok(())
    }
}

fn check_range(field: &str, value: usize, card: usize) -> Result<()> {
    if value >= card {
        return Err(Error::validation(
            field,
            format!("{value} not in [0, {card})"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: u64,
    pub interactions: Vec<Interaction>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.interactions.iter().map(|i| i.timestamp).collect()
    }

    pub fn validate(&self, num_items: Option<usize>) -> Result<()> {
        if self.interactions.len() < 2 {
            return Err(Error::validation(
                "interactions",
                format!(
                    "user {} has {} interactions, need >= 2",
                    self.user_id,
                    self.interactions.len()
                ),
            ));
        }
        for it in &self.interactions {
            it.validate(num_items)?;
        }
        if let Some(w) = self
            .interactions
            .windows(2)
            .find(|w| w[1].timestamp <= w[0].timestamp)
        {
            return Err(Error::validation(
                "ts",
                format!(
                    "timestamps must strictly increase ({} then {})",
                    w[0].timestamp, w[1].timestamp
                ),
            ));
        }
        Ok(())
    }

    /// The latest `max_len` interactions.
    pub fn truncated(&self, max_len: usize) -> &[Interaction] {
        let n = self.interactions.len();
        &self.interactions[n.saturating_sub(max_len)..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: usize,
    pub genres: Vec<usize>,
    pub movie_show: usize,
    pub release_ts: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    /// Reference time the release dates were generated against.
    pub anchor_ts: i64,
    pub items: Vec<CatalogItem>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.item_id != i {
                return Err(Error::validation(
                    "item_id",
                    format!("catalog ids must be dense, found {} at {i}", item.item_id),
                ));
            }
            check_range("movie_show", item.movie_show, NUM_MOVIE_SHOW)?;
            if item.genres.is_empty() || item.genres.len() > MAX_GENRES_PER_ITEM {
                return Err(Error::validation("genres", "items carry 1..=3 genres"));
            }
            for &g in &item.genres {
                check_range("genres", g, NUM_GENRES)?;
            }
        }
        Ok(())
    }
}
