//! Synthetic engagement data with planted latent intents.
//!
//! Each user walks a Markov chain over `k_latent` global latent intents. The
//! chain only moves at session boundaries, so a session is a run of
//! interactions sharing one intent. The intent drives the action type, the
//! genre/format/recency of freshly picked items, durations and session gaps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use super::{
    tsr_bucket, Catalog, CatalogItem, Interaction, UserSequence, CORE_ACTION_TYPES, DAY, HOUR,
    MONTH, NUM_ACTION_TYPES, NUM_GENRES, NUM_TSR, WEEK,
};
use crate::data::LatentLabels;
use crate::error::{Error, Result};

/// Fixed reference time for release dates (2023-11-14T22:13:20Z).
pub const CATALOG_ANCHOR_TS: i64 = 1_700_000_000;

const NEW_CONTENT: usize = 0;
const CONTINUE_WATCHING: usize = 1;
const BINGE: usize = 2;
const SAMPLE: usize = 3;
const REWATCH: usize = 4;

/// Dominant action of latent intent `z` is `PRIMARY_ACTIONS[z % 8]`.
const PRIMARY_ACTIONS: [usize; 8] = [
    NEW_CONTENT,
    SAMPLE,
    CONTINUE_WATCHING,
    NEW_CONTENT,
    BINGE,
    SAMPLE,
    NEW_CONTENT,
    REWATCH,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub k_latent: usize,
    pub seed: u64,
    /// Mass each latent intent puts on its primary genre.
    pub genre_focus: f64,
    /// Mass each latent intent puts on its primary action type.
    pub action_focus: f64,
    /// Probability of keeping the current intent across a session boundary.
    pub stickiness: f64,
    /// Mass of a user's personal intent mixture on their home intent.
    pub home_affinity: f64,
    pub session_len_mean: f64,
    pub session_gap_hours: f64,
    /// Train/validation/test fractions of users.
    pub split: [f64; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_items: 500,
            num_users: 2000,
            seq_len_min: 12,
            seq_len_max: 30,
            k_latent: 8,
            seed: 7,
            genre_focus: 0.6,
            action_focus: 0.7,
            stickiness: 0.0,
            home_affinity: 0.4,
            session_len_mean: 8.0,
            session_gap_hours: 720.0,
            split: [0.86, 0.07, 0.07],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_items < 1 {
            return Err(Error::config("num_items must be >= 1"));
        }
        if self.k_latent < 2 {
            return Err(Error::config("k_latent must be >= 2"));
        }
        if self.seq_len_min < 2 || self.seq_len_max < self.seq_len_min {
            return Err(Error::config(format!(
                "sequence length range {}..={} invalid (min >= 2)",
                self.seq_len_min, self.seq_len_max
            )));
        }
        for (name, v) in [
            ("genre_focus", self.genre_focus),
            ("action_focus", self.action_focus),
            ("stickiness", self.stickiness),
            ("home_affinity", self.home_affinity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.session_len_mean < 1.0 || self.session_gap_hours <= 0.0 {
            return Err(Error::config(
                "session_len_mean >= 1 and session_gap_hours > 0",
            ));
        }
        Ok(())
    }
}

/// Emission parameters of one latent intent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentIntent {
    pub action: Vec<f64>,
    pub genre: Vec<f64>,
    /// Probability that a fresh pick is a movie.
    pub movie_prob: f64,
    pub recency: Vec<f64>,
    pub duration_mu: f64,
    pub duration_sigma: f64,
    /// Multiplier on the mean gap between sessions.
    pub gap_scale: f64,
}

/// Per-user chain over the latent intents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentProfile {
    pub home: usize,
    pub mixture: Vec<f64>,
    /// Row-stochastic; row `i` is the next-session distribution from intent `i`.
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedUsers {
    pub sequences: Vec<UserSequence>,
    pub latent: Vec<LatentLabels>,
    pub intents: Vec<LatentIntent>,
    pub profiles: Vec<IntentProfile>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Deterministic catalog: 1-3 genres per item, ~40% movies, releases spread
/// over three years before [`CATALOG_ANCHOR_TS`].
///
/// Items `i % 50 == 0` are released within a week of the anchor and items
/// `i % 50 == 1` within a month, so every recency bucket is populated.
pub fn generate_catalog(num_items: usize, seed: u64) -> Result<Catalog> {
    if num_items < 1 {
        return Err(Error::config("num_items must be >= 1"));
    }
    let mut rng = rng_for(seed, u64::MAX);
    let mut primaries: Vec<usize> = (0..num_items).map(|i| i % NUM_GENRES).collect();
    primaries.shuffle(&mut rng);
    let items = (0..num_items)
        .map(|i| {
            let mut genres = vec![primaries[i]];
            let extra = sample_index(&mut rng, &[0.5, 0.35, 0.15]);
            while genres.len() < 1 + extra {
                let g = rng.random_range(0..NUM_GENRES);
                if !genres.contains(&g) {
                    genres.push(g);
                }
            }
            let movie_show = usize::from(rng.random::<f64>() < 0.4);
            let age = match i % 50 {
                0 => rng.random_range(0..WEEK),
                1 => rng.random_range(WEEK + 1..MONTH),
                _ if rng.random::<f64>() < 0.5 => rng.random_range(0..240 * DAY),
                _ => rng.random_range(240 * DAY..3 * 365 * DAY),
            };
            CatalogItem {
                item_id: i,
                genres,
                movie_show,
                release_ts: CATALOG_ANCHOR_TS - age,
            }
        })
        .collect();
    Ok(Catalog {
        anchor_ts: CATALOG_ANCHOR_TS,
        items,
    })
}

fn build_intents(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<LatentIntent> {
    let k = cfg.k_latent;
    let mut genre_order: Vec<usize> = (0..NUM_GENRES).collect();
    genre_order.shuffle(rng);
    let recency_styles = [[0.6, 0.3, 0.1], [0.05, 0.15, 0.8], [0.25, 0.35, 0.4]];
    (0..k)
        .map(|z| {
            let primary_action = PRIMARY_ACTIONS[z % PRIMARY_ACTIONS.len()];
            let rest = 1.0 - cfg.action_focus;
            let mut action = vec![0.0; NUM_ACTION_TYPES];
            for (a, p) in action.iter_mut().enumerate() {
                let core = CORE_ACTION_TYPES.contains(&a);
                *p = if core {
                    rest * 0.7 / (CORE_ACTION_TYPES.len() - 1) as f64
                } else {
                    rest * 0.3 / (NUM_ACTION_TYPES - CORE_ACTION_TYPES.len()) as f64
                };
            }
            action[primary_action] = cfg.action_focus;

            // Intents come in pairs sharing a primary genre; the pair differs in
            // format, dominant action and recency taste.
            let primary_genre = genre_order[(z / 2) % NUM_GENRES];
            let mut secondary = Vec::new();
            while secondary.len() < 2 {
                let g = rng.random_range(0..NUM_GENRES);
                if g != primary_genre && !secondary.contains(&g) {
                    secondary.push(g);
                }
            }
            let rest = 1.0 - cfg.genre_focus;
            let mut genre = vec![rest * 0.3 / NUM_GENRES as f64; NUM_GENRES];
            genre[primary_genre] += cfg.genre_focus;
            genre[secondary[0]] += rest * 0.42;
            genre[secondary[1]] += rest * 0.28;

            LatentIntent {
                action,
                genre,
                movie_prob: if z % 2 == 0 { 0.8 } else { 0.15 },
                recency: recency_styles[z % recency_styles.len()].to_vec(),
                duration_mu: rng.random_range(6.0..8.0),
                duration_sigma: 0.5,
                gap_scale: rng.random_range(0.5..1.5),
            }
        })
        .collect()
}

fn build_profile(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> IntentProfile {
    let k = cfg.k_latent;
    let home = rng.random_range(0..k);
    let mut mixture = vec![0.0; k];
    mixture[home] = cfg.home_affinity;
    let mut others: Vec<usize> = (0..k).filter(|&z| z != home).collect();
    others.shuffle(rng);
    let rest = 1.0 - cfg.home_affinity;
    if others.len() == 1 {
        mixture[others[0]] += rest;
    } else {
        mixture[others[0]] += rest * 0.6;
        mixture[others[1]] += rest * 0.4;
    }
    let transition = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    cfg.stickiness * f64::from(u8::from(i == j))
                        + (1.0 - cfg.stickiness) * mixture[j]
                })
                .collect()
        })
        .collect();
    IntentProfile {
        home,
        mixture,
        transition,
    }
}

struct ItemIndex<'a> {
    catalog: &'a Catalog,
    by_genre: Vec<Vec<usize>>,
    popularity: Vec<f64>,
}

impl<'a> ItemIndex<'a> {
    fn new(catalog: &'a Catalog, rng: &mut ChaCha8Rng) -> Self {
        let mut by_genre = vec![Vec::new(); NUM_GENRES];
        for item in &catalog.items {
            for &g in &item.genres {
                by_genre[g].push(item.item_id);
            }
        }
        let mut rank: Vec<usize> = (0..catalog.len()).collect();
        rank.shuffle(rng);
        let popularity = rank
            .iter()
            .map(|&r| 1.0 / (1.0 + r as f64).powf(0.6))
            .collect();
        Self {
            catalog,
            by_genre,
            popularity,
        }
    }

    /// Popularity-weighted fresh pick honoring as many preferences as the
    /// catalog allows; recency is relaxed first, then format, then novelty.
    #[allow(clippy::too_many_arguments)]
    fn pick(
        &self,
        rng: &mut ChaCha8Rng,
        genre: usize,
        movie_show: usize,
        recency: usize,
        ts: i64,
        seen: &[usize],
    ) -> usize {
        let released = |id: usize| self.catalog.items[id].release_ts <= ts;
        let attempts: [(bool, bool, bool); 4] = [
            (true, true, true),
            (false, true, true),
            (false, false, true),
            (false, false, false),
        ];
        for (want_recency, want_format, want_fresh) in attempts {
            let cands: Vec<usize> = self.by_genre[genre]
                .iter()
                .copied()
                .filter(|&id| {
                    let item = &self.catalog.items[id];
                    released(id)
                        && (!want_recency || tsr_bucket(ts - item.release_ts) == recency)
                        && (!want_format || item.movie_show == movie_show)
                        && (!want_fresh || !seen.contains(&id))
                })
                .collect();
            if !cands.is_empty() {
                let w: Vec<f64> = cands.iter().map(|&id| self.popularity[id]).collect();
                return cands[sample_index(rng, &w)];
            }
        }
        let any: Vec<usize> = (0..self.catalog.len()).filter(|&id| released(id)).collect();
        if any.is_empty() {
            return rng.random_range(0..self.catalog.len());
        }
        let w: Vec<f64> = any.iter().map(|&id| self.popularity[id]).collect();
        any[sample_index(rng, &w)]
    }
}

/// Samples `num_users` sequences from the planted-intent process. The latent
/// labels are returned for analysis only.
pub fn generate_users(catalog: &Catalog, cfg: &GeneratorConfig) -> Result<GeneratedUsers> {
    cfg.validate()?;
    if catalog.is_empty() {
        return Err(Error::config("catalog is empty"));
    }
    let mut global = rng_for(cfg.seed, 0);
    let intents = build_intents(cfg, &mut global);
    let index = ItemIndex::new(catalog, &mut global);

    let mut sequences = Vec::with_capacity(cfg.num_users);
    let mut latent = Vec::with_capacity(cfg.num_users);
    let mut profiles = Vec::with_capacity(cfg.num_users);
    for user in 0..cfg.num_users as u64 {
        let mut rng = rng_for(cfg.seed, user + 1);
        let profile = build_profile(cfg, &mut rng);
        let (seq, states) = simulate_user(user, cfg, &profile, &intents, &index, &mut rng);
        sequences.push(seq);
        latent.push(LatentLabels {
            user_id: user,
            latent: states,
        });
        profiles.push(profile);
    }
    Ok(GeneratedUsers {
        sequences,
        latent,
        intents,
        profiles,
    })
}

fn simulate_user(
    user_id: u64,
    cfg: &GeneratorConfig,
    profile: &IntentProfile,
    intents: &[LatentIntent],
    index: &ItemIndex<'_>,
    rng: &mut ChaCha8Rng,
) -> (UserSequence, Vec<usize>) {
    let len = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
    let mut ts = CATALOG_ANCHOR_TS - rng.random_range(100 * DAY..250 * DAY);
    let mut state = sample_index(rng, &profile.mixture);
    let mut left_in_session = session_length(rng, cfg.session_len_mean);
    let mut interactions: Vec<Interaction> = Vec::with_capacity(len);
    let mut states = Vec::with_capacity(len);
    let mut seen: Vec<usize> = Vec::with_capacity(len);

    for k in 0..len {
        if k > 0 {
            if left_in_session == 0 {
                state = sample_index(rng, &profile.transition[state]);
                left_in_session = session_length(rng, cfg.session_len_mean);
                let mean = cfg.session_gap_hours * intents[state].gap_scale * HOUR as f64;
                let gap = Exp::new(1.0 / mean).expect("positive rate").sample(rng);
                ts += DAY + gap as i64;
            } else {
                let prev = interactions.last().expect("k > 0");
                ts += prev.duration as i64 + rng.random_range(30..600);
            }
        }
        left_in_session = left_in_session.saturating_sub(1);
        let intent = &intents[state];
        let action = sample_index(rng, &intent.action);

        let repeat = match action {
            CONTINUE_WATCHING => seen
                .iter()
                .rev()
                .copied()
                .find(|&id| index.catalog.items[id].movie_show == 0),
            BINGE => interactions
                .last()
                .filter(|p| p.movie_show == 0)
                .map(|p| p.item_id),
            REWATCH if !seen.is_empty() => Some(seen[rng.random_range(0..seen.len())]),
            _ => None,
        };
        let item_id = repeat.unwrap_or_else(|| {
            let genre = sample_index(rng, &intent.genre);
            let movie_show = usize::from(rng.random::<f64>() < intent.movie_prob);
            let recency = sample_index(rng, &intent.recency[..NUM_TSR]);
            index.pick(rng, genre, movie_show, recency, ts, &seen)
        });
        let item = &index.catalog.items[item_id];

        let mut duration = LogNormal::new(intent.duration_mu, intent.duration_sigma)
            .expect("valid lognormal")
            .sample(rng);
        if item.movie_show == 1 {
            duration *= 2.0;
        }
        if action == SAMPLE {
            duration *= 0.3;
        } else if !CORE_ACTION_TYPES.contains(&action) {
            duration *= 0.05;
        }
        let episode_position = if item.movie_show == 0 {
            rng.random::<f64>()
        } else {
            0.0
        };

        interactions.push(Interaction {
            item_id,
            action_type: action,
            genres: item.genres.clone(),
            movie_show: item.movie_show,
            time_since_release: tsr_bucket(ts - item.release_ts),
            timestamp: ts,
            duration: duration.round().max(0.0),
            episode_position,
        });
        states.push(state);
        if !seen.contains(&item_id) {
            seen.push(item_id);
        }
    }
    (
        UserSequence {
            user_id,
            interactions,
        },
        states,
    )
}

fn session_length(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    // geometric on {1, 2, ...} with the given mean
    let p = 1.0 / mean;
    let mut n = 1;
    while rng.random::<f64>() > p && n < 50 {
        n += 1;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            num_items: 120,
            num_users: 60,
            seq_len_min: 5,
            seq_len_max: 20,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn catalog_is_deterministic() {
        assert_eq!(
            generate_catalog(10, 7).unwrap(),
            generate_catalog(10, 7).unwrap()
        );
        assert_ne!(
            generate_catalog(10, 7).unwrap(),
            generate_catalog(10, 8).unwrap()
        );
        assert!(generate_catalog(0, 7).is_err());
    }

    #[test]
    fn catalog_populates_every_recency_bucket() {
        for n in [100, 137, 500] {
            let cat = generate_catalog(n, 3).unwrap();
            cat.validate().unwrap();
            let mut counts = [0usize; NUM_TSR];
            for item in &cat.items {
                counts[tsr_bucket(cat.anchor_ts - item.release_ts)] += 1;
            }
            assert!(counts.iter().all(|&c| c > 0), "{n}: {counts:?}");
        }
    }

    #[test]
    fn users_are_deterministic_and_valid() {
        let cfg = small_cfg();
        let cat = generate_catalog(cfg.num_items, cfg.seed).unwrap();
        let a = generate_users(&cat, &cfg).unwrap();
        let b = generate_users(&cat, &cfg).unwrap();
        assert_eq!(a, b);
        for (seq, lat) in a.sequences.iter().zip(&a.latent) {
            seq.validate(Some(cfg.num_items)).unwrap();
            assert_eq!(seq.len(), lat.latent.len());
            assert!((cfg.seq_len_min..=cfg.seq_len_max).contains(&seq.len()));
        }
    }

    #[test]
    fn profiles_are_stochastic() {
        let cfg = small_cfg();
        let cat = generate_catalog(cfg.num_items, cfg.seed).unwrap();
        let out = generate_users(&cat, &cfg).unwrap();
        for p in &out.profiles {
            assert!((p.mixture.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for row in &p.transition {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        for z in &out.intents {
            assert!((z.action.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((z.genre.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((z.recency.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn core_actions_dominate() {
        let cfg = small_cfg();
        let cat = generate_catalog(cfg.num_items, cfg.seed).unwrap();
        let out = generate_users(&cat, &cfg).unwrap();
        let (mut core, mut total) = (0, 0);
        for it in out.sequences.iter().flat_map(|s| &s.interactions) {
            total += 1;
            core += usize::from(CORE_ACTION_TYPES.contains(&it.action_type));
        }
        assert!(core as f64 >= 0.7 * total as f64, "{core}/{total}");
    }

    #[test]
    fn empty_catalog_is_rejected() {
        let cat = Catalog {
            anchor_ts: 0,
            items: vec![],
        };
        assert!(generate_users(&cat, &small_cfg()).is_err());
        let cfg = GeneratorConfig {
            k_latent: 1,
            ..small_cfg()
        };
        let cat = generate_catalog(10, 1).unwrap();
        assert!(generate_users(&cat, &cfg).is_err());
    }
}
