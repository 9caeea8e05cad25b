#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqintent_core::data::{Interaction, UserSequence, NUM_ACTION_TYPES, NUM_GENRES};
use seqintent_core::Config;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_interaction(rng: &mut impl Rng, num_items: usize, ts: i64) -> Interaction {
    let mut genres = vec![rng.random_range(0..NUM_GENRES)];
    if rng.random::<bool>() {
        let g = rng.random_range(0..NUM_GENRES);
        if !genres.contains(&g) {
            genres.push(g);
        }
    }
    Interaction {
        item_id: rng.random_range(0..num_items),
        action_type: rng.random_range(0..NUM_ACTION_TYPES),
        genres,
        movie_show: rng.random_range(0..2),
        time_since_release: rng.random_range(0..3),
        timestamp: ts,
        duration: rng.random_range(0.0..20_000.0),
        episode_position: rng.random(),
    }
}

/// Strictly increasing timestamps with gaps between a minute and ten days.
pub fn random_sequence(
    rng: &mut impl Rng,
    user_id: u64,
    len: usize,
    num_items: usize,
) -> UserSequence {
    let mut ts = 1_600_000_000;
    let interactions = (0..len)
        .map(|_| {
            ts += rng.random_range(60..10 * 86_400);
            random_interaction(rng, num_items, ts)
        })
        .collect();
    UserSequence {
        user_id,
        interactions,
    }
}

pub fn random_users(
    seed: u64,
    count: usize,
    len: std::ops::RangeInclusive<usize>,
    num_items: usize,
) -> Vec<UserSequence> {
    let mut r = rng(seed);
    (0..count as u64)
        .map(|u| {
            let n = r.random_range(len.clone());
            random_sequence(&mut r, u, n, num_items)
        })
        .collect()
}

/// Replaces interaction `j` with a different random one at the same time.
pub fn perturb_at(seq: &mut [Interaction], j: usize, rng: &mut impl Rng, num_items: usize) {
    let ts = seq[j].timestamp;
    let mut next = random_interaction(rng, num_items, ts);
    next.item_id = (seq[j].item_id + 1 + rng.random_range(0..num_items - 1)) % num_items;
    seq[j] = next;
}

pub fn max_row_diff(
    a: &seqintent_core::tensor::Tensor,
    b: &seqintent_core::tensor::Tensor,
    rows: usize,
) -> f64 {
    (0..rows)
        .flat_map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

pub fn micro() -> Config {
    Config::micro()
}
