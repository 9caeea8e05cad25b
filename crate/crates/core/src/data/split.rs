use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::UserSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<UserSequence>,
    pub val: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
}

/// Shuffles users with `seed` and cuts them by `ratios` (train, val, test).
///
/// Validation and test sizes are `round(ratio * n)`; train takes the rest.
/// Each part keeps the input order of its users.
pub fn split_dataset(
    sequences: &[UserSequence],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Split> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios ({a}, {b}, {c}) must be in [0, 1] and sum to 1"
        )));
    }
    let n = sequences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((b * n as f64).round() as usize).min(n);
    let n_test = ((c * n as f64).round() as usize).min(n - n_val);
    let mut part = vec![0u8; n];
    for &i in &order[..n_val] {
        part[i] = 1;
    }
    for &i in &order[n_val..n_val + n_test] {
        part[i] = 2;
    }
    let mut split = Split::default();
    for (seq, p) in sequences.iter().zip(part) {
        match p {
            0 => split.train.push(seq.clone()),
            1 => split.val.push(seq.clone()),
            _ => split.test.push(seq.clone()),
        }
    }
    Ok(split)
}
