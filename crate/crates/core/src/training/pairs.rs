use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::SequenceSample;

/// Preference pairs within a batch, as `(winner, loser)` indices.
///
/// Samples with at least one valid step are ranked by total reward; the top
/// half is matched against a shuffled bottom half and pairs without a strict
/// reward gap are dropped.
pub fn build_pairs(samples: &[SequenceSample], rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut ranked: Vec<(usize, f64)> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.valid_steps() > 0)
        .map(|(i, s)| (i, s.total_reward()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let half = ranked.len() / 2;
    let top = &ranked[..half];
    let mut bottom: Vec<(usize, f64)> = ranked[ranked.len() - half..].to_vec();
    bottom.shuffle(rng);
    top.iter()
        .zip(&bottom)
        .filter(|(w, l)| w.1 > l.1)
        .map(|(w, l)| (w.0, l.0))
        .collect()
}
