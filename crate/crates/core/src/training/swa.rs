use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SwaOutcome {
    pub params: Vec<f32>,
    /// Candidate indices merged into the average, in merge order.
    pub kept: Vec<usize>,
    /// Score of each candidate on its own.
    pub candidate_scores: Vec<f64>,
    pub score: f64,
}

/// `avg += (x - avg) / (n + 1)`: the equal-weight mean of `n` merged
/// snapshots and `x`.
pub fn running_average(avg: &[f32], x: &[f32], n: usize) -> Vec<f32> {
    let k = 1.0 / (n as f32 + 1.0);
    avg.iter().zip(x).map(|(&a, &b)| a + (b - a) * k).collect()
}

/// Greedy weight averaging. Starts from the best-scoring candidate and
/// merges the rest in descending score order, keeping a merge only if the
/// score (larger is better) does not drop.
pub fn swa_greedy(candidates: &[Vec<f32>], mut score: impl FnMut(&[f32]) -> Result<f64>) -> Result<SwaOutcome> {
    if candidates.is_empty() {
        return Err(Error::Config("weight averaging needs at least one candidate".into()));
    }
    if candidates.iter().any(|c| c.len() != candidates[0].len()) {
        return Err(Error::Shape("weight averaging candidates differ in size".into()));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| score(c)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut avg = candidates[order[0]].clone();
    let mut best = scores[order[0]];
    let mut kept = vec![order[0]];
    for &i in &order[1..] {
        let trial = running_average(&avg, &candidates[i], kept.len());
        let s = score(&trial)?;
        if s >= best {
            avg = trial;
            best = s;
            kept.push(i);
        }
    }
    Ok(SwaOutcome { params: avg, kept, candidate_scores: scores, score: best })
}
