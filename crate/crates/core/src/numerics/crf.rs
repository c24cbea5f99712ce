//! Linear-chain CRF: log-space forward algorithm, marginals and Viterbi decoding.
//!
//! Scores are `sum_k E[k, y_k] + sum_{k>0} A[y_{k-1}, y_k]`; there are no
//! separate start/stop transitions.

use super::{log_sum_exp, Tensor};
use crate::{Error, Result};

fn dims(emissions: &Tensor, transitions: &Tensor) -> Result<(usize, usize)> {
    let (l, t) = (emissions.rows(), emissions.cols());
    if transitions.rows() != t || transitions.cols() != t {
        return Err(Error::shape(
            "crf",
            format!("emissions [{l}x{t}] with transitions {:?}", transitions.shape()),
        ));
    }
    Ok((l, t))
}

fn check_tags(tags: &[usize], l: usize, t: usize) -> Result<()> {
    if tags.len() != l {
        return Err(Error::shape("crf", format!("{} tags for {l} positions", tags.len())));
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= t) {
        return Err(Error::Index {
            what: "crf tag",
            index: bad,
            size: t,
        });
    }
    Ok(())
}

/// Unnormalised score of one tag path.
pub fn path_score(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    let (l, t) = dims(emissions, transitions)?;
    check_tags(tags, l, t)?;
    let mut s = 0.0;
    for (k, &y) in tags.iter().enumerate() {
        s += emissions.get(k, y);
        if k > 0 {
            s += transitions.get(tags[k - 1], y);
        }
    }
    Ok(s)
}

/// Forward log-messages `alpha[k][j]`.
fn forward(emissions: &Tensor, transitions: &Tensor, l: usize, t: usize) -> Vec<Vec<f64>> {
    let mut alpha = vec![emissions.row_slice(0).to_vec()];
    let mut buf = vec![0.0; t];
    for k in 1..l {
        let prev = &alpha[k - 1];
        let next = (0..t)
            .map(|j| {
                for i in 0..t {
                    buf[i] = prev[i] + transitions.get(i, j);
                }
                log_sum_exp(&buf) + emissions.get(k, j)
            })
            .collect();
        alpha.push(next);
    }
    alpha
}

fn backward(emissions: &Tensor, transitions: &Tensor, l: usize, t: usize) -> Vec<Vec<f64>> {
    let mut beta = vec![vec![0.0; t]; l];
    let mut buf = vec![0.0; t];
    for k in (0..l.saturating_sub(1)).rev() {
        for i in 0..t {
            for j in 0..t {
                buf[j] = transitions.get(i, j) + emissions.get(k + 1, j) + beta[k + 1][j];
            }
            beta[k][i] = log_sum_exp(&buf);
        }
    }
    beta
}

pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64> {
    let (l, t) = dims(emissions, transitions)?;
    let alpha = forward(emissions, transitions, l, t);
    Ok(log_sum_exp(&alpha[l - 1]))
}

/// Negative log-likelihood `log Z - score(tags)`, always `>= 0`.
pub fn nll(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    let gold = path_score(emissions, transitions, tags)?;
    let log_z = log_partition(emissions, transitions)?;
    Ok((log_z - gold).max(0.0))
}

/// Gradients of the NLL w.r.t. emissions and transitions: expected counts minus gold counts.
pub(crate) fn marginal_gradients(
    emissions: &Tensor,
    transitions: &Tensor,
    tags: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (l, t) = dims(emissions, transitions)?;
    check_tags(tags, l, t)?;
    let alpha = forward(emissions, transitions, l, t);
    let beta = backward(emissions, transitions, l, t);
    let log_z = log_sum_exp(&alpha[l - 1]);
    let mut unary = vec![0.0; l * t];
    for k in 0..l {
        for j in 0..t {
            unary[k * t + j] = (alpha[k][j] + beta[k][j] - log_z).exp();
        }
        unary[k * t + tags[k]] -= 1.0;
    }
    let mut pairwise = vec![0.0; t * t];
    for k in 1..l {
        for i in 0..t {
            for j in 0..t {
                let lp = alpha[k - 1][i] + transitions.get(i, j) + emissions.get(k, j) + beta[k][j] - log_z;
                pairwise[i * t + j] += lp.exp();
            }
        }
        pairwise[tags[k - 1] * t + tags[k]] -= 1.0;
    }
    Ok((unary, pairwise))
}

/// Highest-scoring tag path. Ties resolve toward the lower tag id.
pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<Vec<usize>> {
    let (l, t) = dims(emissions, transitions)?;
    let mut score = emissions.row_slice(0).to_vec();
    let mut back = vec![vec![0usize; t]; l];
    for k in 1..l {
        let mut next = vec![0.0; t];
        for j in 0..t {
            let mut best = 0;
            let mut best_val = score[0] + transitions.get(0, j);
            for i in 1..t {
                let v = score[i] + transitions.get(i, j);
                if v > best_val {
                    best_val = v;
                    best = i;
                }
            }
            back[k][j] = best;
            next[j] = best_val + emissions.get(k, j);
        }
        score = next;
    }
    let mut last = 0;
    for j in 1..t {
        if score[j] > score[last] {
            last = j;
        }
    }
    let mut path = vec![0; l];
    path[l - 1] = last;
    for k in (1..l).rev() {
        path[k - 1] = back[k][path[k]];
    }
    Ok(path)
}
