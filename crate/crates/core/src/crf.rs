//! Linear-chain CRF output layer: scoring, exact log-partition, NLL
//! gradients via forward-backward, Viterbi decoding and scheme-derived
//! transition constraints.
//!
//! All dynamic programs run in 64-bit log space regardless of the model's
//! parameter precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SchemeKind, TagScheme};

/// Additive penalty used when constraining transitions softly during
/// training.
pub const SOFT_MASK_PENALTY: f64 = -1e4;
const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("gold tag id {0} outside alphabet of size {1}")]
    TagOutsideAlphabet(usize, usize),
    #[error("representation length {got} does not match input_dim {want}")]
    DimMismatch { got: usize, want: usize },
}

pub type Result<T> = std::result::Result<T, CrfError>;

/// Emission projection plus transition/boundary scores, stored in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub input_dim: usize,
    pub num_tags: usize,
    /// Emission weight matrix, `w[i * num_tags + y]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Transition scores, `trans[prev * num_tags + next]`.
    pub trans: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfParams {
    pub fn zeros(input_dim: usize, num_tags: usize) -> Self {
        CrfParams {
            input_dim,
            num_tags,
            w: vec![0.0; input_dim * num_tags],
            b: vec![0.0; num_tags],
            trans: vec![0.0; num_tags * num_tags],
            start: vec![0.0; num_tags],
            end: vec![0.0; num_tags],
        }
    }
}

/// Gradients of the NLL with respect to every CRF parameter tensor plus the
/// upstream representations.
#[derive(Debug, Clone)]
pub struct CrfGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub trans: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// `[n * input_dim]` gradient flowing back into the encoder.
    pub reps: Vec<f64>,
}

/// Boolean transition constraints derived from a tag scheme. By
/// construction at least one valid path exists for every length (`O -> O`).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMask {
    pub num_tags: usize,
    pub allowed: Vec<bool>,
    pub allowed_start: Vec<bool>,
    pub allowed_end: Vec<bool>,
}

impl TransitionMask {
    #[inline]
    pub fn transition(&self, prev: usize, next: usize) -> bool {
        self.allowed[prev * self.num_tags + next]
    }

    /// Whether a full tag-id sequence is accepted.
    pub fn accepts(&self, tags: &[usize]) -> bool {
        if tags.is_empty() {
            return false;
        }
        self.allowed_start[tags[0]]
            && self.allowed_end[*tags.last().unwrap()]
            && tags.windows(2).all(|p| self.transition(p[0], p[1]))
    }
}

/// Scheme-derived constraints over the deterministic tag alphabet of
/// [`TagScheme::alphabet`].
pub fn build_transition_mask(scheme: &TagScheme) -> TransitionMask {
    let alphabet = scheme.alphabet();
    let y = alphabet.len();
    let prefix_of = |tag: &str| -> (char, String) {
        match tag.split_once('-') {
            Some((p, l)) => (p.chars().next().unwrap(), l.to_string()),
            None => ('O', String::new()),
        }
    };
    let mut mask = TransitionMask {
        num_tags: y,
        allowed: vec![false; y * y],
        allowed_start: vec![false; y],
        allowed_end: vec![false; y],
    };
    for (i, tag) in alphabet.iter().enumerate() {
        let (p, _) = prefix_of(tag);
        mask.allowed_start[i] = matches!(p, 'O' | 'B' | 'S');
        mask.allowed_end[i] = match scheme.kind {
            SchemeKind::Biose => matches!(p, 'O' | 'E' | 'S'),
            SchemeKind::Bio => true,
        };
    }
    for (i, from) in alphabet.iter().enumerate() {
        let (fp, fl) = prefix_of(from);
        for (j, to) in alphabet.iter().enumerate() {
            let (tp, tl) = prefix_of(to);
            let ok = match (scheme.kind, fp) {
                // Inside a chunk only its continuation or end may follow.
                (SchemeKind::Biose, 'B') | (SchemeKind::Biose, 'I') => {
                    matches!(tp, 'I' | 'E') && fl == tl
                }
                (SchemeKind::Biose, _) => matches!(tp, 'O' | 'B' | 'S'),
                (SchemeKind::Bio, 'B') | (SchemeKind::Bio, 'I') => {
                    matches!(tp, 'O' | 'B') || (tp == 'I' && fl == tl)
                }
                (SchemeKind::Bio, _) => matches!(tp, 'O' | 'B'),
            };
            mask.allowed[i * y + j] = ok;
        }
    }
    mask
}

/// Affine emission scores, `[n x num_tags]`.
pub fn emissions(params: &CrfParams, reps: &[f64]) -> Result<Vec<f64>> {
    let d = params.input_dim;
    let y = params.num_tags;
    if reps.len() % d != 0 {
        return Err(CrfError::DimMismatch {
            got: reps.len(),
            want: d,
        });
    }
    let n = reps.len() / d;
    let mut em = vec![0.0; n * y];
    for t in 0..n {
        for tag in 0..y {
            let mut acc = params.b[tag];
            for i in 0..d {
                acc += reps[t * d + i] * params.w[i * y + tag];
            }
            em[t * y + tag] = acc;
        }
    }
    Ok(em)
}

/// Score of one tag path: start + emissions + transitions + end.
pub fn path_score(params: &CrfParams, em: &[f64], tags: &[usize]) -> Result<f64> {
    let y = params.num_tags;
    let n = tags.len();
    if n == 0 {
        return Err(CrfError::EmptySequence);
    }
    for &t in tags {
        if t >= y {
            return Err(CrfError::TagOutsideAlphabet(t, y));
        }
    }
    let mut score = params.start[tags[0]] + params.end[tags[n - 1]];
    for (t, &tag) in tags.iter().enumerate() {
        score += em[t * y + tag];
    }
    for pair in tags.windows(2) {
        score += params.trans[pair[0] * y + pair[1]];
    }
    Ok(score)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
fn trans_score(params: &CrfParams, mask: Option<&TransitionMask>, prev: usize, next: usize) -> f64 {
    let base = params.trans[prev * params.num_tags + next];
    match mask {
        Some(m) if !m.transition(prev, next) => base + SOFT_MASK_PENALTY,
        _ => base,
    }
}

#[inline]
fn boundary_score(base: f64, allowed: bool, mask_active: bool) -> f64 {
    if mask_active && !allowed {
        base + SOFT_MASK_PENALTY
    } else {
        base
    }
}

/// Log of the summed exponentiated path scores, by forward recursion in log
/// space. A mask, when given, is applied softly (additive penalty), which
/// keeps the partition finite and differentiable.
pub fn log_partition(params: &CrfParams, em: &[f64], mask: Option<&TransitionMask>) -> Result<f64> {
    let y = params.num_tags;
    if em.is_empty() {
        return Err(CrfError::EmptySequence);
    }
    let n = em.len() / y;
    let mut alpha: Vec<f64> = (0..y)
        .map(|tag| {
            boundary_score(params.start[tag], mask.map_or(true, |m| m.allowed_start[tag]), mask.is_some())
                + em[tag]
        })
        .collect();
    let mut scratch = vec![0.0; y];
    for t in 1..n {
        let mut next = vec![0.0; y];
        for tag in 0..y {
            for (prev, s) in scratch.iter_mut().enumerate() {
                *s = alpha[prev] + trans_score(params, mask, prev, tag);
            }
            next[tag] = log_sum_exp(&scratch) + em[t * y + tag];
        }
        alpha = next;
    }
    for (tag, a) in alpha.iter_mut().enumerate() {
        *a += boundary_score(params.end[tag], mask.map_or(true, |m| m.allowed_end[tag]), mask.is_some());
    }
    Ok(log_sum_exp(&alpha))
}

/// NLL of the gold path plus exact gradients from forward-backward
/// marginals.
pub fn nll_and_grads(
    params: &CrfParams,
    reps: &[f64],
    gold: &[usize],
    mask: Option<&TransitionMask>,
) -> Result<(f64, CrfGrads)> {
    let d = params.input_dim;
    let y = params.num_tags;
    let n = gold.len();
    if n == 0 {
        return Err(CrfError::EmptySequence);
    }
    for &t in gold {
        if t >= y {
            return Err(CrfError::TagOutsideAlphabet(t, y));
        }
    }
    let em = emissions(params, reps)?;
    if em.len() != n * y {
        return Err(CrfError::DimMismatch {
            got: em.len() / y,
            want: n,
        });
    }

    let start_scores: Vec<f64> = (0..y)
        .map(|t| boundary_score(params.start[t], mask.map_or(true, |m| m.allowed_start[t]), mask.is_some()))
        .collect();
    let end_scores: Vec<f64> = (0..y)
        .map(|t| boundary_score(params.end[t], mask.map_or(true, |m| m.allowed_end[t]), mask.is_some()))
        .collect();

    // Forward and backward tables in log space.
    let mut alpha = vec![NEG_INF; n * y];
    for t in 0..y {
        alpha[t] = start_scores[t] + em[t];
    }
    let mut scratch = vec![0.0; y];
    for t in 1..n {
        for tag in 0..y {
            for (prev, s) in scratch.iter_mut().enumerate() {
                *s = alpha[(t - 1) * y + prev] + trans_score(params, mask, prev, tag);
            }
            alpha[t * y + tag] = log_sum_exp(&scratch) + em[t * y + tag];
        }
    }
    let mut beta = vec![NEG_INF; n * y];
    for tag in 0..y {
        beta[(n - 1) * y + tag] = end_scores[tag];
    }
    for t in (0..n - 1).rev() {
        for tag in 0..y {
            for (next, s) in scratch.iter_mut().enumerate() {
                *s = trans_score(params, mask, tag, next)
                    + em[(t + 1) * y + next]
                    + beta[(t + 1) * y + next];
            }
            beta[t * y + tag] = log_sum_exp(&scratch);
        }
    }
    let log_z = log_sum_exp(
        &(0..y)
            .map(|tag| alpha[(n - 1) * y + tag] + end_scores[tag])
            .collect::<Vec<f64>>(),
    );
    let gold_score = {
        let mut score = params.start[gold[0]] + params.end[gold[n - 1]];
        if let Some(m) = mask {
            if !m.allowed_start[gold[0]] {
                score += SOFT_MASK_PENALTY;
            }
            if !m.allowed_end[gold[n - 1]] {
                score += SOFT_MASK_PENALTY;
            }
        }
        for (t, &tag) in gold.iter().enumerate() {
            score += em[t * y + tag];
        }
        for pair in gold.windows(2) {
            score += trans_score(params, mask, pair[0], pair[1]);
        }
        score
    };
    let nll = log_z - gold_score;

    // d nll / d emissions = unary marginals minus the gold one-hot.
    let mut d_em = vec![0.0; n * y];
    for t in 0..n {
        for tag in 0..y {
            d_em[t * y + tag] = (alpha[t * y + tag] + beta[t * y + tag] - log_z).exp();
        }
        d_em[t * y + gold[t]] -= 1.0;
    }

    let mut grads = CrfGrads {
        w: vec![0.0; d * y],
        b: vec![0.0; y],
        trans: vec![0.0; y * y],
        start: vec![0.0; y],
        end: vec![0.0; y],
        reps: vec![0.0; n * d],
    };
    for t in 0..n {
        for tag in 0..y {
            let g = d_em[t * y + tag];
            grads.b[tag] += g;
            for i in 0..d {
                grads.w[i * y + tag] += reps[t * d + i] * g;
                grads.reps[t * d + i] += g * params.w[i * y + tag];
            }
        }
    }
    // Pairwise marginals for the transition gradient.
    for t in 0..n - 1 {
        for prev in 0..y {
            for next in 0..y {
                let lp = alpha[t * y + prev]
                    + trans_score(params, mask, prev, next)
                    + em[(t + 1) * y + next]
                    + beta[(t + 1) * y + next]
                    - log_z;
                grads.trans[prev * y + next] += lp.exp();
            }
        }
    }
    for pair in gold.windows(2) {
        grads.trans[pair[0] * y + pair[1]] -= 1.0;
    }
    for tag in 0..y {
        grads.start[tag] = (alpha[tag] + beta[tag] - log_z).exp();
        grads.end[tag] = (alpha[(n - 1) * y + tag] + beta[(n - 1) * y + tag] - log_z).exp();
    }
    grads.start[gold[0]] -= 1.0;
    grads.end[gold[n - 1]] -= 1.0;
    Ok((nll, grads))
}

/// Unary marginals `p(y_t = tag)`, `[n x num_tags]`. Used by tests and the
/// softmax ablation diagnostics.
pub fn marginals(params: &CrfParams, em: &[f64], mask: Option<&TransitionMask>) -> Result<Vec<f64>> {
    let y = params.num_tags;
    let n = em.len() / y;
    if n == 0 {
        return Err(CrfError::EmptySequence);
    }
    let mut d = vec![0.0; n * y];
    let em_owned = em.to_vec();
    let start_scores: Vec<f64> = (0..y)
        .map(|t| boundary_score(params.start[t], mask.map_or(true, |m| m.allowed_start[t]), mask.is_some()))
        .collect();
    let end_scores: Vec<f64> = (0..y)
        .map(|t| boundary_score(params.end[t], mask.map_or(true, |m| m.allowed_end[t]), mask.is_some()))
        .collect();
    let mut alpha = vec![NEG_INF; n * y];
    for t in 0..y {
        alpha[t] = start_scores[t] + em_owned[t];
    }
    let mut scratch = vec![0.0; y];
    for t in 1..n {
        for tag in 0..y {
            for (prev, s) in scratch.iter_mut().enumerate() {
                *s = alpha[(t - 1) * y + prev] + trans_score(params, mask, prev, tag);
            }
            alpha[t * y + tag] = log_sum_exp(&scratch) + em_owned[t * y + tag];
        }
    }
    let mut beta = vec![NEG_INF; n * y];
    for tag in 0..y {
        beta[(n - 1) * y + tag] = end_scores[tag];
    }
    for t in (0..n - 1).rev() {
        for tag in 0..y {
            for (next, s) in scratch.iter_mut().enumerate() {
                *s = trans_score(params, mask, tag, next)
                    + em_owned[(t + 1) * y + next]
                    + beta[(t + 1) * y + next];
            }
            beta[t * y + tag] = log_sum_exp(&scratch);
        }
    }
    let log_z = log_sum_exp(
        &(0..y)
            .map(|tag| alpha[(n - 1) * y + tag] + end_scores[tag])
            .collect::<Vec<f64>>(),
    );
    for t in 0..n {
        for tag in 0..y {
            d[t * y + tag] = (alpha[t * y + tag] + beta[t * y + tag] - log_z).exp();
        }
    }
    Ok(d)
}

/// Maximum-scoring tag sequence. With a mask, disallowed transitions are
/// excluded entirely. Ties break towards the lowest tag index at every
/// backpointer decision.
pub fn viterbi(params: &CrfParams, em: &[f64], mask: Option<&TransitionMask>) -> Result<Vec<usize>> {
    let y = params.num_tags;
    if em.is_empty() {
        return Err(CrfError::EmptySequence);
    }
    let n = em.len() / y;
    let mut delta: Vec<f64> = (0..y)
        .map(|tag| {
            if mask.map_or(true, |m| m.allowed_start[tag]) {
                params.start[tag] + em[tag]
            } else {
                NEG_INF
            }
        })
        .collect();
    let mut backptr = vec![0usize; n * y];
    for t in 1..n {
        let mut next = vec![NEG_INF; y];
        for tag in 0..y {
            let mut best = NEG_INF;
            let mut best_prev = 0usize;
            for prev in 0..y {
                if mask.map_or(true, |m| m.transition(prev, tag)) {
                    let score = delta[prev] + params.trans[prev * y + tag];
                    if score > best {
                        best = score;
                        best_prev = prev;
                    }
                }
            }
            next[tag] = best + em[t * y + tag];
            backptr[t * y + tag] = best_prev;
        }
        delta = next;
    }
    let mut best = NEG_INF;
    let mut best_tag = 0usize;
    for tag in 0..y {
        if mask.map_or(true, |m| m.allowed_end[tag]) {
            let score = delta[tag] + params.end[tag];
            if score > best {
                best = score;
                best_tag = tag;
            }
        }
    }
    let mut tags = vec![0usize; n];
    tags[n - 1] = best_tag;
    for t in (1..n).rev() {
        tags[t - 1] = backptr[t * y + tags[t]];
    }
    Ok(tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SchemeKind, TagScheme};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    // Independent oracle: exhaustive enumeration over all |Y|^n paths.
    fn enumerate_paths(n: usize, y: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![vec![]];
        for _ in 0..n {
            let mut next = Vec::new();
            for p in &paths {
                for tag in 0..y {
                    let mut q = p.clone();
                    q.push(tag);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths
    }

    fn brute_log_z(params: &CrfParams, em: &[f64], n: usize) -> f64 {
        let scores: Vec<f64> = enumerate_paths(n, params.num_tags)
            .iter()
            .map(|p| path_score(params, em, p).unwrap())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
    }

    fn brute_argmax(params: &CrfParams, em: &[f64], n: usize, mask: Option<&TransitionMask>) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for p in enumerate_paths(n, params.num_tags) {
            if let Some(m) = mask {
                if !m.accepts(&p) {
                    continue;
                }
            }
            let s = path_score(params, em, &p).unwrap();
            match &best {
                Some((_, bs)) if *bs >= s => {}
                _ => best = Some((p, s)),
            }
        }
        best.unwrap()
    }

    fn random_instance(rng: &mut StdRng, n: usize, y: usize, d: usize) -> (CrfParams, Vec<f64>, Vec<f64>) {
        let mut params = CrfParams::zeros(d, y);
        for v in params
            .w
            .iter_mut()
            .chain(&mut params.b)
            .chain(&mut params.trans)
            .chain(&mut params.start)
            .chain(&mut params.end)
        {
            *v = rng.gen_range(-1.5..1.5);
        }
        let reps: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let em = emissions(&params, &reps).unwrap();
        (params, reps, em)
    }

    #[test]
    fn emissions_zero_params() {
        let params = CrfParams::zeros(3, 4);
        let em = emissions(&params, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(em, vec![0.0; 4]);
    }

    #[test]
    fn emissions_identity_case() {
        let mut params = CrfParams::zeros(3, 3);
        for i in 0..3 {
            params.w[i * 3 + i] = 1.0;
        }
        let em = emissions(&params, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(em, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn emissions_match_triple_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(1);
        let (params, reps, em) = random_instance(&mut rng, 4, 5, 6);
        for t in 0..4 {
            for tag in 0..5 {
                let mut want = params.b[tag];
                for i in 0..6 {
                    want += reps[t * 6 + i] * params.w[i * 5 + tag];
                }
                assert!((em[t * 5 + tag] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn path_score_trivial_and_hand_case() {
        let params = CrfParams::zeros(1, 2);
        assert_eq!(path_score(&params, &[0.0, 0.0], &[0]).unwrap(), 0.0);

        let mut p = CrfParams::zeros(1, 2);
        p.start = vec![0.1, 0.2];
        p.end = vec![0.3, 0.4];
        p.trans = vec![0.5, 0.6, 0.7, 0.8];
        let em = vec![1.0, 2.0, 3.0, 4.0];
        // path [1, 0]: start 0.2 + em 2.0 + trans(1,0) 0.7 + em 3.0 + end 0.3
        let got = path_score(&p, &em, &[1, 0]).unwrap();
        assert!((got - (0.2 + 2.0 + 0.7 + 3.0 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn log_partition_uniform_two_tags() {
        let params = CrfParams::zeros(1, 2);
        let z = log_partition(&params, &[0.0, 0.0], None).unwrap();
        assert!((z - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let y = rng.gen_range(2..=5);
            let (params, _, em) = random_instance(&mut rng, n, y, 3);
            let got = log_partition(&params, &em, None).unwrap();
            let want = brute_log_z(&params, &em, n);
            assert!((got - want).abs() < 1e-8, "got {got} want {want}");
        }
    }

    #[test]
    fn nll_uniform_is_n_log_y() {
        let params = CrfParams::zeros(2, 3);
        let reps = vec![0.5; 4 * 2];
        let (nll, _) = nll_and_grads(&params, &reps, &[0, 1, 2, 0], None).unwrap();
        assert!((nll - 4.0 * 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn marginals_normalize() {
        let mut rng = StdRng::seed_from_u64(3);
        let (params, _, em) = random_instance(&mut rng, 5, 4, 3);
        let mu = marginals(&params, &em, None).unwrap();
        for t in 0..5 {
            let s: f64 = mu[t * 4..(t + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let (mut params, mut reps, _) = random_instance(&mut rng, 4, 4, 3);
        let gold = vec![1, 0, 3, 2];
        let (_, grads) = {
            let em_reps = reps.clone();
            nll_and_grads(&params, &em_reps, &gold, None).unwrap()
        };
        let eps = 1e-5;
        fn check(
            params: &mut CrfParams,
            reps: &mut Vec<f64>,
            gold: &[usize],
            eps: f64,
            get: &mut dyn for<'a> FnMut(&'a mut CrfParams, &'a mut Vec<f64>) -> &'a mut f64,
            g: f64,
        ) {
            let orig = *get(params, reps);
            *get(params, reps) = orig + eps;
            let (plus, _) = nll_and_grads(params, &reps.clone(), gold, None).unwrap();
            *get(params, reps) = orig - eps;
            let (minus, _) = nll_and_grads(params, &reps.clone(), gold, None).unwrap();
            *get(params, reps) = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!(((fd - g) / denom).abs() < 1e-6, "fd {fd} analytic {g}");
        }
        for i in 0..params.w.len() {
            check(&mut params, &mut reps, &gold, eps, &mut |p, _| &mut p.w[i], grads.w[i]);
        }
        for i in 0..params.b.len() {
            check(&mut params, &mut reps, &gold, eps, &mut |p, _| &mut p.b[i], grads.b[i]);
        }
        for i in 0..params.trans.len() {
            check(&mut params, &mut reps, &gold, eps, &mut |p, _| &mut p.trans[i], grads.trans[i]);
        }
        for i in 0..params.start.len() {
            check(&mut params, &mut reps, &gold, eps, &mut |p, _| &mut p.start[i], grads.start[i]);
        }
        for i in 0..params.end.len() {
            check(&mut params, &mut reps, &gold, eps, &mut |p, _| &mut p.end[i], grads.end[i]);
        }
        for i in 0..reps.len() {
            check(&mut params, &mut reps, &gold, eps, &mut |_, r| &mut r[i], grads.reps[i]);
        }
    }

    #[test]
    fn viterbi_zero_transitions_is_argmax() {
        let params = CrfParams::zeros(1, 3);
        let em = vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.1];
        assert_eq!(viterbi(&params, &em, None).unwrap(), vec![1, 0]);
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let y = rng.gen_range(2..=5);
            let (params, _, em) = random_instance(&mut rng, n, y, 3);
            let got = viterbi(&params, &em, None).unwrap();
            let (want, want_score) = brute_argmax(&params, &em, n, None);
            let got_score = path_score(&params, &em, &got).unwrap();
            assert!((got_score - want_score).abs() < 1e-9);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn viterbi_all_ties_picks_lowest_indices() {
        let params = CrfParams::zeros(1, 4);
        let em = vec![0.0; 3 * 4];
        assert_eq!(viterbi(&params, &em, None).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn emission_shift_invariance() {
        let mut rng = StdRng::seed_from_u64(5);
        let (params, _, mut em) = random_instance(&mut rng, 4, 3, 3);
        let z0 = log_partition(&params, &em, None).unwrap();
        let v0 = viterbi(&params, &em, None).unwrap();
        let s0 = path_score(&params, &em, &v0).unwrap();
        let c = 2.75;
        for tag in 0..3 {
            em[2 * 3 + tag] += c;
        }
        let z1 = log_partition(&params, &em, None).unwrap();
        let v1 = viterbi(&params, &em, None).unwrap();
        let s1 = path_score(&params, &em, &v1).unwrap();
        assert!((z1 - z0 - c).abs() < 1e-9);
        assert!((s1 - s0 - c).abs() < 1e-9);
        assert_eq!(v0, v1);
    }

    #[test]
    fn path_probabilities_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(9);
        let (params, _, em) = random_instance(&mut rng, 4, 3, 3);
        let z = log_partition(&params, &em, None).unwrap();
        let total: f64 = enumerate_paths(4, 3)
            .iter()
            .map(|p| (path_score(&params, &em, p).unwrap() - z).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn biose_mask_start_set() {
        let scheme = TagScheme::new(SchemeKind::Biose, vec!["X".into()]);
        let mask = build_transition_mask(&scheme);
        // Alphabet: O, B-X, I-X, E-X, S-X.
        assert_eq!(mask.allowed_start, vec![true, true, false, false, true]);
        assert_eq!(mask.allowed_end, vec![true, false, false, true, true]);
    }

    #[test]
    fn masked_viterbi_emits_only_valid_transitions() {
        let scheme = TagScheme::new(SchemeKind::Biose, vec!["X".into(), "Y".into()]);
        let mask = build_transition_mask(&scheme);
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.gen_range(1..=6);
            let y = scheme.alphabet_size();
            let mut params = CrfParams::zeros(2, y);
            for v in params.trans.iter_mut().chain(&mut params.start).chain(&mut params.end) {
                *v = rng.gen_range(-1.0..1.0);
            }
            let em: Vec<f64> = (0..n * y).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tags = viterbi(&params, &em, Some(&mask)).unwrap();
            assert!(mask.accepts(&tags));
        }
    }

    #[test]
    fn masked_viterbi_matches_constrained_enumeration() {
        let scheme = TagScheme::new(SchemeKind::Biose, vec!["X".into()]);
        let mask = build_transition_mask(&scheme);
        let mut rng = StdRng::seed_from_u64(37);
        for _ in 0..50 {
            let n = rng.gen_range(1..=5);
            let y = scheme.alphabet_size();
            let mut params = CrfParams::zeros(2, y);
            for v in params.trans.iter_mut().chain(&mut params.start).chain(&mut params.end) {
                *v = rng.gen_range(-1.0..1.0);
            }
            let em: Vec<f64> = (0..n * y).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = viterbi(&params, &em, Some(&mask)).unwrap();
            let (_, want_score) = brute_argmax(&params, &em, n, Some(&mask));
            let got_score = path_score(&params, &em, &got).unwrap();
            assert!((got_score - want_score).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_valid_sequences_decode_repair_free() {
        // Every mask-accepted sequence, re-encoded from its decoded spans,
        // reproduces itself exactly.
        for kind in [SchemeKind::Bio, SchemeKind::Biose] {
            let scheme = TagScheme::new(kind, vec!["X".into(), "Y".into()]);
            let mask = build_transition_mask(&scheme);
            let alphabet = scheme.alphabet();
            let y = alphabet.len();
            for n in 1..=4usize {
                let units: Vec<(usize, usize)> = (0..n).map(|i| (2 * i, 2 * i + 1)).collect();
                for code in 0..y.pow(n as u32) {
                    let mut c = code;
                    let ids: Vec<usize> = (0..n)
                        .map(|_| {
                            let t = c % y;
                            c /= y;
                            t
                        })
                        .collect();
                    if !mask.accepts(&ids) {
                        continue;
                    }
                    let tags: Vec<&String> = ids.iter().map(|&i| &alphabet[i]).collect();
                    let spans = crate::corpus::decode_tags(&tags, &units, &scheme).unwrap();
                    let back = crate::corpus::encode_tags(&spans, &units, &scheme).unwrap();
                    assert_eq!(back, tags.iter().map(|s| s.to_string()).collect::<Vec<_>>());
                }
            }
        }
    }

    #[test]
    fn encode_output_is_mask_valid() {
        use crate::corpus::{encode_tags, EntitySpan};
        for kind in [SchemeKind::Bio, SchemeKind::Biose] {
            let scheme = TagScheme::new(kind, vec!["X".into(), "Y".into()]);
            let mask = build_transition_mask(&scheme);
            let units: Vec<(usize, usize)> = (0..6).map(|i| (2 * i, 2 * i + 1)).collect();
            let spans = vec![
                EntitySpan::new(0, 1, "X").unwrap(),
                EntitySpan::new(2, 7, "Y").unwrap(),
                EntitySpan::new(10, 11, "X").unwrap(),
            ];
            let tags = encode_tags(&spans, &units, &scheme).unwrap();
            let ids: Vec<usize> = tags.iter().map(|t| scheme.tag_id(t).unwrap()).collect();
            assert!(mask.accepts(&ids));
        }
    }
}
