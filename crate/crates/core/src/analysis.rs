//! Closed-form success and error probabilities for decomposed vs. monolithic
//! generation, and for diff-sized vs. full-file edits.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("{name} = {value} is not a probability in [0, 1]")]
    Probability { name: &'static str, value: f64 },
    #[error("attempt count must be at least 1")]
    ZeroAttempts,
}

fn check(name: &'static str, value: f64) -> Result<f64, DomainError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(DomainError::Probability { name, value })
    }
}

/// Single-pass success of a pipeline whose stages fail independently: the product
/// of `1 - p_i`. Factors are multiplied in sorted order so any permutation of the
/// input gives the bit-identical result.
pub fn pipeline_success_probability(per_agent_error: &[f64]) -> Result<f64, DomainError> {
    let mut factors = per_agent_error
        .iter()
        .map(|&p| check("p_i", p).map(|p| 1.0 - p))
        .collect::<Result<Vec<_>, _>>()?;
    factors.sort_by(f64::total_cmp);
    Ok(factors.into_iter().product())
}

/// Success of a monolithic agent after `attempts` independent tries: `1 - p^k`.
pub fn monolithic_success(p: f64, attempts: u32) -> Result<f64, DomainError> {
    let p = check("p", p)?;
    if attempts == 0 {
        return Err(DomainError::ZeroAttempts);
    }
    Ok(1.0 - p.powi(attempts as i32))
}

/// Whether the decomposed pipeline beats a single monolithic attempt. Ties are
/// not an improvement.
pub fn decomposition_improves(per_agent_error: &[f64], monolithic_p: f64) -> Result<bool, DomainError> {
    let multi = pipeline_success_probability(per_agent_error)?;
    let mono = 1.0 - check("p", monolithic_p)?;
    Ok(multi > mono)
}

/// Probability that at least one of `tokens` generated tokens is wrong under an
/// independent per-token error rate.
pub fn token_error_probability(epsilon: f64, tokens: u64) -> Result<f64, DomainError> {
    let epsilon = check("epsilon", epsilon)?;
    if tokens == 0 {
        return Ok(0.0);
    }
    Ok(-((tokens as f64) * (-epsilon).ln_1p()).exp_m1())
}
