//! Derivative-free maximisation by adaptive coordinate (pattern) search.

#[derive(Debug, Clone)]
pub(crate) struct SearchOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Maximises `f` starting from `x0`. Each coordinate moves in steps of
/// `step * scales[i]`; the step halves whenever a full sweep fails to improve
/// and the search stops once it falls below `min_step`.
pub(crate) fn pattern_search(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    scales: &[f64],
    initial_step: f64,
    min_step: f64,
    max_evals: usize,
) -> SearchOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut best = f(&x);
    let mut evals = 1;
    let mut step = initial_step;
    // Remember the last successful direction per coordinate so the next sweep
    // tries it first.
    let mut dir = vec![1.0f64; n];

    while step >= min_step {
        if evals >= max_evals {
            return SearchOutcome {
                x,
                value: best,
                evaluations: evals,
                converged: false,
            };
        }
        let sweep_start = x.clone();
        let mut improved = false;
        for i in 0..n {
            for &sign in &[dir[i], -dir[i]] {
                let mut moved = false;
                loop {
                    if evals >= max_evals {
                        break;
                    }
                    let mut trial = x.clone();
                    trial[i] += sign * step * scales[i];
                    let v = f(&trial);
                    evals += 1;
                    if v > best {
                        best = v;
                        x = trial;
                        moved = true;
                        dir[i] = sign;
                    } else {
                        break;
                    }
                }
                if moved {
                    improved = true;
                    break;
                }
            }
        }
        if improved {
            // Pattern move along the sweep's net displacement.
            if evals < max_evals {
                let trial: Vec<f64> = x.iter().zip(&sweep_start).map(|(a, b)| a + (a - b)).collect();
                let v = f(&trial);
                evals += 1;
                if v > best {
                    best = v;
                    x = trial;
                }
            }
        } else {
            step *= 0.5;
        }
    }
    SearchOutcome {
        x,
        value: best,
        evaluations: evals,
        converged: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_peak() {
        let target = [1.5, -2.25, 0.75];
        let out = pattern_search(
            |x| -x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b) * 3.0).sum::<f64>(),
            &[0.0; 3],
            &[1.0, 1.0, 1.0],
            1.0,
            1e-4,
            10_000,
        );
        assert!(out.converged);
        for (a, b) in out.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn respects_evaluation_budget() {
        let out = pattern_search(|x| -x[0].abs(), &[100.0], &[1.0], 0.001, 1e-9, 50);
        assert!(!out.converged);
        assert!(out.evaluations <= 50);
    }
}
