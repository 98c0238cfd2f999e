use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Result};

/// Largest sample size (after dropping zero differences) tested exactly.
pub const EXACT_MAX_N: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Two-sided p-value.
    pub p: f64,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero; `p` is 1 by convention.
    pub degenerate: bool,
}

impl WilcoxonResult {
    pub fn significant(&self) -> bool {
        self.p < 0.05
    }
}

/// Average ranks of `values` (ascending), ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Number of sign assignments whose positive-rank sum is at most `w` and at
/// least `w`, for ranks given doubled (so ties stay integral).
fn tail_counts(doubled: &[usize], w2: usize) -> (u64, u64) {
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0u64; total + 1];
    ways[0] = 1;
    for &r in doubled {
        for s in (r..=total).rev() {
            ways[s] += ways[s - r];
        }
    }
    let le = ways[..=w2.min(total)].iter().sum();
    let ge = ways[w2.min(total + 1)..].iter().sum();
    (le, ge)
}

/// Paired two-sided Wilcoxon signed-rank test of `a` against `b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("paired samples must be finite"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.is_empty() && !a.is_empty() {
        return Ok(WilcoxonResult {
            p: 1.0,
            w_plus: 0.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let n = d.len();
    if n < 5 {
        return Err(invalid(format!("{n} non-zero differences; the test needs at least 5")));
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();

    if n <= EXACT_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let (le, ge) = tail_counts(&doubled, (2.0 * w_plus).round() as usize);
        let all = (1u64 << n) as f64;
        let p = (2.0 * (le.min(ge) as f64) / all).min(1.0);
        return Ok(WilcoxonResult {
            p,
            w_plus,
            n,
            exact: true,
            degenerate: false,
        });
    }

    Ok(WilcoxonResult {
        p: normal_p(w_plus, &ranks),
        w_plus,
        n,
        exact: false,
        degenerate: false,
    })
}

/// Two-sided p-value of `w_plus` under the tie-corrected normal
/// approximation with continuity correction.
fn normal_p(w_plus: f64, ranks: &[f64]) -> f64 {
    let nf = ranks.len() as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        tie_term += (t * t * t - t) as f64;
        i += t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std_normal.cdf(z))).min(1.0)
}

/// The large-sample p-value for any sample size, used to cross-check the
/// exact path.
pub fn wilcoxon_normal_approximation(a: &[f64], b: &[f64]) -> Result<f64> {
    let r = wilcoxon_signed_rank(a, b)?;
    if r.degenerate {
        return Ok(1.0);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).filter(|&v| v != 0.0).collect();
    Ok(normal_p(r.w_plus, &average_ranks(&d)))
}
