//! Nonparametric significance tests: Kruskal-Wallis H with tie correction,
//! Dunn's pairwise post-hoc test, and the chi-square / normal tail
//! probabilities they need.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("need at least 3 observations in total, got {0}")]
    TooFewObservations(usize),
    #[error("non-finite observation in group {0}")]
    NonFinite(usize),
    #[error("need at least 4 distinct training sizes, got {0}")]
    TooFewSizes(usize),
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

#[allow(clippy::excessive_precision)]
const LANCZOS: [f64; 14] = [
    57.156_235_665_862_923_5,
    -59.597_960_355_475_491_2,
    14.136_097_974_741_747_1,
    -0.491_913_816_097_620_199,
    0.339_946_499_848_118_887e-4,
    0.465_236_289_270_485_756e-4,
    -0.983_744_753_048_795_646e-4,
    0.158_088_703_224_912_494e-3,
    -0.210_264_441_724_104_883e-3,
    0.217_439_618_115_212_643e-3,
    -0.164_318_106_536_763_890e-3,
    0.844_182_239_838_527_433e-4,
    -0.261_908_384_015_814_087e-4,
    0.368_991_826_595_316_234e-5,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 671/128, ~1e-15 relative).
#[allow(clippy::excessive_precision)]
pub fn ln_gamma(x: f64) -> f64 {
    let mut y = x;
    let tmp = x + 5.242_187_5;
    let tmp = (x + 0.5) * tmp.ln() - tmp;
    let mut ser = 0.999_999_999_999_997_092;
    for c in LANCZOS {
        y += 1.0;
        ser += c / y;
    }
    tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;
const TINY: f64 = 1e-300;

/// Regularized upper incomplete gamma Q(a, x) = Γ(a, x)/Γ(a), a > 0, x ≥ 0.
///
/// Series for P when x < a + 1, Lentz continued fraction for Q otherwise.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * GAMMA_EPS {
                break;
            }
        }
        (1.0 - sum * log_prefactor.exp()).clamp(0.0, 1.0)
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < GAMMA_EPS {
                break;
            }
        }
        (log_prefactor.exp() * h).clamp(0.0, 1.0)
    }
}

/// Upper tail of the chi-square distribution: Q(df/2, x/2).
pub fn chi_square_sf(x: f64, df: u32) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(f64::from(df) / 2.0, x / 2.0)
}

/// Two-sided standard-normal tail probability P(|Z| ≥ |z|) = erfc(|z|/√2).
pub fn normal_two_sided_p(z: f64) -> f64 {
    gamma_q(0.5, z * z / 2.0)
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

struct Ranked {
    /// Mean rank per group.
    mean_ranks: Vec<f64>,
    sizes: Vec<usize>,
    n: usize,
    /// Σ (t³ − t) over tie groups.
    tie_sum: f64,
}

fn rank_groups(groups: &[Vec<f64>]) -> Result<Ranked, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    for (g, values) in groups.iter().enumerate() {
        if values.is_empty() {
            return Err(StatsError::EmptyGroup(g));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(g));
        }
    }
    let mut pooled: Vec<(f64, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, vs)| vs.iter().map(move |&v| (v, g)))
        .collect();
    let n = pooled.len();
    if n < 3 {
        return Err(StatsError::TooFewObservations(n));
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sums = vec![0.0; groups.len()];
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Positions i..=j share the mid-rank of ranks i+1..=j+1.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &(_, g) in &pooled[i..=j] {
            rank_sums[g] += mid;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let mean_ranks = rank_sums
        .iter()
        .zip(&sizes)
        .map(|(s, &k)| s / k as f64)
        .collect();
    Ok(Ranked {
        mean_ranks,
        sizes,
        n,
        tie_sum,
    })
}

// ---------------------------------------------------------------------------
// Kruskal-Wallis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    #[serde(rename = "H")]
    pub h: f64,
    pub df: u32,
    pub p_value: f64,
    pub group_sizes: Vec<usize>,
    pub tie_correction: f64,
    /// Set when every observation is identical; then H = 0 and p = 1.
    pub degenerate: bool,
}

/// Kruskal-Wallis H test over mid-ranks with tie correction.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<StatTestResult, StatsError> {
    let ranked = rank_groups(groups)?;
    let n = ranked.n as f64;
    let df = (groups.len() - 1) as u32;
    let tie_correction = 1.0 - ranked.tie_sum / (n * n * n - n);
    if tie_correction <= 0.0 {
        return Ok(StatTestResult {
            h: 0.0,
            df,
            p_value: 1.0,
            group_sizes: ranked.sizes,
            tie_correction: 0.0,
            degenerate: true,
        });
    }
    let centre = (n + 1.0) / 2.0;
    let ss: f64 = ranked
        .mean_ranks
        .iter()
        .zip(&ranked.sizes)
        .map(|(r, &k)| k as f64 * (r - centre).powi(2))
        .sum();
    let h = (12.0 / (n * (n + 1.0)) * ss / tie_correction).max(0.0);
    Ok(StatTestResult {
        h,
        df,
        p_value: chi_square_sf(h, df),
        group_sizes: ranked.sizes,
        tie_correction,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Dunn
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    None,
    Bonferroni,
    #[default]
    Holm,
}

impl fmt::Display for Adjustment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Adjustment::None => "none",
            Adjustment::Bonferroni => "bonferroni",
            Adjustment::Holm => "holm",
        })
    }
}

impl FromStr for Adjustment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Adjustment::None),
            "bonferroni" => Ok(Adjustment::Bonferroni),
            "holm" => Ok(Adjustment::Holm),
            other => Err(format!("unknown adjustment {other:?}")),
        }
    }
}

/// One unordered pair `i < j`; `z` is signed as `r̄_i − r̄_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DunnPair {
    pub i: usize,
    pub j: usize,
    pub z: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DunnResult {
    pub pairwise: Vec<DunnPair>,
    pub adjustment: Adjustment,
    pub degenerate: bool,
}

impl DunnResult {
    /// Looks up a pair in either order; `z` is signed as `r̄_a − r̄_b`.
    pub fn get(&self, a: usize, b: usize) -> Option<DunnPair> {
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        self.pairwise
            .iter()
            .find(|p| p.i == i && p.j == j)
            .map(|p| {
                let mut p = *p;
                if a > b {
                    p.z = -p.z;
                    p.i = a;
                    p.j = b;
                }
                p
            })
    }
}

/// Dunn's test for every pair of groups, with tie-corrected variance.
pub fn dunn_pairwise(
    groups: &[Vec<f64>],
    adjustment: Adjustment,
) -> Result<DunnResult, StatsError> {
    let ranked = rank_groups(groups)?;
    let n = ranked.n as f64;
    let variance = n * (n + 1.0) / 12.0 - ranked.tie_sum / (12.0 * (n - 1.0));
    let degenerate = variance <= 1e-12 * n * (n + 1.0);

    let mut pairwise = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (z, p_raw) = if degenerate {
                (0.0, 1.0)
            } else {
                let se = (variance * (1.0 / ranked.sizes[i] as f64 + 1.0 / ranked.sizes[j] as f64))
                    .sqrt();
                let z = (ranked.mean_ranks[i] - ranked.mean_ranks[j]) / se;
                (z, normal_two_sided_p(z))
            };
            pairwise.push(DunnPair {
                i,
                j,
                z,
                p_raw,
                p_adjusted: p_raw,
            });
        }
    }
    let raw: Vec<f64> = pairwise.iter().map(|p| p.p_raw).collect();
    for (p, adj) in pairwise.iter_mut().zip(adjust_p_values(&raw, adjustment)) {
        p.p_adjusted = adj;
    }
    Ok(DunnResult {
        pairwise,
        adjustment,
        degenerate,
    })
}

/// Multiple-comparison adjustment; Holm is the step-down procedure.
pub fn adjust_p_values(p: &[f64], adjustment: Adjustment) -> Vec<f64> {
    let m = p.len() as f64;
    match adjustment {
        Adjustment::None => p.to_vec(),
        Adjustment::Bonferroni => p.iter().map(|x| (x * m).min(1.0)).collect(),
        Adjustment::Holm => {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
            let mut out = vec![0.0; p.len()];
            let mut running = 0.0f64;
            for (k, &idx) in order.iter().enumerate() {
                running = running.max(((m - k as f64) * p[idx]).min(1.0));
                out[idx] = running;
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Resource bins
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceBins {
    pub low: BTreeSet<usize>,
    pub high: BTreeSet<usize>,
}

/// The two smallest training sizes are low-resource, the two largest
/// high-resource; the rest are unassigned.
pub fn bin_resources(sizes: &[usize]) -> Result<ResourceBins, StatsError> {
    let distinct: Vec<usize> = sizes
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if distinct.len() < 4 {
        return Err(StatsError::TooFewSizes(distinct.len()));
    }
    let k = distinct.len();
    Ok(ResourceBins {
        low: distinct[..2].iter().copied().collect(),
        high: distinct[k - 2..].iter().copied().collect(),
    })
}
