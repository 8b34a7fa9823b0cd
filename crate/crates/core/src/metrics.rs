//! Statistical quality metrics for shares.
//!
//! NPCR, per-channel Shannon entropy, adjacent-pixel and patch/share
//! Pearson correlation, a chi-square uniformity test, and the brute-force
//! guess probability. Campaigns spread trials across threads; trial `t` of
//! a campaign seeded with `s` always draws from the stream seeded `s + t`,
//! so results do not depend on the execution strategy.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::{map_indices, Exec};
use crate::rng::seeded;
use crate::vss::{
    generate_private_share, generate_random_grid, GridShape, PatchImage, ShareGrid, VssError,
};

/// Expected NPCR (percent) between two independent uniform byte grids.
pub const UNIFORM_NPCR: f64 = 100.0 * 255.0 / 256.0;

/// Upper 1% point of the chi-square distribution with 255 degrees of freedom.
pub const CHI2_CRITICAL_255_ALPHA_001: f64 = 310.457_388_219_905_85;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("inputs differ in size ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("correlation undefined: zero variance")]
    UndefinedCorrelation,
    #[error("channel {channel} out of range for {channels} channels")]
    InvalidChannel { channel: usize, channels: u8 },
    #[error("need at least {min} trials, got {got}")]
    TooFewTrials { min: usize, got: usize },
    #[error("image must be at least 2x2")]
    TooSmall,
    #[error("dimensions must be positive")]
    EmptyShape,
    #[error(transparent)]
    Grid(#[from] VssError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Horizontal,
    Vertical,
    Diagonal,
}

impl Direction {
    pub const ALL: [Direction; 3] = [
        Direction::Horizontal,
        Direction::Vertical,
        Direction::Diagonal,
    ];

    fn offset(self) -> (usize, usize) {
        match self {
            Direction::Horizontal => (1, 0),
            Direction::Vertical => (0, 1),
            Direction::Diagonal => (1, 1),
        }
    }
}

/// Machine-readable result of one metric over one or more patch kinds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub per_kind: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_channel: BTreeMap<String, Vec<f64>>,
    pub samples: u64,
    #[serde(default)]
    pub parameters: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theoretical: Option<f64>,
}

impl MetricReport {
    pub fn new(metric: &str) -> Self {
        MetricReport {
            metric: metric.to_string(),
            ..Default::default()
        }
    }

    /// Checks every value against the metric's mathematical range.
    pub fn values_in_range(&self) -> bool {
        let (lo, hi) = match self.metric.as_str() {
            "npcr" => (0.0, 100.0),
            "entropy" => (0.0, 8.0),
            _ => (-1.0, 1.0),
        };
        let ok = |v: &f64| (lo..=hi).contains(v);
        self.per_kind.values().all(ok) && self.per_channel.values().flatten().all(ok)
    }

    pub fn merge(&mut self, other: MetricReport) {
        self.per_kind.extend(other.per_kind);
        self.per_channel.extend(other.per_channel);
        self.samples += other.samples;
        for (k, v) in other.parameters {
            self.parameters.entry(k).or_insert(v);
        }
        self.theoretical = self.theoretical.or(other.theoretical);
    }
}

/// Percentage of byte positions at which `a` and `b` differ.
pub fn npcr(a: &[u8], b: &[u8]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::EmptyShape);
    }
    let changed = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(100.0 * changed as f64 / a.len() as f64)
}

/// Standard error (percent) of an NPCR estimate over `positions` bytes
/// under the uniform model.
pub fn uniform_npcr_stderr(positions: usize) -> f64 {
    let p = 255.0 / 256.0;
    100.0 * (p * (1.0 - p) / positions as f64).sqrt()
}

/// Encrypts `patch` `trials` times with fresh authentication shares and
/// reports the mean NPCR of one randomly chosen private share against all
/// the others.
pub fn npcr_campaign(
    patch: &PatchImage,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<MetricReport, MetricsError> {
    npcr_campaign_with(patch, trials, seed, seeded, exec)
}

/// [`npcr_campaign`] with a caller-supplied random source per trial.
pub fn npcr_campaign_with<R, F>(
    patch: &PatchImage,
    trials: usize,
    seed: u64,
    make_rng: F,
    exec: Exec,
) -> Result<MetricReport, MetricsError>
where
    R: RngCore,
    F: Fn(u64) -> R + Sync + Send,
{
    if trials < 2 {
        return Err(MetricsError::TooFewTrials {
            min: 2,
            got: trials,
        });
    }
    let share_for = |t: usize| -> Result<ShareGrid, MetricsError> {
        let mut rng = make_rng(seed.wrapping_add(t as u64));
        let auth = generate_random_grid(patch.shape(), &mut rng);
        Ok(generate_private_share(patch, &auth)?)
    };
    let mut selector = seeded(seed);
    selector.set_stream(1);
    let reference_index = selector.random_range(0..trials);
    let reference = share_for(reference_index)?;

    let values: Vec<f64> = map_indices(exec, trials, |t| {
        if t == reference_index {
            return Ok(None);
        }
        npcr(reference.bytes(), share_for(t)?.bytes()).map(Some)
    })
    .into_iter()
    .collect::<Result<Vec<_>, MetricsError>>()?
    .into_iter()
    .flatten()
    .collect();

    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut report = MetricReport::new("npcr");
    report
        .per_kind
        .insert(patch.kind().name().to_string(), mean);
    report.samples = values.len() as u64;
    report.theoretical = Some(UNIFORM_NPCR);
    report.parameters.insert("trials".into(), trials.into());
    report.parameters.insert("seed".into(), seed.into());
    report
        .parameters
        .insert("reference_trial".into(), reference_index.into());
    report.parameters.insert("min".into(), min.into());
    report.parameters.insert("max".into(), max.into());
    report.parameters.insert(
        "uniform_stderr_of_mean".into(),
        (uniform_npcr_stderr(patch.shape().len()) / (values.len() as f64).sqrt()).into(),
    );
    Ok(report)
}

fn check_channel(shape: GridShape, channel: usize) -> Result<(), MetricsError> {
    if channel >= shape.channels() as usize {
        return Err(MetricsError::InvalidChannel {
            channel,
            channels: shape.channels(),
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], shape: GridShape) -> Result<(), MetricsError> {
    if bytes.len() != shape.len() {
        return Err(MetricsError::DimensionMismatch(bytes.len(), shape.len()));
    }
    Ok(())
}

/// Exact 256-bin histogram of one channel.
pub fn channel_histogram(
    bytes: &[u8],
    shape: GridShape,
    channel: usize,
) -> Result<[u64; 256], MetricsError> {
    check_len(bytes, shape)?;
    check_channel(shape, channel)?;
    let mut hist = [0u64; 256];
    for &b in bytes
        .iter()
        .skip(channel)
        .step_by(shape.channels() as usize)
    {
        hist[b as usize] += 1;
    }
    Ok(hist)
}

fn entropy_of_histogram(hist: &[u64; 256]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.clamp(0.0, 8.0)
}

/// Shannon entropy in bits of one channel's byte histogram.
pub fn shannon_entropy(
    bytes: &[u8],
    shape: GridShape,
    channel: usize,
) -> Result<f64, MetricsError> {
    Ok(entropy_of_histogram(&channel_histogram(
        bytes, shape, channel,
    )?))
}

/// Pearson correlation; zero variance on either side is an error, never 0.
pub fn pearson<I>(pairs: I) -> Result<f64, MetricsError>
where
    I: Iterator<Item = (f64, f64)> + Clone,
{
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs.clone() {
        n += 1.0;
        sx += x;
        sy += y;
    }
    if n == 0.0 {
        return Err(MetricsError::UndefinedCorrelation);
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation between each pixel and its neighbour in `direction`.
pub fn adjacent_correlation(
    bytes: &[u8],
    shape: GridShape,
    direction: Direction,
    channel: usize,
) -> Result<f64, MetricsError> {
    check_len(bytes, shape)?;
    check_channel(shape, channel)?;
    let (w, h, c) = (
        shape.width() as usize,
        shape.height() as usize,
        shape.channels() as usize,
    );
    if w < 2 || h < 2 {
        return Err(MetricsError::TooSmall);
    }
    let (dx, dy) = direction.offset();
    let at = move |x: usize, y: usize| bytes[(y * w + x) * c + channel] as f64;
    let pairs =
        (0..h - dy).flat_map(move |y| (0..w - dx).map(move |x| (at(x, y), at(x + dx, y + dy))));
    pearson(pairs)
}

/// Correlation between the flattened bytes of a patch and of a share.
pub fn patch_share_correlation(patch: &PatchImage, share: &ShareGrid) -> Result<f64, MetricsError> {
    bytes_correlation(patch.pixels(), share.bytes())
}

pub fn bytes_correlation(a: &[u8], b: &[u8]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch(a.len(), b.len()));
    }
    pearson(a.iter().zip(b).map(|(&x, &y)| (x as f64, y as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: u32,
    pub passes_at_1pct: bool,
}

/// Chi-square goodness of fit of a byte histogram against uniform.
pub fn chi_square_uniform(bytes: &[u8]) -> ChiSquare {
    let mut hist = [0u64; 256];
    for &b in bytes {
        hist[b as usize] += 1;
    }
    let expected = bytes.len() as f64 / 256.0;
    let statistic = hist
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum::<f64>();
    ChiSquare {
        statistic,
        dof: 255,
        passes_at_1pct: statistic < CHI2_CRITICAL_255_ALPHA_001,
    }
}

/// Probability of guessing a whole share, kept in log space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForceEstimate {
    pub positions: u64,
    pub log10_probability: f64,
    pub mantissa: f64,
    pub exponent: i64,
}

impl fmt::Display for BruteForceEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9} × 10^{}", self.mantissa, self.exponent)
    }
}

/// `(1/256)^(w*h*c)` as `mantissa * 10^exponent`.
pub fn brute_force_log_probability(
    width: u32,
    height: u32,
    channels: u32,
) -> Result<BruteForceEstimate, MetricsError> {
    if width == 0 || height == 0 || channels == 0 {
        return Err(MetricsError::EmptyShape);
    }
    let positions = width as u64 * height as u64 * channels as u64;
    let log10_probability = -(positions as f64) * 256f64.log10();
    let mut exponent = log10_probability.floor() as i64;
    let mut mantissa = 10f64.powf(log10_probability - exponent as f64);
    if mantissa >= 10.0 {
        mantissa /= 10.0;
        exponent += 1;
    }
    Ok(BruteForceEstimate {
        positions,
        log10_probability,
        mantissa,
        exponent,
    })
}

/// Aggregated share statistics for one patch kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindQuality {
    pub kind: String,
    pub shares: usize,
    /// Mean entropy of each channel over all shares.
    pub entropy_per_channel: Vec<f64>,
    pub entropy_mean: f64,
    /// Mean |r| (over shares and channels) per direction.
    pub adjacent_abs_correlation: BTreeMap<String, f64>,
    pub npcr_mean: f64,
    pub patch_share_abs_correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub seed: u64,
    pub shares_per_kind: usize,
    pub npcr_theoretical: f64,
    pub kinds: Vec<KindQuality>,
}

struct TrialStats {
    entropy: Vec<f64>,
    adjacent: [f64; 3],
    patch_corr: f64,
    npcr_vs_reference: Option<f64>,
}

/// Shares every patch `shares_per_kind` times with fresh authentication
/// shares and summarises entropy, adjacent correlation, NPCR against the
/// first share, and patch/share correlation.
pub fn share_quality_battery(
    patches: &[PatchImage],
    shares_per_kind: usize,
    seed: u64,
    exec: Exec,
) -> Result<BatteryReport, MetricsError> {
    if shares_per_kind < 2 {
        return Err(MetricsError::TooFewTrials {
            min: 2,
            got: shares_per_kind,
        });
    }
    let mut kinds = Vec::with_capacity(patches.len());
    for (k, patch) in patches.iter().enumerate() {
        let base = seed.wrapping_add((k as u64) << 32);
        let share_for = |t: usize| -> Result<ShareGrid, MetricsError> {
            let auth =
                generate_random_grid(patch.shape(), &mut seeded(base.wrapping_add(t as u64)));
            Ok(generate_private_share(patch, &auth)?)
        };
        let reference = share_for(0)?;
        let shape = patch.shape();
        let stats: Vec<TrialStats> = map_indices(
            exec,
            shares_per_kind,
            |t| -> Result<TrialStats, MetricsError> {
                let share = share_for(t)?;
                let bytes = share.bytes();
                let channels = shape.channels() as usize;
                let entropy = (0..channels)
                    .map(|c| shannon_entropy(bytes, shape, c))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut adjacent = [0.0; 3];
                for (d, dir) in Direction::ALL.into_iter().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..channels {
                        acc += adjacent_correlation(bytes, shape, dir, c)?.abs();
                    }
                    adjacent[d] = acc / channels as f64;
                }
                Ok(TrialStats {
                    entropy,
                    adjacent,
                    patch_corr: patch_share_correlation(patch, &share)?.abs(),
                    npcr_vs_reference: if t == 0 {
                        None
                    } else {
                        Some(npcr(reference.bytes(), bytes)?)
                    },
                })
            },
        )
        .into_iter()
        .collect::<Result<_, _>>()?;

        let n = stats.len() as f64;
        let channels = shape.channels() as usize;
        let entropy_per_channel: Vec<f64> = (0..channels)
            .map(|c| stats.iter().map(|s| s.entropy[c]).sum::<f64>() / n)
            .collect();
        let adjacent_abs_correlation = Direction::ALL
            .into_iter()
            .enumerate()
            .map(|(d, dir)| {
                let name = serde_json::to_value(dir)
                    .expect("direction")
                    .as_str()
                    .unwrap_or_default()
                    .to_string();
                (name, stats.iter().map(|s| s.adjacent[d]).sum::<f64>() / n)
            })
            .collect();
        let npcrs: Vec<f64> = stats.iter().filter_map(|s| s.npcr_vs_reference).collect();
        kinds.push(KindQuality {
            kind: patch.kind().name().to_string(),
            shares: stats.len(),
            entropy_mean: entropy_per_channel.iter().sum::<f64>() / channels as f64,
            entropy_per_channel,
            adjacent_abs_correlation,
            npcr_mean: npcrs.iter().sum::<f64>() / npcrs.len() as f64,
            patch_share_abs_correlation: stats.iter().map(|s| s.patch_corr).sum::<f64>() / n,
        });
    }
    Ok(BatteryReport {
        seed,
        shares_per_kind,
        npcr_theoretical: UNIFORM_NPCR,
        kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::ConstantRng;
    use crate::vss::PatchKind;
    use proptest::prelude::*;

    fn shape96() -> GridShape {
        GridShape::new(96, 96, 3).unwrap()
    }

    fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
        let mut v = vec![0u8; n];
        rand::RngCore::fill_bytes(&mut seeded(seed), &mut v);
        v
    }

    #[test]
    fn npcr_examples() {
        let a = random_bytes(27648, 1);
        assert_eq!(npcr(&a, &a).unwrap(), 0.0);
        let not: Vec<u8> = a.iter().map(|x| !x).collect();
        assert_eq!(npcr(&a, &not).unwrap(), 100.0);
        let b = random_bytes(27648, 2);
        let v = npcr(&a, &b).unwrap();
        assert!((v - UNIFORM_NPCR).abs() < 0.15, "{v}");
        assert_eq!(
            npcr(&a, &b[..10]).unwrap_err(),
            MetricsError::DimensionMismatch(27648, 10)
        );
    }

    #[test]
    fn campaign_with_constant_rng_is_zero() {
        let p = PatchImage::new(PatchKind::Nose, shape96(), random_bytes(27648, 3)).unwrap();
        let r = npcr_campaign_with(&p, 10, 0, |_| ConstantRng(0x5A), Exec::Sequential).unwrap();
        assert_eq!(r.per_kind["nose"], 0.0);
        assert_eq!(
            npcr_campaign(&p, 1, 0, Exec::Sequential).unwrap_err(),
            MetricsError::TooFewTrials { min: 2, got: 1 }
        );
    }

    #[test]
    fn campaign_matches_uniform_model() {
        let p = PatchImage::new(PatchKind::Mouth, shape96(), vec![17; 27648]).unwrap();
        let r = npcr_campaign(&p, 100, 99, Exec::Parallel).unwrap();
        let mean = r.per_kind["mouth"];
        assert_eq!(r.samples, 99);
        // Each comparison has stderr ~0.0375%; the mean of 99 is tighter,
        // but pairs share the reference, so use the per-pair bound.
        let sigma = uniform_npcr_stderr(27648);
        assert!((mean - UNIFORM_NPCR).abs() < 3.0 * sigma, "{mean}");
        assert!(mean >= 98.0);
        assert!(r.values_in_range());
    }

    #[test]
    fn campaign_independent_of_strategy() {
        let p = PatchImage::new(
            PatchKind::LeftEye,
            GridShape::new(16, 16, 3).unwrap(),
            random_bytes(768, 5),
        )
        .unwrap();
        let a = npcr_campaign(&p, 20, 4, Exec::Sequential).unwrap();
        let b = npcr_campaign(&p, 20, 4, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entropy_examples() {
        let shape = GridShape::new(96, 96, 1).unwrap();
        assert_eq!(shannon_entropy(&vec![9; 9216], shape, 0).unwrap(), 0.0);
        let uniform: Vec<u8> = (0..9216).map(|i| (i % 256) as u8).collect();
        assert!((shannon_entropy(&uniform, shape, 0).unwrap() - 8.0).abs() < 1e-12);
        let g = random_bytes(27648, 8);
        for c in 0..3 {
            let h = shannon_entropy(&g, shape96(), c).unwrap();
            assert!((7.95..=8.0).contains(&h), "{h}");
        }
        assert!(matches!(
            shannon_entropy(&g, shape96(), 3),
            Err(MetricsError::InvalidChannel { .. })
        ));
    }

    #[test]
    fn correlation_examples() {
        let shape = GridShape::new(8, 8, 1).unwrap();
        assert_eq!(
            adjacent_correlation(&[42; 64], shape, Direction::Horizontal, 0).unwrap_err(),
            MetricsError::UndefinedCorrelation
        );
        let rows: Vec<u8> = (0..64).map(|i| (i / 8) as u8 * 10).collect();
        assert!(
            (adjacent_correlation(&rows, shape, Direction::Vertical, 0).unwrap() - 1.0).abs()
                < 1e-9
        );
        let cols: Vec<u8> = (0..64).map(|i| (i % 8) as u8).collect();
        let r = adjacent_correlation(&cols, shape, Direction::Horizontal, 0).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
        let tiny = GridShape::new(1, 4, 1).unwrap();
        assert_eq!(
            adjacent_correlation(&[1, 2, 3, 4], tiny, Direction::Vertical, 0).unwrap_err(),
            MetricsError::TooSmall
        );

        let g = random_bytes(27648, 9);
        for d in Direction::ALL {
            for c in 0..3 {
                assert!(adjacent_correlation(&g, shape96(), d, c).unwrap().abs() < 0.05);
            }
        }
    }

    #[test]
    fn patch_share_correlation_examples() {
        let shape = shape96();
        let px = random_bytes(27648, 10);
        let patch = PatchImage::new(PatchKind::Nose, shape, px.clone()).unwrap();
        let same = ShareGrid::private(crate::vss::SubjectId::nil(), 4, shape, px.clone()).unwrap();
        assert!((patch_share_correlation(&patch, &same).unwrap() - 1.0).abs() < 1e-12);
        let inv = ShareGrid::private(
            crate::vss::SubjectId::nil(),
            4,
            shape,
            px.iter().map(|x| 255 - x).collect(),
        )
        .unwrap();
        assert!((patch_share_correlation(&patch, &inv).unwrap() + 1.0).abs() < 1e-12);
        let auth = generate_random_grid(shape, &mut seeded(11));
        let ps = generate_private_share(&patch, &auth).unwrap();
        assert!(patch_share_correlation(&patch, &ps).unwrap().abs() < 0.05);
        let flat = PatchImage::new(PatchKind::Nose, shape, vec![3; 27648]).unwrap();
        assert_eq!(
            patch_share_correlation(&flat, &ps).unwrap_err(),
            MetricsError::UndefinedCorrelation
        );
    }

    #[test]
    fn brute_force_examples() {
        let one = brute_force_log_probability(1, 1, 1).unwrap();
        assert!((one.log10_probability + 2.408_239_965_311_849_5).abs() < 1e-12);
        let two = brute_force_log_probability(2, 1, 1).unwrap();
        assert!((two.log10_probability - 2.0 * one.log10_probability).abs() < 1e-12);
        // mpmath: 10^(-27648 * log10 256) = 9.58162253540687... x 10^-66584
        let big = brute_force_log_probability(96, 96, 3).unwrap();
        assert_eq!(big.exponent, -66584);
        assert!((big.mantissa - 9.581_622_535).abs() < 1e-6);
        assert_eq!(big.to_string(), "9.581622535 × 10^-66584");
        assert!(brute_force_log_probability(0, 1, 1).is_err());
    }

    #[test]
    fn chi_square_flags_skew() {
        assert!(chi_square_uniform(&random_bytes(27648, 12)).passes_at_1pct);
        let skew: Vec<u8> = (0..27648).map(|i| (i % 128) as u8).collect();
        assert!(!chi_square_uniform(&skew).passes_at_1pct);
    }

    #[test]
    fn battery_small() {
        let shape = GridShape::new(32, 32, 3).unwrap();
        let patches: Vec<PatchImage> = PatchKind::ALL
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                PatchImage::new(k, shape, random_bytes(shape.len(), 100 + i as u64)).unwrap()
            })
            .collect();
        let a = share_quality_battery(&patches, 5, 1, Exec::Sequential).unwrap();
        let b = share_quality_battery(&patches, 5, 1, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kinds.len(), 6);
        assert_eq!(a.kinds[0].adjacent_abs_correlation.len(), 3);
        assert!(a.kinds[0].adjacent_abs_correlation.contains_key("diagonal"));
    }

    proptest! {
        #[test]
        fn npcr_symmetric(a in proptest::collection::vec(any::<u8>(), 1..200), seed in any::<u64>()) {
            let b: Vec<u8> = random_bytes(a.len(), seed);
            prop_assert_eq!(npcr(&a, &b).unwrap(), npcr(&b, &a).unwrap());
            prop_assert_eq!(npcr(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn entropy_bounded_and_permutation_invariant(data in proptest::collection::vec(any::<u8>(), 1..500), key in any::<u8>()) {
            let shape = GridShape::new(data.len() as u16, 1, 1).unwrap();
            let h = shannon_entropy(&data, shape, 0).unwrap();
            prop_assert!((0.0..=8.0).contains(&h));
            // XOR with a constant permutes byte values.
            let permuted: Vec<u8> = data.iter().map(|x| x ^ key).collect();
            prop_assert!((shannon_entropy(&permuted, shape, 0).unwrap() - h).abs() < 1e-12);
        }

        #[test]
        fn correlation_range_and_affine(data in proptest::collection::vec(0u8..100, 3..300), scale in 1u8..3, shift in 0u8..50) {
            match bytes_correlation(&data, &data) {
                Ok(r) => {
                    prop_assert!((r - 1.0).abs() < 1e-9);
                    let affine: Vec<u8> = data.iter().map(|x| x * scale + shift).collect();
                    prop_assert!((bytes_correlation(&data, &affine).unwrap() - 1.0).abs() < 1e-9);
                    let other = random_bytes(data.len(), 1);
                    if let Ok(r) = bytes_correlation(&data, &other) {
                        prop_assert!((-1.0..=1.0).contains(&r));
                    }
                }
                Err(e) => prop_assert_eq!(e, MetricsError::UndefinedCorrelation),
            }
        }
    }
}
