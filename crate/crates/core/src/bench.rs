//! Marginal cost of the head at inference: appearance scoring alone versus
//! appearance scoring plus the head, per image pair.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::{prepare, AcaeParams, FeatureSet};
use crate::similarity::{appearance_components, pair_components};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Milliseconds per image pair.
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub repeats: usize,
    pub pairs: usize,
    pub appearance: Option<Timing>,
    pub with_head: Option<Timing>,
}

impl OverheadReport {
    pub fn is_empty(&self) -> bool {
        self.appearance.is_none()
    }

    /// Head cost per pair in milliseconds.
    pub fn delta_ms(&self) -> Option<f64> {
        Some(self.with_head?.mean_ms - self.appearance?.mean_ms)
    }

    pub fn render(&self) -> String {
        let (Some(a), Some(h)) = (self.appearance, self.with_head) else {
            return format!("no timings (repeats={})\n", self.repeats);
        };
        let d = h.mean_ms - a.mean_ms;
        format!(
            "{:<22}  {:>12}  {:>12}\n{:<22}  {:>12.5}  {:>12.5}\n{:<22}  {:>12.5}  {:>12.5}\n{:<22}  {:>12.5}  {:>11.1}%\n",
            "stage (per pair)",
            "mean ms",
            "std ms",
            "appearance",
            a.mean_ms,
            a.std_ms,
            "appearance + head",
            h.mean_ms,
            h.std_ms,
            "head delta",
            d,
            100.0 * d / h.mean_ms.max(f64::MIN_POSITIVE),
        )
    }
}

fn stats(samples: &[f64]) -> Timing {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Timing {
        mean_ms: mean,
        std_ms: var.sqrt(),
    }
}

/// Times `repeats` passes over the consecutive image pairs `(i, i+1)`, after one
/// untimed warm-up pass. Runs single-threaded so the two stages are comparable.
pub fn bench_overhead(
    images: &[FeatureSet],
    params: &AcaeParams,
    repeats: usize,
    max_pairs: usize,
) -> Result<OverheadReport> {
    let pairs: Vec<(&FeatureSet, &FeatureSet)> = images
        .windows(2)
        .take(max_pairs)
        .map(|w| (&w[0], &w[1]))
        .collect();
    if repeats == 0 || pairs.is_empty() {
        return Ok(OverheadReport {
            repeats,
            pairs: pairs.len(),
            appearance: None,
            with_head: None,
        });
    }
    let appearance_pass = || -> Result<f64> {
        let mut sink = 0.0;
        for (a, b) in &pairs {
            let c = appearance_components(&a.features, &b.features, true)?;
            sink += c.first().and_then(|r| r.first()).map_or(0.0, |c| c.appearance);
        }
        Ok(sink)
    };
    let head_pass = || -> Result<f64> {
        let mut sink = 0.0;
        for (a, b) in &pairs {
            let pa = prepare(&a.features, params)?;
            let pb = prepare(&b.features, params)?;
            let c = pair_components(&pa, &pb, Some(params), true)?;
            sink += c.first().and_then(|r| r.first()).map_or(0.0, |c| c.final_);
        }
        Ok(sink)
    };
    std::hint::black_box(appearance_pass()?);
    std::hint::black_box(head_pass()?);
    let per_pair = |t: Instant| 1e3 * t.elapsed().as_secs_f64() / pairs.len() as f64;
    let mut app = Vec::with_capacity(repeats);
    let mut head = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(appearance_pass()?);
        app.push(per_pair(t));
        let t = Instant::now();
        std::hint::black_box(head_pass()?);
        head.push(per_pair(t));
    }
    Ok(OverheadReport {
        repeats,
        pairs: pairs.len(),
        appearance: Some(stats(&app)),
        with_head: Some(stats(&head)),
    })
}
