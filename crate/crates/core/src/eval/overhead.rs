//! Wall-clock moderation overhead per image.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::gateway::ImageRef;

use super::EvalError;

/// Images run before timing starts, excluded from the statistics.
pub const WARMUP_IMAGES: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverheadReport {
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub measured: usize,
}

/// Times `pipeline` (prompt build + backend round trip + parse, as composed
/// by the caller) over `count` images drawn cyclically from `samples`. The
/// first [`WARMUP_IMAGES`] runs are excluded; with `count` at or below the
/// warm-up size every run is measured instead.
pub fn measure_overhead<F>(
    mut pipeline: F,
    samples: &[ImageRef],
    count: usize,
) -> Result<OverheadReport, EvalError>
where
    F: FnMut(&ImageRef),
{
    if samples.is_empty() || count == 0 {
        return Err(EvalError::EmptyInput);
    }
    let warmup = if count > WARMUP_IMAGES { WARMUP_IMAGES } else { 0 };
    let mut timings = Vec::with_capacity(count - warmup);
    for i in 0..count {
        let image = &samples[i % samples.len()];
        let start = Instant::now();
        pipeline(image);
        let elapsed = start.elapsed().as_secs_f64();
        if i >= warmup {
            timings.push(elapsed);
        }
    }
    let n = timings.len() as f64;
    let mean = timings.iter().sum::<f64>() / n;
    let variance = timings.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(OverheadReport { mean_seconds: mean, std_seconds: variance.sqrt(), measured: timings.len() })
}
