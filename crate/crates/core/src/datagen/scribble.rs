use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Frame;
use crate::error::{Error, Result};
use crate::metrics::border_split;

/// Consecutive scan points further apart than this break a scribble.
const MAX_STROKE_GAP: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScribbleOutcome {
    pub labeled: usize,
    pub attained_fraction: f64,
    /// False when fewer non-border points exist than the budget asks for.
    pub budget_met: bool,
}

/// Simulates scribble annotation: labels about `budget · N` points, chosen
/// as runs of consecutive scan points that share a class and contain no
/// border point.
pub fn scribble_sim(frame: &Frame, budget: f64, seed: u64) -> Result<(Frame, ScribbleOutcome)> {
    if !(0.0..1.0).contains(&budget) {
        return Err(Error::InvalidInput(format!("scribble budget {budget} outside [0, 1)")));
    }
    let n = frame.len();
    let target = (budget * n as f64).round() as usize;
    let mut out = frame.clone();
    out.weak_mask = vec![false; n];
    out.frame_labeled = true;
    if target == 0 {
        return Ok((
            out,
            ScribbleOutcome {
                labeled: 0,
                attained_fraction: 0.0,
                budget_met: true,
            },
        ));
    }
    let border = border_split(&frame.cloud, &frame.labels)?;

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &on_border) in border.iter().enumerate() {
        let ok = !on_border;
        let continues = start.is_some() && ok && {
            let (p, q) = (&frame.cloud.points[i - 1], &frame.cloud.points[i]);
            let gap = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            frame.labels[i] == frame.labels[i - 1] && gap < MAX_STROKE_GAP
        };
        if !continues {
            if let Some(s) = start.take() {
                runs.push((s, i));
            }
            if ok {
                start = Some(i);
            }
        }
    }
    if let Some(s) = start {
        runs.push((s, n));
    }

    let available: usize = runs.iter().map(|(a, b)| b - a).sum();
    if available <= target {
        for &(a, b) in &runs {
            out.weak_mask[a..b].fill(true);
        }
        return Ok((
            out,
            ScribbleOutcome {
                labeled: available,
                attained_fraction: available as f64 / n as f64,
                budget_met: available == target,
            },
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    runs.shuffle(&mut rng);
    let mut remaining = target;
    for (a, b) in runs {
        if remaining == 0 {
            break;
        }
        let take = remaining.min(b - a);
        out.weak_mask[a..a + take].fill(true);
        remaining -= take;
    }
    Ok((
        out,
        ScribbleOutcome {
            labeled: target,
            attained_fraction: target as f64 / n as f64,
            budget_met: true,
        },
    ))
}

/// Flags `⌈rate · count⌉` frames as labeled, evenly spaced in sequence order.
pub fn sample_frames(count: usize, rate: f64) -> Result<Vec<bool>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "frame sampling rate {rate} outside (0, 1]"
        )));
    }
    // Guard against 0.1 * 1000 = 100.00000000000001.
    let k = ((rate * count as f64) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(count);
    let mut flags = vec![false; count];
    for i in 0..k {
        flags[i * count / k] = true;
    }
    Ok(flags)
}

/// Applies [`sample_frames`]: unlabeled frames lose all weak labels.
pub fn semi_supervise(frames: &mut [Frame], rate: f64) -> Result<()> {
    let flags = sample_frames(frames.len(), rate)?;
    for (f, labeled) in frames.iter_mut().zip(flags) {
        f.frame_labeled = labeled;
        if !labeled {
            f.weak_mask.fill(false);
        }
    }
    Ok(())
}
