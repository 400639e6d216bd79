use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub struct SpacingStats {
    pub mean: f64,
    pub min: i64,
    pub max: i64,
}

impl SpacingStats {
    pub fn of(timestamps: &[i64]) -> SpacingStats {
        let gaps: Vec<i64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return SpacingStats::default();
        }
        SpacingStats {
            mean: gaps.iter().sum::<i64>() as f64 / gaps.len() as f64,
            min: *gaps.iter().min().unwrap(),
            max: *gaps.iter().max().unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SamplePlan {
    pub requested: usize,
    pub chosen: Vec<String>,
    pub chosen_timestamps: Vec<i64>,
    pub achieved_spacing: SpacingStats,
}

/// Pick `k` revisions spread as regularly as possible between the earliest
/// and the latest.
///
/// Target `i` sits at `t_min + i * (t_max - t_min) / (k - 1)`; each target
/// takes the nearest revision not yet taken that still leaves enough later
/// revisions for the remaining targets (ties go to the earlier one). So the
/// endpoints are always chosen and exactly `min(k, n)` revisions come back.
/// With `k == 1` only the earliest is chosen.
pub fn sample_revisions(available: &[(String, i64)], k: usize) -> SamplePlan {
    let mut revs: Vec<&(String, i64)> = available.iter().collect();
    revs.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    let n = revs.len();
    let requested = k;
    let k = k.min(n);
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    if k == 1 {
        picked.push(0);
    } else if k > 1 {
        let (t_min, t_max) = (revs[0].1 as f64, revs[n - 1].1 as f64);
        let step = (t_max - t_min) / (k - 1) as f64;
        for i in 0..k {
            let target = t_min + i as f64 * step;
            let lo = picked.last().map_or(0, |p| p + 1);
            let hi = n - (k - i);
            let best = (lo..=hi)
                .min_by(|&a, &b| {
                    let da = (revs[a].1 as f64 - target).abs();
                    let db = (revs[b].1 as f64 - target).abs();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .expect("non-empty candidate range");
            picked.push(best);
        }
    }
    let chosen_timestamps: Vec<i64> = picked.iter().map(|&i| revs[i].1).collect();
    SamplePlan {
        requested,
        chosen: picked.iter().map(|&i| revs[i].0.clone()).collect(),
        achieved_spacing: SpacingStats::of(&chosen_timestamps),
        chosen_timestamps,
    }
}
