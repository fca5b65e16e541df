use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::session::{Frame, Session};
use crate::error::{Error, Result};
use crate::heads::{decode_detections, DecodeConfig};
use crate::network::CameraView;
use crate::tensor::{Graph, Scalar};

/// Timed stages of one forward pass, in execution order. Image preparation
/// counts towards the backbone, tensor read-out towards decoding.
pub const BENCH_STAGES: [&str; 4] = ["backbone", "attention", "heads", "decode"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    fn from_samples(ms: &[f64]) -> Self {
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        // nearest-rank percentile
        let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
        StageStats {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p95_ms: s[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub precision: String,
    pub warmup: usize,
    pub iterations: usize,
    pub stages: BTreeMap<String, StageStats>,
    pub total: StageStats,
    pub fps: f64,
    /// Sum of the stage means.
    pub stage_sum_ms: f64,
    /// `|stage_sum − total| / total`.
    pub accounting_error: f64,
    pub threads: usize,
}

/// Times `iterations` forward passes after `warmup` untimed ones.
pub fn run_bench<T: Scalar>(
    session: &Session<T>,
    frame: &Frame,
    decode: &DecodeConfig,
    warmup: usize,
    iterations: usize,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Config("bench needs at least one measured iteration".into()));
    }
    let model = &session.model;
    let mut per_stage = vec![Vec::with_capacity(iterations); BENCH_STAGES.len()];
    let mut totals = Vec::with_capacity(iterations);
    for it in 0..warmup + iterations {
        let t0 = Instant::now();
        let inputs = session.inputs(frame);
        let views: Vec<_> = inputs
            .iter()
            .zip(session.encodings())
            .map(|(image, encodings)| CameraView { image, encodings })
            .collect();
        let mut g = Graph::<T>::new();
        let feats = model.backbone_forward(&mut g, &session.store, &views)?;
        let t1 = Instant::now();
        let bev = model.bev_forward(&mut g, &session.store, &views, &feats)?;
        let t2 = Instant::now();
        let (_, det) = model.heads_forward(&mut g, &session.store, bev)?;
        let t3 = Instant::now();
        let raw: Vec<f64> = g.data(det).iter().map(|v| v.as_f64()).collect();
        let dets = decode_detections(&raw, &model.config.bev, decode);
        let t4 = Instant::now();
        std::hint::black_box(dets);
        if it >= warmup {
            let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
            for (k, (a, b)) in [(t0, t1), (t1, t2), (t2, t3), (t3, t4)].into_iter().enumerate() {
                per_stage[k].push(ms(a, b));
            }
            totals.push(ms(t0, t4));
        }
    }
    let stages: BTreeMap<String, StageStats> = BENCH_STAGES
        .iter()
        .zip(&per_stage)
        .map(|(n, s)| (n.to_string(), StageStats::from_samples(s)))
        .collect();
    let total = StageStats::from_samples(&totals);
    let stage_sum_ms: f64 = stages.values().map(|s| s.mean_ms).sum();
    Ok(BenchReport {
        config_hash: String::new(),
        precision: T::DTYPE.into(),
        warmup,
        iterations,
        total,
        fps: 1e3 / total.mean_ms,
        accounting_error: (stage_sum_ms - total.mean_ms).abs() / total.mean_ms,
        stage_sum_ms,
        stages,
        threads: rayon::current_num_threads(),
    })
}
