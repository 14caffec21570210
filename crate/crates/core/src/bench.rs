//! Module-wise latency harness: warm-up passes, then timed batch-size-1
//! passes with the four inference stages measured separately.

use std::path::Path;
use std::time::{Duration, Instant};

use efh_numcore::Scalar;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::model::{Detector, StageTimes};
use crate::textenc::LanguageCache;

/// Report keys, in display order.
pub const COMPONENTS: [&str; 4] = ["text_backbone", "image_backbone", "encoder_fpn", "decoder_head"];
pub const CSV_HEADER: &str = "component,mean_ms,p50_ms,p95_ms";
pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_ITERS: usize = 100;

/// Summary of one series of wall times, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl Stats {
    /// Mean plus nearest-rank percentiles.
    pub fn from_samples(ms: &[f64]) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleTimings {
    pub text_backbone: Stats,
    pub image_backbone: Stats,
    pub encoder_fpn: Stats,
    pub decoder_head: Stats,
    pub total: Stats,
    pub cache: bool,
    pub warmup: usize,
    pub iterations: usize,
    pub fps: f64,
}

impl ModuleTimings {
    pub fn components(&self) -> [(&'static str, Stats); 4] {
        [
            (COMPONENTS[0], self.text_backbone),
            (COMPONENTS[1], self.image_backbone),
            (COMPONENTS[2], self.encoder_fpn),
            (COMPONENTS[3], self.decoder_head),
        ]
    }

    /// Builds the report from per-pass stage times and whole-pass totals.
    pub fn from_passes(passes: &[StageTimes], totals: &[Duration], cache: bool, warmup: usize) -> Self {
        let ms = |f: &dyn Fn(&StageTimes) -> Duration| -> Vec<f64> {
            passes.iter().map(|p| f(p).as_secs_f64() * 1e3).collect()
        };
        let total = Stats::from_samples(&totals.iter().map(|d| d.as_secs_f64() * 1e3).collect::<Vec<_>>());
        Self {
            text_backbone: Stats::from_samples(&ms(&|p| p.text_backbone)),
            image_backbone: Stats::from_samples(&ms(&|p| p.image_backbone)),
            encoder_fpn: Stats::from_samples(&ms(&|p| p.encoder_fpn)),
            decoder_head: Stats::from_samples(&ms(&|p| p.decoder_head)),
            total,
            cache,
            warmup,
            iterations: passes.len(),
            fps: if total.mean_ms > 0.0 { 1000.0 / total.mean_ms } else { 0.0 },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per component plus `total`, under [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        let rows = self.components().into_iter().chain([("total", self.total)]);
        for (name, s) in rows {
            out.push_str(&format!("{name},{},{},{}\n", s.mean_ms, s.p50_ms, s.p95_ms));
        }
        out
    }

    pub fn table_row(&self, model: &str) -> String {
        table_row(
            model,
            [
                self.text_backbone.mean_ms,
                self.image_backbone.mean_ms,
                self.encoder_fpn.mean_ms,
                self.decoder_head.mean_ms,
                self.total.mean_ms,
            ],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::arg(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn emit_report(timings: &ModuleTimings, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => timings.to_json()?,
        ReportFormat::Csv => timings.to_csv(),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const TABLE_HEADER: &str = "| Model | Text Backbone | Image Backbone | Encoder/FPN | Decoder/Head | Total Time |";

/// Milliseconds with one decimal; anything under a millisecond is `<1`.
pub fn format_ms(ms: f64) -> String {
    if ms < 1.0 {
        "<1".to_string()
    } else {
        format!("{ms:.1}")
    }
}

/// A markdown row of component means: text, image, encoder, decoder, total.
pub fn table_row(model: &str, ms: [f64; 5]) -> String {
    let cells: Vec<String> = ms.iter().map(|&v| format_ms(v)).collect();
    format!("| {model} | {} |", cells.join(" | "))
}

/// What the harness runs on.
#[derive(Debug, Clone)]
pub struct BenchInput<T> {
    pub images: Vec<(String, Image<T>)>,
    pub labels: Vec<String>,
    pub prompt: String,
}

/// Times `iterations` passes after `warmup` untimed ones, cycling through
/// the images. With `cache`, label and prompt encodings are computed once
/// before any pass so timed passes only hit the cache.
pub fn run_bench<T: Scalar>(
    model: &Detector<T>,
    input: &BenchInput<T>,
    cache: bool,
    warmup: usize,
    iterations: usize,
) -> Result<ModuleTimings> {
    if input.images.is_empty() {
        return Err(Error::arg("no images to benchmark"));
    }
    if iterations == 0 {
        return Err(Error::arg("iterations must be at least 1"));
    }
    let lc = if cache {
        let lc = LanguageCache::new(input.labels.len() + 1)?;
        model.text.encode_labels(&model.store, &input.labels, Some(&lc))?;
        model.text.encode_prompt(&model.store, &input.prompt, Some(&lc))?;
        Some(lc)
    } else {
        None
    };
    let mut passes = Vec::with_capacity(iterations);
    let mut totals = Vec::with_capacity(iterations);
    for i in 0..warmup + iterations {
        let (id, image) = &input.images[i % input.images.len()];
        let start = Instant::now();
        let (_, times) = model.detect_profiled(image, id, &input.labels, &input.prompt, lc.as_ref())?;
        let total = start.elapsed();
        if i >= warmup {
            passes.push(times);
            totals.push(total);
        }
    }
    Ok(ModuleTimings::from_passes(&passes, &totals, cache, warmup))
}
