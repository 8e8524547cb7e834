//! Per-token generation benchmark: latency and live state memory versus
//! sequence length, for fast-weight rules and exact attention.
//!
//! The point being measured is scaling shape, not absolute speed: a rule
//! mixer's next-token step costs O(d·m) regardless of how much text came
//! before, while softmax attention pays O(T) per token and keeps a KV cache
//! that grows linearly with T. Memory is accounted analytically from the
//! state shapes rather than sampled from the allocator, so the numbers are
//! auditable and free of allocator noise.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featmap::FeatureMapKind;
use crate::model::{build_model, step_logits, GenerationState, MixerKind, Model, ModelConfig};
use crate::rules::{RuleConfig, RuleKind};

/// One benchmark measurement: a mixer at a sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mixer: String,
    pub seq_len: usize,
    /// Median wall-clock seconds for the single next-token step.
    pub per_token_latency_s: f64,
    /// Analytic live state bytes required for that step (f32 storage).
    pub live_bytes: usize,
    pub repeats: usize,
}

/// Standard benchmark model shape: 2 layers, d_model = 128, 4 heads of
/// dimension 32, f32 storage, batch 1. The FFN multiplier is kept at 1 so
/// fixed per-step costs do not drown the attention term whose growth is the
/// object of measurement.
pub fn bench_model_config(mixer: MixerKind, max_t: usize) -> ModelConfig {
    let feature_dim = match &mixer {
        MixerKind::Rule(rc) => rc.m,
        _ => 32,
    };
    ModelConfig {
        vocab_size: 256,
        d_model: 128,
        n_heads: 4,
        head_dim: 32,
        feature_dim,
        n_layers: 2,
        ffn_mult: 1,
        max_t,
        mixer,
    }
}

/// Map a benchmark mixer label to a `MixerKind` at the benchmark's head
/// shape (d = 32, m = 32): `softmax`, `localN`, or a rule name with no
/// feature map and no normalization.
pub fn mixer_from_label(label: &str) -> Result<MixerKind> {
    if label == "softmax" {
        return Ok(MixerKind::Softmax);
    }
    if let Some(w) = label.strip_prefix("local") {
        let window: usize = w
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad local window in '{label}'")))?;
        if window == 0 {
            return Err(Error::InvalidConfig("local window must be positive".into()));
        }
        return Ok(MixerKind::Local { window });
    }
    let rule = RuleKind::parse(label)?;
    Ok(MixerKind::Rule(RuleConfig {
        rule,
        feature_map: FeatureMapKind::Identity,
        sum_norm: false,
        attention_norm: false,
        d: 32,
        m: 32,
    }))
}

/// Analytic live state bytes for one next-token step at sequence length `t`
/// (f32 storage, batch 1).
///
/// Softmax keeps a KV cache of `t` rows per head per layer (keys and
/// values, `2·head_dim` each); local attention caps the rows at its window;
/// a rule keeps one `d×m` state per head per layer plus an m-vector when it
/// carries the attention normalizer.
pub fn analytic_live_bytes(config: &ModelConfig, t: usize) -> usize {
    let f32_bytes = 4;
    match &config.mixer {
        MixerKind::Softmax => t * 2 * config.head_dim * config.n_heads * config.n_layers * f32_bytes,
        MixerKind::Local { window } => {
            t.min(*window) * 2 * config.head_dim * config.n_heads * config.n_layers * f32_bytes
        }
        MixerKind::Rule(rc) => {
            let per_head = rc.d * rc.m + if rc.carries_normalizer() { rc.m } else { 0 };
            config.n_layers * config.n_heads * per_head * f32_bytes
        }
    }
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Benchmark per-token generation latency for each mixer × length.
///
/// For each pair, the model from `factory` processes `t − 1` prompt tokens
/// to build up generation state, then the single next-token step is timed:
/// `warmup` untimed runs followed by `repeats` timed runs, each on a fresh
/// clone of the state (cloning happens outside the timed region), reporting
/// the median. Lengths must be ascending and `repeats ≥ 5`. Records are
/// ordered mixer-first, then by length.
pub fn bench_generation<F>(
    factory: F,
    mixers: &[String],
    lengths: &[usize],
    repeats: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>>
where
    F: Fn(&MixerKind) -> Result<Model<f32>>,
{
    if mixers.is_empty() || lengths.is_empty() {
        return Err(Error::EmptyInput("need at least one mixer and length".into()));
    }
    if repeats < 5 {
        return Err(Error::InvalidConfig(format!(
            "repeats must be at least 5, got {repeats}"
        )));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "lengths must be strictly ascending".into(),
        ));
    }
    let mut records = Vec::with_capacity(mixers.len() * lengths.len());
    for label in mixers {
        let mixer = mixer_from_label(label)?;
        let model = factory(&mixer)?;
        let max_len = *lengths.last().unwrap();
        if model.config.max_t < max_len {
            return Err(Error::InvalidConfig(format!(
                "model max_t {} is below benchmark length {max_len}",
                model.config.max_t
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt: Vec<usize> = (0..max_len).map(|_| rng.gen_range(0..256)).collect();

        let mut state = GenerationState::new(&model);
        let mut fed = 0usize;
        for &t in lengths {
            // Advance the shared state to t − 1 processed tokens.
            while fed < t - 1 {
                step_logits(&model, &mut state, prompt[fed])?;
                fed += 1;
            }
            let next = prompt[t - 1];
            for _ in 0..warmup {
                let mut probe = state.clone();
                step_logits(&model, &mut probe, next)?;
            }
            let mut samples = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let mut probe = state.clone();
                let started = Instant::now();
                step_logits(&model, &mut probe, next)?;
                samples.push(started.elapsed().as_secs_f64());
            }
            records.push(BenchRecord {
                mixer: label.clone(),
                seq_len: t,
                per_token_latency_s: median(&mut samples),
                live_bytes: analytic_live_bytes(&model.config, t),
                repeats,
            });
        }
    }
    Ok(records)
}

/// Benchmark with the standard model shape (`bench_model_config`) sized to
/// the largest requested length.
pub fn bench_generation_default(
    mixers: &[String],
    lengths: &[usize],
    repeats: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    let max_t = lengths.last().copied().unwrap_or(0).max(1);
    bench_generation(
        |mixer| build_model::<f32>(&bench_model_config(mixer.clone(), max_t), seed),
        mixers,
        lengths,
        repeats,
        warmup,
        seed,
    )
}

/// CSV serialization of benchmark records, sorted mixer-first then by
/// length. Latencies print with Rust's shortest round-trip float format,
/// so parsing the CSV back recovers bit-identical values.
pub fn csv_string(records: &[BenchRecord]) -> String {
    let mut sorted: Vec<&BenchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.mixer.cmp(&b.mixer).then(a.seq_len.cmp(&b.seq_len)));
    let mut out = String::from("mixer,seq_len,per_token_latency_s,live_bytes,repeats\n");
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mixer, r.seq_len, r.per_token_latency_s, r.live_bytes, r.repeats
        ));
    }
    out
}

/// Write records as CSV to `path`.
pub fn emit_csv(records: &[BenchRecord], path: &std::path::Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no benchmark records to emit".into()));
    }
    std::fs::write(path, csv_string(records))?;
    Ok(())
}

/// Sidecar text documenting the benchmark model shape next to a CSV.
pub fn describe_bench_model(config: &ModelConfig, repeats: usize, warmup: usize) -> String {
    format!(
        "benchmark model: batch=1 n_layers={} d_model={} n_heads={} head_dim={} \
         feature_dim={} ffn_mult={} vocab={}\ntiming: median of {repeats} repeats after \
         {warmup} warmup runs, single-threaded\nmemory: analytic live state bytes \
         (f32): softmax T*2*head_dim*n_heads*n_layers*4; rules \
         n_layers*n_heads*(d*m plus m if normalized)*4\n",
        config.n_layers,
        config.d_model,
        config.n_heads,
        config.head_dim,
        config.feature_dim,
        config.ffn_mult,
        config.vocab_size,
    )
}

/// Parse a CSV produced by `csv_string` back into records.
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::EmptyInput("empty CSV".into()))?;
    if header != "mixer,seq_len,per_token_latency_s,live_bytes,repeats" {
        return Err(Error::InvalidConfig(format!("bad CSV header: {header}")));
    }
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::InvalidConfig(format!(
                "expected 5 columns, got {}: {line}",
                cols.len()
            )));
        }
        let bad = |what: &str| Error::InvalidConfig(format!("bad {what} in CSV row: {line}"));
        records.push(BenchRecord {
            mixer: cols[0].to_string(),
            seq_len: cols[1].parse().map_err(|_| bad("seq_len"))?,
            per_token_latency_s: cols[2].parse().map_err(|_| bad("latency"))?,
            live_bytes: cols[3].parse().map_err(|_| bad("live_bytes"))?,
            repeats: cols[4].parse().map_err(|_| bad("repeats"))?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule_config(rule: RuleKind) -> ModelConfig {
        bench_model_config(
            MixerKind::Rule(RuleConfig {
                rule,
                feature_map: FeatureMapKind::Identity,
                sum_norm: false,
                attention_norm: false,
                d: 32,
                m: 32,
            }),
            4096,
        )
    }

    #[test]
    fn rule_live_bytes_do_not_grow_with_length() {
        let cfg = rule_config(RuleKind::Decay);
        assert_eq!(
            analytic_live_bytes(&cfg, 512),
            analytic_live_bytes(&cfg, 4096)
        );
        // 2 layers × 4 heads × 32×32 floats × 4 bytes.
        assert_eq!(analytic_live_bytes(&cfg, 512), 2 * 4 * 32 * 32 * 4);
    }

    #[test]
    fn softmax_live_bytes_scale_linearly() {
        let cfg = bench_model_config(MixerKind::Softmax, 4096);
        let at_512 = analytic_live_bytes(&cfg, 512);
        let at_4096 = analytic_live_bytes(&cfg, 4096);
        assert_eq!(at_4096, 8 * at_512);
        assert_eq!(at_512, 512 * 2 * 32 * 4 * 2 * 4);
    }

    #[test]
    fn decay_and_delta_live_bytes_match_without_normalizer() {
        let decay = rule_config(RuleKind::Decay);
        let delta = rule_config(RuleKind::Delta);
        assert_eq!(
            analytic_live_bytes(&decay, 1024),
            analytic_live_bytes(&delta, 1024)
        );
        // With the attention normalizer the delta state carries an extra
        // m-vector per head.
        let mut with_norm = rule_config(RuleKind::Add);
        if let MixerKind::Rule(rc) = &mut with_norm.mixer {
            rc.attention_norm = true;
        }
        assert_eq!(
            analytic_live_bytes(&with_norm, 64),
            2 * 4 * (32 * 32 + 32) * 4
        );
    }

    #[test]
    fn analytic_bytes_match_generation_state_for_f32_models() {
        for label in ["decay", "softmax", "local8"] {
            let mixer = mixer_from_label(label).unwrap();
            let cfg = bench_model_config(mixer, 64);
            let model = build_model::<f32>(&cfg, 0).unwrap();
            let mut state = GenerationState::new(&model);
            for t in 0..48 {
                step_logits(&model, &mut state, (t * 7) % 256).unwrap();
            }
            assert_eq!(
                state.live_bytes(),
                analytic_live_bytes(&cfg, 48),
                "mismatch for {label}"
            );
        }
    }

    #[test]
    fn csv_round_trips_and_has_five_columns() {
        let records = vec![
            BenchRecord {
                mixer: "softmax".into(),
                seq_len: 256,
                per_token_latency_s: 1.2345e-4,
                live_bytes: 1 << 20,
                repeats: 9,
            },
            BenchRecord {
                mixer: "decay".into(),
                seq_len: 4096,
                per_token_latency_s: 7.0e-5,
                live_bytes: 32768,
                repeats: 9,
            },
        ];
        let one = csv_string(&records[..1]);
        assert_eq!(one.lines().count(), 2); // header + row

        let text = csv_string(&records);
        for line in text.lines() {
            assert_eq!(line.split(',').count(), 5);
        }
        // Sorted mixer-first: decay row before softmax row.
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("decay,"));
        assert!(lines[2].starts_with("softmax,"));

        let parsed = parse_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].mixer, "decay");
        assert_eq!(parsed[0].per_token_latency_s, 7.0e-5);
        assert_eq!(parsed[1].seq_len, 256);
        assert_eq!(parsed[1].per_token_latency_s, 1.2345e-4);

        assert!(parse_csv("wrong,header\n1,2\n").is_err());
    }

    #[test]
    fn bench_rejects_bad_arguments() {
        let mixers = vec!["decay".to_string()];
        assert!(bench_generation_default(&mixers, &[64, 32], 9, 1, 0).is_err());
        assert!(bench_generation_default(&mixers, &[32, 64], 3, 1, 0).is_err());
        assert!(bench_generation_default(&[], &[32], 9, 1, 0).is_err());
        assert!(mixer_from_label("nonsense").is_err());
        assert!(mixer_from_label("localx").is_err());
    }

    #[test]
    fn small_benchmark_produces_ordered_records() {
        let mixers = vec!["softmax".to_string(), "decay".to_string()];
        let records = bench_generation_default(&mixers, &[16, 32], 5, 1, 0).unwrap();
        assert_eq!(records.len(), 4);
        for r in &records {
            assert!(r.per_token_latency_s > 0.0);
            assert_eq!(r.repeats, 5);
        }
        // Input order preserved in the record list; CSV sorts.
        assert_eq!(records[0].mixer, "softmax");
        assert_eq!(records[0].seq_len, 16);
        assert_eq!(records[3].mixer, "decay");
        assert_eq!(records[3].seq_len, 32);
        assert_eq!(records[3].live_bytes, records[2].live_bytes);
        assert_eq!(records[1].live_bytes, 2 * records[0].live_bytes);
    }
}
