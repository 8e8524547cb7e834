//! Desk-scale ablation grid: update rule × {baseline, norm-off, phi-off},
//! plus larger-state presets, with divergence recorded as an outcome.
//!
//! The grid mirrors the published ablation's structure. "baseline" is each
//! rule's own normalization scheme with a ReLU feature map (attention
//! normalization for add and gated, sum normalization for delta; the decay
//! rule has no normalization scheme, so its baseline cell is not
//! applicable). "norm-off" keeps the ReLU map and drops all normalization.
//! "phi-off" drops the feature map as well. Cells that diverged at full
//! scale carry an `expect: diverge-or-degrade` annotation rather than a
//! hard assertion — desk scale need not reproduce full-scale instability.

use crate::corpus::CorpusSplits;
use crate::error::{Error, Result};
use crate::featmap::FeatureMapKind;
use crate::model::{build_model, MixerKind, ModelConfig};
use crate::rules::{RuleConfig, RuleKind};
use crate::train::{train, Schedule, TrainConfig};

pub const ABLATION_ROWS: [&str; 4] = ["add", "delta", "gated", "decay"];
pub const ABLATION_COLS: [&str; 3] = ["baseline", "norm-off", "phi-off"];

/// A fully specified desk-scale experiment: model shape plus training
/// recipe under a stable preset name.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// The full-scale counterpart of this cell diverged; the desk-scale
    /// outcome is recorded either way.
    pub expect_divergence: bool,
}

/// Standard ablation model shape: byte vocab, one head of dimension 32,
/// two layers. A single wide head keeps the published geometry m ≤ d, so
/// growing the feature size genuinely grows state capacity instead of
/// projecting a low-rank key through a taller map.
fn ablation_model(mixer: MixerKind) -> ModelConfig {
    let feature_dim = match &mixer {
        MixerKind::Rule(rc) => rc.m,
        _ => 4,
    };
    ModelConfig {
        vocab_size: 256,
        d_model: 32,
        n_heads: 1,
        head_dim: 32,
        feature_dim,
        n_layers: 2,
        ffn_mult: 4,
        max_t: 128,
        mixer,
    }
}

/// Training recipe for one ablation cell: short, cheap, deterministic.
fn ablation_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        seq_len: 127,
        steps: 300,
        lr: 1e-3,
        warmup_steps: 30,
        schedule: Schedule::Cosine { min_lr: 1e-4 },
        clip_norm: 1.0,
        eval_every: 100,
        eval_tokens: Some(2048),
        seed,
    }
}

fn rule_mixer(rule: RuleKind, map: FeatureMapKind, sum: bool, att: bool, m: usize) -> MixerKind {
    MixerKind::Rule(RuleConfig {
        rule,
        feature_map: map,
        sum_norm: sum,
        attention_norm: att,
        d: 32,
        m,
    })
}

/// Mixer for a Table-1-style grid cell, or `None` for the one cell that is
/// structurally illegal (decay with attention normalization). `phi-off`
/// uses a learned linear projection, which subsumes into the key/query
/// weights and is what "no feature map" means here.
fn cell_mixer(rule: RuleKind, col: &str) -> Option<MixerKind> {
    use FeatureMapKind::{Linear, Relu};
    use RuleKind::*;
    match (rule, col) {
        (Add, "baseline") | (Gated, "baseline") => Some(rule_mixer(rule, Relu, false, true, 4)),
        (Delta, "baseline") => Some(rule_mixer(Delta, Relu, true, false, 4)),
        (Decay, "baseline") => None,
        (_, "norm-off") => Some(rule_mixer(rule, Relu, false, false, 4)),
        (_, "phi-off") => Some(rule_mixer(rule, Linear, false, false, 4)),
        _ => None,
    }
}

fn cell_expects_divergence(rule: RuleKind, col: &str) -> bool {
    matches!(
        (rule, col),
        (RuleKind::Gated, "baseline") | (RuleKind::Add, "norm-off") | (RuleKind::Delta, "phi-off")
    )
}

/// One cell of the rule × configuration grid.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub row: &'static str,
    pub col: &'static str,
    /// `None` marks the structurally illegal cell (reported as N/A).
    pub spec: Option<ExperimentSpec>,
    pub expect_divergence: bool,
}

/// The full 4×3 grid: 11 runnable cells plus the decay+normalization N/A.
pub fn table1_grid(seed: u64) -> Vec<GridCell> {
    let mut cells = Vec::with_capacity(12);
    for &row in &ABLATION_ROWS {
        let rule = RuleKind::parse(row).expect("grid row is a rule name");
        for &col in &ABLATION_COLS {
            let spec = cell_mixer(rule, col).map(|mixer| ExperimentSpec {
                name: format!("table1-{row}-{col}"),
                model: ablation_model(mixer),
                train: ablation_train(seed),
                expect_divergence: cell_expects_divergence(rule, col),
            });
            cells.push(GridCell {
                row,
                col,
                spec,
                expect_divergence: cell_expects_divergence(rule, col),
            });
        }
    }
    cells
}

/// Every named preset: the 11 runnable grid cells, the extra
/// normalization-without-feature-map experiment, and the larger-state and
/// baseline-mixer rows.
pub fn all_preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for &row in &ABLATION_ROWS {
        for &col in &ABLATION_COLS {
            if !(row == "decay" && col == "baseline") {
                names.push(format!("table1-{row}-{col}"));
            }
        }
    }
    names.push("table1-add-norm-no-phi".to_string());
    for rule in ["gated", "decay"] {
        for m in [16, 32] {
            names.push(format!("table2-{rule}-m{m}"));
        }
    }
    names.push("table2-softmax".to_string());
    names.push("table2-local32".to_string());
    names
}

/// Resolve a preset name to a runnable experiment.
pub fn preset(name: &str, seed: u64) -> Result<ExperimentSpec> {
    if let Some(rest) = name.strip_prefix("table1-") {
        // The extra experiment: normalization kept, feature map removed.
        if rest == "add-norm-no-phi" {
            return Ok(ExperimentSpec {
                name: name.to_string(),
                model: ablation_model(rule_mixer(
                    RuleKind::Add,
                    FeatureMapKind::Linear,
                    false,
                    true,
                    4,
                )),
                train: ablation_train(seed),
                expect_divergence: true,
            });
        }
        for &row in &ABLATION_ROWS {
            for &col in &ABLATION_COLS {
                if rest == format!("{row}-{col}") {
                    let rule = RuleKind::parse(row)?;
                    let mixer = cell_mixer(rule, col).ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "preset {name} is the N/A cell: decay has no normalization scheme"
                        ))
                    })?;
                    return Ok(ExperimentSpec {
                        name: name.to_string(),
                        model: ablation_model(mixer),
                        train: ablation_train(seed),
                        expect_divergence: cell_expects_divergence(rule, col),
                    });
                }
            }
        }
    }
    if let Some(rest) = name.strip_prefix("table2-") {
        let mixer = match rest {
            "softmax" => Some(MixerKind::Softmax),
            "local32" => Some(MixerKind::Local { window: 32 }),
            _ => {
                let (rule_name, m) = rest.split_once("-m").unwrap_or((rest, ""));
                match (RuleKind::parse(rule_name), m.parse::<usize>()) {
                    (Ok(rule), Ok(m)) if m > 0 => {
                        // Larger-state rows: learned linear map to m, no
                        // normalization.
                        Some(rule_mixer(rule, FeatureMapKind::Linear, false, false, m))
                    }
                    _ => None,
                }
            }
        };
        if let Some(mixer) = mixer {
            return Ok(ExperimentSpec {
                name: name.to_string(),
                model: ablation_model(mixer),
                train: ablation_train(seed),
                expect_divergence: false,
            });
        }
    }
    Err(Error::UnknownPreset(name.to_string()))
}

/// Result of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    /// Best validation perplexity over the run.
    Perplexity(f64),
    Diverged { at_step: usize },
    NotApplicable,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: String,
    pub col: String,
    pub preset: String,
    pub expect_divergence: bool,
    pub outcome: CellOutcome,
}

/// Grid outcomes plus the seed that produced them.
#[derive(Debug, Clone)]
pub struct AblationTable {
    pub cells: Vec<CellResult>,
    pub seed: u64,
}

/// Run every runnable cell of the grid on the given corpus. Divergence is
/// recorded, never raised.
pub fn run_ablation_grid(
    data: &CorpusSplits,
    grid: &[GridCell],
    seed: u64,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("ablation grid has no cells".into()));
    }
    let mut cells = Vec::with_capacity(grid.len());
    for cell in grid {
        let (preset_name, outcome) = match &cell.spec {
            None => (format!("table1-{}-{}", cell.row, cell.col), CellOutcome::NotApplicable),
            Some(spec) => {
                let mut cfg = spec.train.clone();
                cfg.seed = seed;
                let mut model = build_model::<f32>(&spec.model, seed)?;
                let report = train(&mut model, data, &cfg)?;
                let outcome = if report.diverged {
                    CellOutcome::Diverged {
                        at_step: report.diverged_at.unwrap_or(0),
                    }
                } else {
                    CellOutcome::Perplexity(report.best_valid_ppl)
                };
                (spec.name.clone(), outcome)
            }
        };
        cells.push(CellResult {
            row: cell.row.to_string(),
            col: cell.col.to_string(),
            preset: preset_name,
            expect_divergence: cell.expect_divergence,
            outcome,
        });
    }
    Ok(AblationTable { cells, seed })
}

fn outcome_label(outcome: &CellOutcome) -> String {
    match outcome {
        CellOutcome::Perplexity(p) => format!("{p:.4}"),
        CellOutcome::Diverged { .. } => "DIVERGED".to_string(),
        CellOutcome::NotApplicable => "N/A".to_string(),
    }
}

impl AblationTable {
    fn cell(&self, row: &str, col: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    /// Markdown table in the published 4×3 layout, with a legend for the
    /// expected-divergence annotation.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| rule | baseline | norm-off | phi-off |\n");
        out.push_str("|---|---|---|---|\n");
        for &row in &ABLATION_ROWS {
            out.push_str(&format!("| {row} |"));
            for &col in &ABLATION_COLS {
                match self.cell(row, col) {
                    Some(c) => {
                        let mark = if c.expect_divergence { " \\*" } else { "" };
                        out.push_str(&format!(" {}{mark} |", outcome_label(&c.outcome)));
                    }
                    None => out.push_str(" — |"),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\n\\* expect: diverge-or-degrade at full scale. seed={}\n",
            self.seed
        ));
        out
    }

    /// CSV with one row per cell: `row,col,preset,outcome,at_step,expect`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,preset,outcome,at_step,expect\n");
        for c in &self.cells {
            let at_step = match &c.outcome {
                CellOutcome::Diverged { at_step } => at_step.to_string(),
                _ => String::new(),
            };
            let expect = if c.expect_divergence {
                "diverge-or-degrade"
            } else {
                ""
            };
            out.push_str(&format!(
                "{},{},{},{},{at_step},{expect}\n",
                c.row,
                c.col,
                c.preset,
                outcome_label(&c.outcome),
            ));
        }
        out
    }
}

/// Parse an ablation CSV back into `(row, col, outcome)` triples.
pub fn parse_grid_csv(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::EmptyInput("empty ablation CSV".into()))?;
    if header != "row,col,preset,outcome,at_step,expect" {
        return Err(Error::InvalidConfig(format!("bad ablation header: {header}")));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::InvalidConfig(format!(
                "expected 6 columns, got {}: {line}",
                cols.len()
            )));
        }
        rows.push((cols[0].to_string(), cols[1].to_string(), cols[3].to_string()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{split_corpus, synthetic_corpus};

    #[test]
    fn grid_has_eleven_runnable_cells_and_one_na() {
        let grid = table1_grid(0);
        assert_eq!(grid.len(), 12);
        let runnable = grid.iter().filter(|c| c.spec.is_some()).count();
        assert_eq!(runnable, 11);
        let na = grid
            .iter()
            .find(|c| c.spec.is_none())
            .expect("one N/A cell");
        assert_eq!((na.row, na.col), ("decay", "baseline"));

        // The published divergence stars.
        let marked: Vec<(&str, &str)> = grid
            .iter()
            .filter(|c| c.expect_divergence)
            .map(|c| (c.row, c.col))
            .collect();
        assert_eq!(
            marked,
            vec![("add", "norm-off"), ("delta", "phi-off"), ("gated", "baseline")]
        );
    }

    #[test]
    fn every_preset_name_resolves_and_validates() {
        for name in all_preset_names() {
            let spec = preset(&name, 3).unwrap_or_else(|e| panic!("{name}: {e}"));
            spec.model.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            spec.train.validate().unwrap();
            assert_eq!(spec.name, name);
        }
        assert!(preset("table1-decay-baseline", 0).is_err());
        assert!(preset("nonsense", 0).is_err());
        assert!(preset("table2-decay-m0", 0).is_err());
    }

    #[test]
    fn table2_presets_have_larger_states_and_baselines() {
        let m32 = preset("table2-decay-m32", 0).unwrap();
        match &m32.model.mixer {
            MixerKind::Rule(rc) => {
                assert_eq!(rc.m, 32);
                assert_eq!(rc.feature_map, FeatureMapKind::Linear);
                assert!(!rc.sum_norm && !rc.attention_norm);
            }
            other => panic!("unexpected mixer {other:?}"),
        }
        assert_eq!(m32.model.feature_dim, 32);

        let local = preset("table2-local32", 0).unwrap();
        assert!(matches!(local.model.mixer, MixerKind::Local { window: 32 }));
        let softmax = preset("table2-softmax", 0).unwrap();
        assert!(matches!(softmax.model.mixer, MixerKind::Softmax));

        let extra = preset("table1-add-norm-no-phi", 0).unwrap();
        assert!(extra.expect_divergence);
        match &extra.model.mixer {
            MixerKind::Rule(rc) => {
                assert!(rc.attention_norm);
                assert_eq!(rc.feature_map, FeatureMapKind::Linear);
                assert_eq!(rc.m, 4);
            }
            other => panic!("unexpected mixer {other:?}"),
        }
    }

    #[test]
    fn tiny_grid_run_records_all_outcomes() {
        let data = split_corpus(
            synthetic_corpus(20_000, 1),
            "mem",
            (0.8, 0.1, 0.1),
            1,
        )
        .unwrap();
        let mut grid = table1_grid(1);
        for cell in &mut grid {
            if let Some(spec) = &mut cell.spec {
                spec.train.steps = 2;
                spec.train.warmup_steps = 1;
                spec.train.eval_every = 2;
                spec.train.eval_tokens = Some(256);
                spec.train.batch_size = 1;
            }
        }
        let table = run_ablation_grid(&data, &grid, 1).unwrap();
        assert_eq!(table.cells.len(), 12);
        let na = table
            .cells
            .iter()
            .filter(|c| c.outcome == CellOutcome::NotApplicable)
            .count();
        assert_eq!(na, 1);
        for c in &table.cells {
            match &c.outcome {
                CellOutcome::Perplexity(p) => assert!(p.is_finite() && *p > 0.0),
                CellOutcome::Diverged { .. } | CellOutcome::NotApplicable => {}
            }
        }

        let md = table.to_markdown();
        assert!(md.contains("| decay | N/A |"));
        assert!(md.contains("| rule | baseline | norm-off | phi-off |"));

        let csv = table.to_csv();
        let parsed = parse_grid_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 12);
        let distinct_rules: std::collections::BTreeSet<&str> =
            parsed.iter().map(|(r, _, _)| r.as_str()).collect();
        assert_eq!(distinct_rules.len(), 4);
        let na_row = parsed
            .iter()
            .find(|(r, c, _)| r == "decay" && c == "baseline")
            .unwrap();
        assert_eq!(na_row.2, "N/A");
    }
}
