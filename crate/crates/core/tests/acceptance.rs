//! Acceptance gate: ten numbered checks covering the kernelization
//! identity, step/scan agreement, gate limits, gradient correctness,
//! constant-memory decoding, incremental/batch equivalence, attention-to-
//! rule conversion, desk-scale trainability ordering, the ablation grid,
//! and determinism across reruns. One line prints per criterion; the
//! process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use fastweights::ablate::{self, CellOutcome};
use fastweights::attention::kernel_attention_direct;
use fastweights::corpus::{bundled_splits, CorpusSplits};
use fastweights::featmap::{FeatureMapKind, FeatureMapParams};
use fastweights::genbench;
use fastweights::gradients::{gradcheck_rule, RuleProblem};
use fastweights::model::{
    build_model, convert_mixer, forward_logits, step_logits, GenerationState, MixerKind,
    ModelConfig,
};
use fastweights::real::{sigmoid, Real};
use fastweights::rules::{
    init_state, scan, step, FastWeightState, GateOverride, GateParams, RuleConfig, RuleKind,
    RuleParams,
};
use fastweights::tensor::{Matrix, Vector};
use fastweights::train::train;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: a verdict, a one-line explanation, and named
/// serialized artifacts used by the determinism check.
struct Crit {
    pass: bool,
    detail: String,
    artifacts: BTreeMap<String, String>,
}

impl Crit {
    fn new(pass: bool, detail: String) -> Self {
        Crit {
            pass,
            detail,
            artifacts: BTreeMap::new(),
        }
    }

    fn with(mut self, name: &str, text: String) -> Self {
        self.artifacts.insert(name.to_string(), text);
        self
    }
}

fn guard(f: impl FnOnce() -> Crit) -> Crit {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(c) => c,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("panic with non-string payload");
            Crit::new(false, format!("panicked: {msg}"))
        }
    }
}

fn print_line(n: usize, name: &str, crit: &Crit, secs: f64) {
    println!(
        "criterion {n:>2} {} ({secs:>6.1}s) {name}: {}",
        if crit.pass { "PASS" } else { "FAIL" },
        crit.detail
    );
    std::io::stdout().flush().ok();
}

fn main() {
    let t0 = Instant::now();
    let data = bundled_splits().expect("bundled corpus must load");
    let names = [
        "kernelized add scan vs direct attention",
        "scan equals repeated step",
        "gate-limit identities",
        "analytic gradients vs finite differences",
        "constant-memory decoding",
        "incremental decoding vs teacher forcing",
        "attention-to-rule conversion",
        "trainability ordering on the bundled corpus",
        "ablation grid shape",
        "determinism across reruns",
    ];

    let mut outcomes: Vec<Crit> = Vec::new();
    for n in 1..=9usize {
        let started = Instant::now();
        let crit = guard(|| match n {
            1 => criterion1(),
            2 => criterion2(),
            3 => criterion3(),
            4 => criterion4(),
            5 => criterion5(),
            6 => criterion6(),
            7 => criterion7(),
            8 => criterion8(&data, true),
            9 => criterion9(&data),
            _ => unreachable!(),
        });
        print_line(n, names[n - 1], &crit, started.elapsed().as_secs_f64());
        outcomes.push(crit);
    }

    let started = Instant::now();
    let crit10 = guard(|| criterion10(&data, &outcomes));
    print_line(10, names[9], &crit10, started.elapsed().as_secs_f64());
    outcomes.push(crit10);

    let passed = outcomes.iter().filter(|c| c.pass).count();
    println!(
        "acceptance: {passed}/10 criteria passed ({:.1}s total)",
        t0.elapsed().as_secs_f64()
    );
    std::process::exit(if passed == 10 { 0 } else { 1 });
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector<f64> {
    Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rand_vecs(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Vec<Vector<f64>> {
    (0..t).map(|_| rand_vec(rng, n)).collect()
}

fn vec_cast<T: Real>(v: &Vector<f64>) -> Vector<T> {
    Vector::from_vec(v.data().iter().map(|&x| T::from_f64(x)).collect())
}

fn mat_cast<T: Real>(m: &Matrix<f64>) -> Matrix<T> {
    Matrix::from_vec(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&x| T::from_f64(x)).collect(),
    )
    .expect("shape is preserved")
}

fn params_cast<T: Real>(p: &RuleParams<f64>) -> RuleParams<T> {
    let feature = FeatureMapParams {
        w_phi: p.feature.w_phi.as_ref().map(|m| mat_cast::<T>(m)),
        b_phi: p.feature.b_phi.as_ref().map(|v| vec_cast::<T>(v)),
    };
    let gate = match &p.gate {
        GateParams::None => GateParams::None,
        GateParams::Scalar { w_g, b_g } => GateParams::Scalar {
            w_g: vec_cast::<T>(w_g),
            b_g: T::from_f64(*b_g),
        },
        GateParams::Factored { w_z, b_z, w_f, b_f } => GateParams::Factored {
            w_z: mat_cast::<T>(w_z),
            b_z: vec_cast::<T>(b_z),
            w_f: mat_cast::<T>(w_f),
            b_f: vec_cast::<T>(b_f),
        },
    };
    RuleParams::validated(p.config, feature, gate).expect("cast preserves validity")
}

fn state_cast<T: Real>(s: &FastWeightState<f64>) -> FastWeightState<T> {
    FastWeightState {
        s: mat_cast::<T>(&s.s),
        z: s.z.as_ref().map(|z| vec_cast::<T>(z)),
    }
}

fn max_abs_diff_vecs<T: Real>(a: &[Vector<T>], b: &[Vector<T>]) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            worst = worst.max((u.to_f64_lossy() - v.to_f64_lossy()).abs());
        }
    }
    worst
}

/// Every constructible rule configuration at the given geometry; the
/// coordinatewise maps force m = d.
fn legal_configs(d: usize, m_rect: usize) -> Vec<RuleConfig> {
    let rules = [RuleKind::Add, RuleKind::Gated, RuleKind::Delta, RuleKind::Decay];
    let maps = [
        FeatureMapKind::Identity,
        FeatureMapKind::Linear,
        FeatureMapKind::Relu,
        FeatureMapKind::Elu1,
    ];
    let mut out = Vec::new();
    for &rule in &rules {
        for &map in &maps {
            for &sum_norm in &[false, true] {
                for &attention_norm in &[false, true] {
                    let m = if map.requires_square() { d } else { m_rect };
                    let config = RuleConfig { rule, feature_map: map, sum_norm, attention_norm, d, m };
                    if config.validate().is_ok() {
                        out.push(config);
                    }
                }
            }
        }
    }
    out
}

fn rule_mixer(rule: RuleKind, map: FeatureMapKind, sum_norm: bool, attention_norm: bool, m: usize) -> MixerKind {
    MixerKind::Rule(RuleConfig { rule, feature_map: map, sum_norm, attention_norm, d: 32, m })
}

fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Criterion 1: the additive rule run as a recurrence, with attention
// normalization, reproduces quadratic-time kernel attention.
// ---------------------------------------------------------------------------

fn criterion1() -> Crit {
    let (t_len, d) = (32usize, 8usize);
    let config = RuleConfig {
        rule: RuleKind::Add,
        feature_map: FeatureMapKind::Elu1,
        sum_norm: false,
        attention_norm: true,
        d,
        m: d,
    };
    let params = RuleParams::validated(config, FeatureMapParams::none(), GateParams::None)
        .expect("add config is valid");

    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = rand_vecs(&mut rng, t_len, d);
        let qs = rand_vecs(&mut rng, t_len, d);
        let ks = rand_vecs(&mut rng, t_len, d);
        let vs = rand_vecs(&mut rng, t_len, d);
        let (ys, _) = scan(&params, &init_state::<f64>(&config), &xs, &qs, &ks, &vs)
            .expect("scan succeeds on positive features");
        let direct = kernel_attention_direct(
            FeatureMapKind::Elu1,
            &FeatureMapParams::none(),
            false,
            true,
            &qs,
            &ks,
            &vs,
        )
        .expect("direct kernel attention succeeds");
        let diff = max_abs_diff_vecs(&ys, &direct);
        lines.push(format!("seed={seed} max_abs_diff={diff:.3e}"));
        worst = worst.max(diff);
    }
    Crit::new(
        worst <= 1e-10,
        format!(
            "recurrent add scan vs quadratic-time attention (T=32, d=m=8, elu1, normalized): max |diff| {worst:.2e} over 10 seeds, tolerance 1e-10"
        ),
    )
    .with("c1/diffs", lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Criterion 2: whole-sequence scan equals repeated single-token steps for
// every rule and every legal configuration, in both precisions.
// ---------------------------------------------------------------------------

fn c2_one_leg<T: Real>(params: &RuleParams<T>, init: &FastWeightState<T>, xs: &[Vector<T>], qs: &[Vector<T>], ks: &[Vector<T>], vs: &[Vector<T>]) -> f64 {
    let (ys_scan, final_scan) = scan(params, init, xs, qs, ks, vs).expect("scan succeeds");
    let mut st = init.clone();
    let mut ys_step = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        ys_step.push(step(params, &mut st, &xs[i], &qs[i], &ks[i], &vs[i], i, None).expect("step succeeds"));
    }
    let mut worst = max_abs_diff_vecs(&ys_scan, &ys_step);
    worst = worst.max(
        final_scan
            .s
            .max_abs_diff(&st.s)
            .to_f64_lossy(),
    );
    if let (Some(a), Some(b)) = (final_scan.z.as_ref(), st.z.as_ref()) {
        worst = worst.max(max_abs_diff_vecs(std::slice::from_ref(a), std::slice::from_ref(b)));
    }
    worst
}

fn criterion2() -> Crit {
    let configs = legal_configs(6, 4);
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    let mut lines = Vec::new();
    let mut seed = 100u64;
    for config in &configs {
        for &t_len in &[1usize, 7, 64] {
            seed += 1;
            let p = RuleProblem::random(*config, t_len, seed).expect("well-posed problem");
            let d64 = c2_one_leg(&p.params, &p.init, &p.xs, &p.qs, &p.ks, &p.vs);
            let params32 = params_cast::<f32>(&p.params);
            let init32 = state_cast::<f32>(&p.init);
            let cast_all = |vs: &[Vector<f64>]| -> Vec<Vector<f32>> { vs.iter().map(|v| vec_cast::<f32>(v)).collect() };
            let d32 = c2_one_leg(
                &params32,
                &init32,
                &cast_all(&p.xs),
                &cast_all(&p.qs),
                &cast_all(&p.ks),
                &cast_all(&p.vs),
            );
            lines.push(format!("{} T={t_len} f64={d64:.3e} f32={d32:.3e}", config.describe()));
            worst64 = worst64.max(d64);
            worst32 = worst32.max(d32);
        }
    }
    Crit::new(
        worst64 <= 1e-12 && worst32 <= 1e-5,
        format!(
            "{} legal configs x T in {{1,7,64}}: max |scan - step| {worst64:.2e} double (tol 1e-12), {worst32:.2e} single (tol 1e-5)",
            configs.len()
        ),
    )
    .with("c2/diffs", lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Criterion 3: forced-gate limits. Decay with G = 1 reproduces the add rule
// exactly; the gated keep-gate freezes at g = 1 and overwrites at g = 0
// exactly; delta with g = 1 and a unit-norm key retrieves the value.
// ---------------------------------------------------------------------------

fn criterion3() -> Crit {
    let d = 6usize;
    let t_len = 16usize;
    let mut lines = Vec::new();

    // Decay forced to G = 1 against the add rule on shared inputs.
    let decay_cfg = RuleConfig {
        rule: RuleKind::Decay,
        feature_map: FeatureMapKind::Identity,
        sum_norm: false,
        attention_norm: false,
        d,
        m: d,
    };
    let add_cfg = RuleConfig { rule: RuleKind::Add, ..decay_cfg };
    let p = RuleProblem::random(decay_cfg, t_len, 0).expect("decay problem");
    let add_params = RuleParams::validated(add_cfg, FeatureMapParams::none(), GateParams::None)
        .expect("add config is valid");
    let ones = Matrix::from_vec(d, d, vec![1.0f64; d * d]).expect("square matrix of ones");
    let mut st_decay = p.init.clone();
    let mut st_add = p.init.clone();
    let mut decay_as_add = true;
    for i in 0..t_len {
        let y_d = step(
            &p.params,
            &mut st_decay,
            &p.xs[i],
            &p.qs[i],
            &p.ks[i],
            &p.vs[i],
            i,
            Some(&GateOverride::Matrix(ones.clone())),
        )
        .expect("decay step");
        let y_a = step(&add_params, &mut st_add, &p.xs[i], &p.qs[i], &p.ks[i], &p.vs[i], i, None)
            .expect("add step");
        decay_as_add &= y_d == y_a && st_decay.s == st_add.s;
    }
    lines.push(format!("decay-G1-equals-add exact={decay_as_add}"));

    // Gated keep-gate: g = 1 freezes, g = 0 overwrites.
    let gated_cfg = RuleConfig { rule: RuleKind::Gated, ..decay_cfg };
    let pg = RuleProblem::random(gated_cfg, t_len, 1).expect("gated problem");
    let mut st = pg.init.clone();
    for i in 0..4 {
        step(&pg.params, &mut st, &pg.xs[i], &pg.qs[i], &pg.ks[i], &pg.vs[i], i, None).expect("warm-up step");
    }
    let snapshot = st.clone();
    let y_frozen = step(
        &pg.params,
        &mut st,
        &pg.xs[4],
        &pg.qs[4],
        &pg.ks[4],
        &pg.vs[4],
        4,
        Some(&GateOverride::Scalar(1.0)),
    )
    .expect("frozen step");
    let frozen_exact = st.s == snapshot.s
        && y_frozen == snapshot.s.matvec(&pg.qs[4]).expect("readout of frozen state");
    lines.push(format!("gated-g1-freezes exact={frozen_exact}"));

    let (k5, v5) = (&pg.ks[5], &pg.vs[5]);
    step(
        &pg.params,
        &mut st,
        &pg.xs[5],
        &pg.qs[5],
        k5,
        v5,
        5,
        Some(&GateOverride::Scalar(0.0)),
    )
    .expect("overwrite step");
    let mut expected = Matrix::zeros(d, d);
    expected.add_outer(v5.data(), k5.data(), 1.0f64);
    let overwrite_exact = st.s == expected;
    lines.push(format!("gated-g0-overwrites exact={overwrite_exact}"));

    // Delta with g = 1: a unit-norm key makes the readout return the value.
    let delta_cfg = RuleConfig { rule: RuleKind::Delta, ..decay_cfg };
    let pd = RuleProblem::random(delta_cfg, t_len, 2).expect("delta problem");
    let mut st = pd.init.clone();
    for i in 0..t_len {
        step(&pd.params, &mut st, &pd.xs[i], &pd.qs[i], &pd.ks[i], &pd.vs[i], i, None).expect("delta step");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut k_unit = rand_vec(&mut rng, d);
    let norm = k_unit.dot(&k_unit).expect("dot").sqrt();
    k_unit.scale_in_place(1.0 / norm);
    let v_target = rand_vec(&mut rng, d);
    let x = rand_vec(&mut rng, d);
    let y = step(
        &pd.params,
        &mut st,
        &x,
        &k_unit.clone(),
        &k_unit,
        &v_target,
        t_len,
        Some(&GateOverride::Scalar(1.0)),
    )
    .expect("retrieval step");
    let retrieval_err = max_abs_diff_vecs(std::slice::from_ref(&y), std::slice::from_ref(&v_target));
    lines.push(format!("delta-g1-retrieves err={retrieval_err:.3e}"));

    let pass = decay_as_add && frozen_exact && overwrite_exact && retrieval_err <= 1e-12;
    Crit::new(
        pass,
        format!(
            "decay with G=1 equals add exactly: {decay_as_add}; keep-gate freeze (g=1) / overwrite (g=0) exact: {frozen_exact}/{overwrite_exact}; delta g=1 unit-key retrieval error {retrieval_err:.1e} (tol 1e-12)"
        ),
    )
    .with("c3/checks", lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Criterion 4: analytic backward pass vs central finite differences for
// every rule and configuration.
// ---------------------------------------------------------------------------

fn criterion4() -> Crit {
    let configs = legal_configs(4, 3);
    let mut worst = 0.0f64;
    let mut total_checked = 0usize;
    let mut lines = Vec::new();
    for config in &configs {
        let mut config_worst = 0.0f64;
        for seed in 0..5u64 {
            let report = gradcheck_rule(*config, 8, seed, 1e-5).expect("gradcheck runs");
            total_checked += report.checked;
            config_worst = config_worst.max(report.max_rel_err);
        }
        lines.push(format!("{} T=8 seeds=5 max_rel_err={config_worst:.3e}", config.describe()));
        worst = worst.max(config_worst);
    }
    Crit::new(
        worst <= 1e-5,
        format!(
            "{} configs x 5 seeds (T=8, d=4, m=3 or 4 for coordinatewise maps), {total_checked} coordinates: max rel err {worst:.2e}, tolerance 1e-5",
            configs.len()
        ),
    )
    .with("c4/errors", lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Criterion 5: per-token decoding latency stays flat for the rules while
// softmax attention grows, and the analytic state footprint matches.
// ---------------------------------------------------------------------------

fn criterion5() -> Crit {
    let mixers: Vec<String> = ["softmax", "delta", "decay"].iter().map(|s| s.to_string()).collect();
    let lengths = [256usize, 4096];
    let records = genbench::bench_generation_default(&mixers, &lengths, 9, 3, 0)
        .expect("benchmark runs");
    let get = |mixer: &str, t: usize| {
        records
            .iter()
            .find(|r| r.mixer == mixer && r.seq_len == t)
            .unwrap_or_else(|| panic!("record for {mixer} at {t}"))
    };
    let ratio = |mixer: &str| get(mixer, 4096).per_token_latency_s / get(mixer, 256).per_token_latency_s;
    let (decay_r, delta_r, soft_r) = (ratio("decay"), ratio("delta"), ratio("softmax"));

    // Analytic state footprint across a denser length grid.
    let all_t = [256usize, 512, 1024, 2048, 4096];
    let mut analytic_lines = Vec::new();
    let mut rules_flat = true;
    for label in ["delta", "decay"] {
        let cfg = genbench::bench_model_config(
            genbench::mixer_from_label(label).expect("known mixer"),
            4096,
        );
        let first = genbench::analytic_live_bytes(&cfg, all_t[0]);
        for &t in &all_t {
            let b = genbench::analytic_live_bytes(&cfg, t);
            analytic_lines.push(format!("{label} t={t} bytes={b}"));
            rules_flat &= b == first;
        }
    }
    let soft_cfg = genbench::bench_model_config(MixerKind::Softmax, 4096);
    for &t in &all_t {
        analytic_lines.push(format!("softmax t={t} bytes={}", genbench::analytic_live_bytes(&soft_cfg, t)));
    }
    let soft_16x = genbench::analytic_live_bytes(&soft_cfg, 4096)
        == 16 * genbench::analytic_live_bytes(&soft_cfg, 256)
        && get("softmax", 4096).live_bytes == 16 * get("softmax", 256).live_bytes;
    let measured_flat = get("decay", 4096).live_bytes == get("decay", 256).live_bytes
        && get("delta", 4096).live_bytes == get("delta", 256).live_bytes;

    // Deterministic projection of the records: everything but the timings.
    let mut sorted: Vec<_> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.mixer, a.seq_len).cmp(&(&b.mixer, b.seq_len)));
    let mut projection = String::from("mixer,seq_len,live_bytes,repeats\n");
    for r in sorted {
        projection.push_str(&format!("{},{},{},{}\n", r.mixer, r.seq_len, r.live_bytes, r.repeats));
    }

    let pass = decay_r <= 1.5 && delta_r <= 1.5 && soft_r >= 4.0 && rules_flat && measured_flat && soft_16x;
    Crit::new(
        pass,
        format!(
            "per-token latency 4096 vs 256: decay {decay_r:.2}x, delta {delta_r:.2}x (need <= 1.5x), softmax {soft_r:.2}x (need >= 4x); rule state bytes constant in T: {}; softmax KV bytes 256->4096 exactly 16x: {soft_16x}",
            rules_flat && measured_flat
        ),
    )
    .with("c5/records", projection)
    .with("c5/analytic", analytic_lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Criterion 6: greedy incremental decoding reproduces the teacher-forced
// batch forward pass for every mixer.
// ---------------------------------------------------------------------------

fn c6_one_mixer<T: Real>(config: &ModelConfig, seed: u64) -> f64 {
    let model = build_model::<T>(config, seed).expect("model builds");
    let mut tokens = vec![97usize];
    let mut state = GenerationState::new(&model);
    let mut incremental: Vec<Vector<T>> = Vec::with_capacity(32);
    for i in 0..32 {
        let logits = step_logits(&model, &mut state, tokens[i]).expect("incremental step");
        tokens.push(argmax(logits.data()));
        incremental.push(logits);
    }
    let full = forward_logits(&model, &tokens).expect("batch forward");
    let mut worst = 0.0f64;
    for (i, inc) in incremental.iter().enumerate() {
        for (&a, &b) in full.row(i).iter().zip(inc.data()) {
            worst = worst.max((a.to_f64_lossy() - b.to_f64_lossy()).abs());
        }
    }
    worst
}

fn criterion6() -> Crit {
    let mixers = vec![
        MixerKind::Softmax,
        MixerKind::Local { window: 32 },
        rule_mixer(RuleKind::Add, FeatureMapKind::Identity, false, false, 32),
        rule_mixer(RuleKind::Gated, FeatureMapKind::Relu, false, true, 16),
        rule_mixer(RuleKind::Delta, FeatureMapKind::Relu, true, false, 16),
        rule_mixer(RuleKind::Decay, FeatureMapKind::Linear, false, false, 16),
    ];
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    let mut lines = Vec::new();
    for mixer in &mixers {
        let config = ModelConfig::desk(*mixer);
        let d32 = c6_one_mixer::<f32>(&config, 11);
        let d64 = c6_one_mixer::<f64>(&config, 11);
        lines.push(format!("{} f32={d32:.3e} f64={d64:.3e}", mixer.label()));
        worst32 = worst32.max(d32);
        worst64 = worst64.max(d64);
    }
    Crit::new(
        worst32 <= 1e-4 && worst64 <= 1e-10,
        format!(
            "6 mixers, 32 greedy tokens: max |incremental - batch| logit diff {worst32:.2e} single (tol 1e-4), {worst64:.2e} double (tol 1e-10)"
        ),
    )
    .with("c6/diffs", lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Criterion 7: converting a softmax model to each rule yields finite
// forwards, the pinned delta gate bias, and exact value-projection
// rescaling.
// ---------------------------------------------------------------------------

fn criterion7() -> Crit {
    let src_cfg = ModelConfig::desk(MixerKind::Softmax);
    let src64 = build_model::<f64>(&src_cfg, 5).expect("source model");
    let src32 = build_model::<f32>(&src_cfg, 5).expect("source model");
    let d = src_cfg.head_dim;
    let targets = [
        RuleConfig { rule: RuleKind::Add, feature_map: FeatureMapKind::Identity, sum_norm: false, attention_norm: false, d, m: d },
        RuleConfig { rule: RuleKind::Add, feature_map: FeatureMapKind::Linear, sum_norm: false, attention_norm: false, d, m: 16 },
        RuleConfig { rule: RuleKind::Gated, feature_map: FeatureMapKind::Relu, sum_norm: false, attention_norm: true, d, m: 16 },
        RuleConfig { rule: RuleKind::Delta, feature_map: FeatureMapKind::Relu, sum_norm: true, attention_norm: false, d, m: 16 },
        RuleConfig { rule: RuleKind::Decay, feature_map: FeatureMapKind::Identity, sum_norm: false, attention_norm: false, d, m: d },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tokens: Vec<usize> = (0..64).map(|_| rng.gen_range(0..256)).collect();

    let mut all_ok = true;
    let mut worst_gate_err = 0.0f64;
    let mut lines = Vec::new();
    for target in &targets {
        let conv = convert_mixer(&src64, target, 99).expect("conversion succeeds");
        let finite64 = forward_logits(&conv, &tokens).expect("forward succeeds").all_finite();
        let conv32 = convert_mixer(&src32, target, 99).expect("conversion succeeds");
        let finite32 = forward_logits(&conv32, &tokens).expect("forward succeeds").all_finite();

        // Value-projection rescaling, reproduced operation for operation.
        let mut wv_exact = true;
        let mut gate_note = String::from("-");
        for (ls, lc) in src64.layers.iter().zip(&conv.layers) {
            let expected = match target.rule {
                RuleKind::Add => {
                    let mut w = ls.mixer.w_v.clone();
                    w.scale_in_place(1.0f64 / 512.0);
                    w
                }
                RuleKind::Decay => {
                    let mut w = ls.mixer.w_v.clone();
                    for (h, head) in lc.mixer.heads.iter().enumerate() {
                        if let GateParams::Factored { b_z, .. } = &head.gate {
                            for i in 0..d {
                                let keep = 1.0f64 - sigmoid(b_z.get(i));
                                for x in w.row_mut(h * d + i) {
                                    *x *= keep;
                                }
                            }
                        }
                    }
                    w
                }
                _ => ls.mixer.w_v.clone(),
            };
            wv_exact &= lc.mixer.w_v == expected;
            for head in &lc.mixer.heads {
                match (&head.gate, target.rule) {
                    (GateParams::Scalar { w_g, b_g }, RuleKind::Delta) => {
                        let err = (sigmoid(*b_g) - 0.007).abs();
                        worst_gate_err = worst_gate_err.max(err);
                        gate_note = format!("sigma(b_g)={:.9}", sigmoid(*b_g));
                        all_ok &= w_g.data().iter().all(|&x| x == 0.0);
                    }
                    (GateParams::Scalar { w_g, b_g }, RuleKind::Gated) => {
                        all_ok &= *b_g == 0.0 && w_g.data().iter().all(|&x| x == 0.0);
                        gate_note = "sigma(b_g)=0.5 (neutral)".into();
                    }
                    _ => {}
                }
            }
        }
        all_ok &= finite64 && finite32 && wv_exact;
        lines.push(format!(
            "{} finite_f64={finite64} finite_f32={finite32} w_v_exact={wv_exact} gate={gate_note}",
            target.describe()
        ));
    }
    let pass = all_ok && worst_gate_err <= 1e-9;
    Crit::new(
        pass,
        format!(
            "5 targets from a softmax source: 64-token forward finite in both precisions; delta gate sigma(b_g) within {worst_gate_err:.1e} of 0.007 (tol 1e-9); value-projection rescaling exact"
        ),
    )
    .with("c7/checks", lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Criterion 8: trainability ordering on the bundled corpus. Three
// configurations x three seeds; the assertion is on seed means.
// ---------------------------------------------------------------------------

fn c8_recipe(preset: &str, seed: u64) -> (ModelConfig, fastweights::train::TrainConfig) {
    let spec = ablate::preset(preset, seed).expect("known preset");
    let mut cfg = spec.train;
    cfg.steps = 2000;
    cfg.warmup_steps = 100;
    cfg.eval_every = 250;
    cfg.eval_tokens = Some(4096);
    cfg.seed = seed;
    (spec.model, cfg)
}

fn criterion8(data: &CorpusSplits, full: bool) -> Crit {
    const PRESETS: [&str; 3] = ["table1-add-phi-off", "table1-decay-phi-off", "table2-decay-m32"];
    let seeds = [0u64, 1, 2];
    let runs: Vec<(&str, u64)> = if full {
        PRESETS.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect()
    } else {
        vec![("table2-decay-m32", 0)]
    };

    let mut crit = Crit::new(true, String::new());
    let mut losses: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut summary = Vec::new();
    for (preset, seed) in runs {
        let (model_cfg, cfg) = c8_recipe(preset, seed);
        let mut model = build_model::<f32>(&model_cfg, seed).expect("model builds");
        let report = train(&mut model, data, &cfg).expect("training completes");
        summary.push(format!(
            "{preset} seed={seed} best_valid_loss={:.6} diverged={}",
            report.best_valid_loss, report.diverged
        ));
        losses.entry(preset).or_default().push(report.best_valid_loss);
        crit = crit.with(
            &format!("c8/{preset}-seed{seed}.report"),
            report.to_lines(false).join("\n"),
        );
    }

    if !full {
        crit.detail = "re-sampled table2-decay-m32 seed 0 for the determinism comparison".into();
        return crit;
    }

    let mean = |p: &str| {
        let xs = &losses[p];
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let (add4, dec4, dec32) = (mean(PRESETS[0]), mean(PRESETS[1]), mean(PRESETS[2]));
    let ord_rules = dec4 <= add4;
    let ord_capacity = dec32 < dec4;
    summary.push(format!("mean add-m4={add4:.6} decay-m4={dec4:.6} decay-m32={dec32:.6}"));
    summary.push(format!(
        "ordering decay-m4<=add-m4: {ord_rules}; decay-m32<decay-m4: {ord_capacity}"
    ));
    crit.pass = ord_rules && ord_capacity;
    crit.detail = format!(
        "mean best valid loss over seeds 0-2: add-m4 {add4:.4}, decay-m4 {dec4:.4}, decay-m32 {dec32:.4}; decay-m4 <= add-m4: {ord_rules}, decay-m32 < decay-m4: {ord_capacity} (per-seed values recorded, not asserted)"
    );
    crit.with("c8/summary", summary.join("\n"))
}

// ---------------------------------------------------------------------------
// Criterion 9: the ablation grid has the full 4 x 3 shape with the
// structurally illegal cell reported N/A, and a diverging run is recorded
// as an outcome rather than an error.
// ---------------------------------------------------------------------------

fn criterion9(data: &CorpusSplits) -> Crit {
    let mut grid = ablate::table1_grid(0);
    for cell in &mut grid {
        if let Some(spec) = &mut cell.spec {
            spec.train.steps = 60;
            spec.train.warmup_steps = 10;
            spec.train.eval_every = 30;
            spec.train.eval_tokens = Some(2048);
        }
    }
    let table = ablate::run_ablation_grid(data, &grid, 0).expect("grid runs");

    let twelve = table.cells.len() == 12;
    let na_cells: Vec<_> = table
        .cells
        .iter()
        .filter(|c| c.outcome == CellOutcome::NotApplicable)
        .map(|c| (c.row.clone(), c.col.clone()))
        .collect();
    let na_ok = na_cells == [("decay".to_string(), "baseline".to_string())];
    let mut marked: Vec<_> = table
        .cells
        .iter()
        .filter(|c| c.expect_divergence)
        .map(|c| format!("{}-{}", c.row, c.col))
        .collect();
    marked.sort();
    let marks_ok = marked == ["add-norm-off", "delta-phi-off", "gated-baseline"];
    let outcomes_ok = table
        .cells
        .iter()
        .filter(|c| !(c.row == "decay" && c.col == "baseline"))
        .all(|c| matches!(c.outcome, CellOutcome::Perplexity(_) | CellOutcome::Diverged { .. }));
    let md = table.to_markdown();
    let csv = table.to_csv();
    let csv_ok = ablate::parse_grid_csv(&csv).map(|rows| rows.len() == 12).unwrap_or(false);

    // A deliberately unstable cell must surface as a Diverged outcome.
    let mut demo_cell = ablate::table1_grid(0)
        .into_iter()
        .find(|c| c.row == "add" && c.col == "phi-off")
        .expect("grid has the add/phi-off cell");
    if let Some(spec) = &mut demo_cell.spec {
        spec.train.steps = 8;
        spec.train.warmup_steps = 0;
        spec.train.eval_every = 8;
        spec.train.eval_tokens = Some(512);
        spec.train.lr = 1e30;
        spec.train.clip_norm = f64::INFINITY;
    }
    let demo = ablate::run_ablation_grid(data, std::slice::from_ref(&demo_cell), 0)
        .expect("divergence is recorded, not raised");
    let demo_line = match demo.cells[0].outcome {
        CellOutcome::Diverged { at_step } => format!("outcome=diverged at_step={at_step}"),
        ref other => format!("outcome={other:?}"),
    };
    let demo_ok = matches!(demo.cells[0].outcome, CellOutcome::Diverged { .. });

    let pass = twelve && na_ok && marks_ok && outcomes_ok && csv_ok && md.contains("N/A") && demo_ok;
    Crit::new(
        pass,
        format!(
            "12 cells with decay+normalization N/A: {}; divergence expectations marked on 3 cells: {marks_ok}; a deliberately unstable run is recorded as an outcome: {demo_ok}",
            twelve && na_ok
        ),
    )
    .with("c9/table.md", md)
    .with("c9/table.csv", csv)
    .with("c9/divergence-demo", demo_line)
}

// ---------------------------------------------------------------------------
// Criterion 10: rerunning the checks reproduces the same verdicts and
// byte-identical serialized outputs. Criteria 1-7 and 9 rerun end to end;
// the training-heavy criterion 8 is re-sampled at one configuration.
// ---------------------------------------------------------------------------

fn criterion10(data: &CorpusSplits, first: &[Crit]) -> Crit {
    let reruns: Vec<(usize, Crit)> = vec![
        (1, criterion1()),
        (2, criterion2()),
        (3, criterion3()),
        (4, criterion4()),
        (5, criterion5()),
        (6, criterion6()),
        (7, criterion7()),
        (8, criterion8(data, false)),
        (9, criterion9(data)),
    ];
    let mut compared = 0usize;
    let mut mismatches = Vec::new();
    let mut flag_changes = Vec::new();
    let mut lines = Vec::new();
    for (n, rerun) in &reruns {
        let original = &first[n - 1];
        // The partial criterion-8 rerun has no verdict of its own.
        if *n != 8 && rerun.pass != original.pass {
            flag_changes.push(format!("criterion {n}"));
        }
        for (name, text) in &rerun.artifacts {
            compared += 1;
            match original.artifacts.get(name) {
                Some(orig) if orig == text => lines.push(format!("{name} identical")),
                Some(_) => {
                    mismatches.push(name.clone());
                    lines.push(format!("{name} MISMATCH"));
                }
                None => {
                    mismatches.push(name.clone());
                    lines.push(format!("{name} MISSING IN FIRST RUN"));
                }
            }
        }
    }
    let pass = mismatches.is_empty() && flag_changes.is_empty();
    let detail = if pass {
        format!(
            "criteria 1-7 and 9 rerun end to end, criterion 8 re-sampled (decay-m32, seed 0): all verdicts unchanged and {compared} serialized artifacts byte-identical"
        )
    } else {
        format!(
            "verdict changes: [{}]; artifact mismatches: [{}] of {compared}",
            flag_changes.join(", "),
            mismatches.join(", ")
        )
    };
    Crit::new(pass, detail).with("c10/compared", lines.join("\n"))
}
