//! End-to-end acceptance checks. Each test exercises one numbered criterion
//! and prints a single `criterion N: PASS`/`FAIL` line (visible with
//! `cargo test -- --nocapture`).
//!
//! The heavyweight artifacts (the seed-7 corpus, the supervised checkpoint,
//! and the two 400-step reinforcement runs) are built once and shared across
//! criteria through `OnceLock`s.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adlab::eval::{answer_ranking_predict, evaluate, EvalOptions, LossReduction};
use adlab::judge::{Judge, RemoteJudge, RemoteJudgeConfig};
use adlab::policy::{
    init_params, sample_group, save_checkpoint, token_logprobs, PolicyConfig, PolicyParams,
    SampleOptions,
};
use adlab::tagfmt::format_reward;
use adlab::taskgen::{gen_dataset, GeneratorConfig};
use adlab::telemetry::CsvSink;
use adlab::text::{render_prompt, Difficulty, Sample, Vocab};
use adlab::train::{
    grpo_advantages, grpo_objective, grpo_objective_gradient, kl_term, run_rft, run_sft, sft_step,
    FrozenGroup, FrozenRollout, GrpoConfig, NullSink, RewardMode, StepStats, TelemetrySink,
};

const SEED: u64 = 7;
const SFT_EPOCHS: usize = 12;
const SFT_LR: f64 = 2e-3;
const SFT_BATCH: usize = 16;

fn report(n: u32, name: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("criterion {n} ({name}): PASS");
    } else {
        println!("criterion {n} ({name}): FAIL — {}", failures.join("; "));
        panic!("criterion {n} failed: {}", failures.join("; "));
    }
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl Fn() -> String) {
    if !ok {
        failures.push(what());
    }
}

// ---------------------------------------------------------------------------
// Shared artifacts
// ---------------------------------------------------------------------------

struct Corpus {
    train: Vec<Sample>,
    held: Vec<Sample>,
    vocab: Vocab,
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let gcfg = GeneratorConfig { n_simple: 2000, n_complex: 2000, seed: SEED, ..Default::default() };
        let vocab = gcfg.vocab().expect("vocab");
        let dataset = gen_dataset(&gcfg).expect("dataset");
        // Interleave the two difficulty blocks so both splits stay balanced.
        let mut mixed = Vec::with_capacity(dataset.len());
        for i in 0..2000 {
            mixed.push(dataset[i].clone());
            mixed.push(dataset[2000 + i].clone());
        }
        let held = mixed.split_off(3600);
        Corpus { train: mixed, held, vocab }
    })
}

fn policy_config(vocab_size: usize) -> PolicyConfig {
    PolicyConfig {
        vocab_size,
        context_len: 96,
        embed_dim: 32,
        num_layers: 2,
        num_heads: 2,
        seed: SEED,
    }
}

struct SftRun {
    params: PolicyParams,
    secs: f64,
}

fn sft() -> &'static SftRun {
    static SFT: OnceLock<SftRun> = OnceLock::new();
    SFT.get_or_init(|| {
        let c = corpus();
        let init = init_params(&policy_config(c.vocab.len())).expect("init");
        let t0 = Instant::now();
        let params = run_sft(
            init,
            &c.train,
            SFT_EPOCHS,
            SFT_LR,
            SFT_BATCH,
            &c.vocab,
            &mut NullSink,
            SEED,
        )
        .expect("sft run");
        SftRun { params, secs: t0.elapsed().as_secs_f64() }
    })
}

/// Telemetry sink that both collects rows and streams them to a CSV file.
struct TeeSink {
    csv: CsvSink,
    rows: Vec<StepStats>,
}

impl TelemetrySink for TeeSink {
    fn record(&mut self, stats: &StepStats) {
        self.csv.record(stats);
        self.rows.push(stats.clone());
    }
}

struct RftRun {
    params: PolicyParams,
    rows: Vec<StepStats>,
    csv: Vec<u8>,
    checkpoint: Vec<u8>,
    secs: f64,
}

fn run_rft_mode(mode: RewardMode) -> RftRun {
    let c = corpus();
    let start = &sft().params;
    let cfg = GrpoConfig { reward_mode: mode, ..GrpoConfig::default() };
    let dir = tempfile::tempdir().expect("tempdir");
    let csv_path = dir.path().join("telemetry.csv");
    let mut sink = TeeSink { csv: CsvSink::create(&csv_path).expect("csv sink"), rows: Vec::new() };
    let t0 = Instant::now();
    let params = run_rft(
        start.clone(),
        start,
        &c.train,
        &cfg,
        &Judge::Exact,
        &c.vocab,
        &mut sink,
        SEED,
    )
    .expect("rft run");
    let secs = t0.elapsed().as_secs_f64();
    let ckpt_path = dir.path().join("final.ckpt");
    save_checkpoint(&params, &ckpt_path).expect("checkpoint");
    RftRun {
        params,
        rows: sink.rows,
        csv: std::fs::read(&csv_path).expect("csv bytes"),
        checkpoint: std::fs::read(&ckpt_path).expect("checkpoint bytes"),
        secs,
    }
}

fn ad_run() -> &'static RftRun {
    static AD: OnceLock<RftRun> = OnceLock::new();
    AD.get_or_init(|| run_rft_mode(RewardMode::Ad))
}

fn vanilla_run() -> &'static RftRun {
    static VANILLA: OnceLock<RftRun> = OnceLock::new();
    VANILLA.get_or_init(|| run_rft_mode(RewardMode::Vanilla))
}

// ---------------------------------------------------------------------------
// Criterion 1: format-reward exactness against an independent oracle
// ---------------------------------------------------------------------------

/// Independent scorer: a hand-rolled string matcher (no regex) for the
/// anchored hard patterns plus the four 0.125 soft components.
mod oracle {
    use adlab::text::Difficulty;

    /// Matches `open` at the start of `s`, then looks for `close` with no
    /// newline in between (`.` never crosses a line). Returns the text after
    /// the close tag.
    fn anchored_span<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
        let body = s.strip_prefix(open)?;
        let limit = body.find('\n').unwrap_or(body.len());
        let pos = body.find(close).filter(|&p| p <= limit)?;
        Some(&body[pos + close.len()..])
    }

    fn hard(text: &str, difficulty: Difficulty) -> bool {
        match difficulty {
            Difficulty::Simple => anchored_span(text, "<answer>", "</answer>").is_some(),
            Difficulty::Complex => {
                let Some(rest) = anchored_span(text, "<think>", "</think>") else {
                    return false;
                };
                let rest = rest.trim_start();
                anchored_span(rest, "<answer>", "</answer>").is_some()
            }
        }
    }

    pub fn total(text: &str, difficulty: Difficulty) -> f64 {
        let hard_score = if hard(text, difficulty) { 0.5 } else { 0.0 };
        let checks = match difficulty {
            Difficulty::Complex => [
                text.contains("<think>"),
                text.contains("</think>"),
                text.contains("<answer>"),
                text.contains("</answer>"),
            ],
            Difficulty::Simple => [
                !text.contains("<think>"),
                !text.contains("</think>"),
                text.contains("<answer>"),
                text.contains("</answer>"),
            ],
        };
        let soft = checks.map(|ok| if ok { 0.125 } else { 0.0 });
        hard_score + soft.iter().sum::<f64>()
    }
}

#[test]
fn criterion_01_format_reward_exactness() {
    let t0 = Instant::now();
    let mut failures = Vec::new();

    let worked = [
        ("<think>Y=X+2=7</think> <answer>7</answer>", Difficulty::Complex, 1.0),
        ("<answer>7</answer>", Difficulty::Complex, 0.25),
        ("<answer>5</answer>", Difficulty::Simple, 1.0),
        ("<answer>5</answer><think>", Difficulty::Simple, 0.875),
    ];
    for (text, difficulty, expected) in worked {
        let got = format_reward(text, difficulty).total;
        check(&mut failures, got == expected, || {
            format!("worked case {text:?} at {difficulty:?}: got {got}, expected {expected}")
        });
    }

    // 200 deterministic tag permutations (100 texts x 2 difficulties).
    let pieces = ["<think>", "</think>", "<answer>", "</answer>", "7", " ", "\n", "x"];
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cases = 0usize;
    for _ in 0..100 {
        let len = rng.random_range(1..=5usize);
        let text: String = (0..len).map(|_| pieces[rng.random_range(0..pieces.len())]).collect();
        for difficulty in [Difficulty::Simple, Difficulty::Complex] {
            let got = format_reward(&text, difficulty).total;
            let expected = oracle::total(&text, difficulty);
            check(&mut failures, got == expected, || {
                format!("permutation {text:?} at {difficulty:?}: got {got}, oracle {expected}")
            });
            cases += 1;
        }
    }
    check(&mut failures, cases == 200, || format!("expected 200 cases, ran {cases}"));
    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 1.0, || format!("took {secs:.2}s, budget 1s"));
    report(1, "format-reward exactness", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 2: advantage normalization
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_advantage_normalization() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let g = [2usize, 4, 8][case % 3];
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..1.0)).collect();
        let mean = rewards.iter().sum::<f64>() / g as f64;
        let std =
            (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        let adv = grpo_advantages(&rewards).expect("advantages");
        if std >= 1e-8 {
            let amean = adv.iter().sum::<f64>() / g as f64;
            let astd = (adv.iter().map(|a| (a - amean).powi(2)).sum::<f64>() / g as f64).sqrt();
            check(&mut failures, amean.abs() <= 1e-12, || {
                format!("case {case}: output mean {amean:e} exceeds 1e-12")
            });
            check(&mut failures, (astd - 1.0).abs() <= 1e-9, || {
                format!("case {case}: output std {astd} not within 1e-9 of 1")
            });
        }
    }
    let zeros = grpo_advantages(&[0.7, 0.7, 0.7, 0.7]).expect("guard");
    check(&mut failures, zeros == vec![0.0; 4], || {
        format!("zero-variance guard returned {zeros:?}")
    });
    let hand = grpo_advantages(&[2.0, 0.5, 1.0, 0.5]).expect("hand group");
    let expected = [1.63299, -0.81650, 0.0, -0.81650];
    for (i, (got, want)) in hand.iter().zip(expected).enumerate() {
        check(&mut failures, (got - want).abs() <= 1e-5, || {
            format!("hand group[{i}]: got {got}, expected {want}")
        });
    }
    report(2, "advantage normalization", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 3: KL estimator
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_kl_estimator() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..10_000 {
        let r = rng.random_range(-10.0..0.0);
        let c = rng.random_range(-10.0..0.0);
        let kl = kl_term(r, c);
        check(&mut failures, kl >= 0.0, || format!("case {case}: kl_term({r}, {c}) = {kl} < 0"));
    }
    let at_eq = kl_term(-1.5, -1.5);
    check(&mut failures, at_eq == 0.0, || format!("kl at equality = {at_eq}, expected 0"));
    // ratio u = exp(ref - cur): 2 and 0.5.
    let two = kl_term(-1.0, -1.0 - std::f64::consts::LN_2);
    check(&mut failures, (two - 0.30685).abs() <= 1e-5, || {
        format!("kl at ratio 2 = {two}, expected 0.30685")
    });
    let half = kl_term(-1.0 - std::f64::consts::LN_2, -1.0);
    check(&mut failures, (half - 0.19315).abs() <= 1e-5, || {
        format!("kl at ratio 0.5 = {half}, expected 0.19315")
    });
    report(3, "KL estimator", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 4: gradient fidelity against central finite differences
// ---------------------------------------------------------------------------

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        n_simple: 3,
        n_complex: 3,
        max_hops: 2,
        value_range: (0, 3),
        num_vars: 3,
        seed: 11,
    }
}

fn tiny_policy(vocab_size: usize, seed: u64) -> PolicyConfig {
    PolicyConfig { vocab_size, context_len: 96, embed_dim: 8, num_layers: 1, num_heads: 2, seed }
}

/// Max relative error between analytic and finite-difference gradients; the
/// floor keeps round-off noise on near-zero coordinates from dominating.
fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_04_gradient_fidelity() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let h = 1e-5;

    let gcfg = tiny_generator();
    let vocab = gcfg.vocab().expect("tiny vocab");
    check(&mut failures, vocab.len() <= 32, || format!("tiny vocab has {} tokens", vocab.len()));
    let dataset = gen_dataset(&gcfg).expect("tiny dataset");
    let params = init_params(&tiny_policy(vocab.len(), 13)).expect("tiny init");
    let flat0 = params.t.to_flat();

    // (a) Supervised loss: one simple and one complex sample.
    let batch = vec![dataset[0].clone(), dataset[3].clone()];
    let loss_at = |flat: &[f64]| {
        let mut p = params.clone();
        p.t.assign_from_flat(flat);
        sft_step(&p, &batch, 0.0, &vocab, 0).expect("sft loss").1.sft_loss.unwrap()
    };
    let (next, _) = sft_step(&params, &batch, 1.0, &vocab, 0).expect("sft grad");
    let analytic: Vec<f64> =
        flat0.iter().zip(next.t.to_flat()).map(|(p, n)| p - n).collect();
    let mut fd = vec![0.0; flat0.len()];
    let mut flat = flat0.clone();
    for i in 0..flat.len() {
        flat[i] = flat0[i] + h;
        let plus = loss_at(&flat);
        flat[i] = flat0[i] - h;
        let minus = loss_at(&flat);
        flat[i] = flat0[i];
        fd[i] = (plus - minus) / (2.0 * h);
    }
    let err = max_rel_err(&analytic, &fd);
    check(&mut failures, err <= 1e-4, || {
        format!("supervised-loss gradient max rel err {err:e} exceeds 1e-4")
    });

    // (b) Full clipped KL-regularized surrogate over frozen groups with
    // fixed rewards; rollouts come from a different snapshot so ratios
    // exercise both the clipped and unclipped branches.
    let old_policy = init_params(&tiny_policy(vocab.len(), 21)).expect("old init");
    let ref_policy = init_params(&tiny_policy(vocab.len(), 22)).expect("ref init");
    let mut groups = Vec::new();
    for (pi, sample) in dataset.iter().take(2).enumerate() {
        let prompt = vocab.tokenize(&render_prompt(sample)).expect("prompt");
        let opts = SampleOptions { temperature: 1.0, max_new_tokens: 6, seed: 31 + pi as u64 };
        let gens = sample_group(&old_policy, &prompt, 4, &opts).expect("group");
        let advantages = grpo_advantages(&[1.0, 0.0, 0.5, 0.25]).expect("adv");
        let rollouts: Vec<FrozenRollout> = gens
            .iter()
            .zip(advantages)
            .filter(|(g, _)| !g.tokens.is_empty())
            .map(|(g, advantage)| FrozenRollout {
                output: g.tokens.clone(),
                old_logprobs: token_logprobs(&old_policy, &prompt, &g.tokens).expect("old lp"),
                ref_logprobs: token_logprobs(&ref_policy, &prompt, &g.tokens).expect("ref lp"),
                advantage,
            })
            .collect();
        assert!(!rollouts.is_empty(), "all sampled rollouts were empty");
        groups.push(FrozenGroup { prompt, rollouts });
    }
    let cfg = GrpoConfig::default();
    let (_, grads, _) = grpo_objective_gradient(&params, &groups, &cfg).expect("surrogate grad");
    let analytic = grads.to_flat();
    let objective_at = |flat: &[f64]| {
        let mut p = params.clone();
        p.t.assign_from_flat(flat);
        grpo_objective(&p, &groups, &cfg).expect("objective")
    };
    let mut fd = vec![0.0; flat0.len()];
    let mut flat = flat0.clone();
    for i in 0..flat.len() {
        flat[i] = flat0[i] + h;
        let plus = objective_at(&flat);
        flat[i] = flat0[i] - h;
        let minus = objective_at(&flat);
        flat[i] = flat0[i];
        fd[i] = (plus - minus) / (2.0 * h);
    }
    let err = max_rel_err(&analytic, &fd);
    check(&mut failures, err <= 1e-4, || {
        format!("surrogate gradient max rel err {err:e} exceeds 1e-4")
    });

    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 120.0, || format!("took {secs:.1}s, budget 120s"));
    report(4, "gradient fidelity", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 5: supervised competence on the seed-7 corpus
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_supervised_competence() {
    let mut failures = Vec::new();
    let c = corpus();
    let run = sft();
    let eval = evaluate(&run.params, &c.held, &c.vocab, &EvalOptions::default()).expect("eval");
    check(&mut failures, c.held.len() == 400, || format!("held-out size {}", c.held.len()));

    let fmt_perfect = eval.per_sample.iter().filter(|p| p.format_total == 1.0).count();
    let fmt_frac = fmt_perfect as f64 / c.held.len() as f64;
    check(&mut failures, fmt_frac >= 0.95, || {
        format!("greedy format-1.0 rate {fmt_frac:.3} below 0.95 ({fmt_perfect}/400)")
    });

    let (mut exact, mut simple_total) = (0usize, 0usize);
    for (s, p) in c.held.iter().zip(&eval.per_sample) {
        if s.difficulty == Difficulty::Simple {
            simple_total += 1;
            exact += (p.accuracy_score == 1.0) as usize;
        }
    }
    let exact_frac = exact as f64 / simple_total as f64;
    check(&mut failures, exact_frac >= 0.90, || {
        format!("simple exact-match {exact_frac:.3} below 0.90 ({exact}/{simple_total})")
    });
    check(&mut failures, run.secs < 600.0, || {
        format!("supervised run took {:.0}s, budget 600s", run.secs)
    });
    report(5, "supervised competence", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 6: behavioral contrast between the two reward modes
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_behavior_contrast() {
    let mut failures = Vec::new();
    let c = corpus();

    let ad = ad_run();
    let ad_eval = evaluate(&ad.params, &c.held, &c.vocab, &EvalOptions::default()).expect("eval");
    check(&mut failures, ad_eval.thk_pct_basic <= 0.10, || {
        format!("difficulty-aware run thinks on {:.1}% of simple questions (limit 10%)", 100.0 * ad_eval.thk_pct_basic)
    });
    check(&mut failures, ad_eval.ans_pct_assum <= 0.10, || {
        format!("difficulty-aware run answers {:.1}% of complex questions directly (limit 10%)", 100.0 * ad_eval.ans_pct_assum)
    });
    check(&mut failures, ad.secs < 600.0, || format!("run took {:.0}s, budget 600s", ad.secs));

    let vanilla = vanilla_run();
    let v_eval =
        evaluate(&vanilla.params, &c.held, &c.vocab, &EvalOptions::default()).expect("eval");
    check(&mut failures, v_eval.thk_pct_basic >= 0.80, || {
        format!("uniform-reward run thinks on only {:.1}% of simple questions (need 80%)", 100.0 * v_eval.thk_pct_basic)
    });
    check(&mut failures, vanilla.secs < 600.0, || {
        format!("run took {:.0}s, budget 600s", vanilla.secs)
    });
    check(&mut failures, vanilla.rows.len() == ad.rows.len(), || {
        format!("step budgets differ: {} vs {}", vanilla.rows.len(), ad.rows.len())
    });
    report(6, "behavior contrast", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 7: rising reward curves in the difficulty-aware run
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_rising_reward() {
    let mut failures = Vec::new();
    let rows = &ad_run().rows;
    check(&mut failures, rows.len() >= 100, || format!("only {} steps recorded", rows.len()));
    let window = 50.min(rows.len());
    let mean = |slice: &[StepStats], f: fn(&StepStats) -> Option<f64>| {
        slice.iter().filter_map(f).sum::<f64>() / slice.len() as f64
    };
    let first_total = mean(&rows[..window], |s| s.mean_total_reward);
    let last_total = mean(&rows[rows.len() - window..], |s| s.mean_total_reward);
    check(&mut failures, last_total > first_total, || {
        format!("overall reward window means not rising: {first_total:.4} -> {last_total:.4}")
    });
    let first_fmt = mean(&rows[..window], |s| s.mean_format_reward);
    let last_fmt = mean(&rows[rows.len() - window..], |s| s.mean_format_reward);
    check(&mut failures, last_fmt > first_fmt, || {
        format!("format reward window means not rising: {first_fmt:.4} -> {last_fmt:.4}")
    });
    report(7, "rising reward", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 8: answer-ranking protocol
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_answer_ranking() {
    let mut failures = Vec::new();
    let c = corpus();

    let trained = evaluate(&ad_run().params, &c.held, &c.vocab, &EvalOptions::default())
        .expect("trained eval");
    check(&mut failures, trained.acc_basic >= 0.9, || {
        format!("trained acc on simple questions {:.3} below 0.9", trained.acc_basic)
    });
    check(&mut failures, trained.acc_assumptive >= 0.8, || {
        format!("trained acc on complex questions {:.3} below 0.8", trained.acc_assumptive)
    });

    let untrained = init_params(&policy_config(c.vocab.len())).expect("untrained init");
    let baseline =
        evaluate(&untrained, &c.held, &c.vocab, &EvalOptions::default()).expect("baseline eval");
    let (mut correct, mut total) = (0.0, 0usize);
    for (s, p) in c.held.iter().zip(&baseline.per_sample) {
        if let (Some(idx), Some(cands)) = (p.chosen_candidate, &s.candidates) {
            correct += (cands[idx] == s.reference_answer) as u32 as f64;
            total += 1;
        }
    }
    check(&mut failures, total >= 400, || format!("only {total} ranked samples"));
    let pooled = correct / total as f64;
    check(&mut failures, (pooled - 0.5).abs() <= 0.05, || {
        format!("untrained accuracy {pooled:.3} outside 0.5 +/- 0.05 over {total} samples")
    });

    // Order-swap invariance: a strict preference must flip with the
    // candidates; exact ties (both orderings pick index 0) are tolerated.
    for s in &c.held {
        let orig = answer_ranking_predict(&ad_run().params, s, &c.vocab, LossReduction::Mean)
            .expect("rank");
        let mut swapped = s.clone();
        swapped.candidates.as_mut().unwrap().swap(0, 1);
        let flipped =
            answer_ranking_predict(&ad_run().params, &swapped, &c.vocab, LossReduction::Mean)
                .expect("rank swapped");
        let consistent = flipped == 1 - orig || (orig == 0 && flipped == 0);
        check(&mut failures, consistent, || {
            format!("sample {}: choice {orig} became {flipped} after swap", s.id)
        });
    }
    report(8, "answer ranking", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 9: remote-judge fallback under a failing and a healthy stub
// ---------------------------------------------------------------------------

/// Stub that accepts nothing: clients hit the request timeout and must fall
/// back. The listener stays alive for the caller's lifetime.
fn unresponsive_stub() -> (TcpListener, String) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}/judge", listener.local_addr().unwrap());
    (listener, url)
}

/// Stub that answers every request with a fixed `{"score": 1.0}` body.
fn fixed_score_stub() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}/judge", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut buf = Vec::new();
            let mut chunk = [0u8; 512];
            // Read headers, then the content-length body.
            let body_start = loop {
                match stream.read(&mut chunk) {
                    Ok(0) => break None,
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                    Err(_) => break None,
                }
                if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    break Some(pos + 4);
                }
            };
            let Some(body_start) = body_start else { continue };
            let headers = String::from_utf8_lossy(&buf[..body_start]).to_lowercase();
            let content_length: usize = headers
                .lines()
                .find_map(|l| l.strip_prefix("content-length:"))
                .and_then(|v| v.trim().parse().ok())
                .unwrap_or(0);
            while buf.len() < body_start + content_length {
                match stream.read(&mut chunk) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                }
            }
            let body = b"{\"score\":1.0}";
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(body);
        }
    });
    url
}

fn fallback_rft(url: String, timeout_ms: u64) -> (Judge, Result<PolicyParams, adlab::train::TrainError>, usize) {
    let gcfg = tiny_generator();
    let vocab = gcfg.vocab().expect("vocab");
    let dataset = gen_dataset(&gcfg).expect("dataset");
    let params = init_params(&tiny_policy(vocab.len(), 17)).expect("init");
    let judge = Judge::Remote(RemoteJudge::new(RemoteJudgeConfig {
        url: Some(url),
        api_key: None,
        timeout: Duration::from_millis(timeout_ms),
        fallback_enabled: true,
        in_flight_cap: 2,
    }));
    let cfg = GrpoConfig {
        steps: 100,
        group_size: 2,
        batch_prompts: 2,
        max_new_tokens: 4,
        learning_rate: 1e-3,
        temperature: 1.0,
        ..GrpoConfig::default()
    };
    let result = run_rft(params.clone(), &params, &dataset, &cfg, &judge, &vocab, &mut NullSink, 5);
    let verdicts = cfg.steps * cfg.batch_prompts * cfg.group_size;
    (judge, result, verdicts)
}

#[test]
fn criterion_09_judge_fallback() {
    let mut failures = Vec::new();

    let (_listener, url) = unresponsive_stub();
    let (judge, result, verdicts) = fallback_rft(url, 10);
    check(&mut failures, result.is_ok(), || {
        format!("run against unresponsive endpoint aborted: {:?}", result.as_ref().err())
    });
    let Judge::Remote(remote) = &judge else { unreachable!() };
    let (remote_n, lexical_n, fallback_n) = remote.metrics().snapshot();
    check(&mut failures, lexical_n == verdicts as u64 && remote_n == 0, || {
        format!("unresponsive endpoint: {remote_n} remote / {lexical_n} lexical verdicts, expected 0/{verdicts}")
    });
    check(&mut failures, fallback_n == verdicts as u64, || {
        format!("expected {verdicts} fallbacks, saw {fallback_n}")
    });

    let url = fixed_score_stub();
    let (judge, result, verdicts) = fallback_rft(url, 5_000);
    check(&mut failures, result.is_ok(), || {
        format!("run against healthy endpoint aborted: {:?}", result.as_ref().err())
    });
    let Judge::Remote(remote) = &judge else { unreachable!() };
    let (remote_n, lexical_n, _) = remote.metrics().snapshot();
    check(&mut failures, remote_n == verdicts as u64 && lexical_n == 0, || {
        format!("healthy endpoint: {remote_n} remote / {lexical_n} lexical verdicts, expected {verdicts}/0")
    });
    report(9, "judge fallback", &failures);
}

// ---------------------------------------------------------------------------
// Criterion 10: run-level determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let mut failures = Vec::new();
    let first = ad_run();
    let repeat = run_rft_mode(RewardMode::Ad);
    check(&mut failures, first.checkpoint == repeat.checkpoint, || {
        "final checkpoints differ between identical runs".to_string()
    });
    check(&mut failures, first.csv == repeat.csv, || {
        "telemetry CSVs differ between identical runs".to_string()
    });
    report(10, "determinism", &failures);
}
