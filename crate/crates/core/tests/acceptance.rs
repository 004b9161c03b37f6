//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Run with `cargo test -p progmem --test acceptance`.
//!
//! The IDA criteria (7 to 9) share work per seed: the first domain is
//! trained once and every method branches from a clone of that model, which
//! is bitwise what a fresh run of each method would train first.

use std::io::Write as _;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use progmem::config::RunConfig;
use progmem::data::{gen_synthetic, DomainSplits, SynthSuite};
use progmem::ida::{run_schedule, stream, Checkpoint, DomainSchedule, IdaMethod, IdaRun};
use progmem::layers::CellKind;
use progmem::membank::{attention_mass_split, MemoryBank, SlotInit};
use progmem::model::{grad_check_model, NewBlocks};
use progmem::stats::{bootstrap_eval, wilcoxon_one_tailed, Alternative};
use progmem::theory::{simulate_trial, verify_theorem, SimulationConfig, Verdict};
use progmem::Error;

type Suite = std::collections::BTreeMap<String, DomainSplits>;

const SEEDS: u64 = 10;
const SLOTS: usize = 32;

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
    secs: f64,
}

fn emit(id: usize, title: &str, o: &Outcome) -> bool {
    let mut out = std::io::stdout().lock();
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        out,
        "{tag} [{id:>2}] {title}: {} ({:.1} s)",
        o.summary, o.secs
    );
    for d in &o.details {
        let _ = writeln!(out, "          {d}");
    }
    let _ = out.flush();
    o.pass
}

fn timed(f: impl FnOnce() -> (bool, String, Vec<String>)) -> Outcome {
    let clock = Instant::now();
    let (pass, summary, details) = f();
    Outcome {
        pass,
        summary,
        details,
        secs: clock.elapsed().as_secs_f64(),
    }
}

fn closed_form() -> Outcome {
    timed(|| {
        let r = verify_theorem(&SimulationConfig::sampled(8, 4, 1.0, 8, 2)).unwrap();
        let est = r.mc_state_msd;
        let z = (est.mean - r.analytic_state_msd) / est.stderr;
        (
            r.closed_form == Verdict::Pass && r.analytic_state_msd == 32.0,
            format!(
                "mc_state_msd {:.4} ± {:.4} vs analytic {} (z = {z:+.2})",
                est.mean, est.stderr, r.analytic_state_msd
            ),
            vec![],
        )
    })
}

fn inequality() -> Outcome {
    timed(|| {
        let mut pass = true;
        let mut details = Vec::new();
        for sigma in [0.5, 1.0, 2.0] {
            for (n, m) in [(8, 2), (16, 4), (32, 8)] {
                let r = verify_theorem(&SimulationConfig::sampled(8, 4, sigma, n, m)).unwrap();
                let ok = r.inequality == Verdict::Pass && r.variance_bound == Verdict::Pass;
                pass &= ok;
                let mem = r.mc_mem_msd_conditioned.unwrap();
                let var = r.var_delta_c_conditioned.unwrap();
                details.push(format!(
                    "σ={sigma} N={n} M={m}: mem {:.4} vs state {:.4}, Var(Δc) {:.4} vs σ² {} [{}]",
                    mem.mean,
                    r.mc_state_msd.mean,
                    var.mean,
                    sigma * sigma,
                    if ok { "ok" } else { "violated" }
                ));
            }
        }
        let summary = format!(
            "{} of 9 settings satisfy both bounds",
            details.iter().filter(|d| d.ends_with("[ok]")).count()
        );
        (pass, summary, details)
    })
}

fn identities() -> Outcome {
    timed(|| {
        let mut r = ChaCha8Rng::seed_from_u64(2024);
        let (mut sum_err, mut dc_err, mut bound_err) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
        for _ in 0..10_000 {
            let cfg = SimulationConfig::sampled(
                r.gen_range(1..12),
                r.gen_range(1..8),
                [0.5, 1.0, 2.0][r.gen_range(0..3)],
                r.gen_range(1..33),
                r.gen_range(1..9),
            );
            let t = simulate_trial(&cfg, &mut r).unwrap();
            let beta = t.beta.data();
            sum_err = sum_err.max(beta.iter().sum::<f64>().abs());
            for k in 0..cfg.expand_dim {
                dc_err =
                    dc_err.max((t.delta_c.data()[k] - (t.content_new[k] - t.content_old[k])).abs());
            }
            if t.assumption_held {
                for (b, a) in beta.iter().zip(&t.alpha_new) {
                    bound_err = bound_err.max(b.abs() - a);
                }
            }
        }
        (
            sum_err <= 1e-12 && dc_err <= 1e-12 && bound_err <= 1e-12,
            format!("max |Σβ| {sum_err:.1e}, max |Δc − (c′ − c)| {dc_err:.1e}, max (|β| − α′) {bound_err:.1e}"),
            vec![],
        )
    })
}

fn rescaling() -> Outcome {
    timed(|| {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let (n, m, dim) = (r.gen_range(1..40), r.gen_range(1..20), r.gen_range(1..17));
            let bank = MemoryBank::random(n, dim, SlotInit::default(), &mut r);
            let grown = bank.expand(m, SlotInit::default(), &mut r);
            let h: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.5..1.5)).collect();
            let (before, _) = bank.attend(&h).unwrap();
            let (after, _) = grown.attend(&h).unwrap();
            let (s_old, s_new) = attention_mass_split(&after, n).unwrap();
            for j in 0..n {
                worst = worst.max(
                    (after.normalized[j] - before.normalized[j] * s_old / (s_old + s_new)).abs(),
                );
            }
        }
        (
            worst <= 1e-12,
            format!("max deviation {worst:.1e} over 1000 pairs"),
            vec![],
        )
    })
}

fn gradients() -> Outcome {
    let o = timed(|| {
        let errs: Vec<f64> = (0..10)
            .map(|s| {
                grad_check_model(CellKind::Lstm, &mut ChaCha8Rng::seed_from_u64(s))
                    .unwrap()
                    .max_rel_error()
            })
            .collect();
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        (
            worst < 1e-5,
            format!("max relative error {worst:.2e} over 10 seeds"),
            vec![],
        )
    });
    Outcome {
        pass: o.pass && o.secs < 60.0,
        ..o
    }
}

fn small_suite() -> Suite {
    let s = SynthSuite {
        train: 400,
        valid: 100,
        test: 100,
        ..SynthSuite::with_domains(2)
    };
    gen_synthetic(&s.specs()).unwrap()
}

fn method(s: &str) -> IdaMethod {
    s.parse().unwrap()
}

fn reductions(suite: &Suite) -> Outcome {
    timed(|| {
        let names: Vec<String> = suite.keys().cloned().collect();
        let config = RunConfig {
            seed: 3,
            ..RunConfig::default()
        };
        let run = |m: &str, increment: usize, cfg: &RunConfig| {
            run_schedule(
                &DomainSchedule::uniform(&names, method(m), SLOTS, increment),
                suite,
                cfg,
                None,
            )
            .unwrap()
        };
        let base = run("finetune_only", SLOTS, &config);
        let no_slots = run("mem_expand", 0, &config);
        let no_anchor = run(
            "ewc",
            SLOTS,
            &RunConfig {
                ewc: progmem::config::EwcConfig {
                    lambda: 0.0,
                    ..config.ewc
                },
                ..config.clone()
            },
        );
        let a = no_slots.run.model.params.bitwise_eq(&base.run.model.params)
            && no_slots.record.accuracy == base.record.accuracy;
        let b = no_anchor
            .run
            .model
            .params
            .bitwise_eq(&base.run.model.params)
            && no_anchor.record.accuracy == base.record.accuracy;
        (
            a && b,
            format!("mem_expand(M=0) identical: {a}, ewc(λ=0) identical: {b}"),
            vec![],
        )
    })
}

fn statistics() -> Outcome {
    timed(|| {
        let w = wilcoxon_one_tailed(
            &[0.9, 0.8, 0.7, 0.95, 0.85],
            &[0.5, 0.6, 0.4, 0.7, 0.3],
            Alternative::Greater,
        )
        .unwrap();
        let preds: Vec<usize> = (0..500).map(|i| (i * 7) % 3).collect();
        let labels: Vec<usize> = (0..500).map(|i| (i * 5) % 3).collect();
        let a = bootstrap_eval(&preds, &labels, 200, 10, 11).unwrap();
        let b = bootstrap_eval(&preds, &labels, 200, 10, 11).unwrap();
        let shaped = a.len() == 10 && a.iter().all(|x| (x * 200.0).fract() == 0.0);
        (
            w.p_value == 0.03125 && w.exact && a == b && shaped,
            format!(
                "Wilcoxon p = {}, bootstrap 10 × 200 repeatable: {}",
                w.p_value,
                a == b && shaped
            ),
            vec![],
        )
    })
}

fn checkpoints(suite: &Suite) -> Outcome {
    timed(|| {
        let names: Vec<String> = suite.keys().cloned().collect();
        let config = RunConfig {
            seed: 5,
            ..RunConfig::default()
        };
        let schedule = DomainSchedule::uniform(&names, method("mem_expand+vocab"), SLOTS, 8);
        let trained = run_schedule(&schedule, suite, &config, None).unwrap().run;
        let bytes = trained.checkpoint().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let restored = back.clone().into_model().unwrap();
        let round_trip = restored.params.bitwise_eq(&trained.model.params)
            && restored.vocab == trained.model.vocab
            && restored.boundaries() == trained.model.boundaries()
            && back.to_bytes().unwrap() == bytes;

        let mut bigger = trained
            .model
            .expand_hidden(5, NewBlocks::Zero, &mut stream(0, 0))
            .unwrap();
        bigger.expand_memory(4, &mut stream(0, 1)).unwrap();
        for p in bigger.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = f64::NAN);
        }
        back.load_into(&mut bigger).unwrap();
        let placed = back.arrays.iter().all(|(name, t)| {
            let dst = &bigger.params.by_name(name).unwrap().value;
            let (sc, dc) = (
                t.shape().get(1).copied().unwrap_or(1),
                dst.shape().get(1).copied().unwrap_or(1),
            );
            let inside = t
                .data()
                .iter()
                .enumerate()
                .all(|(i, x)| dst.data()[(i / sc) * dc + i % sc].to_bits() == x.to_bits());
            inside && dst.data().iter().filter(|x| x.is_nan()).count() == dst.len() - t.len()
        });

        let mut payload = bytes.clone();
        let k = bytes.len() - 12;
        payload[k] ^= 0x01;
        let mut crc = bytes.clone();
        let last = crc.len() - 1;
        crc[last] ^= 0x80;
        let mut version = bytes.clone();
        version[4] = 2;
        let detected = matches!(
            Checkpoint::from_bytes(&payload),
            Err(Error::Integrity { .. })
        ) && matches!(Checkpoint::from_bytes(&crc), Err(Error::Integrity { .. }))
            && matches!(
                Checkpoint::from_bytes(&version),
                Err(Error::VersionMismatch { .. })
            )
            && matches!(
                Checkpoint::from_bytes(&bytes[..bytes.len() / 3]),
                Err(Error::Format(_))
            );
        (
            round_trip && placed && detected,
            format!("round trip {round_trip}, superset placement {placed}, corruption detected {detected}"),
            vec![],
        )
    })
}

/// Per-seed numbers for the incremental criteria.
struct SeedResult {
    seed: u64,
    d0_secs: f64,
    // two-domain benchmark
    source_mem: f64,
    source_ft: f64,
    target_mem: f64,
    target_ft: f64,
    two_domain_secs: f64,
    // five-domain dynamics: diagonal and final accuracy on domain 0
    diag: f64,
    final_mem: f64,
    final_ft: f64,
    five_domain_secs: f64,
    // parity comparison: source accuracy after one stage
    parity_mem: f64,
    parity_hidden: f64,
    parity_secs: f64,
    total_secs: f64,
}

fn branch(
    trunk: &IdaRun,
    schedule: &DomainSchedule,
    stages: std::ops::Range<usize>,
    suite: &Suite,
) -> IdaRun {
    let mut run = trunk.clone();
    for e in &schedule.entries[stages] {
        run.adapt(e, suite).unwrap();
    }
    run
}

fn incremental_seed(seed: u64) -> SeedResult {
    let synth = SynthSuite {
        seed,
        ..SynthSuite::default()
    };
    let suite = gen_synthetic(&synth.specs()).unwrap();
    let domains = synth.domains.clone();
    let config = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let plan = |m: &str| DomainSchedule::uniform(&domains, method(m), SLOTS, SLOTS);
    let (mem_vocab, ft, ft_vocab, mem, hidden) = (
        plan("mem_expand+vocab"),
        plan("finetune_only"),
        plan("finetune_only+vocab"),
        plan("mem_expand"),
        plan("hidden_expand"),
    );
    let acc = |run: &IdaRun, k: usize| run.evaluate(&domains[k..=k], &suite).unwrap()[0];

    let start = Instant::now();
    let clock = Instant::now();
    let trunk = IdaRun::start(&config, &mem_vocab.entries[0], &suite, false).unwrap();
    let diag = acc(&trunk, 0);
    let d0_secs = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let mem_two = branch(&trunk, &mem_vocab, 1..2, &suite);
    let mem_two_secs = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let ft_two = branch(&trunk, &ft, 1..2, &suite);
    let (source_mem, target_mem) = (acc(&mem_two, 0), acc(&mem_two, 1));
    let (source_ft, target_ft) = (acc(&ft_two, 0), acc(&ft_two, 1));
    let ft_two_secs = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let mem_five = branch(&mem_two, &mem_vocab, 2..5, &suite);
    let ft_five = branch(&trunk, &ft_vocab, 1..5, &suite);
    let (final_mem, final_ft) = (acc(&mem_five, 0), acc(&ft_five, 0));
    let five_secs = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let mem_plain = branch(&trunk, &mem, 1..2, &suite);
    let hidden_plain = branch(&trunk, &hidden, 1..2, &suite);
    let (parity_mem, parity_hidden) = (acc(&mem_plain, 0), acc(&hidden_plain, 0));
    let parity_secs = clock.elapsed().as_secs_f64();

    SeedResult {
        seed,
        d0_secs,
        source_mem,
        source_ft,
        target_mem,
        target_ft,
        two_domain_secs: mem_two_secs + ft_two_secs,
        diag,
        final_mem,
        final_ft,
        five_domain_secs: mem_two_secs + five_secs,
        parity_mem,
        parity_hidden,
        parity_secs,
        total_secs: start.elapsed().as_secs_f64(),
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn retention(results: &[SeedResult]) -> Outcome {
    let wins = results
        .iter()
        .filter(|r| r.source_mem > r.source_ft)
        .count();
    let gap = mean(results.iter().map(|r| r.target_mem - r.target_ft));
    let secs: f64 = results.iter().map(|r| r.d0_secs + r.two_domain_secs).sum();
    Outcome {
        pass: wins >= 8 && gap >= -0.01 && secs < 15.0 * 60.0,
        summary: format!(
            "mem_expand+vocab keeps more source accuracy than finetune_only on {wins}/{} seeds; mean target gap {:+.2} points",
            results.len(),
            100.0 * gap
        ),
        details: results
            .iter()
            .map(|r| {
                format!(
                    "seed {}: source {} vs {}, target {} vs {}",
                    r.seed,
                    pct(r.source_mem),
                    pct(r.source_ft),
                    pct(r.target_mem),
                    pct(r.target_ft)
                )
            })
            .collect(),
        secs,
    }
}

fn five_domains(results: &[SeedResult]) -> Outcome {
    let kept = results
        .iter()
        .filter(|r| r.diag - r.final_mem <= 0.05)
        .count();
    let drop_mem = mean(results.iter().map(|r| r.diag - r.final_mem));
    let drop_ft = mean(results.iter().map(|r| r.diag - r.final_ft));
    let secs: f64 = results.iter().map(|r| r.d0_secs + r.five_domain_secs).sum();
    Outcome {
        pass: kept >= 7 && drop_ft > drop_mem && secs < 45.0 * 60.0,
        summary: format!(
            "domain 0 within 5 points of its diagonal on {kept}/{} seeds; mean drop mem_expand+vocab {:.2} vs finetune_only+vocab {:.2} points",
            results.len(),
            100.0 * drop_mem,
            100.0 * drop_ft
        ),
        details: results
            .iter()
            .map(|r| {
                format!(
                    "seed {}: diagonal {}, final {} (mem) vs {} (finetune)",
                    r.seed,
                    pct(r.diag),
                    pct(r.final_mem),
                    pct(r.final_ft)
                )
            })
            .collect(),
        secs,
    }
}

fn parity(results: &[SeedResult]) -> Outcome {
    let wins = results
        .iter()
        .filter(|r| r.parity_mem >= r.parity_hidden)
        .count();
    let secs: f64 = results.iter().map(|r| r.d0_secs + r.parity_secs).sum();
    Outcome {
        pass: 2 * wins > results.len(),
        summary: format!(
            "mem_expand retains at least as much source accuracy as hidden_expand on {wins}/{} seeds",
            results.len()
        ),
        details: results
            .iter()
            .map(|r| format!("seed {}: source {} vs {}", r.seed, pct(r.parity_mem), pct(r.parity_hidden)))
            .collect(),
        secs,
    }
}

fn main() -> ExitCode {
    let mut all = true;
    all &= emit(1, "state-expansion closed form", &closed_form());
    all &= emit(2, "memory-expansion bound", &inequality());
    all &= emit(3, "exact decomposition identities", &identities());
    all &= emit(4, "attention rescaling after expansion", &rescaling());
    all &= emit(5, "full-model gradient check", &gradients());
    let small = small_suite();
    all &= emit(6, "reduction identities", &reductions(&small));
    all &= emit(10, "signed-rank test and bootstrap", &statistics());
    all &= emit(11, "checkpoint round trip", &checkpoints(&small));

    let results: Vec<SeedResult> = (0..SEEDS)
        .map(|s| {
            let r = incremental_seed(s);
            println!("          seed {s} trained ({:.0} s)", r.total_secs);
            r
        })
        .collect();
    all &= emit(7, "two-domain retention", &retention(&results));
    all &= emit(8, "five-domain dynamics", &five_domains(&results));
    all &= emit(9, "memory vs hidden expansion at parity", &parity(&results));

    if all {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("some acceptance criteria failed");
        ExitCode::FAILURE
    }
}
