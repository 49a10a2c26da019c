//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Criteria 1, 2, 6, 7 and 8 need the converted GPT-2 small checkpoint in
//! `models/gpt2` (or `DENSETRACE_GPT2_DIR`); see the README for the two-step
//! download/convert setup. Without it those criteria fail with instructions.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use densetrace::density::auc_trapezoid;
use densetrace::graph::{decompose_forward, DecomposedRun, NodeId};
use densetrace::masked::{run_ablated, run_masked};
use densetrace::metrics::tv_distance;
use densetrace::model::ModelDir;
use densetrace::stats::{pearson, permutation_p_value, spearman, CorrelationKind};
use densetrace::trace::{
    complement_for_necessity, extract_trace, full_trace, random_nonresidual_set, random_trace,
    ThresholdGrid,
};
use densetrace::{fixture, forward_dense, Distribution, Model, TokenSequence};

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

fn criterion(id: u32, name: &str, f: impl FnOnce() -> Result<String, String>) {
    match f() {
        Ok(detail) => println!("[acceptance] criterion {id:2} ({name}): PASS - {detail}"),
        Err(detail) => {
            println!("[acceptance] criterion {id:2} ({name}): FAIL - {detail}");
            panic!("criterion {id} ({name}) failed: {detail}");
        }
    }
}

fn fixture_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| fixture::tiny_model(42))
}

fn random_fixture_inputs(count: usize, seed: u64) -> Vec<TokenSequence> {
    let cfg = fixture::tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..=16usize);
            let ids = (0..len)
                .map(|_| rng.random_range(0..cfg.vocab_size as u32))
                .collect();
            TokenSequence::new(ids).expect("non-empty")
        })
        .collect()
}

fn gpt2() -> Result<&'static ModelDir, String> {
    static DIR: OnceLock<Option<ModelDir>> = OnceLock::new();
    DIR.get_or_init(|| {
        let candidate = std::env::var("DENSETRACE_GPT2_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|_| {
                PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models/gpt2")
            });
        candidate
            .join("model.safetensors")
            .exists()
            .then(|| ModelDir::load(&candidate).expect("model dir is loadable"))
    })
    .as_ref()
    .ok_or_else(|| {
        "GPT-2 model dir not found; download the checkpoint and run \
         scripts/convert_hf_gpt2.py as described in the README"
            .to_string()
    })
}

fn fragments() -> Vec<String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/assets/fragments.txt");
    std::fs::read_to_string(path)
        .expect("fragment corpus is bundled")
        .lines()
        .map(str::to_string)
        .collect()
}

/// Worst relative L1 error of `state - (sum of incoming edges + addend)`
/// over every non-source node of the run.
fn additive_exactness_error(model: &Model, run: &DecomposedRun) -> f64 {
    let mut worst: f64 = 0.0;
    for layer in 0..run.n_layers() {
        for pos in 0..run.n() {
            for node in [
                NodeId::AfterAttention { layer, pos },
                NodeId::AfterMlp { layer, pos },
            ] {
                let state = run.node_state(node).unwrap();
                let mut sum = vec![0.0f32; state.len()];
                for e in run.incoming_edges(node).unwrap() {
                    let v = run.edge_vector(e).unwrap();
                    for (acc, x) in sum.iter_mut().zip(v.iter()) {
                        *acc += x;
                    }
                }
                if let Some(addend) = run.unconditional_addend(node, model) {
                    for (acc, x) in sum.iter_mut().zip(addend.iter()) {
                        *acc += x;
                    }
                }
                let err: f64 = state
                    .iter()
                    .zip(&sum)
                    .map(|(&a, &b)| ((a as f64) - (b as f64)).abs())
                    .sum();
                let scale: f64 = state.iter().map(|&x| (x as f64).abs()).sum();
                worst = worst.max(err / scale.max(1e-12));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Shared GPT-2 corpus computation (criteria 1, 2, 6, 7, 8)
// ---------------------------------------------------------------------------

const N_TAUS: usize = 15;
const EXACTNESS_INPUTS: usize = 20;

struct CorpusData {
    /// Per threshold, per fragment.
    tv_magnitude: Vec<Vec<f64>>,
    tv_random: Vec<Vec<f64>>,
    tv_ablate_trace: Vec<Vec<f64>>,
    tv_ablate_random: Vec<Vec<f64>>,
    sizes: Vec<Vec<f64>>,
    /// Per fragment.
    rho: Vec<f64>,
    full_trace_tv: Vec<f64>,
    /// Worst additive-exactness error over the first 20 fragments.
    exactness_err: f64,
    exactness_elapsed_s: f64,
    elapsed_s: f64,
}

fn corpus_data() -> Result<&'static CorpusData, String> {
    static DATA: OnceLock<Result<CorpusData, String>> = OnceLock::new();
    DATA.get_or_init(|| {
        let md = gpt2()?;
        let grid = ThresholdGrid::default();
        let lines = fragments();
        assert!(lines.len() >= 100, "corpus must hold at least 100 fragments");

        let start = Instant::now();
        let mut exactness_elapsed = 0.0;
        let mut data = CorpusData {
            tv_magnitude: vec![Vec::new(); N_TAUS],
            tv_random: vec![Vec::new(); N_TAUS],
            tv_ablate_trace: vec![Vec::new(); N_TAUS],
            tv_ablate_random: vec![Vec::new(); N_TAUS],
            sizes: vec![Vec::new(); N_TAUS],
            rho: Vec::new(),
            full_trace_tv: Vec::new(),
            exactness_err: 0.0,
            exactness_elapsed_s: 0.0,
            elapsed_s: 0.0,
        };

        for (idx, line) in lines.iter().enumerate() {
            let ids = md.tokenizer.encode(line).map_err(|e| e.to_string())?;
            assert!(ids.len() <= 32, "fragment {idx} exceeds 32 tokens");
            let tokens = TokenSequence::new(ids).map_err(|e| e.to_string())?;
            let p_g = forward_dense(&md.model, &tokens).map_err(|e| e.to_string())?;
            let run = decompose_forward(&md.model, &tokens).map_err(|e| e.to_string())?;

            if idx < EXACTNESS_INPUTS {
                let t = Instant::now();
                data.exactness_err = data
                    .exactness_err
                    .max(additive_exactness_error(&md.model, &run));
                exactness_elapsed += t.elapsed().as_secs_f64();
            }

            let p_full = run_masked(&md.model, &tokens, &full_trace(&run))
                .map_err(|e| e.to_string())?;
            let tv_full = tv_distance(&p_g, &p_full).map_err(|e| e.to_string())?;
            data.full_trace_tv.push(tv_full);

            let floor =
                run.residual_ancestors().count() as f64 / run.ancestor_count() as f64;
            let mut support = Vec::with_capacity(N_TAUS + 1);
            for (t_idx, &tau) in grid.taus().iter().enumerate() {
                let trace = extract_trace(&run, tau).map_err(|e| e.to_string())?;
                let p_t = run_masked(&md.model, &tokens, &trace).map_err(|e| e.to_string())?;
                let tv_mag = tv_distance(&p_g, &p_t).map_err(|e| e.to_string())?;
                data.sizes[t_idx].push(trace.size_ratio);
                data.tv_magnitude[t_idx].push(tv_mag);
                support.push((trace.size_ratio, tv_mag));

                // Size-matched random trace (floored at the residual set).
                let target = trace.size_ratio.clamp(floor, 1.0);
                let seed = (idx as u64) << 16 | (t_idx as u64) << 8;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rand = random_trace(&run, target, &mut rng).map_err(|e| e.to_string())?;
                let p_r = run_masked(&md.model, &tokens, &rand).map_err(|e| e.to_string())?;
                data.tv_random[t_idx]
                    .push(tv_distance(&p_g, &p_r).map_err(|e| e.to_string())?);

                // Necessity: ablate the trace's non-residual edges, against a
                // size-matched random non-residual control.
                let ablate = complement_for_necessity(&trace);
                let mut rng = ChaCha8Rng::seed_from_u64(seed | 1);
                let control = random_nonresidual_set(&run, ablate.len(), &mut rng)
                    .map_err(|e| e.to_string())?;
                let p_abl = run_ablated(&md.model, &tokens, &ablate).map_err(|e| e.to_string())?;
                let p_ctl = run_ablated(&md.model, &tokens, &control)
                    .map_err(|e| e.to_string())?;
                data.tv_ablate_trace[t_idx]
                    .push(tv_distance(&p_g, &p_abl).map_err(|e| e.to_string())?);
                data.tv_ablate_random[t_idx]
                    .push(tv_distance(&p_g, &p_ctl).map_err(|e| e.to_string())?);
            }
            support.push((1.0, tv_full));
            data.rho.push(auc_trapezoid(&support).rho_hat);
        }
        data.exactness_elapsed_s = exactness_elapsed;
        data.elapsed_s = start.elapsed().as_secs_f64();
        Ok(data)
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One-sided sign test: P(Binomial(n, 1/2) >= wins).
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    let ln_half_n = n as f64 * 0.5f64.ln();
    (wins..=n)
        .map(|k| (ln_fact[n] - ln_fact[k] - ln_fact[n - k] + ln_half_n).exp())
        .sum()
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn crit01_additive_exactness() {
    criterion(1, "additive exactness", || {
        let start = Instant::now();
        let model = fixture_model();
        let mut worst: f64 = 0.0;
        for tokens in random_fixture_inputs(100, 101) {
            let run = decompose_forward(model, &tokens).map_err(|e| e.to_string())?;
            worst = worst.max(additive_exactness_error(model, &run));
        }
        let fixture_elapsed = start.elapsed().as_secs_f64();

        let data = corpus_data()?;
        let gpt2_err = data.exactness_err;
        worst = worst.max(gpt2_err);
        let elapsed = fixture_elapsed + data.exactness_elapsed_s;
        if worst > 1e-4 {
            return Err(format!("worst relative L1 error {worst:.3e} > 1e-4"));
        }
        if elapsed > 300.0 {
            return Err(format!("exactness checks took {elapsed:.0}s > 5 min"));
        }
        Ok(format!(
            "worst relative L1 error {worst:.3e} over 100 fixture + {EXACTNESS_INPUTS} GPT-2 inputs ({elapsed:.1}s)"
        ))
    });
}

#[test]
fn crit02_full_trace_faithfulness() {
    criterion(2, "full-trace faithfulness", || {
        let model = fixture_model();
        let mut worst: f64 = 0.0;
        for tokens in random_fixture_inputs(100, 101) {
            let run = decompose_forward(model, &tokens).map_err(|e| e.to_string())?;
            let p_g = forward_dense(model, &tokens).map_err(|e| e.to_string())?;
            let p_t = run_masked(model, &tokens, &full_trace(&run)).map_err(|e| e.to_string())?;
            worst = worst.max(tv_distance(&p_g, &p_t).map_err(|e| e.to_string())?);
        }
        let data = corpus_data()?;
        for &tv in &data.full_trace_tv {
            worst = worst.max(tv);
        }
        if worst > 1e-4 {
            return Err(format!("worst full-trace TV {worst:.3e} > 1e-4"));
        }
        Ok(format!(
            "worst full-trace TV {worst:.3e} over 100 fixture + {} GPT-2 inputs",
            data.full_trace_tv.len()
        ))
    });
}

#[test]
fn crit03_threshold_monotonicity() {
    criterion(3, "threshold monotonicity", || {
        let model = fixture_model();
        let grid = ThresholdGrid::default();
        let mut violations = 0usize;
        for tokens in random_fixture_inputs(50, 303) {
            let run = decompose_forward(model, &tokens).map_err(|e| e.to_string())?;
            let traces: Vec<_> = grid
                .taus()
                .iter()
                .map(|&t| extract_trace(&run, t).unwrap())
                .collect();
            for w in traces.windows(2) {
                if !w[1].kept.is_subset(&w[0].kept) || w[1].size_ratio > w[0].size_ratio {
                    violations += 1;
                }
            }
        }
        if violations > 0 {
            return Err(format!("{violations} nesting violations"));
        }
        Ok("kept sets nested and sizes non-increasing over 50 inputs x 15 thresholds".into())
    });
}

#[test]
fn crit04_auc_oracle() {
    criterion(4, "AUC trapezoid vs Riemann oracle", || {
        let line: Vec<(f64, f64)> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&s| (s, 1.0 - s))
            .collect();
        let est = auc_trapezoid(&line);
        if est.rho_hat != 0.5 {
            return Err(format!("linear curve gave {} instead of 0.5", est.rho_hat));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            // Random piecewise-linear curve with distinct support points.
            let k = rng.random_range(2..14usize);
            let mut ss: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            ss.push(0.0);
            ss.push(1.0);
            ss.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ss.dedup();
            let pts: Vec<(f64, f64)> = ss
                .iter()
                .map(|&s| (s, rng.random_range(0.0..1.0)))
                .collect();

            let est = auc_trapezoid(&pts);

            // Midpoint Riemann sum over the same piecewise-linear interpolant.
            let interp = |x: f64| -> f64 {
                let j = pts.partition_point(|p| p.0 <= x).min(pts.len() - 1);
                let (s0, e0) = pts[j - 1];
                let (s1, e1) = pts[j];
                e0 + (e1 - e0) * (x - s0) / (s1 - s0)
            };
            let cells = 100_000;
            let h = 1.0 / cells as f64;
            let riemann: f64 = (0..cells).map(|c| interp((c as f64 + 0.5) * h) * h).sum();
            worst = worst.max((est.rho_hat - riemann).abs());
        }
        if worst > 1e-6 {
            return Err(format!("max |trapezoid - Riemann| = {worst:.3e} > 1e-6"));
        }
        Ok(format!(
            "exact on the linear curve; max deviation {worst:.2e} over 1000 random curves"
        ))
    });
}

#[test]
fn crit05_tv_metric_axioms() {
    criterion(5, "TV metric axioms", || {
        // Hand cases are exact.
        let one_hot_a = Distribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        let one_hot_b = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        let half = Distribution::new(vec![0.5, 0.5, 0.0]).unwrap();
        if tv_distance(&one_hot_a, &one_hot_a).unwrap() != 0.0
            || tv_distance(&one_hot_a, &one_hot_b).unwrap() != 1.0
            || tv_distance(&half, &one_hot_a).unwrap() != 0.5
        {
            return Err("hand cases not exact".into());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(505);
        let sample = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..30).map(|_| -rng.random::<f64>().ln()).collect();
            let sum: f64 = raw.iter().sum();
            Distribution::new(raw.iter().map(|&x| (x / sum) as f32).collect()).unwrap()
        };
        for _ in 0..10_000 {
            let p = sample(&mut rng);
            let q = sample(&mut rng);
            let r = sample(&mut rng);
            let pq = tv_distance(&p, &q).unwrap();
            let qp = tv_distance(&q, &p).unwrap();
            let pr = tv_distance(&p, &r).unwrap();
            let qr = tv_distance(&q, &r).unwrap();
            if (pq - qp).abs() > 1e-6 {
                return Err(format!("symmetry violated by {}", (pq - qp).abs()));
            }
            if pr > pq + qr + 1e-6 {
                return Err(format!("triangle violated: {pr} > {pq} + {qr}"));
            }
            if !(0.0..=1.0).contains(&pq) {
                return Err(format!("out of bounds: {pq}"));
            }
            if tv_distance(&p, &p).unwrap() != 0.0 {
                return Err("identity of indiscernibles violated".into());
            }
        }
        Ok("symmetry, triangle inequality and bounds hold on 10^4 random triples".into())
    });
}

#[test]
fn crit06_magnitude_beats_random() {
    criterion(6, "magnitude vs random traces on GPT-2", || {
        let data = corpus_data()?;
        let grid = ThresholdGrid::default();
        let mut winners = Vec::new();
        for t_idx in 0..N_TAUS {
            let mag = &data.tv_magnitude[t_idx];
            let rand = &data.tv_random[t_idx];
            let mean_gap = mean(rand) - mean(mag);
            let mut wins = 0usize;
            let mut ties = 0usize;
            for (m, r) in mag.iter().zip(rand) {
                if m < r {
                    wins += 1;
                } else if m == r {
                    ties += 1;
                }
            }
            let n_eff = mag.len() - ties;
            let p = if n_eff == 0 { 1.0 } else { sign_test_p(wins, n_eff) };
            if mean_gap > 0.0 && p < 0.01 {
                winners.push((grid.taus()[t_idx], mean_gap, p));
            }
        }
        if winners.len() < 10 {
            return Err(format!(
                "magnitude strictly better with p<0.01 at only {}/15 thresholds",
                winners.len()
            ));
        }
        if data.elapsed_s > 7200.0 {
            return Err(format!("corpus run took {:.0}s > 2h", data.elapsed_s));
        }
        Ok(format!(
            "magnitude beats size-matched random at {}/15 thresholds (paired sign test p<0.01, n=100; corpus pass {:.0}s)",
            winners.len(),
            data.elapsed_s
        ))
    });
}

#[test]
fn crit07_necessity() {
    criterion(7, "necessity of traced edges on GPT-2", || {
        let data = corpus_data()?;
        let mut winners = 0usize;
        for t_idx in 0..N_TAUS {
            let trace_dmg = mean(&data.tv_ablate_trace[t_idx]);
            let random_dmg = mean(&data.tv_ablate_random[t_idx]);
            if trace_dmg > random_dmg {
                winners += 1;
            }
        }
        if winners < 10 {
            return Err(format!(
                "ablating the trace hurt more at only {winners}/15 thresholds"
            ));
        }
        Ok(format!(
            "ablating traced edges degrades more than a random non-residual set at {winners}/15 thresholds"
        ))
    });
}

#[test]
fn crit08_density_bounds_and_variance() {
    criterion(8, "density bounds and variance", || {
        let data = corpus_data()?;
        for &rho in &data.rho {
            if !(0.0..=1.0).contains(&rho) {
                return Err(format!("rho {rho} out of [0,1]"));
            }
        }
        let m = mean(&data.rho);
        let var = data.rho.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / data.rho.len() as f64;
        let sd = var.sqrt();
        if sd <= 0.0 {
            return Err("density distribution is degenerate".into());
        }
        Ok(format!(
            "all rho in [0,1]; corpus mean {m:.3}, sd {sd:.3} over {} fragments",
            data.rho.len()
        ))
    });
}

#[test]
fn crit09_statistics_oracles() {
    criterion(9, "statistics oracles", || {
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        if (s - 0.8).abs() > 1e-12 {
            return Err(format!("spearman oracle gave {s}"));
        }
        let xs = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let up: Vec<f64> = xs.iter().map(|x| 3.0 * x + 2.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -0.5 * x).collect();
        if (pearson(&xs, &up).unwrap() - 1.0).abs() > 1e-12
            || (pearson(&xs, &down).unwrap() + 1.0).abs() > 1e-12
        {
            return Err("pearson oracle failed on planted linear data".into());
        }

        // Null permutation p-values should look uniform (KS at alpha = 0.01).
        let trials = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let mut pvals = Vec::with_capacity(trials);
        for t in 0..trials {
            let xs: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
            let ys: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
            let p = permutation_p_value(&xs, &ys, CorrelationKind::Spearman, 999, t as u64)
                .map_err(|e| e.to_string())?;
            pvals.push(p);
        }
        pvals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = pvals.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, &p) in pvals.iter().enumerate() {
            ks = ks.max(((i + 1) as f64 / n - p).abs());
            ks = ks.max((p - i as f64 / n).abs());
        }
        let critical = 1.628 / n.sqrt(); // alpha = 0.01
        if ks > critical {
            return Err(format!("KS statistic {ks:.4} > {critical:.4}"));
        }
        Ok(format!(
            "hand oracles exact; null p-values uniform (KS {ks:.4} < {critical:.4} at alpha=0.01, 200 trials)"
        ))
    });
}

#[test]
fn crit10_end_to_end_determinism() {
    criterion(10, "end-to-end determinism of profile outputs", || {
        use densetrace::density::{aggregate_words, profile_generation};
        use densetrace::report::{render_html_report, write_token_records_csv, Palette};
        use densetrace::trace::ThresholdGrid;

        let model = fixture_model();
        let tok = fixture::tiny_tokenizer();
        let grid = ThresholdGrid::default();
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let records =
                profile_generation(model, &tok, "bad cab face", 6, 0.6, 42, &grid)
                    .map_err(|e| e.to_string())?;
            let mut csv = Vec::new();
            write_token_records_csv(&mut csv, &records).map_err(|e| e.to_string())?;
            let html = render_html_report(&records, &Palette::default());
            let words = aggregate_words(&records, None);
            outputs.push((csv, html, serde_json::to_string(&words).unwrap()));
        }
        if outputs[0] != outputs[1] {
            return Err("repeated profile runs differ".into());
        }
        Ok("two seeded profile runs produced byte-identical CSV, HTML and word records".into())
    });
}
