//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion;
//! run with `--nocapture` to see them.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use journey_core::checkpoint::Checkpoint;
use journey_core::journeydata::{
    build_vocab, demo_funnel, generate_synthetic, parse_log, replicate_dwell, split, DwellRule, PageEvent,
    PageVocabulary, Session,
};
use journey_core::numerics::Matrix;
use journey_core::seqmodel::{session_loss, Batch, ModelConfig, SequenceModel, StepPrediction};
use journey_core::simulator::{estimate_conversion, exact_conversion, JourneyPrefix, MarkovPredictor, Objective};
use journey_core::textenc::EncoderConfig;
use journey_core::training::{ensemble_predict, evaluate, train, train_ensemble, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { max_len: 16, stages: 2, filters: 6, kernel_width: 3, pool: 2 },
        lstm_layers: 2,
        lstm_hidden: 8,
        fc_hidden: 10,
        dropout: 0.0,
    }
}

fn session(id: &str, keywords: &str, pages: &[&str]) -> Session {
    Session {
        session_id: id.into(),
        keywords: keywords.into(),
        events: pages.iter().map(|p| PageEvent { page: (*p).into(), dwell_seconds: 5.0 }).collect(),
    }
}

fn gradient_check(limit: Duration) -> Outcome {
    let started = Instant::now();
    let vocab = PageVocabulary::from_pages(vec!["home".into(), "car-quote".into(), "faq".into()], 1).unwrap();
    let mut model = SequenceModel::new(toy_config(), vocab, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        p.zero_grad();
    }
    let batch = Batch {
        phrases: vec!["car insurance".into(), "home".into(), "car-quote".into(), "faq".into()],
        inputs: vec![vec![0, 0], vec![1, 3], vec![2, 1]],
        targets: vec![vec![Some(0), Some(2)], vec![Some(1), Some(0)], vec![Some(4), Some(4)]],
    };
    model.accumulate_batch_gradients::<ChaCha8Rng>(&batch, None).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad().unwrap().to_vec()).collect();
    let loss_at = |m: &mut SequenceModel| {
        let l = m.accumulate_batch_gradients::<ChaCha8Rng>(&batch, None).unwrap();
        m.params_mut().into_iter().for_each(Matrix::zero_grad);
        l
    };
    let h = 1e-5;
    let (mut worst, mut entries) = (0.0f64, 0usize);
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            let orig = model.params()[pi].data()[k];
            model.params_mut()[pi].data_mut()[k] = orig + h;
            let up = loss_at(&mut model);
            model.params_mut()[pi].data_mut()[k] = orig - h;
            let down = loss_at(&mut model);
            model.params_mut()[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((g - numeric).abs() / (g.abs() + numeric.abs()).max(1e-6));
            entries += 1;
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-4 && elapsed < limit,
        format!("max relative error {worst:.2e} over {entries} weights, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn loss_oracle(limit: Duration) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = rng.gen_range(1..=10);
        let n = rng.gen_range(2..=20);
        let preds: Vec<StepPrediction> =
            (0..t).map(|step| StepPrediction { step, probs: vec![1.0 / n as f64; n] }).collect();
        let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..n)).collect();
        let loss = session_loss(&preds, &targets).unwrap();
        worst = worst.max((loss - t as f64 * (n as f64).ln()).abs());
    }

    let sessions = vec![session("s", "go", &["a", "b", "c"])];
    let vocab = build_vocab(&sessions, 1).unwrap();
    let config = TrainConfig {
        epochs: 500,
        batch_size: 1,
        dwell: DwellRule::SINGLE,
        model: ModelConfig { dropout: 0.0, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let (_, report) = train(&sessions, &sessions, &config, &vocab).unwrap();
    let first_below = report.epochs.iter().find_map(|e| {
        let r = e.eval.unwrap();
        (r.mean_loss * (r.steps as f64) < 0.01).then_some(e.epoch)
    });
    let last = report.epochs.last().unwrap().eval.unwrap();
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-9 && first_below.is_some() && elapsed < limit,
        format!(
            "uniform |loss - T ln N| max {worst:.1e}; overfit loss {:.2e} (< 0.01 from epoch {first_below:?}), {:.1}s",
            last.mean_loss * last.steps as f64,
            elapsed.as_secs_f64()
        ),
    )
}

fn random_chain(n: usize, rng: &mut ChaCha8Rng) -> MarkovPredictor {
    let row = |rng: &mut ChaCha8Rng| {
        let w: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() }).collect();
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            vec![1.0 / n as f64; n]
        } else {
            w.iter().map(|x| x / total).collect()
        }
    };
    let transitions = (0..n).map(|_| row(rng)).collect();
    let initial = row(rng);
    let names = (0..n).map(|i| format!("p{i}")).collect();
    MarkovPredictor::new(names, transitions, initial).unwrap()
}

fn monte_carlo_oracle(limit: Duration) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = 200;
    let mut within = 0;
    for case in 0..cases {
        let n = rng.gen_range(2..=5);
        let chain = random_chain(n, &mut rng);
        let horizon = rng.gen_range(1..=5);
        let objective = Objective::new("goal", [format!("p{}", rng.gen_range(0..n - 1))]).unwrap();
        let prefix_len = rng.gen_range(0..=2);
        let prefix = JourneyPrefix::new("", (0..prefix_len).map(|_| format!("p{}", rng.gen_range(0..n - 1))));
        let exact = exact_conversion(&chain, &prefix, &objective, horizon).unwrap();
        let est = estimate_conversion(&chain, &prefix, &objective, 100_000, horizon, case).unwrap();
        let sigma = (exact * (1.0 - exact) / est.n_samples as f64).sqrt();
        if (est.probability - exact).abs() <= 3.0 * sigma + 1e-12 {
            within += 1;
        }
    }
    let rate = within as f64 / cases as f64;
    let elapsed = started.elapsed();
    outcome(
        rate >= 0.99 && elapsed < limit,
        format!("{within}/{cases} estimates within 3 sigma of enumeration, {:.1}s", elapsed.as_secs_f64()),
    )
}

struct Funnel {
    model: SequenceModel,
    eval: Vec<Session>,
    train: Vec<Session>,
    vocab: PageVocabulary,
}

fn funnel_data() -> (Vec<Session>, Vec<Session>, PageVocabulary) {
    let sessions = generate_synthetic(&demo_funnel(), 8000, 42).unwrap();
    let (train, eval) = split(&sessions, 0.8, 43).unwrap();
    let vocab = build_vocab(&train, 5).unwrap();
    (train, eval, vocab)
}

fn learnability(limit: Duration) -> (Outcome, Funnel) {
    let started = Instant::now();
    let (train_set, eval_set, vocab) = funnel_data();
    let config = TrainConfig { dwell: DwellRule::SINGLE, ..TrainConfig::default() };
    let (model, _) = train(&train_set, &[], &config, &vocab).unwrap();
    let acc = evaluate(&model, &eval_set, &DwellRule::SINGLE).accuracy;
    let bayes = demo_funnel().bayes_accuracy(&eval_set).unwrap();
    let elapsed = started.elapsed();
    let result = outcome(
        acc >= bayes - 0.03 && elapsed < limit,
        format!(
            "accuracy {acc:.4} vs Bayes {bayes:.4} on {} held-out sessions, {:.1}s",
            eval_set.len(),
            elapsed.as_secs_f64()
        ),
    );
    (result, Funnel { model, eval: eval_set, train: train_set, vocab })
}

fn ensemble_contract(funnel: &Funnel) -> Outcome {
    let started = Instant::now();
    let small = TrainConfig {
        epochs: 2,
        dwell: DwellRule::SINGLE,
        model: ModelConfig {
            encoder: EncoderConfig { filters: 16, ..EncoderConfig::default() },
            lstm_layers: 1,
            lstm_hidden: 32,
            fc_hidden: 32,
            dropout: 0.5,
        },
        ..TrainConfig::default()
    };
    let (single, _) = train(&funnel.train, &[], &small, &funnel.vocab).unwrap();
    let (one, _) = train_ensemble(&funnel.train, &[], &small, &funnel.vocab, 1).unwrap();
    let prefixes = [
        JourneyPrefix::new("car insurance", ["car-insurance"]),
        JourneyPrefix::new("insurance", ["home", "compare", "quote-start"]),
    ];
    let bitwise = prefixes.iter().all(|p| {
        let a = single.predict_next(p).unwrap();
        let b = ensemble_predict(&one, p).unwrap();
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    });

    let (five, _) = train_ensemble(&funnel.train, &[], &small, &funnel.vocab, 5).unwrap();
    let valid = funnel.eval.iter().take(200).all(|s| {
        let prefix = JourneyPrefix::new(s.keywords.clone(), s.pages().map(String::from));
        let d = ensemble_predict(&five, &prefix).unwrap();
        d.iter().all(|p| (0.0..=1.0).contains(p)) && (d.iter().sum::<f64>() - 1.0).abs() < 1e-9
    });
    let member_accs: Vec<f64> =
        five.members().iter().map(|m| evaluate(m, &funnel.eval, &DwellRule::SINGLE).accuracy).collect();
    let mean = member_accs.iter().sum::<f64>() / member_accs.len() as f64;
    let acc = evaluate(&five, &funnel.eval, &DwellRule::SINGLE).accuracy;
    outcome(
        bitwise && valid && acc >= mean - 0.005,
        format!(
            "k=1 bitwise {bitwise}; k=5 distributions valid {valid}; accuracy {acc:.4} vs member mean {mean:.4}, {:.1}s",
            started.elapsed().as_secs_f64()
        ),
    )
}

fn simulation_realism(funnel: &Funnel) -> Outcome {
    let started = Instant::now();
    let spec = demo_funnel();
    let truth = MarkovPredictor::from_spec(&spec).unwrap();
    let objective = Objective::new("quote", ["quote-done"]).unwrap();
    let (n, horizon) = (1000, 30);
    let mut lines = Vec::new();
    let mut pass = true;
    for (i, (page, keywords)) in spec.states.iter().zip(&spec.keywords_by_state).enumerate().take(4) {
        let prefix = JourneyPrefix::new(keywords.clone(), [page.clone()]);
        let est = estimate_conversion(&funnel.model, &prefix, &objective, n, horizon, 600 + i as u64).unwrap();
        let exact = exact_conversion(&truth, &prefix, &objective, horizon).unwrap();
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        let ok = (est.probability - exact).abs() <= 3.0 * sigma;
        pass &= ok;
        lines.push(format!("{page} {:.3}/{exact:.3}", est.probability));
    }
    outcome(
        pass,
        format!(
            "simulated/exact conversion to quote-done: {}, {:.1}s",
            lines.join(", "),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_journey")).args(args).output().unwrap();
    assert!(out.status.success(), "journey {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(dir: &Path, workers: &str) -> Vec<(String, Vec<u8>)> {
    let _ = fs::remove_dir_all(dir);
    let d = dir.to_str().unwrap();
    let data = dir.join("sessions.jsonl");
    let data = data.to_str().unwrap();
    let ckpt = dir.join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();
    run_cli(&["gen-data", "--sessions", "300", "--seed", "7", "--out-dir", d, "--workers", workers]);
    run_cli(&[
        "train",
        "--data",
        data,
        "--seed",
        "7",
        "--out-dir",
        d,
        "--workers",
        workers,
        "--epochs",
        "2",
        "--min-freq",
        "1",
        "--filters",
        "8",
        "--lstm-layers",
        "1",
        "--lstm-hidden",
        "12",
        "--fc-hidden",
        "12",
        "--ensemble",
        "2",
    ]);
    run_cli(&[
        "score",
        "--checkpoint",
        ckpt,
        "--data",
        data,
        "--seed",
        "7",
        "--out-dir",
        d,
        "--workers",
        workers,
        "--objectives",
        "quote=quote-done;contact=contact",
        "--prefix-steps",
        "1",
        "--samples",
        "200",
    ]);
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-determinism");
    let a = pipeline(&root.join("a"), "1");
    let b = pipeline(&root.join("b"), "3");
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let same_runs = a == b;

    let ckpt_path = root.join("a").join("checkpoint.json");
    let loaded = Checkpoint::load(&ckpt_path).unwrap();
    let resaved = root.join("resaved.json");
    loaded.save(&resaved).unwrap();
    let reloaded = Checkpoint::load(&resaved).unwrap();
    let same_bytes = fs::read(&ckpt_path).unwrap() == fs::read(&resaved).unwrap();
    let sessions =
        parse_log(std::io::BufReader::new(fs::File::open(root.join("a").join("sessions.jsonl")).unwrap())).unwrap();
    let same_predictions = sessions.iter().take(50).all(|s| {
        let prefix = JourneyPrefix::new(s.keywords.clone(), s.pages().map(String::from));
        let x = ensemble_predict(&loaded.ensemble().unwrap(), &prefix).unwrap();
        let y = ensemble_predict(&reloaded.ensemble().unwrap(), &prefix).unwrap();
        x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    outcome(
        same_runs && same_bytes && same_predictions && names.contains(&"score.csv"),
        format!(
            "two runs identical {same_runs} over {names:?}; checkpoint re-save identical {same_bytes}, predictions bitwise {same_predictions}, {:.1}s",
            started.elapsed().as_secs_f64()
        ),
    )
}

fn dwell_replication() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for i in 0..1000 {
        let rule = DwellRule { unit_seconds: rng.gen_range(0.5..120.0), cap: rng.gen_range(1..=8) };
        let dwells: Vec<f64> = (0..rng.gen_range(1..=6))
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => rule.unit_seconds * rng.gen_range(1..=10) as f64,
                _ => rng.gen_range(0.0..1000.0),
            })
            .collect();
        let s = Session {
            session_id: format!("s{i}"),
            keywords: String::new(),
            events: dwells.iter().map(|&d| PageEvent { page: "p".into(), dwell_seconds: d }).collect(),
        };
        let expected: usize =
            dwells.iter().map(|d| ((d / rule.unit_seconds).ceil() as usize).max(1).min(rule.cap)).sum();
        if replicate_dwell(&s, &rule).len() != expected + 1 {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/1000 expanded lengths differ from the formula"))
}

#[test]
fn acceptance() {
    let mut results = vec![
        (1, "gradient check", gradient_check(Duration::from_secs(30))),
        (2, "loss oracle and overfit", loss_oracle(Duration::from_secs(60))),
        (3, "Monte Carlo vs enumeration", monte_carlo_oracle(Duration::from_secs(300))),
    ];
    let (learn, funnel) = learnability(Duration::from_secs(900));
    results.push((4, "learnability", learn));
    results.push((5, "ensemble contract", ensemble_contract(&funnel)));
    results.push((6, "simulation realism", simulation_realism(&funnel)));
    results.push((7, "determinism", determinism()));
    results.push((8, "dwell replication", dwell_replication()));
    for (id, name, o) in &results {
        println!("criterion {id} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<i32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}
