use journey_core::journeydata::{build_vocab, DwellRule, PageEvent, PageVocabulary, Session, NULL_PAGE};
use journey_core::numerics::Matrix;
use journey_core::seqmodel::{session_loss, Batch, ModelConfig, SequenceModel, StepPrediction};
use journey_core::simulator::JourneyPrefix;
use journey_core::textenc::EncoderConfig;
use journey_core::training::{argmax, ensemble_predict, evaluate, train, Ensemble, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
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

#[test]
fn uniform_predictions_cost_t_ln_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let t = rng.gen_range(1..=10);
        let n = rng.gen_range(2..=20);
        let preds: Vec<StepPrediction> =
            (0..t).map(|step| StepPrediction { step, probs: vec![1.0 / n as f64; n] }).collect();
        let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..n)).collect();
        let loss = session_loss(&preds, &targets).unwrap();
        assert!((loss - t as f64 * (n as f64).ln()).abs() < 1e-9, "t={t} n={n} loss={loss}");
    }
}

#[test]
fn fresh_model_loss_is_near_ln_n() {
    let sessions: Vec<Session> =
        (0..20).map(|i| session(&format!("s{i}"), "kw", &["home", "faq", "quote"][..1 + i % 3])).collect();
    let vocab = build_vocab(&sessions, 1).unwrap();
    let config = TrainConfig { epochs: 0, model: tiny_model(), ..TrainConfig::default() };
    let (model, _) = train(&sessions, &[], &config, &vocab).unwrap();
    let result = evaluate(&model, &sessions, &DwellRule::SINGLE);
    let ln_n = (vocab.len() as f64).ln();
    assert!((result.mean_loss - ln_n).abs() < 0.1 * ln_n, "{} vs {ln_n}", result.mean_loss);
}

#[test]
fn overfits_a_deterministic_session() {
    let sessions = vec![session("s", "go", &["a", "b", "c"])];
    let vocab = build_vocab(&sessions, 1).unwrap();
    let config = TrainConfig {
        epochs: 500,
        batch_size: 1,
        dwell: DwellRule::SINGLE,
        model: ModelConfig { dropout: 0.0, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let (model, report) = train(&sessions, &sessions, &config, &vocab).unwrap();
    let last = report.epochs.last().unwrap().eval.unwrap();
    let total = last.mean_loss * last.steps as f64;
    assert!(total < 0.01, "session loss {total}");
    assert_eq!(last.accuracy, 1.0);
    let probs = model.predict_next(&JourneyPrefix::new("go", ["a", "b", "c"])).unwrap();
    assert_eq!(argmax(&probs), vocab.lookup(NULL_PAGE).unwrap());
}

#[test]
fn evaluate_matches_a_brute_force_recount() {
    let pages = ["home", "car", "faq", "quote"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sessions: Vec<Session> = (0..30)
        .map(|i| {
            let len = rng.gen_range(1..6);
            let walk: Vec<&str> = (0..len).map(|_| pages[rng.gen_range(0..pages.len())]).collect();
            session(&format!("s{i}"), ["", "car insurance"][i % 2], &walk)
        })
        .collect();
    let vocab = build_vocab(&sessions, 1).unwrap();
    let model = SequenceModel::new(tiny_model(), vocab.clone(), 3).unwrap();
    let result = evaluate(&model, &sessions, &DwellRule::SINGLE);

    let (mut hits, mut loss, mut steps) = (0usize, 0.0, 0usize);
    for s in &sessions {
        let mut inputs = vec![s.keywords.as_str()];
        inputs.extend(s.pages());
        let mut targets: Vec<usize> = s.pages().map(|p| vocab.encode(p)).collect();
        targets.push(vocab.null_index());
        let preds = model.forward_session(&inputs).unwrap();
        for (p, &t) in preds.iter().zip(&targets) {
            hits += usize::from(argmax(&p.probs) == t);
            loss -= p.probs[t].ln();
            steps += 1;
        }
    }
    assert_eq!(result.steps, steps);
    assert_eq!(result.accuracy, hits as f64 / steps as f64);
    assert!((result.mean_loss - loss / steps as f64).abs() < 1e-12);
}

#[test]
fn single_member_ensemble_is_bitwise_the_model() {
    let vocab = PageVocabulary::from_pages(vec!["home".into(), "quote".into()], 1).unwrap();
    let model = SequenceModel::new(tiny_model(), vocab, 8).unwrap();
    let ensemble = Ensemble::new(vec![model.clone()]).unwrap();
    for prefix in [JourneyPrefix::new("", Vec::<String>::new()), JourneyPrefix::new("car", ["home", "quote"])] {
        let a = model.predict_next(&prefix).unwrap();
        let b = ensemble_predict(&ensemble, &prefix).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn training_loss_does_not_blow_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sessions: Vec<Session> = (0..64)
        .map(|i| {
            let walk: &[&str] = if rng.gen_bool(0.7) { &["home", "quote", "done"] } else { &["home", "faq"] };
            session(&format!("s{i}"), "insurance", walk)
        })
        .collect();
    let vocab = build_vocab(&sessions, 1).unwrap();
    let config =
        TrainConfig { epochs: 3, batch_size: 8, learning_rate: 3e-3, model: tiny_model(), ..TrainConfig::default() };
    let (_, report) = train(&sessions, &[], &config, &vocab).unwrap();
    for w in report.epochs.windows(2) {
        assert!(w[1].train_loss <= w[0].train_loss * 1.05, "{:?}", report.epochs);
    }
}

/// Central differences on the public batch loss against the accumulated
/// gradients of the full encoder + LSTM + head.
#[test]
fn full_model_gradients_match_finite_differences() {
    let vocab = PageVocabulary::from_pages(vec!["home".into(), "car-quote".into(), "faq".into()], 1).unwrap();
    let mut model = SequenceModel::new(tiny_model(), vocab, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        p.zero_grad();
    }
    let batch = Batch {
        phrases: vec!["cheap car insurance".into(), "home".into(), "car-quote".into(), "faq".into()],
        inputs: vec![vec![0, 0], vec![1, 3], vec![2, 0]],
        targets: vec![vec![Some(0), Some(2)], vec![Some(1), Some(4)], vec![Some(4), None]],
    };
    model.accumulate_batch_gradients::<ChaCha8Rng>(&batch, None).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad().unwrap().to_vec()).collect();

    let loss_at = |m: &mut SequenceModel| {
        let l = m.accumulate_batch_gradients::<ChaCha8Rng>(&batch, None).unwrap();
        m.params_mut().into_iter().for_each(Matrix::zero_grad);
        l
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for k in 0..grads.len() {
            let orig = model.params()[pi].data()[k];
            model.params_mut()[pi].data_mut()[k] = orig + h;
            let up = loss_at(&mut model);
            model.params_mut()[pi].data_mut()[k] = orig - h;
            let down = loss_at(&mut model);
            model.params_mut()[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            // Entries below 1e-6 sit at the roundoff floor of the differences.
            worst = worst.max((grads[k] - numeric).abs() / (grads[k].abs() + numeric.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}
