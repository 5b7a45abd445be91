mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{config, run, synthetic};
use icrl_core::context::{Episode, SelectionStrategy};
use icrl_core::data::{estimate_capacity, DatasetSplit, Example, LabelSpace, TokenBudget};
use icrl_core::log::{Event, RunStatus};
use icrl_core::metrics::{self, ConfusionMatrix};
use icrl_core::policy::{
    frequency_rule, HttpResponse, Policy, PolicyBackend, PredictRequest, Prediction, PromptMode, RemoteConfig,
    Transport,
};
use icrl_core::reward::{negative_feedback, RewardMode, RewardValue};
use icrl_core::rng::StreamRng;
use icrl_core::runner::{run_to_log, Admission, Algorithm, ReplayCache, RunConfig, Runner};
use icrl_core::{Error, RunLog};

fn small(mut cfg: RunConfig, steps: usize) -> RunConfig {
    cfg.max_steps = Some(steps);
    cfg.eval_every = 50;
    cfg
}

#[test]
fn oracle_naive_has_no_regret() {
    let (split, labels) = synthetic(100, 40, 1);
    let log = run(
        &small(config(Algorithm::Naive, PolicyBackend::Oracle), 100),
        &split,
        &labels,
    );
    assert_eq!(log.steps().count(), 100);
    assert!(log.steps().all(|s| s.true_reward == 1));
    assert_eq!(metrics::regret(&log).last(), Some(0.0));
    assert!(log.evals().all(|e| e.accuracy == 1.0 && e.complete));
    assert_eq!(log.end().unwrap().status, RunStatus::Completed);
}

#[test]
fn constant_wrong_backend_regret_is_t() {
    let (split, mut labels) = synthetic(120, 20, 2);
    labels = LabelSpace::new(
        "t",
        labels.labels().iter().cloned().chain(["never".to_string()]).collect(),
    )
    .unwrap();
    let cfg = small(
        config(Algorithm::Naive, PolicyBackend::Constant { label: "never".into() }),
        120,
    );
    let log = run(&cfg, &split, &labels);
    assert_eq!(metrics::regret(&log).last(), Some(120.0));
}

#[test]
fn parrot_collapses_under_naive() {
    let (split, labels) = synthetic(1000, 100, 3);
    let mut cfg = config(Algorithm::Naive, PolicyBackend::ParrotLastPositive);
    cfg.eval_every = 1000;
    let log = run(&cfg, &split, &labels);
    let m = ConfusionMatrix::from_steps(&log, &labels).unwrap();
    assert!(
        m.predicted_entropy() < 0.5 * m.true_entropy(),
        "{} vs {}",
        m.predicted_entropy(),
        m.true_entropy()
    );
}

#[test]
fn frequency_learner_learns_under_explorative() {
    let (split, labels) = synthetic(1000, 100, 4);
    let mut cfg = config(
        Algorithm::Explorative,
        PolicyBackend::FrequencyLearner { epsilon: 0.05 },
    );
    cfg.eval_every = 1000;
    let log = run(&cfg, &split, &labels);
    let acc = metrics::running_train_accuracy(&log, 256).last().unwrap();
    assert!(acc >= 0.8, "running accuracy {acc}");

    let constant = PolicyBackend::Constant {
        label: labels.labels()[0].clone(),
    };
    let log = run(
        &RunConfig {
            backend: constant,
            ..cfg
        },
        &split,
        &labels,
    );
    let acc = metrics::running_train_accuracy(&log, 256).last().unwrap();
    assert!((acc - 0.1).abs() < 0.06, "constant accuracy {acc}");
}

#[test]
fn positive_only_prompts_carry_no_negative_feedback() {
    let (split, labels) = synthetic(400, 20, 5);
    let cfg = small(
        config(Algorithm::Explorative, PolicyBackend::FrequencyLearner { epsilon: 0.5 }),
        400,
    );
    let log = run(&cfg, &split, &labels);
    let negative = negative_feedback("");
    let marker = &negative[..negative.find('\'').unwrap()];
    let prompts = metrics::rendered_prompts(&log).unwrap();
    assert!(prompts.iter().all(|(_, p)| !p.contains(marker)));
    assert!(log.steps().any(|s| !s.correct()), "fixture needs wrong predictions");
    let positives = log.steps().filter(|s| s.observed_reward == Some(1)).count();
    let admitted = log.steps().filter(|s| s.admitted).count();
    assert_eq!(positives, admitted);
}

#[test]
fn naive_renders_negative_episodes() {
    let (split, labels) = synthetic(60, 20, 6);
    let cfg = small(
        config(Algorithm::Naive, PolicyBackend::FrequencyLearner { epsilon: 0.5 }),
        60,
    );
    let log = run(&cfg, &split, &labels);
    let prompts = metrics::rendered_prompts(&log).unwrap();
    assert!(prompts.iter().any(|(_, p)| p.contains("is wrong!")));
    assert!(log.steps().all(|s| s.admitted));
}

#[test]
fn approximate_single_full_context_is_naive_over_positives() {
    let (split, labels) = synthetic(300, 20, 7);
    let backend = PolicyBackend::FrequencyLearner { epsilon: 0.2 };
    let mut approx = small(config(Algorithm::Approximate, backend.clone()), 300);
    approx.k = 1;
    approx.p_keep = 1.0;
    let mut naive = small(config(Algorithm::Naive, backend), 300);
    naive.buffer_admission = Some(Admission::PositiveOnly);
    let a = run(&approx, &split, &labels);
    let n = run(&naive, &split, &labels);
    for (x, y) in a.steps().zip(n.steps()) {
        assert_eq!(x.context, y.context, "t={}", x.t);
        assert_eq!(x.prompt_hash, y.prompt_hash, "t={}", x.t);
        assert_eq!(x.prediction, y.prediction, "t={}", x.t);
    }
    assert_eq!(a.steps().count(), 300);
}

#[test]
fn uniform_selection_spreads_over_contexts() {
    let (split, labels) = synthetic(8000, 10, 8);
    let mut cfg = config(Algorithm::Approximate, PolicyBackend::Oracle);
    cfg.eval_every = 100_000;
    cfg.window_tokens = 4096;
    let log = run(&cfg, &split, &labels);
    let n = log.steps().count() as f64;
    let sigma = (n * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
    let stats = metrics::per_context_stats(&log, 8000).unwrap();
    for s in &stats {
        let dev = (s.selections as f64 - n / 8.0).abs();
        assert!(
            dev <= 3.0 * sigma,
            "context {} selected {} times",
            s.index,
            s.selections
        );
    }
}

#[test]
fn exact_selection_runs_and_records_indices() {
    let (split, labels) = synthetic(500, 10, 9);
    let mut cfg = small(
        config(Algorithm::Approximate, PolicyBackend::FrequencyLearner { epsilon: 0.1 }),
        500,
    );
    cfg.selection = SelectionStrategy::Exact;
    let log = run(&cfg, &split, &labels);
    assert!(log.steps().all(|s| s.context_index.is_some_and(|i| i < 8)));
}

#[test]
fn approximate_overflow_truncates_with_one_warning() {
    let (split, labels) = synthetic(400, 10, 10);
    let mut cfg = small(config(Algorithm::Approximate, PolicyBackend::Oracle), 400);
    cfg.p_keep = 1.0;
    cfg.window_tokens = 400;
    let log = run(&cfg, &split, &labels);
    assert_eq!(log.warnings().count(), 1);
    assert!(log.steps().any(|s| s.truncated));
    assert!(log.end().unwrap().window_saturated);
    // every rendered prompt fits the window
    assert!(log.steps().all(|s| s.prompt_tokens <= 400));
    metrics::rendered_prompts(&log).unwrap();
}

#[test]
fn supervised_icl_stops_at_capacity() {
    let (split, labels) = synthetic(600, 30, 11);
    let mut cfg = config(Algorithm::SupervisedIcl, PolicyBackend::Oracle);
    cfg.eval_every = 20;
    cfg.window_tokens = 3000;
    let log = run(&cfg, &split, &labels);
    let tok = cfg.tokenizer.build();
    let budget = TokenBudget::for_examples(
        3000,
        tok.as_ref(),
        &cfg.template,
        PromptMode::Icl,
        split.train.iter().chain(&split.test),
    );
    let c = estimate_capacity(&split, &labels, tok.as_ref(), &cfg.template, budget) as u64;
    assert!(c > 20 && c < 600, "capacity {c}");
    let ts: Vec<u64> = log.evals().map(|e| e.t).collect();
    assert_eq!(*ts.last().unwrap(), c / 20 * 20);
    assert_eq!(ts[0], 0);
    assert!(log.evals().all(|e| e.accuracy == 1.0));
    assert_eq!(log.evals().next().unwrap().context.len(), 0);
    assert_eq!(log.steps().count(), 0);
}

#[test]
fn constant_on_balanced_test_scores_class_prior() {
    let (split, labels) = synthetic(10, 10, 12);
    let mut test = Vec::new();
    for (i, l) in labels.labels().iter().enumerate() {
        for j in 0..50 {
            test.push(Example::new(format!("b{i}-{j}"), format!("q {i} {j}"), l.clone()));
        }
    }
    let split = DatasetSplit { test, ..split };
    let cfg = small(
        config(
            Algorithm::Explorative,
            PolicyBackend::Constant {
                label: labels.labels()[3].clone(),
            },
        ),
        1,
    );
    let log = run(&cfg, &split, &labels);
    let e = log.evals().next().unwrap();
    assert_eq!(e.predictions.len(), 500);
    assert!((e.accuracy - 0.1).abs() < 1e-12);
}

#[test]
fn frequency_learner_eval_matches_rule_replay() {
    let (split, labels) = synthetic(500, 100, 13);
    let mut cfg = config(Algorithm::Explorative, PolicyBackend::FrequencyLearner { epsilon: 0.0 });
    cfg.p_keep = 1.0;
    cfg.eval_every = 500;
    let log = run(&cfg, &split, &labels);
    let eval = log.evals().last().unwrap();
    assert_eq!(eval.t, 500);
    let ctx: Vec<Arc<Episode>> = log
        .steps()
        .filter(|s| eval.context.contains(&s.t))
        .map(|s| {
            Arc::new(Episode::new(
                s.t,
                Example::new(&s.example_id, &s.query, &s.gold_label),
                s.prediction.clone(),
                RewardValue::observed(s.observed_reward.unwrap()),
            ))
        })
        .collect();
    let mut replayed = 0;
    for (p, ex) in eval.predictions.iter().zip(&split.test) {
        match frequency_rule(&ctx, ex, PromptMode::Icrl, &labels) {
            Some(rule) => {
                assert_eq!(p.predicted, rule, "{}", ex.id);
                replayed += 1;
            }
            // no overlapping episode: the label was never learned
            None => assert!(ctx.iter().all(|e| e.prediction != ex.gold_label)),
        }
    }
    assert!(replayed >= 80, "{replayed}");
}

#[test]
fn eval_cadence_and_partial_final_window() {
    let (split, labels) = synthetic(1234, 10, 14);
    let log = run(&config(Algorithm::Explorative, PolicyBackend::Oracle), &split, &labels);
    let ts: Vec<u64> = log.evals().map(|e| e.t).collect();
    assert_eq!(ts, vec![0, 500, 1000]);
}

#[test]
fn eval_parallelism_never_changes_the_log() {
    let (split, labels) = synthetic(300, 60, 15);
    let mut cfg = small(
        config(Algorithm::Explorative, PolicyBackend::FrequencyLearner { epsilon: 0.3 }),
        300,
    );
    cfg.eval_concurrency = 1;
    let a = run(&cfg, &split, &labels);
    cfg.eval_concurrency = 7;
    let b = run(&cfg, &split, &labels);
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
}

#[test]
fn noisy_reward_keeps_true_reward_for_regret() {
    let (split, labels) = synthetic(300, 10, 16);
    let mut cfg = small(config(Algorithm::Explorative, PolicyBackend::Oracle), 300);
    cfg.reward_mode = RewardMode::Noisy { p_flip: 0.3 };
    let log = run(&cfg, &split, &labels);
    assert_eq!(metrics::regret(&log).last(), Some(0.0));
    let flipped = log.steps().filter(|s| s.observed_reward == Some(0)).count();
    assert!(flipped > 50 && flipped < 130, "{flipped}");
    assert_eq!(metrics::observed_regret(&log).last(), Some(flipped as f64));
}

#[test]
fn hidden_reward_renders_without_feedback() {
    let (split, labels) = synthetic(100, 10, 17);
    let mut cfg = small(
        config(Algorithm::Explorative, PolicyBackend::FrequencyLearner { epsilon: 0.5 }),
        100,
    );
    cfg.reward_mode = RewardMode::None;
    cfg.p_keep = 1.0;
    let log = run(&cfg, &split, &labels);
    assert!(log.steps().all(|s| s.observed_reward.is_none() && s.admitted));
    let prompts = metrics::rendered_prompts(&log).unwrap();
    assert!(prompts
        .iter()
        .all(|(_, p)| !p.contains("Good job") && !p.contains("is wrong")));
}

#[test]
fn invalid_configs_are_rejected_before_any_event() {
    let (split, labels) = synthetic(10, 10, 18);
    let mut cfg = config(Algorithm::Approximate, PolicyBackend::Oracle);
    cfg.k = 0;
    cfg.p_keep = 2.0;
    let policy = cfg.backend.build(Arc::new(common::NoNetwork));
    let (log, result) = run_to_log(&cfg, &split, &labels, policy.as_ref());
    let Err(Error::Config(errs)) = result else { panic!() };
    assert_eq!(errs.len(), 2);
    assert!(errs.iter().any(|e| e == "K must be ≥ 1"));
    assert!(log.events.is_empty());
}

struct FailAfter {
    ok: usize,
    calls: AtomicUsize,
    label: String,
}

impl Transport for FailAfter {
    fn post_json(&self, _: &str, _: &[(String, String)], _: &serde_json::Value) -> Result<HttpResponse, String> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Ok(HttpResponse {
                status: 503,
                body: "overloaded".into(),
                retry_after: None,
            });
        }
        let body = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": self.label}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 2}
        });
        Ok(HttpResponse {
            status: 200,
            body: body.to_string(),
            retry_after: None,
        })
    }
}

fn remote_backend() -> PolicyBackend {
    PolicyBackend::RemoteChat(RemoteConfig {
        endpoint: "http://localhost:1".into(),
        model: "m".into(),
        max_retries: 1,
        backoff_ms: 0,
        ..RemoteConfig::default()
    })
}

#[test]
fn transport_failure_aborts_with_partial_log() {
    let (split, labels) = synthetic(100, 5, 19);
    let mut cfg = small(config(Algorithm::Explorative, remote_backend()), 100);
    cfg.eval_every = 1000;
    let transport = Arc::new(FailAfter {
        ok: 5 + 20,
        calls: AtomicUsize::new(0),
        label: labels.labels()[0].clone(),
    });
    let policy = cfg.backend.build(transport);
    let (log, result) = run_to_log(&cfg, &split, &labels, policy.as_ref());
    assert!(matches!(result, Err(Error::Transport(ref e)) if e.status == Some(503) && e.attempts == 2));
    assert_eq!(log.steps().count(), 20);
    let end = log.end().unwrap();
    assert_eq!(end.status, RunStatus::Aborted);
    assert_eq!(end.steps, 20);
    // the partial log still verifies
    metrics::rendered_prompts(&log).unwrap();
}

struct Counting<'a> {
    inner: &'a dyn Policy,
    calls: AtomicUsize,
}

impl Policy for Counting<'_> {
    fn predict(
        &self,
        req: &PredictRequest<'_>,
        labels: &LabelSpace,
        rng: &mut StreamRng,
    ) -> icrl_core::Result<Prediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(req, labels, rng)
    }
}

#[test]
fn resume_reuses_logged_predictions() {
    let (split, labels) = synthetic(200, 20, 20);
    let cfg = small(
        config(Algorithm::Explorative, PolicyBackend::FrequencyLearner { epsilon: 0.2 }),
        200,
    );
    let full = run(&cfg, &split, &labels);

    // an interrupted log: everything up to the eval at t=100 plus a few steps
    let cut = full
        .events
        .iter()
        .position(|e| matches!(e, Event::Step(s) if s.t == 120))
        .unwrap();
    let partial = RunLog {
        events: full.events[..cut].to_vec(),
    };
    let inner = cfg.backend.build(Arc::new(common::NoNetwork));
    let counting = Counting {
        inner: inner.as_ref(),
        calls: AtomicUsize::new(0),
    };
    let mut resumed = RunLog::default();
    Runner::new(&cfg, &split, &labels, &counting)
        .with_replay(ReplayCache::from_log(&partial))
        .run(&mut resumed)
        .unwrap();
    assert_eq!(resumed.to_jsonl().unwrap(), full.to_jsonl().unwrap());
    // 81 new training steps, evals at 150 and 200 with 20 items each
    assert_eq!(counting.calls.load(Ordering::SeqCst), 81 + 40);
}
