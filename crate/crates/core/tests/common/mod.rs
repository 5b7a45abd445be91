#![allow(dead_code)]

use std::sync::Arc;

use icrl_core::context::Episode;
use icrl_core::data::Example;
use icrl_core::policy::{render_prompt, PromptMode, PromptTemplate};
use icrl_core::reward::RewardValue;

pub fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}.txt", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn ep(t: u64, query: &str, prediction: &str, gold: &str) -> Arc<Episode> {
    let reward = RewardValue::observed(u8::from(prediction == gold));
    Arc::new(Episode::new(
        t,
        Example::new(format!("e{t}"), query, gold),
        prediction,
        reward,
    ))
}

type GoldenCase = (&'static str, Vec<Arc<Episode>>, Example, PromptTemplate, PromptMode);

/// The four reference prompts rebuilt from their episodes: (golden name, rendered markup).
pub fn golden_renders() -> Vec<(&'static str, String)> {
    let llama = PromptTemplate::llama();
    let phi = PromptTemplate::phi();
    let phi_utterance = PromptTemplate::phi().with_query_prefix("Utterance: ");
    let q = |s: &str| Example::new("q", s, "unused");

    let cases: Vec<GoldenCase> = vec![
        (
            "llama_icl",
            vec![
                ep(
                    1,
                    "Tell me about the card PIN?",
                    "get physical card",
                    "get physical card",
                ),
                ep(
                    2,
                    "Is there a daily auto top-up limit?",
                    "automatic top up",
                    "automatic top up",
                ),
            ],
            q("I got a message saying I made a withdrawal from the bank machine, but I did not."),
            llama.clone(),
            PromptMode::Icl,
        ),
        (
            "llama_icrl",
            vec![
                ep(1, "what's the traffic at lexington", "traffic", "traffic"),
                ep(
                    2,
                    "my credit card is set to expire in what month",
                    "expiration date",
                    "expiration date",
                ),
            ],
            q("could you translate atm machine into english"),
            llama,
            PromptMode::Icrl,
        ),
        (
            "phi_icl",
            vec![
                ep(1, "what's the traffic at lexington", "traffic", "traffic"),
                ep(2, "what is 8 factorial", "calculator", "calculator"),
            ],
            q("correct, that's true"),
            phi,
            PromptMode::Icl,
        ),
        (
            "phi_icrl",
            vec![
                ep(1, "meeting next week monday", "calendar query", "calendar set"),
                ep(2, "how warm today is", "weather query", "weather query"),
            ],
            q("hey make sure i go to sarahs birthday party on the twelveth"),
            phi_utterance,
            PromptMode::Icrl,
        ),
    ];
    cases
        .into_iter()
        .map(|(name, ctx, query, tpl, mode)| {
            let transcript = render_prompt(&ctx, &query, &tpl, mode).expect("fixtures render");
            (name, tpl.to_markup(&transcript))
        })
        .collect()
}

use icrl_core::data::{make_split, DatasetSplit, LabelSpace, SyntheticTask};
use icrl_core::policy::PolicyBackend;
use icrl_core::runner::{run_to_log, Algorithm, RunConfig};
use icrl_core::RunLog;

/// A balanced synthetic task split into `train` and `test` examples.
pub fn synthetic(train: usize, test: usize, seed: u64) -> (DatasetSplit, LabelSpace) {
    let task = SyntheticTask {
        examples: train + test,
        seed,
        ..SyntheticTask::default()
    };
    let (examples, labels) = task.generate().expect("synthetic task");
    (make_split(&examples, train, test, seed).expect("split"), labels)
}

pub fn config(algorithm: Algorithm, backend: PolicyBackend) -> RunConfig {
    RunConfig {
        algorithm,
        backend,
        ..RunConfig::default()
    }
}

/// Runs a mock-backend config to completion.
pub fn run(cfg: &RunConfig, split: &DatasetSplit, labels: &LabelSpace) -> RunLog {
    let policy = cfg.backend.build(Arc::new(NoNetwork));
    let (log, result) = run_to_log(cfg, split, labels, policy.as_ref());
    result.expect("run completes");
    log
}

/// Fails the test on any network use.
pub struct NoNetwork;

impl icrl_core::policy::Transport for NoNetwork {
    fn post_json(
        &self,
        url: &str,
        _: &[(String, String)],
        _: &serde_json::Value,
    ) -> Result<icrl_core::policy::HttpResponse, String> {
        panic!("unexpected network call to {url}")
    }
}
