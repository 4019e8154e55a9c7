//! The per-step control loop: detect → predict → ρ → construct CB/AS/SH →
//! τ → h → propose → shield → execute → charge budget → learn → update
//! context models.

use rand_chacha::ChaCha8Rng;

use crate::agent::{heuristic_policy, select_action, shaped_reward, Backbone, DiscreteObsKey, QFunction};
use crate::config::Config;
use crate::constraints::{ConstraintEval, SafetyBudget, SafetyLayer, StepInputs};
use crate::context::{
    adaptation_ratio, context_discrepancy_weighted, detect_context, required_speed, AdaptationState, Context,
    ContextForecast, HistoryRecord, InteractionHistory, RecoveryTracker, TransitionModel,
};
use crate::env::{observe, perceive, Action, Condition, MergeEnv};
use crate::rng::stream;
use crate::shield::{charge_budget, filter};
use crate::Error;

use super::method::{BackboneKind, MethodSpec};
use super::metrics::RunMetrics;
use super::record::{EpisodeRecord, RunHeader, StepLog};

/// Random stream ids used by the control loop for one episode seed.
pub mod streams {
    pub const OBSERVE: u64 = 1;
    pub const DETECT: u64 = 2;
    pub const PERCEIVE: u64 = 3;
    pub const POLICY: u64 = 4;
}

/// Whether the episode is part of pre-training or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train { episode: usize },
    Eval,
}

/// State that persists across the episodes of one run: the backbone and
/// the context models.
#[derive(Debug, Clone)]
pub struct Learner {
    pub backbone: Backbone,
    pub transitions: TransitionModel,
    pub adaptation: AdaptationState,
}

impl Learner {
    pub fn new(cfg: &Config, method: &MethodSpec) -> Self {
        let backbone = match method.backbone {
            BackboneKind::Tabular => Backbone::Tabular(QFunction::with_init(cfg.agent.lr, cfg.agent.gamma, cfg.agent.q_init)),
            BackboneKind::Heuristic => Backbone::Heuristic,
        };
        Self {
            backbone,
            transitions: TransitionModel::new(cfg.context.self_prior),
            adaptation: AdaptationState::new(cfg.context.recovery_window, cfg.context.default_cap),
        }
    }

    pub fn q(&self) -> Option<&QFunction> {
        match &self.backbone {
            Backbone::Tabular(q) => Some(q),
            Backbone::Heuristic => None,
        }
    }
}

/// Builds the constraint layer for a method, or `None` when unshielded.
pub fn safety_layer(cfg: &Config, method: &MethodSpec) -> Result<Option<SafetyLayer>, Error> {
    if !method.shield_enabled {
        return Ok(None);
    }
    let table = cfg.threshold_table()?;
    Ok(Some(if method.fixed_constraints {
        SafetyLayer::fixed(table, cfg.phi, cfg.as_, cfg.harness.budget, cfg.env.episode_length)
    } else {
        SafetyLayer::adaptive(table, cfg.phi, cfg.as_, method.constraint_set)
    }))
}

struct Streams {
    observe: ChaCha8Rng,
    detect: ChaCha8Rng,
    perceive: ChaCha8Rng,
    policy: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            observe: stream(seed, streams::OBSERVE),
            detect: stream(seed, streams::DETECT),
            perceive: stream(seed, streams::PERCEIVE),
            policy: stream(seed, streams::POLICY),
        }
    }
}

/// Output of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub metrics: RunMetrics,
    pub steps: Vec<StepLog>,
}

impl EpisodeResult {
    pub fn into_record(self, header: RunHeader) -> EpisodeRecord {
        EpisodeRecord { header: RunHeader { steps: self.steps.len(), ..header }, steps: self.steps }
    }
}

/// Runs one episode of the full control loop. `env` must be freshly reset.
pub fn run_episode(
    cfg: &Config,
    method: &MethodSpec,
    learner: &mut Learner,
    mut env: MergeEnv,
    seed: u64,
    phase: Phase,
) -> Result<EpisodeResult, Error> {
    method.validate()?;
    let layer = safety_layer(cfg, method)?;
    let params = env.params().clone();
    let ctx_cfg = &cfg.context;
    let mut rngs = Streams::new(seed);
    let mut history = InteractionHistory::new(ctx_cfg.history_capacity);
    let mut budget = SafetyBudget::new(cfg.harness.budget);
    let mut tracker: Option<RecoveryTracker> = None;
    let epsilon = match phase {
        Phase::Train { episode } => cfg.agent.epsilon(episode),
        Phase::Eval => cfg.agent.eps_eval,
    };
    let detect_prob = |c: Context| params.noise.detect_prob[c.noise as usize];

    let mut obs = observe(&params, env.state(), &mut rngs.observe);
    let mut detected = detect_context(&history, env.state().true_context, detect_prob(env.state().true_context), &mut rngs.detect);
    let mut steps = Vec::with_capacity(params.episode_length);

    loop {
        let state = env.state().clone();
        let t = state.time_step;
        obs.context_estimate = Some(detected);

        let forecast: ContextForecast = learner.transitions.predict(detected, ctx_cfg.horizon);
        let v_req = required_speed(&forecast, detected, &ctx_cfg.weights);
        let v_cap = learner.adaptation.v_cap();
        let rho = adaptation_ratio(v_req, v_cap, ctx_cfg.epsilon);

        let key = DiscreteObsKey::new(&obs, detected);
        let proposed = match &learner.backbone {
            Backbone::Tabular(q) => select_action(q, &key, epsilon, &mut rngs.policy),
            Backbone::Heuristic => heuristic_policy(&obs),
        };

        let mut decision = None;
        if let Some(layer) = &layer {
            let sensed = perceive(&params, &state, &mut rngs.perceive);
            let inputs = StepInputs {
                current: detected,
                forecast: &forecast,
                budget: &budget,
                remaining_steps: params.episode_length.saturating_sub(t).max(1),
                rho,
            };
            let tau = layer.tau(&inputs);
            let evals: Vec<Option<ConstraintEval>> = Action::ALL
                .iter()
                .map(|&a| Some(layer.evaluate(&params, &sensed, a, &inputs).unwrap_or_else(|_| ConstraintEval::failed(tau))))
                .collect();
            decision = Some(filter(proposed, &evals, &cfg.shield.fallback_order)?);
        }
        let executed = decision.as_ref().map_or(proposed, |d| d.executed);
        let exec_eval = decision.as_ref().map(|d| *d.executed_eval());

        if let (Some(tr), Some(d)) = (tracker.as_mut(), decision.as_ref()) {
            if let Some((shift, took)) = tr.observe(d.admissible_count() > 0, d.intervened) {
                learner.adaptation.update(shift, took, true);
                tracker = None;
            }
        }

        let out = env.step(executed);
        let budget_before = budget;
        budget = charge_budget(&budget, out.cost);

        history.push(HistoryRecord {
            front_gap: obs.front_gap,
            speed: obs.speed,
            action: executed.id() as u8,
            reward: out.reward,
            cost: out.cost,
            context: detected,
            fallback: decision.as_ref().is_some_and(|d| d.intervened),
            violation: out.hard_violation,
        });

        let next_obs = observe(&params, &out.next_state, &mut rngs.observe);
        let next_detected =
            detect_context(&history, out.next_state.true_context, detect_prob(out.next_state.true_context), &mut rngs.detect);

        if let Backbone::Tabular(q) = &mut learner.backbone {
            let next_key = DiscreteObsKey::new(&next_obs, next_detected);
            let r = shaped_reward(out.reward, exec_eval.as_ref(), method.lambda);
            q.update(&key, executed, r, &next_key, out.terminated);
        }

        if next_detected != detected {
            learner.transitions.update(detected, next_detected);
            if layer.is_some() {
                tracker = Some(RecoveryTracker::start(context_discrepancy_weighted(detected, next_detected, &ctx_cfg.weights)));
            }
        }

        steps.push(StepLog {
            t,
            true_context: state.true_context,
            detected_context: detected,
            risk: forecast.risk,
            rho,
            v_cap,
            proposed,
            executed,
            intervened: decision.as_ref().is_some_and(|d| d.intervened),
            infeasible: decision.as_ref().is_some_and(|d| d.infeasible),
            admissible_count: decision.as_ref().map(|d| d.admissible_count()),
            tau: exec_eval.map(|e| e.tau),
            h_executed: exec_eval.map(|e| e.h),
            g_cb: exec_eval.map(|e| e.g_cb),
            g_as: exec_eval.map(|e| e.g_as),
            g_sh: exec_eval.map(|e| e.g_sh),
            expected_cost: exec_eval.map(|e| e.expected_cost),
            budget_remaining: budget_before.remaining,
            cost: out.cost,
            budget_after: budget.remaining,
            reward: out.reward,
            violation: out.hard_violation,
            collision: out.collision,
            clearance: out.clearance_increment,
            front_gap: out.front_gap,
            ttc: out.ttc,
            ego_speed: out.next_state.ego.speed,
            ego_lane: out.next_state.ego.lane,
        });

        if out.terminated {
            break;
        }
        obs = next_obs;
        detected = next_detected;
    }

    if let Some(q) = learner.q() {
        if !q.all_finite() {
            return Err(Error::Config(format!("method {}: non-finite Q-values", method.name)));
        }
    }
    Ok(EpisodeResult { metrics: RunMetrics::from_steps(&steps), steps })
}

/// Convenience: a fresh environment for `(condition, seed)`.
pub fn fresh_env(cfg: &Config, condition: Condition, seed: u64) -> MergeEnv {
    MergeEnv::new(cfg.env.clone(), condition, seed)
}

