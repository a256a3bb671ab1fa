//! A synthetic world in which a text-only prior with object co-occurrence
//! bias leaks into a simulated vision-language scorer.
//!
//! The vocabulary is laid out as `[</s>, fillers.., objects..]`. The prior
//! scores each object by the co-occurrence row of the most recent object in
//! the prefix. The simulated vision-language scorer mixes a "visual" signal
//! (present objects up, absent objects down) with the prior, so absent
//! partners of mentioned objects leak into its descriptions. Descriptions
//! are fixed-length: both scorers exclude the eos token.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{
    generate, Capabilities, DecodeError, DecodingConfig, ScoreContext, Scorer, ScorerError,
};
use crate::dist::{Logit, LogitVector, Vocabulary};
use crate::metrics::{chair, DescriptionRecord};

pub const EOS_TOKEN: &str = "</s>";
/// Logit magnitude of the visual signal.
pub const DEFAULT_VISUAL_LOGIT: f64 = 3.0;
pub const DEFAULT_DESCRIPTION_TOKENS: usize = 30;
/// Co-occurrence entries are clamped to this before taking logs.
pub const COOCCURRENCE_FLOOR: f64 = 1e-12;

const OBJECT_NAMES: &[&str] = &[
    "dog",
    "cat",
    "frisbee",
    "bench",
    "car",
    "bus",
    "person",
    "bicycle",
    "cup",
    "bowl",
    "spoon",
    "banana",
    "pizza",
    "table",
    "chair",
    "clock",
    "vase",
    "book",
    "bottle",
    "sink",
    "oven",
    "toaster",
    "microwave",
    "umbrella",
    "kite",
    "surfboard",
    "boat",
    "horse",
    "sheep",
    "cow",
    "truck",
    "laptop",
];

const FILLER_NAMES: &[&str] = &[
    "the", "a", "and", "with", "near", "is", "on", "there", "of", "in", "next", "to", "some",
    "beside", "under", "two",
];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `scene_seed = mix64(run_seed ^ mix64(scene_index + 0x9e3779b97f4a7c15))`,
/// with wrapping addition.
pub fn scene_seed(run_seed: u64, scene_index: u64) -> u64 {
    mix64(run_seed ^ mix64(scene_index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWorld", into = "RawWorld")]
pub struct WorldSpec {
    objects: Vec<String>,
    fillers: Vec<String>,
    cooccurrence: Vec<Vec<f64>>,
    partners: Vec<usize>,
    bias_strength: f64,
    seed: u64,
    vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorld {
    objects: Vec<String>,
    fillers: Vec<String>,
    cooccurrence: Vec<Vec<f64>>,
    partners: Vec<usize>,
    bias_strength: f64,
    seed: u64,
}

impl From<WorldSpec> for RawWorld {
    fn from(w: WorldSpec) -> Self {
        RawWorld {
            objects: w.objects,
            fillers: w.fillers,
            cooccurrence: w.cooccurrence,
            partners: w.partners,
            bias_strength: w.bias_strength,
            seed: w.seed,
        }
    }
}

impl TryFrom<RawWorld> for WorldSpec {
    type Error = SimError;

    fn try_from(raw: RawWorld) -> Result<Self, SimError> {
        let bad = |m: String| Err(SimError::InvalidWorld(m));
        let n = raw.objects.len();
        if n < 2 {
            return bad(format!("need at least 2 objects, got {n}"));
        }
        if raw.fillers.is_empty() {
            return bad("need at least one filler".into());
        }
        if raw.cooccurrence.len() != n || raw.partners.len() != n {
            return bad("cooccurrence and partners must have one row per object".into());
        }
        for (i, row) in raw.cooccurrence.iter().enumerate() {
            if row.len() != n {
                return bad(format!("cooccurrence row {i} has {} entries", row.len()));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("cooccurrence row {i} has entries outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("cooccurrence row {i} sums to {sum}"));
            }
        }
        if let Some((i, &p)) = raw
            .partners
            .iter()
            .enumerate()
            .find(|&(i, &p)| p >= n || p == i)
        {
            return bad(format!("object {i} has invalid partner {p}"));
        }
        if !(0.0..=1.0).contains(&raw.bias_strength) {
            return bad(format!(
                "bias_strength {} outside [0, 1]",
                raw.bias_strength
            ));
        }
        let fillers: BTreeSet<&String> = raw.fillers.iter().collect();
        if let Some(o) = raw.objects.iter().find(|o| fillers.contains(o)) {
            return bad(format!("{o:?} is both an object and a filler"));
        }
        let tokens: Vec<String> = std::iter::once(EOS_TOKEN.to_owned())
            .chain(raw.fillers.iter().cloned())
            .chain(raw.objects.iter().cloned())
            .collect();
        let vocab =
            Vocabulary::new(tokens, 0).map_err(|e| SimError::InvalidWorld(e.to_string()))?;
        Ok(WorldSpec {
            objects: raw.objects,
            fillers: raw.fillers,
            cooccurrence: raw.cooccurrence,
            partners: raw.partners,
            bias_strength: raw.bias_strength,
            seed: raw.seed,
            vocab,
        })
    }
}

fn name_from_pool(pool: &[&str], i: usize, prefix: &str) -> String {
    pool.get(i)
        .map(|s| (*s).to_owned())
        .unwrap_or_else(|| format!("{prefix}{i}"))
}

/// Builds a deterministic world. Each object gets a random partner; its
/// co-occurrence row is `(1 - bias) * uniform + bias * one_hot(partner)`.
pub fn make_world(
    seed: u64,
    n_objects: usize,
    n_fillers: usize,
    bias_strength: f64,
) -> Result<WorldSpec, SimError> {
    if n_objects < 2 {
        return Err(SimError::InvalidParameter(format!(
            "n_objects must be at least 2, got {n_objects}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partners: Vec<usize> = (0..n_objects)
        .map(|i| {
            let r = (rng.next_u64() % (n_objects as u64 - 1)) as usize;
            if r >= i {
                r + 1
            } else {
                r
            }
        })
        .collect();
    let base = (1.0 - bias_strength) / n_objects as f64;
    let cooccurrence = partners
        .iter()
        .map(|&p| {
            let mut row = vec![base; n_objects];
            row[p] += bias_strength;
            row
        })
        .collect();
    RawWorld {
        objects: (0..n_objects)
            .map(|i| name_from_pool(OBJECT_NAMES, i, "obj"))
            .collect(),
        fillers: (0..n_fillers)
            .map(|i| name_from_pool(FILLER_NAMES, i, "w"))
            .collect(),
        cooccurrence,
        partners,
        bias_strength,
        seed,
    }
    .try_into()
}

impl WorldSpec {
    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn fillers(&self) -> &[String] {
        &self.fillers
    }

    pub fn cooccurrence(&self) -> &[Vec<f64>] {
        &self.cooccurrence
    }

    pub fn partner(&self, object: usize) -> usize {
        self.partners[object]
    }

    pub fn bias_strength(&self) -> f64 {
        self.bias_strength
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn filler_token(&self, filler: usize) -> usize {
        1 + filler
    }

    pub fn object_token(&self, object: usize) -> usize {
        1 + self.fillers.len() + object
    }

    /// Object index for a token id, if that token is an object.
    pub fn object_of(&self, token: usize) -> Option<usize> {
        token
            .checked_sub(1 + self.fillers.len())
            .filter(|&o| o < self.objects.len())
    }

    /// Object indices mentioned in a token stream, in order.
    pub fn extract_objects<'a>(&'a self, tokens: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
        tokens.iter().filter_map(|&t| self.object_of(t))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::InvalidWorld(e.to_string()))
    }
}

/// One "image": the objects truly present plus the description prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub present_objects: BTreeSet<usize>,
    pub prompt: Vec<usize>,
}

impl SceneInstance {
    pub fn new(
        world: &WorldSpec,
        present: impl IntoIterator<Item = usize>,
    ) -> Result<Self, SimError> {
        let present_objects: BTreeSet<usize> = present.into_iter().collect();
        if present_objects.is_empty() {
            return Err(SimError::InvalidScene("no present objects".into()));
        }
        if let Some(o) = present_objects.iter().find(|&&o| o >= world.objects.len()) {
            return Err(SimError::InvalidScene(format!("object {o} not in world")));
        }
        let prompt = (0..world.fillers.len().min(2))
            .map(|f| world.filler_token(f))
            .collect();
        Ok(Self {
            present_objects,
            prompt,
        })
    }
}

/// Draws `n` scenes, each with between `min_present` and `max_present`
/// distinct objects. Scene `i` uses `scene_seed(seed, i)`.
pub fn make_scenes(
    world: &WorldSpec,
    n: usize,
    min_present: usize,
    max_present: usize,
    seed: u64,
) -> Result<Vec<SceneInstance>, SimError> {
    let n_objects = world.objects.len();
    if min_present == 0 || min_present > max_present || max_present > n_objects {
        return Err(SimError::InvalidParameter(format!(
            "present-object range {min_present}..={max_present} invalid for {n_objects} objects"
        )));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, i as u64));
            let span = (max_present - min_present + 1) as u64;
            let k = min_present + (rng.next_u64() % span) as usize;
            // partial Fisher-Yates
            let mut pool: Vec<usize> = (0..n_objects).collect();
            for j in 0..k {
                let r = j + (rng.next_u64() % (n_objects - j) as u64) as usize;
                pool.swap(j, r);
            }
            SceneInstance::new(world, pool[..k].iter().copied())
        })
        .collect()
}

/// Text-only scorer following the co-occurrence row of the latest object.
#[derive(Debug, Clone)]
pub struct PriorScorer {
    world: Arc<WorldSpec>,
    object_offset: f64,
}

/// The language prior for `world`. Objects share total mass `n_fillers`
/// against unit-mass fillers before the row split.
pub fn prior_scorer(world: Arc<WorldSpec>) -> PriorScorer {
    let object_offset = (world.fillers.len() as f64).ln();
    PriorScorer {
        world,
        object_offset,
    }
}

impl PriorScorer {
    pub fn world(&self) -> &WorldSpec {
        &self.world
    }

    fn logit_values(&self, prefix: impl Iterator<Item = usize>) -> Vec<f64> {
        let w = &*self.world;
        let last_object = prefix.filter_map(|t| w.object_of(t)).last();
        let n = w.objects.len();
        let mut out = vec![0.0; w.vocab.size()];
        out[0] = f64::NEG_INFINITY;
        for o in 0..n {
            let p = match last_object {
                Some(ctx) => w.cooccurrence[ctx][o],
                None => 1.0 / n as f64,
            };
            out[w.object_token(o)] = self.object_offset + p.max(COOCCURRENCE_FLOOR).ln();
        }
        out
    }
}

fn to_logits(values: &[f64]) -> LogitVector {
    LogitVector::from_logits(
        values
            .iter()
            .map(|&v| {
                if v == f64::NEG_INFINITY {
                    Logit::Excluded
                } else {
                    Logit::Value(v)
                }
            })
            .collect(),
    )
}

impl Scorer for PriorScorer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.world.vocab
    }

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<LogitVector, ScorerError> {
        Ok(to_logits(&self.logit_values(ctx.prefix())))
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent_safe: true,
            grounding: false,
        }
    }
}

/// Simulated vision-language scorer: `(1 - lambda) * visual + lambda * prior`.
/// Without grounding it reduces to the prior alone.
#[derive(Debug, Clone)]
pub struct LvlmSimScorer {
    prior: PriorScorer,
    scene: SceneInstance,
    lambda: f64,
    visual_logit: f64,
}

pub fn lvlm_sim_scorer(
    world: Arc<WorldSpec>,
    scene: SceneInstance,
    lambda: f64,
) -> Result<LvlmSimScorer, SimError> {
    lvlm_sim_scorer_with(world, scene, lambda, DEFAULT_VISUAL_LOGIT)
}

pub fn lvlm_sim_scorer_with(
    world: Arc<WorldSpec>,
    scene: SceneInstance,
    lambda: f64,
    visual_logit: f64,
) -> Result<LvlmSimScorer, SimError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SimError::InvalidParameter(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    if !visual_logit.is_finite() {
        return Err(SimError::InvalidParameter(
            "visual_logit must be finite".into(),
        ));
    }
    Ok(LvlmSimScorer {
        prior: prior_scorer(world),
        scene,
        lambda,
        visual_logit,
    })
}

impl LvlmSimScorer {
    pub fn scene(&self) -> &SceneInstance {
        &self.scene
    }
}

impl Scorer for LvlmSimScorer {
    fn vocabulary(&self) -> &Vocabulary {
        self.prior.vocabulary()
    }

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<LogitVector, ScorerError> {
        let mut values = self.prior.logit_values(ctx.prefix());
        if !ctx.include_grounding || self.lambda == 1.0 {
            return Ok(to_logits(&values));
        }
        let w = self.prior.world();
        for (t, v) in values.iter_mut().enumerate().skip(1) {
            let visual = match w.object_of(t) {
                Some(o) if self.scene.present_objects.contains(&o) => self.visual_logit,
                Some(_) => -self.visual_logit,
                None => 0.0,
            };
            *v = (1.0 - self.lambda) * visual + self.lambda * *v;
        }
        Ok(to_logits(&values))
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent_safe: true,
            grounding: true,
        }
    }
}

/// Knobs of a bias experiment beyond the decoding configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub lambda: f64,
    pub visual_logit: f64,
    pub description_tokens: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            visual_logit: DEFAULT_VISUAL_LOGIT,
            description_tokens: DEFAULT_DESCRIPTION_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub hallucination_rate: f64,
    pub chairs: f64,
    pub chairi: f64,
    pub n_generations: usize,
    pub object_mentions: usize,
    pub hallucinated_mentions: usize,
    pub lambda: f64,
    pub bias_strength: f64,
    pub config: DecodingConfig,
}

/// A labelled decoding configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentArm {
    pub label: String,
    pub config: DecodingConfig,
}

impl From<DecodingConfig> for ExperimentArm {
    fn from(config: DecodingConfig) -> Self {
        Self {
            label: config.method.label().to_owned(),
            config,
        }
    }
}

/// Generates one description per scene for each arm and scores it.
///
/// Scene `i` of an arm is decoded with seed `scene_seed(config.seed, i)` and
/// `max_new_tokens = params.description_tokens`. Scenes run in parallel;
/// results are aggregated in scene order.
pub fn run_bias_experiment(
    world: &Arc<WorldSpec>,
    scenes: &[SceneInstance],
    arms: &[ExperimentArm],
    params: &SimParams,
) -> Result<Vec<ExperimentReport>, SimError> {
    if scenes.is_empty() {
        return Err(SimError::InvalidParameter("need at least one scene".into()));
    }
    if params.description_tokens == 0 {
        return Err(SimError::InvalidParameter(
            "description_tokens must be positive".into(),
        ));
    }
    let prior = prior_scorer(world.clone());
    let experts: Vec<LvlmSimScorer> = scenes
        .iter()
        .map(|s| lvlm_sim_scorer_with(world.clone(), s.clone(), params.lambda, params.visual_logit))
        .collect::<Result<_, _>>()?;

    arms.iter()
        .map(|arm| {
            let outcomes: Vec<Vec<usize>> = experts
                .par_iter()
                .enumerate()
                .map(|(i, expert)| {
                    let config = DecodingConfig {
                        seed: scene_seed(arm.config.seed, i as u64),
                        max_new_tokens: params.description_tokens,
                        trace: false,
                        ..arm.config.clone()
                    };
                    generate(expert, Some(&prior), &expert.scene.prompt, &config).map(|r| r.tokens)
                })
                .collect::<Result<_, _>>()?;
            Ok(summarize(world, scenes, &outcomes, arm, params))
        })
        .collect()
}

fn summarize(
    world: &WorldSpec,
    scenes: &[SceneInstance],
    outcomes: &[Vec<usize>],
    arm: &ExperimentArm,
    params: &SimParams,
) -> ExperimentReport {
    let mut mentions = 0usize;
    let mut hallucinated = 0usize;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, (scene, tokens)) in scenes.iter().zip(outcomes).enumerate() {
        let mut mentioned = BTreeSet::new();
        for o in world.extract_objects(tokens) {
            mentions += 1;
            if !scene.present_objects.contains(&o) {
                hallucinated += 1;
            }
            mentioned.insert(world.objects[o].clone());
        }
        records.push(DescriptionRecord {
            item_id: i.to_string(),
            mentioned_objects: mentioned,
            ground_truth_objects: scene
                .present_objects
                .iter()
                .map(|&o| world.objects[o].clone())
                .collect(),
            candidate: None,
            reference: None,
        });
    }
    let scores = chair(&records).expect("at least one scene");
    ExperimentReport {
        method: arm.label.clone(),
        hallucination_rate: if mentions == 0 {
            0.0
        } else {
            hallucinated as f64 / mentions as f64
        },
        chairs: scores.chairs,
        chairi: scores.chairi,
        n_generations: scenes.len(),
        object_mentions: mentions,
        hallucinated_mentions: hallucinated,
        lambda: params.lambda,
        bias_strength: world.bias_strength,
        config: arm.config.clone(),
    }
}
