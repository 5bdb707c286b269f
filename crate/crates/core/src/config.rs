//! Run configuration: a flat TOML subset with one level of named sections.
//!
//! ```toml
//! seed = 42
//!
//! [world]
//! preset = "default"
//!
//! [schedule]
//! family = "cosine"
//! steps = 200
//! sampler = "ddpm"
//!
//! [policy.default]
//! kind = "fixed"
//! scale = 7.5
//! ```
//!
//! Parsing reports every problem it finds, each prefixed with its line.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml_edit::{ImDocument, Item, Table, Value};

use crate::diffusion::{NoiseSchedule, Sampler, ScheduleFamily};
use crate::error::{Error, Result};
use crate::evaluators::train::{LossWeighting, TrainHyper};
use crate::evaluators::{Evaluator, EvaluatorKind};
use crate::guidance::{AnnealShape, DynamicPolicy, GuidanceCandidateSet, GuidancePolicy, NamedEvaluator, Testbed, Weighting};
use crate::world::{ClassSpec, MixtureWorld, WorldSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum WorldConfig {
    Preset(String),
    Inline(WorldSpec),
}

impl WorldConfig {
    pub fn spec(&self) -> Result<WorldSpec> {
        match self {
            WorldConfig::Preset(name) => {
                WorldSpec::preset(name).ok_or_else(|| Error::InvalidWorld(format!("unknown preset `{name}`")))
            }
            WorldConfig::Inline(spec) => Ok(spec.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub family: ScheduleFamily,
    pub steps: usize,
    pub sampler: Sampler,
}

/// Training overrides; unset fields keep the per-kind defaults.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOverrides {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub hidden: Option<Vec<usize>>,
    pub temperature: Option<f64>,
    pub loss_weighting: Option<LossWeighting>,
    pub sharpness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorConfig {
    pub name: String,
    pub kind: EvaluatorKind,
    /// Parameter file for learned kinds, relative to the config file.
    pub artifact: Option<PathBuf>,
    pub train: TrainOverrides,
    /// Training examples: pairs, regression samples or samples per side.
    pub data: usize,
    /// Guidance scale of the generated side of discriminator training.
    pub gen_scale: f64,
}

impl EvaluatorConfig {
    pub fn hyper(&self) -> TrainHyper {
        let mut h = TrainHyper::default_for(self.kind);
        let o = &self.train;
        macro_rules! apply {
            ($($f:ident),*) => {$( if let Some(v) = o.$f.clone() { h.$f = v; } )*};
        }
        apply!(steps, batch_size, learning_rate, momentum, clip_norm, seed, hidden, temperature, loss_weighting, sharpness);
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Fixed {
        scale: f64,
    },
    Interval {
        scale: f64,
        t_lo: Option<usize>,
        t_hi: Option<usize>,
        outside: f64,
    },
    Annealing {
        start: f64,
        end: f64,
        shape: AnnealShape,
    },
    Lookup {
        table: Vec<f64>,
    },
    Dynamic {
        evaluators: Vec<String>,
        /// `None` is adaptive weighting.
        weights: Option<Vec<f64>>,
    },
    MeanOfDynamic {
        source: String,
    },
    MedianOfDynamic {
        source: String,
    },
}

impl PolicySpec {
    fn kind(&self) -> &'static str {
        match self {
            PolicySpec::Fixed { .. } => "fixed",
            PolicySpec::Interval { .. } => "interval",
            PolicySpec::Annealing { .. } => "annealing",
            PolicySpec::Lookup { .. } => "lookup",
            PolicySpec::Dynamic { .. } => "dynamic",
            PolicySpec::MeanOfDynamic { .. } => "mean-of-dynamic",
            PolicySpec::MedianOfDynamic { .. } => "median-of-dynamic",
        }
    }

    /// Name of the dynamic policy whose traces this one replays.
    pub fn source(&self) -> Option<&str> {
        match self {
            PolicySpec::MeanOfDynamic { source } | PolicySpec::MedianOfDynamic { source } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub name: String,
    pub spec: PolicySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: usize,
    /// Target classes, assigned to cells round robin. Empty means every class.
    pub classes: Vec<usize>,
    pub reference_draws: usize,
    /// Policy used by `sample` and `search`.
    pub policy: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: 500,
            classes: vec![],
            reference_draws: 5000,
            policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub batch: usize,
    pub keep: usize,
    pub fraction: f64,
    pub evaluators: Vec<String>,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub candidates: Vec<f64>,
    pub anchor: f64,
    pub evaluators: Vec<EvaluatorConfig>,
    pub policies: Vec<PolicyConfig>,
    pub experiment: ExperimentConfig,
    pub filter: Option<FilterSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out: None,
            world: WorldConfig::Preset("default".into()),
            schedule: ScheduleConfig {
                family: ScheduleFamily::Cosine,
                steps: 200,
                sampler: Sampler::Ddpm,
            },
            candidates: GuidanceCandidateSet::default().scales().to_vec(),
            anchor: crate::guidance::DEFAULT_SCALE,
            evaluators: vec![],
            policies: vec![],
            experiment: ExperimentConfig::default(),
            filter: None,
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    errors: Vec<String>,
}

impl<'a> Parser<'a> {
    fn line(&self, span: Option<Range<usize>>) -> usize {
        span.map(|r| self.src[..r.start.min(self.src.len())].matches('\n').count() + 1)
            .unwrap_or(0)
    }

    fn err(&mut self, span: Option<Range<usize>>, msg: impl Into<String>) {
        let line = self.line(span);
        self.errors.push(format!("line {line}: {}", msg.into()));
    }
}

/// A table together with its dotted name, for error messages.
struct Section<'t> {
    name: String,
    table: &'t Table,
}

impl<'t> Section<'t> {
    fn key_span(&self, key: &str) -> Option<Range<usize>> {
        self.table
            .key(key)
            .and_then(|k| k.span())
            .or_else(|| self.table.get(key).and_then(Item::span))
            .or_else(|| self.table.span())
    }

    fn path(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn check_keys(&self, p: &mut Parser, allowed: &[&str]) {
        for (k, _) in self.table.iter() {
            if !allowed.contains(&k) {
                p.err(self.key_span(k), format!("unknown key `{}`", self.path(k)));
            }
        }
    }

    fn value(&self, key: &str) -> Option<&'t Value> {
        self.table.get(key).and_then(Item::as_value)
    }

    fn mismatch(&self, p: &mut Parser, key: &str, want: &str) {
        p.err(self.key_span(key), format!("`{}` must be {want}", self.path(key)));
    }

    fn string(&self, p: &mut Parser, key: &str) -> Option<String> {
        let item = self.table.get(key)?;
        match item.as_str() {
            Some(s) => Some(s.to_string()),
            None => {
                self.mismatch(p, key, "a string");
                None
            }
        }
    }

    fn parsed<T: std::str::FromStr>(&self, p: &mut Parser, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let s = self.string(p, key)?;
        match s.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                p.err(self.key_span(key), format!("`{}`: {e}", self.path(key)));
                None
            }
        }
    }

    fn float(&self, p: &mut Parser, key: &str) -> Option<f64> {
        self.table.get(key)?;
        match self.value(key).and_then(as_f64) {
            Some(v) => Some(v),
            None => {
                self.mismatch(p, key, "a number");
                None
            }
        }
    }

    fn uint(&self, p: &mut Parser, key: &str) -> Option<u64> {
        self.table.get(key)?;
        match self.value(key).and_then(Value::as_integer) {
            Some(v) if v >= 0 => Some(v as u64),
            _ => {
                self.mismatch(p, key, "a non-negative integer");
                None
            }
        }
    }

    fn usize(&self, p: &mut Parser, key: &str) -> Option<usize> {
        self.uint(p, key).map(|v| v as usize)
    }

    fn floats(&self, p: &mut Parser, key: &str) -> Option<Vec<f64>> {
        self.table.get(key)?;
        match self.value(key).and_then(float_list) {
            Some(v) => Some(v),
            None => {
                self.mismatch(p, key, "a list of numbers");
                None
            }
        }
    }

    fn uints(&self, p: &mut Parser, key: &str) -> Option<Vec<usize>> {
        self.table.get(key)?;
        let list = self.value(key).and_then(Value::as_array).and_then(|a| {
            a.iter()
                .map(|v| v.as_integer().filter(|i| *i >= 0).map(|i| i as usize))
                .collect::<Option<Vec<_>>>()
        });
        if list.is_none() {
            self.mismatch(p, key, "a list of non-negative integers");
        }
        list
    }

    fn strings(&self, p: &mut Parser, key: &str) -> Option<Vec<String>> {
        self.table.get(key)?;
        let list = self.value(key).and_then(Value::as_array).and_then(|a| {
            a.iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
        });
        if list.is_none() {
            self.mismatch(p, key, "a list of strings");
        }
        list
    }

    fn nested(&self, p: &mut Parser, key: &str, depth: usize) -> Option<Nested> {
        self.table.get(key)?;
        let v = self.value(key).and_then(|v| nested(v, depth));
        if v.is_none() {
            self.mismatch(p, key, &format!("a list nested {depth} deep"));
        }
        v
    }
}

#[derive(Debug)]
enum Nested {
    Leaf(Vec<f64>),
    List(Vec<Nested>),
}

fn nested(v: &Value, depth: usize) -> Option<Nested> {
    if depth == 1 {
        return float_list(v).map(Nested::Leaf);
    }
    v.as_array()?
        .iter()
        .map(|x| nested(x, depth - 1))
        .collect::<Option<Vec<_>>>()
        .map(Nested::List)
}

impl Nested {
    fn into_list(self) -> Vec<Nested> {
        match self {
            Nested::List(v) => v,
            Nested::Leaf(v) => v.into_iter().map(|x| Nested::Leaf(vec![x])).collect(),
        }
    }

    fn into_leaf(self) -> Vec<f64> {
        match self {
            Nested::Leaf(v) => v,
            Nested::List(_) => vec![],
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn float_list(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(as_f64).collect()
}

const TOP_KEYS: &[&str] = &[
    "seed", "workers", "out", "world", "schedule", "guidance", "experiment", "filter", "evaluator", "policy",
];

/// Parses and validates a configuration; every error is returned at once.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let doc = ImDocument::parse(text.to_string()).map_err(|e| {
        let line = e
            .span()
            .map(|r| text[..r.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::Config(vec![format!("line {line}: {}", e.message())])
    })?;
    let mut p = Parser {
        src: text,
        errors: Vec::new(),
    };
    let root = Section {
        name: String::new(),
        table: doc.as_table(),
    };
    root.check_keys(&mut p, TOP_KEYS);
    let mut cfg = RunConfig::default();
    if let Some(v) = root.uint(&mut p, "seed") {
        cfg.seed = v;
    }
    if let Some(v) = root.usize(&mut p, "workers") {
        cfg.workers = v;
    }
    cfg.out = root.string(&mut p, "out").map(PathBuf::from);

    let sub = |p: &mut Parser, name: &str| -> Option<Section> {
        let item = doc.as_table().get(name)?;
        match item.as_table() {
            Some(table) => Some(Section {
                name: name.to_string(),
                table,
            }),
            None => {
                p.err(root.key_span(name), format!("`{name}` must be a section"));
                None
            }
        }
    };

    if let Some(s) = sub(&mut p, "world") {
        cfg.world = parse_world(&mut p, &s);
    }
    if let Some(s) = sub(&mut p, "schedule") {
        s.check_keys(&mut p, &["family", "steps", "sampler"]);
        if let Some(v) = s.parsed(&mut p, "family") {
            cfg.schedule.family = v;
        }
        if let Some(v) = s.usize(&mut p, "steps") {
            if v < 2 {
                p.err(s.key_span("steps"), "`schedule.steps` must be at least 2");
            }
            cfg.schedule.steps = v;
        }
        if let Some(v) = s.parsed(&mut p, "sampler") {
            cfg.schedule.sampler = v;
        }
    }
    if let Some(s) = sub(&mut p, "guidance") {
        s.check_keys(&mut p, &["candidates", "anchor"]);
        if let Some(v) = s.floats(&mut p, "candidates") {
            if let Err(e) = GuidanceCandidateSet::new(v.clone()) {
                p.err(s.key_span("candidates"), format!("`guidance.candidates`: {e}"));
            }
            cfg.candidates = v;
        }
        if let Some(v) = s.float(&mut p, "anchor") {
            cfg.anchor = v;
        }
    }
    let mut experiment_section = None;
    if let Some(s) = sub(&mut p, "experiment") {
        s.check_keys(&mut p, &["seeds", "classes", "reference_draws", "policy"]);
        if let Some(v) = s.usize(&mut p, "seeds") {
            if v == 0 {
                p.err(s.key_span("seeds"), "`experiment.seeds` must be positive");
            }
            cfg.experiment.seeds = v;
        }
        if let Some(v) = s.uints(&mut p, "classes") {
            cfg.experiment.classes = v;
        }
        if let Some(v) = s.usize(&mut p, "reference_draws") {
            cfg.experiment.reference_draws = v;
        }
        cfg.experiment.policy = s.string(&mut p, "policy");
        experiment_section = Some(s);
    }

    let mut evaluator_spans = Vec::new();
    if let Some(s) = sub(&mut p, "evaluator") {
        for (name, item) in s.table.iter() {
            let Some(table) = item.as_table() else {
                p.err(s.key_span(name), format!("`evaluator.{name}` must be a section"));
                continue;
            };
            let sec = Section {
                name: format!("evaluator.{name}"),
                table,
            };
            if let Some(ev) = parse_evaluator(&mut p, &sec, name) {
                evaluator_spans.push(table.span());
                cfg.evaluators.push(ev);
            }
        }
    }
    let mut policy_sections = Vec::new();
    if let Some(s) = sub(&mut p, "policy") {
        for (name, item) in s.table.iter() {
            let Some(table) = item.as_table() else {
                p.err(s.key_span(name), format!("`policy.{name}` must be a section"));
                continue;
            };
            let sec = Section {
                name: format!("policy.{name}"),
                table,
            };
            if let Some(spec) = parse_policy(&mut p, &sec) {
                cfg.policies.push(PolicyConfig {
                    name: name.to_string(),
                    spec,
                });
                policy_sections.push(sec);
            }
        }
    }
    let mut filter_section = None;
    if let Some(s) = sub(&mut p, "filter") {
        s.check_keys(&mut p, &["batch", "keep", "fraction", "evaluators", "policy"]);
        let batch = s.usize(&mut p, "batch").unwrap_or(4);
        let keep = s.usize(&mut p, "keep").unwrap_or(1);
        let fraction = s.float(&mut p, "fraction").unwrap_or(0.25);
        if keep > batch {
            p.err(
                s.key_span("keep"),
                format!("`filter.keep` ({keep}) exceeds `filter.batch` ({batch})"),
            );
        } else if keep == 0 {
            p.err(s.key_span("keep"), "`filter.keep` must be positive");
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            p.err(s.key_span("fraction"), "`filter.fraction` must lie in (0, 1]");
        }
        let evaluators = s.strings(&mut p, "evaluators").unwrap_or_default();
        if evaluators.is_empty() {
            p.err(s.key_span("evaluators"), "`filter.evaluators` must name at least one evaluator");
        }
        let policy = s.string(&mut p, "policy").unwrap_or_default();
        cfg.filter = Some(FilterSpec {
            batch,
            keep,
            fraction,
            evaluators,
            policy,
        });
        filter_section = Some(s);
    }

    cross_check(&mut p, &cfg, &policy_sections, experiment_section.as_ref(), filter_section.as_ref());
    if p.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(p.errors))
    }
}

fn parse_world(p: &mut Parser, s: &Section) -> WorldConfig {
    s.check_keys(p, &["preset", "priors", "weights", "means", "covariances"]);
    if let Some(name) = s.string(p, "preset") {
        if s.table.len() > 1 {
            p.err(s.key_span("preset"), "`world.preset` excludes inline world keys");
        }
        if WorldSpec::preset(&name).is_none() {
            p.err(s.key_span("preset"), format!("unknown world preset `{name}`"));
        }
        return WorldConfig::Preset(name);
    }
    let priors = s.floats(p, "priors");
    let weights = s.nested(p, "weights", 2);
    let means = s.nested(p, "means", 3);
    let covs = s.nested(p, "covariances", 3);
    let (Some(priors), Some(weights), Some(means), Some(covs)) = (priors, weights, means, covs) else {
        p.err(s.table.span(), "inline `world` needs priors, weights, means and covariances");
        return WorldConfig::Preset("default".into());
    };
    let classes: Vec<ClassSpec> = weights
        .into_list()
        .into_iter()
        .zip(means.into_list())
        .zip(covs.into_list())
        .map(|((w, m), c)| ClassSpec {
            weights: w.into_leaf(),
            means: m.into_list().into_iter().map(Nested::into_leaf).collect(),
            covariances: c.into_list().into_iter().map(Nested::into_leaf).collect(),
        })
        .collect();
    let dim = classes
        .first()
        .and_then(|c| c.means.first())
        .map(Vec::len)
        .unwrap_or(0);
    let spec = WorldSpec { dim, priors, classes };
    if let Err(e) = MixtureWorld::new(spec.clone()) {
        p.err(s.table.span(), format!("`world`: {e}"));
    }
    WorldConfig::Inline(spec)
}

fn parse_evaluator(p: &mut Parser, s: &Section, name: &str) -> Option<EvaluatorConfig> {
    s.check_keys(
        p,
        &[
            "kind", "artifact", "data", "gen_scale", "steps", "batch_size", "learning_rate", "momentum", "clip_norm",
            "seed", "hidden", "temperature", "loss_weighting", "sharpness",
        ],
    );
    let kind: Option<EvaluatorKind> = s.parsed(p, "kind");
    if s.table.get("kind").is_none() {
        p.err(s.table.span(), format!("`evaluator.{name}` needs a kind"));
    }
    let artifact = s.string(p, "artifact").map(PathBuf::from);
    let train = TrainOverrides {
        steps: s.usize(p, "steps"),
        batch_size: s.usize(p, "batch_size"),
        learning_rate: s.float(p, "learning_rate"),
        momentum: s.float(p, "momentum"),
        clip_norm: s.float(p, "clip_norm"),
        seed: s.uint(p, "seed"),
        hidden: s.uints(p, "hidden"),
        temperature: s.float(p, "temperature"),
        loss_weighting: s.parsed(p, "loss_weighting"),
        sharpness: s.float(p, "sharpness"),
    };
    let data = s.usize(p, "data").unwrap_or(5000);
    let gen_scale = s.float(p, "gen_scale").unwrap_or(crate::guidance::DEFAULT_SCALE);
    let kind = kind?;
    if kind.is_oracle() && (artifact.is_some() || train != TrainOverrides::default()) {
        p.err(s.table.span(), format!("`evaluator.{name}` is an oracle and takes no training keys"));
    }
    Some(EvaluatorConfig {
        name: name.to_string(),
        kind,
        artifact,
        train,
        data,
        gen_scale,
    })
}

fn parse_policy(p: &mut Parser, s: &Section) -> Option<PolicySpec> {
    let kind = s.string(p, "kind");
    let Some(kind) = kind else {
        p.err(s.table.span(), format!("`{}` needs a kind", s.name));
        return None;
    };
    let keys: &[&str] = match kind.as_str() {
        "fixed" => &["kind", "scale"],
        "interval" => &["kind", "scale", "t_lo", "t_hi", "outside"],
        "annealing" => &["kind", "start", "end", "shape"],
        "lookup" => &["kind", "table"],
        "dynamic" => &["kind", "evaluators", "weighting", "weights"],
        "mean-of-dynamic" | "median-of-dynamic" => &["kind", "source"],
        other => {
            p.err(s.key_span("kind"), format!("`{}.kind`: unknown policy kind `{other}`", s.name));
            return None;
        }
    };
    s.check_keys(p, keys);
    let spec = match kind.as_str() {
        "fixed" => PolicySpec::Fixed {
            scale: s.float(p, "scale").unwrap_or(crate::guidance::DEFAULT_SCALE),
        },
        "interval" => PolicySpec::Interval {
            scale: s.float(p, "scale").unwrap_or(11.0),
            t_lo: s.usize(p, "t_lo"),
            t_hi: s.usize(p, "t_hi"),
            outside: s.float(p, "outside").unwrap_or(1.0),
        },
        "annealing" => {
            let shape = match s.string(p, "shape").as_deref() {
                None | Some("linear") => AnnealShape::Linear,
                Some("cosine") => AnnealShape::Cosine,
                Some(other) => {
                    p.err(s.key_span("shape"), format!("unknown annealing shape `{other}`"));
                    AnnealShape::Linear
                }
            };
            PolicySpec::Annealing {
                start: s.float(p, "start").unwrap_or(15.0),
                end: s.float(p, "end").unwrap_or(1.0),
                shape,
            }
        }
        "lookup" => PolicySpec::Lookup {
            table: s.floats(p, "table").unwrap_or_default(),
        },
        "dynamic" => {
            let evaluators = s.strings(p, "evaluators").unwrap_or_default();
            if evaluators.is_empty() {
                p.err(s.key_span("evaluators"), format!("`{}.evaluators` must not be empty", s.name));
            }
            let weights = match s.string(p, "weighting").as_deref() {
                None | Some("adaptive") => {
                    if s.table.contains_key("weights") {
                        p.err(s.key_span("weights"), "`weights` needs `weighting = \"linear\"`");
                    }
                    None
                }
                Some("linear") => {
                    let w = s
                        .floats(p, "weights")
                        .unwrap_or_else(|| vec![1.0 / evaluators.len().max(1) as f64; evaluators.len()]);
                    if w.len() != evaluators.len() {
                        p.err(
                            s.key_span("weights"),
                            format!("`{}.weights` has {} entries for {} evaluators", s.name, w.len(), evaluators.len()),
                        );
                    }
                    Some(w)
                }
                Some(other) => {
                    p.err(s.key_span("weighting"), format!("unknown weighting `{other}`"));
                    None
                }
            };
            PolicySpec::Dynamic { evaluators, weights }
        }
        "mean-of-dynamic" => PolicySpec::MeanOfDynamic {
            source: s.string(p, "source").unwrap_or_default(),
        },
        _ => PolicySpec::MedianOfDynamic {
            source: s.string(p, "source").unwrap_or_default(),
        },
    };
    Some(spec)
}

fn cross_check(
    p: &mut Parser,
    cfg: &RunConfig,
    policies: &[Section],
    experiment: Option<&Section>,
    filter: Option<&Section>,
) {
    let classes = cfg.world.spec().map(|w| w.classes.len()).unwrap_or(0);
    let steps = cfg.schedule.steps;
    let evaluator_names: BTreeSet<&str> = cfg.evaluators.iter().map(|e| e.name.as_str()).collect();
    for (pc, sec) in cfg.policies.iter().zip(policies) {
        match &pc.spec {
            PolicySpec::Dynamic { evaluators, .. } => {
                for e in evaluators {
                    if !evaluator_names.contains(e.as_str()) {
                        p.err(sec.key_span("evaluators"), format!("`{}` names unknown evaluator `{e}`", sec.name));
                    }
                }
            }
            PolicySpec::Lookup { table } if table.len() != steps => p.err(
                sec.key_span("table"),
                format!("`{}.table` has {} entries for {steps} steps", sec.name, table.len()),
            ),
            PolicySpec::Interval { t_lo, t_hi, .. } => {
                let (lo, hi) = (t_lo.unwrap_or(steps / 4), t_hi.unwrap_or(3 * steps / 4));
                if !(lo < hi && hi <= steps) {
                    p.err(
                        sec.key_span("t_lo"),
                        format!("`{}`: need t_lo < t_hi <= {steps}, got {lo} and {hi}", sec.name),
                    );
                }
            }
            PolicySpec::MeanOfDynamic { source } | PolicySpec::MedianOfDynamic { source } => {
                let ok = cfg
                    .policies
                    .iter()
                    .any(|q| &q.name == source && matches!(q.spec, PolicySpec::Dynamic { .. }));
                if !ok {
                    p.err(sec.key_span("source"), format!("`{}.source` must name a dynamic policy", sec.name));
                }
            }
            _ => {}
        }
    }
    let has_policy = |name: &str| cfg.policies.iter().any(|q| q.name == name);
    if let (Some(name), Some(sec)) = (&cfg.experiment.policy, experiment) {
        if !has_policy(name) {
            p.err(sec.key_span("policy"), format!("`experiment.policy` names unknown policy `{name}`"));
        }
    }
    if let Some(sec) = experiment {
        for c in &cfg.experiment.classes {
            if *c >= classes {
                p.err(sec.key_span("classes"), format!("class {c} is outside a {classes}-class world"));
            }
        }
    }
    if let (Some(f), Some(sec)) = (&cfg.filter, filter) {
        for e in &f.evaluators {
            if !evaluator_names.contains(e.as_str()) {
                p.err(sec.key_span("evaluators"), format!("`filter.evaluators` names unknown evaluator `{e}`"));
            }
        }
        if !has_policy(&f.policy) {
            p.err(sec.key_span("policy"), format!("`filter.policy` names unknown policy `{}`", f.policy));
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    format!("[{}]", v.iter().map(f).collect::<Vec<_>>().join(", "))
}

fn quote(s: &str) -> String {
    format!("{}", Value::from(s))
}

impl RunConfig {
    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        o.push_str(&format!("seed = {}\nworkers = {}\n", self.seed, self.workers));
        if let Some(out) = &self.out {
            o.push_str(&format!("out = {}\n", quote(&out.to_string_lossy())));
        }
        o.push_str("\n[world]\n");
        match &self.world {
            WorldConfig::Preset(name) => o.push_str(&format!("preset = {}\n", quote(name))),
            WorldConfig::Inline(w) => {
                o.push_str(&format!("priors = {}\n", fmt_list(&w.priors, |v| fmt_f64(*v))));
                let per_class = |f: &dyn Fn(&ClassSpec) -> String| fmt_list(&w.classes, |c| f(c));
                o.push_str(&format!("weights = {}\n", per_class(&|c| fmt_list(&c.weights, |v| fmt_f64(*v)))));
                o.push_str(&format!(
                    "means = {}\n",
                    per_class(&|c| fmt_list(&c.means, |m| fmt_list(m, |v| fmt_f64(*v))))
                ));
                o.push_str(&format!(
                    "covariances = {}\n",
                    per_class(&|c| fmt_list(&c.covariances, |m| fmt_list(m, |v| fmt_f64(*v))))
                ));
            }
        }
        o.push_str(&format!(
            "\n[schedule]\nfamily = {}\nsteps = {}\nsampler = {}\n",
            quote(&self.schedule.family.to_string()),
            self.schedule.steps,
            quote(&self.schedule.sampler.to_string())
        ));
        o.push_str(&format!(
            "\n[guidance]\ncandidates = {}\nanchor = {}\n",
            fmt_list(&self.candidates, |v| fmt_f64(*v)),
            fmt_f64(self.anchor)
        ));
        let e = &self.experiment;
        o.push_str(&format!(
            "\n[experiment]\nseeds = {}\nclasses = {}\nreference_draws = {}\n",
            e.seeds,
            fmt_list(&e.classes, |c| c.to_string()),
            e.reference_draws
        ));
        if let Some(p) = &e.policy {
            o.push_str(&format!("policy = {}\n", quote(p)));
        }
        if let Some(f) = &self.filter {
            o.push_str(&format!(
                "\n[filter]\nbatch = {}\nkeep = {}\nfraction = {}\nevaluators = {}\npolicy = {}\n",
                f.batch,
                f.keep,
                fmt_f64(f.fraction),
                fmt_list(&f.evaluators, |s| quote(s)),
                quote(&f.policy)
            ));
        }
        for ev in &self.evaluators {
            o.push_str(&format!("\n[evaluator.{}]\nkind = {}\n", ev.name, quote(ev.kind.as_str())));
            if let Some(a) = &ev.artifact {
                o.push_str(&format!("artifact = {}\n", quote(&a.to_string_lossy())));
            }
            if !ev.kind.is_oracle() {
                o.push_str(&format!("data = {}\ngen_scale = {}\n", ev.data, fmt_f64(ev.gen_scale)));
                let t = &ev.train;
                let mut kv = |k: &str, v: Option<String>| {
                    if let Some(v) = v {
                        o.push_str(&format!("{k} = {v}\n"));
                    }
                };
                kv("steps", t.steps.map(|v| v.to_string()));
                kv("batch_size", t.batch_size.map(|v| v.to_string()));
                kv("learning_rate", t.learning_rate.map(fmt_f64));
                kv("momentum", t.momentum.map(fmt_f64));
                kv("clip_norm", t.clip_norm.map(fmt_f64));
                kv("seed", t.seed.map(|v| v.to_string()));
                kv("hidden", t.hidden.as_ref().map(|h| fmt_list(h, |v| v.to_string())));
                kv("temperature", t.temperature.map(fmt_f64));
                kv("loss_weighting", t.loss_weighting.map(|w| quote(&w.to_string())));
                kv("sharpness", t.sharpness.map(fmt_f64));
            }
        }
        for pc in &self.policies {
            o.push_str(&format!("\n[policy.{}]\nkind = {}\n", pc.name, quote(pc.spec.kind())));
            match &pc.spec {
                PolicySpec::Fixed { scale } => o.push_str(&format!("scale = {}\n", fmt_f64(*scale))),
                PolicySpec::Interval {
                    scale,
                    t_lo,
                    t_hi,
                    outside,
                } => {
                    o.push_str(&format!("scale = {}\noutside = {}\n", fmt_f64(*scale), fmt_f64(*outside)));
                    if let Some(v) = t_lo {
                        o.push_str(&format!("t_lo = {v}\n"));
                    }
                    if let Some(v) = t_hi {
                        o.push_str(&format!("t_hi = {v}\n"));
                    }
                }
                PolicySpec::Annealing { start, end, shape } => o.push_str(&format!(
                    "start = {}\nend = {}\nshape = {}\n",
                    fmt_f64(*start),
                    fmt_f64(*end),
                    quote(match shape {
                        AnnealShape::Linear => "linear",
                        AnnealShape::Cosine => "cosine",
                    })
                )),
                PolicySpec::Lookup { table } => {
                    o.push_str(&format!("table = {}\n", fmt_list(table, |v| fmt_f64(*v))))
                }
                PolicySpec::Dynamic { evaluators, weights } => {
                    o.push_str(&format!("evaluators = {}\n", fmt_list(evaluators, |s| quote(s))));
                    match weights {
                        None => o.push_str("weighting = \"adaptive\"\n"),
                        Some(w) => o.push_str(&format!(
                            "weighting = \"linear\"\nweights = {}\n",
                            fmt_list(w, |v| fmt_f64(*v))
                        )),
                    }
                }
                PolicySpec::MeanOfDynamic { source } | PolicySpec::MedianOfDynamic { source } => {
                    o.push_str(&format!("source = {}\n", quote(source)))
                }
            }
        }
        o
    }

    /// SHA-256 of the canonical text form, as hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn testbed(&self) -> Result<Testbed> {
        let world = MixtureWorld::new(self.world.spec()?)?;
        let sched = NoiseSchedule::new(self.schedule.family, self.schedule.steps)?;
        Ok(Testbed::new(world, sched, self.schedule.sampler))
    }

    pub fn candidate_set(&self) -> Result<GuidanceCandidateSet> {
        GuidanceCandidateSet::new(self.candidates.clone())
    }

    pub fn classes(&self) -> Vec<usize> {
        if self.experiment.classes.is_empty() {
            let n = self.world.spec().map(|w| w.classes.len()).unwrap_or(1);
            (0..n).collect()
        } else {
            self.experiment.classes.clone()
        }
    }

    pub fn policy(&self, name: &str) -> Result<&PolicyConfig> {
        self.policies
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Contract(format!("no policy named `{name}`")))
    }

    pub fn evaluator_config(&self, name: &str) -> Result<&EvaluatorConfig> {
        self.evaluators
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Contract(format!("no evaluator named `{name}`")))
    }

    /// Oracle, or learned parameters read from the artifact path resolved
    /// against `base`.
    pub fn load_evaluator(&self, name: &str, bed: &Testbed, base: &Path) -> Result<NamedEvaluator> {
        let ec = self.evaluator_config(name)?;
        let evaluator = match ec.kind {
            EvaluatorKind::AlignmentOracle => bed.alignment_oracle(),
            EvaluatorKind::QualityOracle => bed.quality_oracle(),
            _ => {
                let rel = ec
                    .artifact
                    .as_ref()
                    .ok_or_else(|| Error::Artifact(format!("evaluator `{name}` has no artifact path")))?;
                let path = base.join(rel);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let ev = Evaluator::from_artifact_bytes(&bytes)?;
                if ev.kind() != ec.kind {
                    return Err(Error::Artifact(format!(
                        "{} holds a {} evaluator, config says {}",
                        path.display(),
                        ev.kind(),
                        ec.kind
                    )));
                }
                ev
            }
        };
        Ok(NamedEvaluator::new(name, evaluator))
    }

    /// Builds a policy. Lookups derived from dynamic traces come from
    /// `derived`, keyed by policy name.
    pub fn build_policy(
        &self,
        name: &str,
        bed: &Testbed,
        base: &Path,
        derived: &dyn Fn(&str) -> Option<GuidancePolicy>,
    ) -> Result<GuidancePolicy> {
        let pc = self.policy(name)?;
        let steps = bed.steps();
        let policy = match &pc.spec {
            PolicySpec::Fixed { scale } => GuidancePolicy::Fixed(*scale),
            PolicySpec::Interval {
                scale,
                t_lo,
                t_hi,
                outside,
            } => GuidancePolicy::Interval {
                scale: *scale,
                t_lo: t_lo.unwrap_or(steps / 4),
                t_hi: t_hi.unwrap_or(3 * steps / 4),
                outside: *outside,
            },
            PolicySpec::Annealing { start, end, shape } => GuidancePolicy::Annealing {
                start: *start,
                end: *end,
                shape: *shape,
            },
            PolicySpec::Lookup { table } => GuidancePolicy::StaticLookup(table.clone()),
            PolicySpec::Dynamic { evaluators, weights } => {
                let evs = evaluators
                    .iter()
                    .map(|e| self.load_evaluator(e, bed, base))
                    .collect::<Result<Vec<_>>>()?;
                let weighting = match weights {
                    None => Weighting::Adaptive,
                    Some(w) => Weighting::Linear(w.clone()),
                };
                let mut d = DynamicPolicy::new(self.candidate_set()?, evs, weighting)?;
                d.anchor = self.anchor;
                GuidancePolicy::Dynamic(d)
            }
            PolicySpec::MeanOfDynamic { .. } | PolicySpec::MedianOfDynamic { .. } => derived(name)
                .ok_or_else(|| Error::Contract(format!("policy `{name}` needs the traces of its source first")))?,
        };
        policy.validate(steps)?;
        Ok(policy)
    }
}
