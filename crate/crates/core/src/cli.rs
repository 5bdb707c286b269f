//! Command-line surface. The `dyncfg` binary only forwards to [`run`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, PolicySpec, RunConfig};
use crate::diffusion::Condition;
use crate::error::{Error, Result};
use crate::evaluators::diagnostics::{class_accuracy, discriminator_auc, pairwise_accuracy, regression_mse};
use crate::evaluators::train::{
    capability_dataset, capability_oracle, oracle_preference_pairs, train_alignment, train_capability,
    train_discriminator, train_reward,
};
use crate::evaluators::{Evaluator, EvaluatorKind};
use crate::guidance::{chain_rng, run_guided_chain, GuidancePolicy, ScheduleTrace, Testbed};
use crate::harness::{
    aggregate_schedules, alignment_diff_ci, filter_experiment, frechet_diff_ci, metrics_row, op_count_report, run_policy,
    Cells, MetricsReport, PolicyRun, Reference,
};
use crate::output::{read_manifest, sha256_file, verify_run, RunDir, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "dyncfg", version, about = "Dynamic classifier-free guidance workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every learned evaluator in the config.
    TrainEvals(RunArgs),
    /// Sample with one policy.
    Sample(RunArgs),
    /// Run a dynamic policy and keep its schedule traces.
    Search(RunArgs),
    /// Best-of-N filtering against the unfiltered baseline.
    Filter(RunArgs),
    /// Every configured policy on shared seeds.
    Compare(RunArgs),
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Recompute output checksums against the manifest.
        #[arg(long)]
        verify: bool,
    },
    /// Aggregate schedule traces into mean, median and smoothed series.
    Schedules {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    svg: bool,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            1
        }
    }
}

fn report_error(e: &Error) {
    match e {
        Error::Config(errs) => {
            for m in errs {
                eprintln!("error[config]: {m}");
            }
        }
        other => eprintln!("error[{}]: {other}", other.code()),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainEvals(a) => with_run("train-evals", &a, train_evals),
        Command::Sample(a) => with_run("sample", &a, sample),
        Command::Search(a) => with_run("search", &a, search),
        Command::Filter(a) => with_run("filter", &a, filter),
        Command::Compare(a) => with_run("compare", &a, compare),
        Command::Report { run, verify } => report(&run, verify),
        Command::Schedules {
            traces,
            out,
            svg,
            force,
        } => schedules(&traces, &out, svg, force),
    }
}

/// Everything a run command needs.
pub struct Session {
    pub cfg: RunConfig,
    /// Directory of the config file; artifact paths resolve against it.
    pub base: PathBuf,
    pub bed: Testbed,
    pub svg: bool,
}

impl Session {
    pub fn new(cfg: RunConfig, base: PathBuf) -> Result<Self> {
        let bed = cfg.testbed()?;
        Ok(Self {
            cfg,
            base,
            bed,
            svg: false,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = parse_config(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(cfg, base)
    }

    /// Cell `i` targets `classes[i mod len]`.
    pub fn cells(&self) -> Cells {
        let classes = self.cfg.classes();
        Cells {
            master_seed: self.cfg.seed,
            conds: (0..self.cfg.experiment.seeds)
                .map(|i| Condition::Class(classes[i % classes.len()]))
                .collect(),
        }
    }

    pub fn reference(&self) -> Result<Reference> {
        Reference::draw(&self.bed.world, self.cfg.experiment.reference_draws, self.cfg.seed ^ 0x00c0_ffee)
    }

    pub fn build_policy(&self, name: &str) -> Result<GuidancePolicy> {
        self.cfg.build_policy(name, &self.bed, &self.base, &|_| None)
    }

    /// Runs `names` on the session cells. Replayed schedules run their
    /// source first; the source is only returned if it was asked for.
    pub fn run_policies(&self, names: &[String]) -> Result<Vec<PolicyRun>> {
        let cells = self.cells();
        let mut cache: BTreeMap<String, PolicyRun> = BTreeMap::new();
        for name in names {
            self.run_into(name, &cells, &mut cache)?;
        }
        Ok(names.iter().map(|n| cache[n].clone()).collect())
    }

    fn run_into(&self, name: &str, cells: &Cells, cache: &mut BTreeMap<String, PolicyRun>) -> Result<()> {
        if cache.contains_key(name) {
            return Ok(());
        }
        let spec = self.cfg.policy(name)?.spec.clone();
        let derived = match spec.source() {
            Some(src) => {
                self.run_into(src, cells, cache)?;
                let traces: Vec<_> = cache[src].traces.iter().map(ScheduleTrace::scales).collect();
                let set = self.cfg.candidate_set()?;
                let agg = aggregate_schedules(&traces, (set.min(), set.max()), self.bed.steps())?;
                Some(match spec {
                    PolicySpec::MeanOfDynamic { .. } => agg.mean_lookup(),
                    _ => agg.median_lookup(),
                })
            }
            None => None,
        };
        let policy = self.cfg.build_policy(name, &self.bed, &self.base, &|_| derived.clone())?;
        let run = run_policy(&self.bed, name, &policy, cells)?;
        cache.insert(name.to_string(), run);
        Ok(())
    }

    fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.cfg
            .evaluators
            .iter()
            .filter_map(|e| {
                let path = self.base.join(e.artifact.as_ref()?);
                Some((e.name.clone(), sha256_file(&path).ok()?))
            })
            .collect()
    }
}

fn with_run(command: &str, args: &RunArgs, body: fn(&Session, &mut RunDir) -> Result<()>) -> Result<()> {
    let mut session = Session::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        session.cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        session.cfg.out = Some(out.clone());
    }
    session.svg = args.svg;
    let out = session
        .cfg
        .out
        .clone()
        .ok_or_else(|| Error::Contract("no output directory: pass --out or set `out`".into()))?;
    let manifest = RunManifest::new(command, &session.cfg.to_text(), &session.cfg.hash(), session.cfg.seed);
    let mut dir = RunDir::create(&out, args.force, manifest)?;
    dir.manifest_mut().evaluator_artifacts = session.artifact_hashes();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(session.cfg.workers)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| body(&session, &mut dir))?;
    let manifest = dir.finish()?;
    println!("{command}: wrote {} files to {}", manifest.outputs.len(), out.display());
    Ok(())
}

fn header(cols: &str) -> String {
    format!("# schema_version=1\n{cols}\n")
}

pub fn samples_csv(samples: &[Vec<f64>], conds: &[Condition]) -> String {
    let d = samples.first().map(Vec::len).unwrap_or(0);
    let cols: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let mut out = header(&format!("cell,class,{}", cols.join(",")));
    for (i, (x, c)) in samples.iter().zip(conds).enumerate() {
        let xs: Vec<String> = x.iter().map(f64::to_string).collect();
        out.push_str(&format!("{i},{},{}\n", c.class().map_or("null".into(), |c| c.to_string()), xs.join(",")));
    }
    out
}

fn train_evals(s: &Session, dir: &mut RunDir) -> Result<()> {
    let (world, sched) = (&*s.bed.world, &*s.bed.schedule);
    let steps = sched.steps();
    let mut summary = header("evaluator,kind,steps,final_loss,diagnostic,value");
    for (i, ec) in s.cfg.evaluators.iter().enumerate() {
        if ec.kind.is_oracle() {
            continue;
        }
        let mut hyper = ec.hyper();
        if ec.train.seed.is_none() {
            hyper.seed = s.cfg.seed.wrapping_add(i as u64);
        }
        let mut rng = chain_rng(s.cfg.seed, (1 << 40) + i as u64);
        let (ev, diag, value) = match ec.kind {
            EvaluatorKind::AlignmentLearned => {
                let ev = train_alignment(world, sched, &hyper)?;
                let acc = class_accuracy(&ev, world, sched, steps / 10, 2000, hyper.seed ^ 1)?;
                (ev, "accuracy_at_t_tenth", acc)
            }
            EvaluatorKind::RewardLearned => {
                let pairs = oracle_preference_pairs(world, ec.data, &mut rng)?;
                let held = oracle_preference_pairs(world, 1000, &mut rng)?;
                let ev = train_reward(&pairs, sched, &hyper)?;
                (ev.clone(), "pairwise_accuracy_at_t0", pairwise_accuracy(&ev, &held, sched, 0, hyper.seed ^ 1)?)
            }
            EvaluatorKind::CapabilityLearned => {
                let data = capability_dataset(world, ec.data, capability_oracle, &mut rng)?;
                let held = capability_dataset(world, 1000, capability_oracle, &mut rng)?;
                let ev = train_capability(&data, sched, &hyper)?;
                let (mse, var) = regression_mse(&ev, &held, sched, steps / 10, hyper.seed ^ 1)?;
                (ev, "mse_over_variance_at_t_tenth", mse / var)
            }
            EvaluatorKind::DiscriminatorLearned => {
                let (real, generated) = discriminator_data(s, ec.data, ec.gen_scale, &mut rng)?;
                let ev = train_discriminator(&real, &generated, sched, &hyper)?;
                let (hr, hg) = discriminator_data(s, 500, ec.gen_scale, &mut rng)?;
                (ev.clone(), "auc_at_t0", discriminator_auc(&ev, &hr, &hg, sched, 0, hyper.seed ^ 1)?)
            }
            _ => unreachable!("oracles are skipped"),
        };
        let meta = &ev.learned_scorer().expect("learned").meta;
        summary.push_str(&format!(
            "{},{},{},{},{diag},{value}\n",
            ec.name, ec.kind, meta.steps_trained, meta.final_loss
        ));
        let file = format!("{}.eval", ec.name);
        let bytes = ev.to_artifact_bytes()?;
        dir.write(&file, &bytes)?;
        dir.manifest_mut()
            .evaluator_artifacts
            .insert(ec.name.clone(), crate::output::sha256_hex(&bytes));
    }
    dir.write("train_summary.csv", summary.as_bytes())
}

type Points = Vec<Vec<f64>>;

/// Clean draws against guided samples, `n` of each.
fn discriminator_data(
    s: &Session,
    n: usize,
    scale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Points, Points)> {
    use rand::Rng;
    let world = &s.bed.world;
    let real = (0..n).map(|_| world.sample_data(Condition::Null, rng)).collect::<Result<Vec<_>>>()?;
    let policy = GuidancePolicy::Fixed(scale);
    let stream: u64 = rng.random();
    let generated = (0..n)
        .map(|i| {
            let cond = Condition::Class(world.sample_class(rng));
            run_guided_chain(&s.bed, &policy, cond, chain_rng(stream, i as u64)).map(|r| r.sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((real, generated))
}

fn chosen_policy(s: &Session, want_dynamic: bool) -> Result<String> {
    if let Some(p) = &s.cfg.experiment.policy {
        return Ok(p.clone());
    }
    s.cfg
        .policies
        .iter()
        .find(|p| !want_dynamic || matches!(p.spec, PolicySpec::Dynamic { .. }))
        .map(|p| p.name.clone())
        .ok_or_else(|| {
            Error::Contract(if want_dynamic {
                "no dynamic policy configured".into()
            } else {
                "no policy configured".into()
            })
        })
}

fn metrics_csv(s: &Session, runs: &[PolicyRun]) -> Result<MetricsReport> {
    let cells = s.cells();
    let reference = s.reference()?;
    let rows = runs
        .iter()
        .map(|r| metrics_row(r, &cells, &s.bed.world, &reference))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { rows })
}

fn sample(s: &Session, dir: &mut RunDir) -> Result<()> {
    let name = chosen_policy(s, false)?;
    let runs = s.run_policies(std::slice::from_ref(&name))?;
    let cells = s.cells();
    dir.write("samples.csv", samples_csv(&runs[0].samples, &cells.conds).as_bytes())?;
    dir.write("metrics.csv", metrics_csv(s, &runs)?.to_csv().as_bytes())
}

fn search(s: &Session, dir: &mut RunDir) -> Result<()> {
    let name = chosen_policy(s, true)?;
    if !matches!(s.cfg.policy(&name)?.spec, PolicySpec::Dynamic { .. }) {
        return Err(Error::Contract(format!("search needs a dynamic policy, `{name}` is not")));
    }
    let runs = s.run_policies(std::slice::from_ref(&name))?;
    let run = &runs[0];
    let cells = s.cells();
    dir.write("samples.csv", samples_csv(&run.samples, &cells.conds).as_bytes())?;
    for (i, tr) in run.traces.iter().enumerate() {
        dir.write(&format!("traces/cell_{i:05}.csv"), tr.to_csv().as_bytes())?;
    }
    let set = s.cfg.candidate_set()?;
    let scales: Vec<_> = run.traces.iter().map(ScheduleTrace::scales).collect();
    let agg = aggregate_schedules(&scales, (set.min(), set.max()), s.bed.steps())?;
    dir.write("schedule.csv", agg.to_csv().as_bytes())?;
    if s.svg {
        dir.write("schedule.svg", agg.to_svg().as_bytes())?;
    }
    dir.write("metrics.csv", metrics_csv(s, &runs)?.to_csv().as_bytes())
}

fn filter(s: &Session, dir: &mut RunDir) -> Result<()> {
    let spec = s
        .cfg
        .filter
        .as_ref()
        .ok_or_else(|| Error::Contract("config has no [filter] section".into()))?;
    let policy = s.build_policy(&spec.policy)?;
    let filters = spec
        .evaluators
        .iter()
        .map(|name| Ok((name.clone(), s.cfg.load_evaluator(name, &s.bed, &s.base)?.evaluator)))
        .collect::<Result<Vec<_>>>()?;
    let report = filter_experiment(
        &s.bed,
        &policy,
        &s.cells(),
        &s.reference()?,
        spec.batch,
        spec.keep,
        spec.fraction,
        &filters,
    )?;
    dir.write("filter.csv", report.to_csv().as_bytes())
}

fn compare(s: &Session, dir: &mut RunDir) -> Result<()> {
    let names: Vec<String> = s.cfg.policies.iter().map(|p| p.name.clone()).collect();
    if names.is_empty() {
        return Err(Error::Contract("no policies configured".into()));
    }
    let runs = s.run_policies(&names)?;
    let report = metrics_csv(s, &runs)?;
    dir.write("table2_analog.csv", report.to_csv().as_bytes())?;

    let mut ops = header("policy,denoiser_ops,evaluator_ops,sampler_ops,total,evaluator_overhead_percent");
    for r in &runs {
        let rep = op_count_report(&r.counter);
        ops.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name, r.counter.denoiser_ops, r.counter.evaluator_ops, r.counter.sampler_ops, rep.total, rep.evaluator_overhead
        ));
    }
    dir.write("op_counts.csv", ops.as_bytes())?;

    let cells = s.cells();
    let reference = s.reference()?;
    let base = &runs[0];
    let mut paired = header("policy,baseline,d_alignment_lo,d_alignment_hi,d_fd_lo,d_fd_hi");
    for r in &runs[1..] {
        let (alo, ahi) = alignment_diff_ci(r, base, &cells, &s.bed.world)?;
        let (flo, fhi) = frechet_diff_ci(r, base, &cells, &reference)?;
        paired.push_str(&format!("{},{},{alo},{ahi},{flo},{fhi}\n", r.name, base.name));
    }
    dir.write("paired_vs_first.csv", paired.as_bytes())
}

fn report(run: &Path, verify: bool) -> Result<()> {
    let manifest = if verify { verify_run(run)? } else { read_manifest(run)? };
    println!(
        "run {} ({}), seed {}, config {}, tool {}",
        run.display(),
        manifest.command,
        manifest.master_seed,
        &manifest.config_hash[..12.min(manifest.config_hash.len())],
        manifest.tool_version
    );
    for (name, hash) in &manifest.evaluator_artifacts {
        println!("evaluator {name}: {}", &hash[..12.min(hash.len())]);
    }
    for rel in manifest.outputs.keys() {
        if rel.ends_with(".csv") && !rel.starts_with("traces/") {
            let path = run.join(rel);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            println!("\n== {rel}");
            for line in text.lines().filter(|l| !l.starts_with('#')) {
                println!("{line}");
            }
        }
    }
    if verify {
        println!("\nverified {} outputs", manifest.outputs.len());
    }
    Ok(())
}

fn schedules(traces: &Path, out: &Path, svg: bool, force: bool) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(traces)
        .map_err(|e| Error::io(traces, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Contract(format!("no trace CSVs in {}", traces.display())));
    }
    let mut series = Vec::with_capacity(files.len());
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        for col in text.lines().find(|l| !l.starts_with('#')).unwrap_or("").split(',') {
            if let Some(v) = col.strip_prefix("cand_").and_then(|v| v.parse::<f64>().ok()) {
                range = (range.0.min(v), range.1.max(v));
            }
        }
        series.push(ScheduleTrace::parse_scales(&text)?);
    }
    if range.0 > range.1 {
        for (_, v) in series.iter().flatten() {
            range = (range.0.min(*v), range.1.max(*v));
        }
    }
    let steps = series[0].iter().map(|p| p.0).max().unwrap_or(1);
    let agg = aggregate_schedules(&series, range, steps)?;
    if out.exists() && !force {
        return Err(Error::OutputExists(out.to_path_buf()));
    }
    crate::output::write_atomic(out, agg.to_csv().as_bytes())?;
    if svg {
        crate::output::write_atomic(&out.with_extension("svg"), agg.to_svg().as_bytes())?;
    }
    println!("schedules: aggregated {} traces into {}", files.len(), out.display());
    Ok(())
}

/// Learned evaluators are only usable once trained; this loads one for
/// callers that hold a path rather than a config.
pub fn load_artifact(path: &Path) -> Result<Evaluator> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Evaluator::from_artifact_bytes(&bytes)
}
