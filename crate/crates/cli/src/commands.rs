use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use resadapt::adapternet::{self, domain_predictor_config, DomainHead};
use resadapt::data::{
    contact_sheet, generate_domain, write_dataset, write_png, DomainManifest, NormStats, Split, SplitFile,
};
use resadapt::decathlon::{
    baselines_from_reference, decathlon_score, domain_labelled, evaluate_oracle, evaluate_predicted, published_vectors,
    BaselineTable, EvalResult, TestSet,
};
use resadapt::trainer::{train_domain, train_joint, DomainData, OptimSpec, Protocol, TrainError, TrainReport};
use resadapt::{AdapterNet, DomainId};
use serde::{Deserialize, Serialize};

use crate::config::{parse_error, ExperimentConfig, Layout};
use crate::{
    CliError, Command, EvalArgs, GenArgs, ModeArg, PredictArgs, ScoreArgs, SplitArg, TrainArgs,
};

type Net = AdapterNet<f32>;

/// Images per class on a domain's contact sheet.
const SHEET_PER_CLASS: usize = 4;

/// Published rows must be reproduced within this many points.
pub const PUBLISHED_TOLERANCE: f64 = 3.0;

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Score(a) => score(&a),
        Command::PredictDomainTrain(a) => predict_domain_train(&a),
    }
}

fn runtime(context: impl Display) -> impl FnOnce(Box<dyn std::error::Error>) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn rt<E: std::error::Error + 'static>(context: impl Display) -> impl FnOnce(E) -> CliError {
    let f = runtime(context);
    move |e| f(Box::new(e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(rt(format!("cannot create {}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(rt(format!("cannot write {}", path.display())))
}

fn to_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn gen(args: &GenArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let layout = Layout::new(cfg.experiment_dir());
    if !args.force {
        if let Some(d) = cfg.domains.iter().find(|d| layout.domain_dir(&d.name).exists()) {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to overwrite",
                layout.domain_dir(&d.name).display()
            )));
        }
    }
    layout.create()?;
    write_file(&layout.root.join("config.json"), cfg.canonical())?;
    for spec in &cfg.domains {
        let dir = layout.domain_dir(&spec.name);
        let splits = generate_domain(spec).map_err(rt(format!("generating {}", spec.name)))?;
        let stats = NormStats::compute(&splits[0]).map_err(rt(format!("statistics of {}", spec.name)))?;
        let mut files = Vec::new();
        for (split, ds) in Split::ALL.into_iter().zip(&splits) {
            let path = PathBuf::from(format!("{}.mdld", split.as_str()));
            std::fs::create_dir_all(&dir).map_err(rt(format!("cannot create {}", dir.display())))?;
            write_dataset(ds, dir.join(&path)).map_err(rt(format!("writing {}", dir.join(&path).display())))?;
            files.push(SplitFile { split, path, count: ds.len() });
        }
        let manifest = DomainManifest {
            name: spec.name.clone(),
            classes: spec.classes,
            channels: spec.channels,
            height: spec.image_size,
            width: spec.image_size,
            stats: Some(stats),
            decay: spec.decay,
            files,
            generator: Some(spec.clone()),
        };
        manifest.save(&layout.manifest(&spec.name)).map_err(rt("writing manifest"))?;
        let sheet = contact_sheet(spec, SHEET_PER_CLASS).map_err(rt("contact sheet"))?;
        write_png(&dir.join("contact-sheet.png"), &sheet).map_err(rt("contact sheet"))?;
        println!(
            "{}: {} classes, train {} val {} test {}",
            spec.name,
            spec.classes,
            splits[0].len(),
            splits[1].len(),
            splits[2].len()
        );
    }
    Ok(())
}

/// Reads a generated domain back from disk.
pub fn load_domain(layout: &Layout, name: &str) -> Result<DomainData, CliError> {
    let path = layout.manifest(name);
    if !path.exists() {
        return Err(CliError::Config(format!("no dataset for domain {name} at {}; run gen first", path.display())));
    }
    let manifest = DomainManifest::load(&path).map_err(rt(format!("reading {}", path.display())))?;
    let dir = layout.domain_dir(name);
    let read = |s| manifest.read_split(&dir, s).map_err(rt(format!("reading {name}")));
    let (train, val, test) = (read(Split::Train)?, read(Split::Val)?, read(Split::Test)?);
    match manifest.stats {
        Some(stats) => Ok(DomainData::with_stats(train, val, test, stats)),
        None => DomainData::new(train, val, test).map_err(rt(format!("statistics of {name}"))),
    }
}

fn load_net(path: &Path) -> Result<Net, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    adapternet::load(path).map_err(rt(format!("loading {}", path.display())))
}

fn domain_id(net: &Net, name: &str) -> Option<DomainId> {
    net.config().domain_index(name)
}

fn selected_domains(cfg: &ExperimentConfig, requested: &[String]) -> Result<Vec<String>, CliError> {
    if requested.is_empty() {
        return Ok(cfg.domains.iter().map(|d| d.name.clone()).collect());
    }
    let mut seen = BTreeSet::new();
    for name in requested {
        cfg.domain(name)?;
        if !seen.insert(name) {
            return Err(CliError::Usage(format!("domain {name} listed twice")));
        }
    }
    Ok(requested.to_vec())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Divergent(m) => CliError::Runtime(format!("training diverged: {m}")),
        other => CliError::Runtime(format!("training failed: {other}")),
    }
}

fn report_text(header: serde_json::Value, report: &TrainReport) -> String {
    header.to_string() + "\n" + &report.to_records()
}

fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let protocol: Protocol = match args.protocol.as_deref() {
        Some(p) => p.parse().map_err(|e: TrainError| CliError::Usage(e.to_string()))?,
        None => cfg.protocol.ok_or_else(|| CliError::Usage("no --protocol given and none configured".into()))?,
    };
    let domains = selected_domains(&cfg, &args.domains)?;
    let joint = protocol == Protocol::JointRoundRobin;
    if !joint && domains.len() != 1 {
        return Err(CliError::Usage(format!("{} trains one domain; pass exactly one --domain", protocol.as_str())));
    }
    if protocol.needs_source() && args.from.is_none() {
        return Err(CliError::Usage(format!("{} needs a source checkpoint (--from)", protocol.as_str())));
    }
    if protocol == Protocol::Scratch && args.from.is_some() {
        return Err(CliError::Usage("scratch training takes no --from checkpoint".into()));
    }

    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    cfg.seeds = vec![seed];
    cfg.protocol = Some(protocol);
    if let Some(epochs) = args.epochs {
        cfg.optim.epochs = epochs;
    }
    if let Some(decay) = args.decay {
        cfg.domains.iter_mut().filter(|d| domains.contains(&d.name)).for_each(|d| d.decay = Some(decay));
    }
    cfg.validate()?;

    let heads: Vec<DomainHead> = domains
        .iter()
        .map(|n| cfg.domain(n).map(|d| DomainHead { name: d.name.clone(), classes: d.classes }))
        .collect::<Result<_, _>>()?;
    let mut net = match &args.from {
        Some(path) => load_net(path)?,
        None => Net::build(cfg.network.build(heads.clone(), seed)?).map_err(rt("building network"))?,
    };
    let mut ids = Vec::new();
    for head in heads {
        let id = match domain_id(&net, &head.name) {
            Some(id) => {
                let have = net.domain(id).map_err(rt("checkpoint"))?.classes;
                if have != head.classes {
                    return Err(CliError::Config(format!(
                        "checkpoint head {} has {have} classes, config says {}",
                        head.name, head.classes
                    )));
                }
                id
            }
            None => {
                net = net.add_domain(head.clone(), Some(0)).map_err(rt("adding domain"))?;
                net.num_domains() - 1
            }
        };
        ids.push(id);
    }
    let mut optim: OptimSpec = cfg.optim.clone();
    for (id, name) in ids.iter().zip(&domains) {
        if let Some(decay) = cfg.domain(name)?.decay {
            optim.per_domain_decay.insert(*id, decay);
        }
    }

    let layout = Layout::new(cfg.experiment_dir());
    let name = args.name.clone().unwrap_or_else(|| format!("{}-{}-s{seed}", protocol.as_str(), domains.join("+")));
    let ckpt_path = layout.checkpoints().join(format!("{name}.ckpt"));
    if let Some(from) = &args.from {
        if from.canonicalize().ok() == ckpt_path.canonicalize().ok() {
            return Err(CliError::Usage(format!("refusing to overwrite the source checkpoint {}", from.display())));
        }
    }
    let data: Vec<DomainData> = domains.iter().map(|n| load_domain(&layout, n)).collect::<Result<_, _>>()?;

    let start = Instant::now();
    let report = if joint {
        let refs: Vec<&DomainData> = data.iter().collect();
        train_joint(&mut net, &ids, &refs, &optim, cfg.final_pass_epochs, seed)
    } else {
        train_domain(&mut net, ids[0], &data[0], &optim, protocol, seed)
    }
    .map_err(train_error)?;

    layout.create()?;
    adapternet::save(&net, &ckpt_path).map_err(rt(format!("writing {}", ckpt_path.display())))?;
    let header = serde_json::json!({
        "record": "run",
        "config_hash": cfg.hash(),
        "seed": seed,
        "protocol": protocol,
        "domains": domains,
        "from": args.from.as_deref().map(file_label),
        "checkpoint": file_label(&ckpt_path),
    });
    write_file(&layout.reports().join(format!("{name}.jsonl")), report_text(header, &report))?;
    write_file(&layout.reports().join(format!("{name}.config.json")), cfg.canonical())?;
    for (d, (v, t)) in domains.iter().zip(report.val_accuracy.iter().zip(&report.test_accuracy)) {
        println!("{d}: val {v:.4} test {t:.4}");
    }
    println!(
        "{} trainable of {} parameters; best epoch {}; {:.1}s; wrote {}",
        report.census.trainable(),
        report.census.model_total,
        report.best_epoch,
        start.elapsed().as_secs_f64(),
        ckpt_path.display()
    );
    Ok(())
}

/// Sidecar of a domain predictor checkpoint: class order and input statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorMeta {
    pub domains: Vec<String>,
    pub stats: NormStats,
}

pub fn predictor_meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("norm.json")
}

/// On-disk results: an [`EvalResult`] plus where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(flatten)]
    pub result: EvalResult,
}

fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let domains = selected_domains(&cfg, &args.domains)?;
    if args.mode == ModeArg::Predicted && args.predictor.is_none() {
        return Err(CliError::Usage("--mode predicted needs --predictor <checkpoint>".into()));
    }
    let net = load_net(&args.checkpoint)?;
    let missing: Vec<&str> = domains.iter().filter(|n| domain_id(&net, n).is_none()).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "checkpoint {} has no heads for: {}",
            args.checkpoint.display(),
            missing.join(", ")
        )));
    }
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let layout = Layout::new(cfg.experiment_dir());
    let mut order = domains.clone();
    let predictor = match &args.predictor {
        Some(path) if args.mode == ModeArg::Predicted => {
            let p = load_net(path)?;
            let meta_path = predictor_meta_path(path);
            let text = std::fs::read_to_string(&meta_path).map_err(rt(format!("reading {}", meta_path.display())))?;
            let meta: PredictorMeta = serde_json::from_str(&text).map_err(|e| parse_error(&meta_path, &e))?;
            let want: BTreeSet<&String> = domains.iter().collect();
            if meta.domains.iter().collect::<BTreeSet<_>>() != want {
                return Err(CliError::Config(format!(
                    "predictor distinguishes [{}] but evaluation covers [{}]",
                    meta.domains.join(", "),
                    domains.join(", ")
                )));
            }
            order = meta.domains.clone();
            Some((p, meta.stats))
        }
        _ => None,
    };
    let data: Vec<DomainData> = order.iter().map(|n| load_domain(&layout, n)).collect::<Result<_, _>>()?;
    let sets: Vec<TestSet> = order
        .iter()
        .zip(&data)
        .map(|(n, d)| TestSet {
            domain: domain_id(&net, n).expect("checked above"),
            data: match split {
                Split::Train => &d.train,
                Split::Val => &d.val,
                Split::Test => &d.test,
            },
            stats: &d.stats,
        })
        .collect();
    let result = match &predictor {
        Some((p, stats)) => evaluate_predicted(&net, &sets, p, stats),
        None => evaluate_oracle(&net, &sets),
    }
    .map_err(rt("evaluation"))?;
    let mode = match args.mode {
        ModeArg::Oracle => "oracle",
        ModeArg::Predicted => "predicted",
    };
    let stem = args.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = args.name.clone().unwrap_or_else(|| format!("{stem}-{mode}-{}", split.as_str()));
    let path = layout.results().join(format!("{name}.json"));
    let file = ResultsFile {
        config_hash: Some(cfg.hash()),
        checkpoint: Some(file_label(&args.checkpoint)),
        split: Some(split),
        result,
    };
    write_file(&path, to_json(&file))?;
    for (d, r) in &file.result.domains {
        println!("{d}: accuracy {:.4} error {:.4} ({} images)", r.accuracy, r.error, r.count);
    }
    if let Some(a) = file.result.domain_accuracy {
        println!("domain prediction accuracy {a:.4}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, &e))
}

fn score_dir(args: &ScoreArgs, results: &Path) -> PathBuf {
    if let Some(dir) = &args.output {
        return dir.clone();
    }
    let parent = results.parent().unwrap_or(Path::new(""));
    match parent.file_name() {
        Some(n) if n == "results" => parent.parent().unwrap_or(Path::new("")).join("scores"),
        _ => parent.join("scores"),
    }
}

#[derive(Debug, Serialize)]
struct PublishedCheck {
    domain: &'static str,
    method: &'static str,
    computed: f64,
    published: f64,
    pass: bool,
}

fn score_published(args: &ScoreArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    println!("{:<9} {:<16} {:>9} {:>9}  check", "domain", "method", "computed", "published");
    for v in published_vectors() {
        let computed = v.score().map_err(rt("scoring"))?;
        let pass = (computed - v.published_score).abs() <= PUBLISHED_TOLERANCE;
        println!(
            "{:<9} {:<16} {:>9.2} {:>9.0}  {}",
            v.domain,
            v.method,
            computed,
            v.published_score,
            if pass { "ok" } else { "MISMATCH" }
        );
        rows.push(PublishedCheck { domain: v.domain, method: v.method, computed, published: v.published_score, pass });
    }
    if let Some(dir) = &args.output {
        write_file(&dir.join("published-vectors.json"), to_json(&rows))?;
    }
    if rows.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(CliError::Runtime("published scores not reproduced".into()))
    }
}

fn score(args: &ScoreArgs) -> Result<(), CliError> {
    if args.published_vectors {
        return score_published(args);
    }
    let results_path = args.results.as_ref().expect("clap requires --results");
    let results: ResultsFile = read_json(results_path)?;
    let baselines = match (&args.baselines, &args.reference) {
        (Some(path), None) => read_json::<BaselineTable>(path)?,
        (None, Some(path)) => {
            let reference: ResultsFile = read_json(path)?;
            let errors: BTreeMap<String, f64> =
                reference.result.domains.iter().map(|(n, r)| (n.clone(), r.error)).collect();
            baselines_from_reference(&errors, args.factor).map_err(|e| CliError::Config(e.to_string()))?
        }
        _ => return Err(CliError::Usage("pass --baselines or --reference".into())),
    };
    let have: BTreeSet<&String> = results.result.domains.keys().collect();
    let want: BTreeSet<&String> = baselines.domains.keys().collect();
    if have != want {
        let only = |a: &BTreeSet<&String>, b: &BTreeSet<&String>| a.difference(b).map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(CliError::Config(format!(
            "domain sets differ: results only [{}], baselines only [{}]",
            only(&have, &want),
            only(&want, &have)
        )));
    }
    let report = decathlon_score(&results.result, &baselines).map_err(|e| CliError::Config(e.to_string()))?;
    let table = report.to_table();
    print!("{table}");
    let dir = score_dir(args, results_path);
    let stem = results_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "score".into());
    write_file(&dir.join(format!("{stem}.txt")), &table)?;
    let record = serde_json::json!({
        "results": file_label(results_path),
        "config_hash": results.config_hash,
        "mode": results.result.mode,
        "report": report,
    });
    write_file(&dir.join(format!("{stem}.json")), to_json(&record))?;
    Ok(())
}

fn predict_domain_train(args: &PredictArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let domains = selected_domains(&cfg, &args.domains)?;
    if domains.len() < 2 {
        return Err(CliError::Usage("a domain predictor needs at least two domains".into()));
    }
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    cfg.seeds = vec![seed];
    if let Some(epochs) = args.epochs {
        cfg.predictor.epochs = epochs;
    }
    let layout = Layout::new(cfg.experiment_dir());
    let parts: Vec<DomainData> = domains.iter().map(|n| load_domain(&layout, n)).collect::<Result<_, _>>()?;
    let union = |pick: fn(&DomainData) -> &resadapt::data::Dataset| {
        let refs: Vec<_> = parts.iter().map(pick).collect();
        domain_labelled(&refs).map_err(rt("domain-labelled union"))
    };
    let train = union(|d| &d.train)?;
    let val = union(|d| &d.val)?;
    let test = union(|d| &d.test)?;
    let data = DomainData::new(train, val, test).map_err(train_error)?;

    let main = cfg.network.build(cfg.heads(), seed)?;
    let mut net = Net::build(domain_predictor_config(&main, &domains)).map_err(rt("building predictor"))?;
    let optim = OptimSpec {
        epochs: cfg.predictor.epochs,
        batch_size: cfg.predictor.batch_size,
        base_lr: cfg.predictor.base_lr,
        ..OptimSpec::default()
    };
    let report = train_domain(&mut net, 0, &data, &optim, Protocol::Scratch, seed).map_err(train_error)?;

    layout.create()?;
    let ckpt_path = layout.checkpoints().join(format!("{}.ckpt", args.name));
    adapternet::save(&net, &ckpt_path).map_err(rt(format!("writing {}", ckpt_path.display())))?;
    let meta = PredictorMeta { domains: domains.clone(), stats: data.stats.clone() };
    write_file(&predictor_meta_path(&ckpt_path), to_json(&meta))?;
    let header = serde_json::json!({
        "record": "run",
        "config_hash": cfg.hash(),
        "seed": seed,
        "protocol": "domain-predictor",
        "domains": domains,
        "checkpoint": file_label(&ckpt_path),
    });
    write_file(&layout.reports().join(format!("{}.jsonl", args.name)), report_text(header, &report))?;
    println!(
        "domain accuracy: val {:.4} test {:.4}; wrote {}",
        report.val_accuracy[0],
        report.test_accuracy[0],
        ckpt_path.display()
    );
    Ok(())
}
