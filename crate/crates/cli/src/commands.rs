use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use adaptkit::package::{install_package, metadata_stub, write_atomic};
use adaptkit::train::{generate_toy_task, head_output, predict_class};
use adaptkit::{
    load_backbone, pack_zip, preset, read_package, save_adapter_with_head, save_backbone, train as run_training,
    verify_zip, AdapterConfig, AdapterSpec, AdapterType, HeadKind, LoadOptions, Model, ModelConfig, TrainConfig,
    TrainMode,
};
use adaptkit_hub::{ingest_file, Cache, HubEntry, HubError, HubIndex, Level1};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::{ExploreArgs, IndexArgs, PackArgs, RunArgs, SearchArgs, TrainArgs, ValidateArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_INVALID, message: message.into() }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

impl From<adaptkit::Error> for Failure {
    fn from(e: adaptkit::Error) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_INVALID };
        Failure { code, message: e.to_string() }
    }
}

impl From<HubError> for Failure {
    fn from(e: HubError) -> Self {
        let code = match &e {
            HubError::Transport { .. } | HubError::Io(_) => EXIT_IO,
            HubError::Package(inner) if inner.is_io() => EXIT_IO,
            _ => EXIT_INVALID,
        };
        Failure { code, message: e.to_string() }
    }
}

fn print_json(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    // a closed pipe on stdout is not an error worth reporting
    let _ = writeln!(io::stdout().lock(), "{text}");
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn model_config(spec: &str) -> Outcome<ModelConfig> {
    match spec {
        "desk" => Ok(ModelConfig::desk()),
        "base" => Ok(ModelConfig::bert_base()),
        "large" => Ok(ModelConfig::bert_large()),
        path if Path::new(path).is_file() => Ok(ModelConfig::from_descriptor(&read_text(Path::new(path))?)?),
        other => Err(usage(format!("--model-config '{other}' is neither desk, base, large nor a descriptor file"))),
    }
}

fn adapter_config(spec: &str) -> Outcome<AdapterConfig> {
    if let Ok(cfg) = preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    if path.is_file() {
        return Ok(AdapterConfig::from_descriptor(&read_text(path)?)?);
    }
    Err(usage(format!("--adapter-config '{spec}' is neither a preset (pfeiffer, houlsby, bapna) nor a descriptor file")))
}

fn overlay(mut args: TrainArgs) -> Outcome<TrainArgs> {
    let Some(path) = args.config.take() else { return Ok(args) };
    let file: TrainArgs =
        serde_yaml::from_str(&read_text(&path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(TrainArgs {
        config: Some(path),
        model_config: args.model_config.or(file.model_config),
        adapter_name: args.adapter_name.or(file.adapter_name),
        adapter_config: args.adapter_config.or(file.adapter_config),
        adapter_type: args.adapter_type.or(file.adapter_type),
        reduction_factor: args.reduction_factor.or(file.reduction_factor),
        task: args.task.or(file.task),
        mode: args.mode.or(file.mode),
        seed: args.seed.or(file.seed),
        steps: args.steps.or(file.steps),
        learning_rate: args.learning_rate.or(file.learning_rate),
        batch_size: args.batch_size.or(file.batch_size),
        eval_every: args.eval_every.or(file.eval_every),
        out: args.out.or(file.out),
    })
}

pub fn train(args: TrainArgs) -> Outcome {
    let args = overlay(args)?;
    let mode: TrainMode = args.mode.as_deref().unwrap_or("adapter_only").parse().map_err(|e: adaptkit::Error| usage(e.to_string()))?;
    let adapter_name = match (mode, args.adapter_name.as_deref()) {
        (TrainMode::AdapterOnly, None) => return Err(usage("--mode adapter_only requires --adapter-name")),
        (TrainMode::AdapterOnly, Some(name)) => Some(name.to_string()),
        (TrainMode::FullFinetune, Some(_)) => {
            eprintln!("note: --adapter-name is ignored when fine-tuning the full model");
            None
        }
        (TrainMode::FullFinetune, None) => None,
    };
    let config = model_config(args.model_config.as_deref().unwrap_or("desk"))?;
    let mut adapter = adapter_config(args.adapter_config.as_deref().unwrap_or("pfeiffer"))?;
    if let Some(rf) = args.reduction_factor {
        adapter = adapter.with_reduction_factor(rf);
    }
    let adapter_type: AdapterType =
        args.adapter_type.as_deref().unwrap_or("text_task").parse().map_err(|e: adaptkit::Error| usage(e.to_string()))?;
    let task_name = args.task.as_deref().unwrap_or("majority-token");
    let seed = args.seed.unwrap_or(0);
    let task = generate_toy_task(task_name, seed).map_err(|e| usage(e.to_string()))?;

    let mut cfg = TrainConfig::new(mode, seed);
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.max_steps = args.steps.unwrap_or(cfg.max_steps);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.eval_every = args.eval_every.unwrap_or(0);
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let mut model = Model::new(config, seed)?;
    let head = task.name();
    model.add_head(head, HeadKind::Classification { num_classes: 2 })?;
    if let Some(name) = &adapter_name {
        model.add_adapter(name, adapter_type, AdapterSpec::Config(adapter))?;
        model.train_adapter(&[name])?;
    }
    let log = run_training(&mut model, head, &task, &cfg)?;

    let out = args.out.unwrap_or_else(|| PathBuf::from("adaptkit-run"));
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let checkpoint = out.join("backbone.ckpt");
    save_backbone(&model, Some(head), &checkpoint)?;
    let package = match &adapter_name {
        Some(name) => {
            let path = out.join("adapter.pkg");
            save_adapter_with_head(&model, name, Some(head), &path)?;
            Some(path)
        }
        None => None,
    };
    let dev = out.join("dev.tsv");
    let lines: String = task
        .dev
        .iter()
        .map(|ex| {
            let toks: Vec<String> = ex.tokens.iter().map(usize::to_string).collect();
            format!("{}\t{}\n", toks.join(" "), ex.label)
        })
        .collect();
    write_atomic(&dev, lines.as_bytes())?;
    let log_path = out.join("train_log.jsonl");
    write_atomic(&log_path, log.to_jsonl().as_bytes())?;

    print_json(&json!({
        "task": task.name(),
        "mode": mode.as_str(),
        "seed": seed,
        "steps": cfg.max_steps,
        "learning_rate": cfg.learning_rate,
        "metric": "accuracy",
        "dev_metric": log.dev_metric,
        "final_loss": log.steps.last().map(|s| s.loss),
        "model_hash": model.config().hash(),
        "adapter": adapter_name,
        "package": package,
        "checkpoint": checkpoint,
        "dev_file": dev,
        "log": log_path,
    }));
    Ok(())
}

/// Parse `tok tok ...[\tlabel]`.
fn parse_line(line: &str, lineno: usize) -> Outcome<(Vec<usize>, Option<usize>)> {
    let (tokens, label) = match line.split_once('\t') {
        Some((t, l)) => (t, Some(l.trim())),
        None => (line, None),
    };
    let bad = |what: &str| invalid(format!("input line {lineno}: {what}"));
    let tokens = tokens
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| bad(&format!("token '{t}' is not a non-negative integer"))))
        .collect::<Outcome<Vec<_>>>()?;
    let label = match label {
        Some(l) if !l.is_empty() => Some(l.parse::<usize>().map_err(|_| bad(&format!("label '{l}' is not an integer")))?),
        _ => None,
    };
    Ok((tokens, label))
}

/// Fetch an adapter through the hub index, returning the cached package path.
fn fetch_from_hub(index: &Path, query: &str, model: &Model, config: Option<&str>) -> Outcome<PathBuf> {
    let index = HubIndex::load(index)?;
    let entry = index.resolve(query, &model.config().hash(), config)?;
    let cached = Cache::from_env().fetch(entry)?;
    eprintln!("resolved '{query}' to {} (sha256 {})", entry.id, entry.sha256);
    Ok(cached.package)
}

pub fn run(args: RunArgs) -> Outcome {
    let mut model = load_backbone(&args.model_checkpoint)?;
    let mut head = args.head.clone();
    if let Some(adapter) = &args.adapter {
        let package = match &args.index {
            Some(index) => fetch_from_hub(index, adapter, &model, args.config.as_deref())?,
            None => PathBuf::from(adapter),
        };
        let pkg = read_package(&package)?;
        let requested = match args.config.as_deref() {
            Some(c) if preset(c).is_ok() => Some(AdapterSpec::Preset(c.to_string())),
            Some(c) if Path::new(c).is_file() => Some(AdapterSpec::Config(adapter_config(c)?)),
            Some(c) if args.index.is_none() => {
                let found = pkg.header.adapter_config_hash.clone().unwrap_or_default();
                if found != c {
                    return Err(adaptkit::Error::ConfigConflict { requested: c.to_string(), found }.into());
                }
                None
            }
            _ => None,
        };
        let opts = LoadOptions { config: requested, rename: None, load_head: true };
        let name = install_package(&mut model, &pkg, &opts)?;
        model.set_active(&[&name])?;
        if head.is_none() {
            head = pkg.head.as_ref().map(|h| h.name.clone());
        }
    }
    let head = match head {
        Some(h) => h,
        None => match model.heads() {
            [one] => one.name().to_string(),
            [] => return Err(invalid("no prediction head in the checkpoint or the adapter package")),
            _ => return Err(usage("several heads are available; choose one with --head")),
        },
    };
    let kind = model.head(&head)?.kind();

    let input = fs::File::open(&args.input_file).map_err(|e| io_failure(&args.input_file, e))?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let (mut total, mut labelled, mut correct) = (0usize, 0usize, 0usize);
    for (i, line) in io::BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| io_failure(&args.input_file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (tokens, label) = parse_line(&line, i + 1)?;
        let shown = match kind {
            HeadKind::Classification { .. } => {
                let class = predict_class(&model, &head, &tokens)?;
                if let Some(l) = label {
                    labelled += 1;
                    correct += (l == class) as usize;
                }
                class.to_string()
            }
            HeadKind::Regression => head_output(&model, &head, &tokens)?[0].to_string(),
        };
        writeln!(out, "{shown}").map_err(|e| io_failure(Path::new("<stdout>"), e))?;
        total += 1;
    }
    out.flush().map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    let accuracy = (labelled > 0).then(|| correct as f64 / labelled as f64);
    eprintln!("{}", json!({ "predictions": total, "labelled": labelled, "accuracy": accuracy }));
    Ok(())
}

pub fn pack(args: PackArgs) -> Outcome {
    let pkg = read_package(&args.package)?;
    let stub = metadata_stub(&pkg)?;
    pack_zip(&args.package, &stub, &args.out)?;
    let report = verify_zip(&args.out)?;
    let bytes = fs::read(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let url = match args.url {
        Some(u) => u,
        None => {
            let abs = fs::canonicalize(&args.out).map_err(|e| io_failure(&args.out, e))?;
            url::Url::from_file_path(&abs).map_err(|_| invalid(format!("cannot form a file url for {}", abs.display())))?.to_string()
        }
    };
    let header = &pkg.header;
    let entry = HubEntry {
        id: header.name.clone(),
        adapter_type: header.adapter_type.ok_or_else(|| invalid("package holds no adapter"))?,
        category: args.category.unwrap_or_else(|| header.name.clone()),
        dataset: args.dataset.unwrap_or_else(|| header.name.clone()),
        model_type: header.model_type.clone(),
        model_hash: header.model_config_hash.clone(),
        config_hash: report.adapter_config_hash.clone(),
        config: report.preset.clone(),
        url,
        sha256: sha256.clone(),
        reduction_factor: pkg.adapter_config.as_ref().map(|c| c.reduction_factor),
        description: args.description,
        author: args.author,
        github: None,
        twitter: None,
        training: None,
    };
    let violations = entry.violations();
    if !violations.is_empty() {
        return Err(HubError::Validation(violations).into());
    }
    let metadata = args.metadata_out.unwrap_or_else(|| args.out.with_extension("yaml"));
    write_atomic(&metadata, entry.to_yaml().as_bytes())?;
    print_json(&json!({ "archive": args.out, "sha256": sha256, "metadata": metadata, "report": report }));
    Ok(())
}

pub fn validate(args: ValidateArgs) -> Outcome {
    let mut worst: Option<Failure> = None;
    for path in &args.paths {
        let is_zip = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip"));
        let result: Outcome<String> = if is_zip {
            verify_zip(path).map(|r| format!("{} parameters, preset {}", r.params, r.preset)).map_err(Failure::from)
        } else {
            ingest_file(path).map(|e| format!("{} for model {}", e.id, &e.model_hash[..12])).map_err(Failure::from)
        };
        match result {
            Ok(summary) => println!("ok\t{}\t{summary}", path.display()),
            Err(f) => {
                println!("invalid\t{}", path.display());
                eprintln!("{}: {}", path.display(), f.message);
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    match worst {
        Some(f) => Err(Failure { code: f.code, message: "validation failed".into() }),
        None => Ok(()),
    }
}

fn metadata_files(inputs: &[PathBuf]) -> Outcome<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| io_failure(input, e))?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "yaml" || e == "yml"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(input.clone());
        }
    }
    Ok(out)
}

pub fn index(args: IndexArgs) -> Outcome {
    let files = metadata_files(&args.inputs)?;
    let entries = files
        .iter()
        .map(|f| {
            ingest_file(f).map_err(|e| {
                let failure = Failure::from(e);
                Failure { message: format!("{}: {}", f.display(), failure.message), ..failure }
            })
        })
        .collect::<Outcome<Vec<_>>>()?;
    let index = HubIndex::build(entries)?;
    index.save(&args.out)?;
    print_json(&json!({ "index": args.out, "entries": index.entries().len() }));
    Ok(())
}

pub fn explore(args: ExploreArgs) -> Outcome {
    let index = HubIndex::load(&args.index)?;
    let level1 = match args.level1.as_deref() {
        Some(l) => Some(Level1::parse(l).ok_or_else(|| usage(format!("--level1 '{l}' must be task or language")))?),
        None => None,
    };
    print!("{}", index.render_tree(level1, args.level2.as_deref()));
    Ok(())
}

pub fn search(args: SearchArgs) -> Outcome {
    let index = HubIndex::load(&args.index)?;
    let entry = index.resolve(&args.query, &args.model_hash, args.config.as_deref())?;
    print_json(&serde_json::to_value(entry).expect("entries serialize"));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_lines_parse_with_and_without_labels() {
        assert_eq!(parse_line("0 4 5\t1", 1).unwrap(), (vec![0, 4, 5], Some(1)));
        assert_eq!(parse_line("7 8", 2).unwrap(), (vec![7, 8], None));
        assert_eq!(parse_line("7 8\t", 2).unwrap(), (vec![7, 8], None));
        assert_eq!(parse_line("7 x", 3).unwrap_err().code, EXIT_INVALID);
    }

    #[test]
    fn flag_values_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.yaml");
        fs::write(&file, "task: parity-of-token\nseed: 4\nsteps: 7\n").unwrap();
        let merged =
            overlay(TrainArgs { config: Some(file.clone()), seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!(merged.task.as_deref(), Some("parity-of-token"));
        assert_eq!(merged.seed, Some(9));
        assert_eq!(merged.steps, Some(7));
        fs::write(&file, "bogus: 1\n").unwrap();
        let err = overlay(TrainArgs { config: Some(file), ..Default::default() }).unwrap_err();
        assert_eq!(err.code, EXIT_USAGE);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let io = adaptkit::Error::Io(io::Error::new(io::ErrorKind::NotFound, "gone"));
        assert_eq!(Failure::from(io).code, EXIT_IO);
        let mismatch = adaptkit::Error::IncompatibleModel { package: "a".into(), live: "b".into() };
        assert_eq!(Failure::from(mismatch).code, EXIT_INVALID);
        let transport = HubError::Transport { url: "http://x".into(), message: "refused".into() };
        assert_eq!(Failure::from(transport).code, EXIT_IO);
        let ambiguous = HubError::Ambiguous { query: "s".into(), candidates: vec![] };
        assert_eq!(Failure::from(ambiguous).code, EXIT_INVALID);
    }
}
