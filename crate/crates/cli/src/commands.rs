use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use catmerge::conflict::{conflict_grid, conflict_report, pair_operators, trim_pair, unit_grid};
use catmerge::merging::{self, compute_task_vector, MergeConfig, MergeMethod};
use catmerge::netexec::LossKind;
use catmerge::synthbench::{default_model, generate_suite, SuiteConfig, TaskSuite};
use catmerge::tensorio::{decode_container, encode_container, read_records};
use catmerge::trimming::TrimConfig;

use crate::manifest::{manifest_path, sha256_hex, write_atomic, RunManifest};
use crate::{usage, ConflictArgs, ConflictMethod, EvalArgs, GenArgs, InspectArgs, MergeArgs, MethodArg};

const RUN_MANIFEST: &str = "run.manifest.json";

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_suite(dir: &Path) -> Result<TaskSuite> {
    TaskSuite::load(dir).with_context(|| format!("loading suite {}", dir.display()))
}

pub fn gen(a: GenArgs) -> Result<()> {
    let started = Instant::now();
    let file = a.config.as_deref().map(read_json).transpose()?;
    let has = |key: &str| file.as_ref().and_then(|v| v.get(key)).is_some();
    if a.seed.is_none() && !has("seed") {
        return usage("gen needs --seed (or a \"seed\" field in --config)");
    }
    let mut cfg: SuiteConfig = match &file {
        Some(v) => match serde_json::from_value(v.clone()) {
            Ok(c) => c,
            Err(e) => return usage(format!("invalid suite config: {e}")),
        },
        None => SuiteConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(seed, tasks, classes, conflict_strength, exemplars, train_samples, eval_samples, finetune_steps, lr);
    if a.classes.is_some() && !has("model") {
        cfg.model = default_model(cfg.classes);
    }
    if let Err(e) = cfg.validate() {
        return usage(format!("invalid suite config: {e}"));
    }

    eprintln!("generating {} tasks (seed {})", cfg.tasks, cfg.seed);
    let suite = generate_suite(&cfg)?;
    suite.save(&a.out).with_context(|| format!("writing suite to {}", a.out.display()))?;

    let mut m = RunManifest::new("gen", serde_json::to_value(&cfg)?);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let saved = catmerge::synthbench::SuiteManifest::load(&a.out)?;
    let mut names = vec![catmerge::synthbench::SUITE_MANIFEST];
    names.extend(saved.files.all());
    for name in names {
        let bytes = std::fs::read(a.out.join(name))?;
        m.output(name, &bytes);
    }
    m.finish(started, &a.out.join(RUN_MANIFEST))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MergeFile {
    method: Option<MethodArg>,
    alpha: Option<f64>,
    lambda: Option<f64>,
    c: Option<usize>,
    exemplars: Option<usize>,
    positive_only: Option<bool>,
    keep_fraction: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ResolvedMerge {
    method: MethodArg,
    alpha: f64,
    lambda: f64,
    c: usize,
    exemplars: usize,
    positive_only: bool,
    keep_fraction: f64,
}

fn method_of(m: MethodArg) -> MergeMethod {
    match m {
        MethodArg::Average => MergeMethod::Average,
        MethodArg::Ta => MergeMethod::TaskArithmetic,
        MethodArg::TiesMag => MergeMethod::MagnitudeTrim,
        MethodArg::Cat => MergeMethod::Cat,
        MethodArg::Lsq => MergeMethod::Lsq,
    }
}

pub fn merge(a: MergeArgs) -> Result<()> {
    let started = Instant::now();
    let file: MergeFile = match &a.config {
        Some(p) => match serde_json::from_value(read_json(p)?) {
            Ok(f) => f,
            Err(e) => return usage(format!("invalid merge config {}: {e}", p.display())),
        },
        None => MergeFile::default(),
    };
    let defaults = MergeConfig::default();
    let positive_only = if a.keep_nonpositive { Some(false) } else { file.positive_only };
    let r = ResolvedMerge {
        method: a.method.or(file.method).unwrap_or(MethodArg::Cat),
        alpha: a.alpha.or(file.alpha).unwrap_or(defaults.alpha),
        lambda: a.lambda.or(file.lambda).unwrap_or(defaults.trim.lambda),
        c: a.c.or(file.c).unwrap_or(defaults.trim.c),
        exemplars: a.exemplars.or(file.exemplars).unwrap_or(3),
        positive_only: positive_only.unwrap_or(defaults.trim.positive_only),
        keep_fraction: a.keep_fraction.or(file.keep_fraction).unwrap_or(defaults.magnitude_keep_fraction),
    };

    let set = |flag: bool, file: bool| flag || file;
    let mut ignored = Vec::new();
    if r.method != MethodArg::Cat {
        if set(a.lambda.is_some(), file.lambda.is_some()) {
            ignored.push("lambda");
        }
        if set(a.c.is_some(), file.c.is_some()) {
            ignored.push("c");
        }
        if positive_only.is_some() {
            ignored.push("positive_only");
        }
    }
    if !matches!(r.method, MethodArg::Cat | MethodArg::Lsq) && set(a.exemplars.is_some(), file.exemplars.is_some()) {
        ignored.push("exemplars");
    }
    if r.method != MethodArg::TiesMag && set(a.keep_fraction.is_some(), file.keep_fraction.is_some()) {
        ignored.push("keep_fraction");
    }
    if r.method == MethodArg::Average && set(a.alpha.is_some(), file.alpha.is_some()) {
        ignored.push("alpha");
    }
    for name in ignored {
        eprintln!("warning: {name} does not apply to method {:?}; ignored", r.method);
    }

    let cfg = MergeConfig {
        method: method_of(r.method),
        alpha: r.alpha,
        trim: TrimConfig { lambda: r.lambda, c: r.c, positive_only: r.positive_only },
        magnitude_keep_fraction: r.keep_fraction,
    };
    if let Err(e) = cfg.validate() {
        return usage(format!("invalid merge settings: {e}"));
    }

    let suite = load_suite(&a.suite)?;
    let exemplars = match r.method {
        MethodArg::Cat | MethodArg::Lsq => suite.exemplars(r.exemplars)?,
        _ => Vec::new(),
    };
    eprintln!("merging {} tasks with {}", suite.tasks.len(), cfg.method.as_str());
    let out = merging::merge(suite.spec(), &suite.pretrained, &suite.finetuned(), &exemplars, &cfg)?;

    let container = encode_container(&out.merged)?;
    let report = serde_json::to_string_pretty(&out.report)? + "\n";
    let report_path = with_suffix(&a.out, ".report.json");

    let mut m = RunManifest::new("merge", serde_json::to_value(&r)?);
    m.suite_inputs(&a.suite)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(a.out.display().to_string(), &container);
    m.output(report_path.display().to_string(), report.as_bytes());
    write_atomic(&a.out, &container)?;
    write_atomic(&report_path, report.as_bytes())?;
    m.finish(started, &manifest_path(&a.out))
}

fn with_suffix(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

#[derive(Debug, Serialize)]
struct TaskMetrics {
    id: usize,
    loss: f64,
    accuracy: f64,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    tasks: Vec<TaskMetrics>,
    avg_accuracy: f64,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let bytes = std::fs::read(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let model = decode_container(&bytes).with_context(|| format!("decoding {}", a.model.display()))?;
    let suite = load_suite(&a.suite)?;
    suite.spec().check_params(&model).context("model does not match the suite's network")?;
    let metrics = suite.evaluate_all(&model)?;
    let tasks: Vec<TaskMetrics> = metrics
        .iter()
        .enumerate()
        .map(|(id, m)| TaskMetrics { id, loss: m.loss, accuracy: m.accuracy })
        .collect();
    let avg_accuracy = tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64;
    let text = serde_json::to_string_pretty(&EvalOutput { tasks, avg_accuracy })? + "\n";

    let mut m = RunManifest::new("eval", json!({ "model": a.model, "suite": a.suite }));
    m.input(&a.model)?;
    m.suite_inputs(&a.suite)?;
    m.output(a.json.display().to_string(), text.as_bytes());
    write_atomic(&a.json, text.as_bytes())?;
    eprintln!("avg accuracy {avg_accuracy:.4}");
    m.finish(started, &manifest_path(&a.json))
}

pub fn conflict(a: ConflictArgs) -> Result<()> {
    let started = Instant::now();
    if a.task_a == a.task_b {
        return usage(format!("--task-a and --task-b must differ (both are {})", a.task_a));
    }
    if a.grid == 0 {
        return usage("--grid must be at least 1");
    }
    let defaults = TrimConfig::default();
    let trim = TrimConfig {
        lambda: a.lambda.unwrap_or(defaults.lambda),
        c: a.c.unwrap_or(defaults.c),
        positive_only: defaults.positive_only,
    };
    let n_ex = a.exemplars.unwrap_or(3);
    if a.method == ConflictMethod::Ta {
        for (name, given) in [("lambda", a.lambda.is_some()), ("c", a.c.is_some()), ("exemplars", a.exemplars.is_some())] {
            if given {
                eprintln!("warning: {name} does not apply to method ta; ignored");
            }
        }
    } else if let Err(e) = trim.validate() {
        return usage(format!("invalid trim settings: {e}"));
    }

    let suite = load_suite(&a.suite)?;
    let k = suite.tasks.len();
    for id in [a.task_a, a.task_b] {
        if id >= k {
            return usage(format!("task id {id} is out of range for a suite with {k} tasks"));
        }
    }
    let w0 = &suite.pretrained;
    let t_a = compute_task_vector(w0, &suite.tasks[a.task_a].finetuned, a.task_a)?.params;
    let t_b = compute_task_vector(w0, &suite.tasks[a.task_b].finetuned, a.task_b)?.params;
    let data = [&suite.tasks[a.task_a].eval, &suite.tasks[a.task_b].eval];

    let ops = match a.method {
        ConflictMethod::Ta => None,
        ConflictMethod::Cat => {
            let ex = suite.exemplars(n_ex)?;
            Some(pair_operators(suite.spec(), w0, &t_a, &t_b, [&ex[a.task_a], &ex[a.task_b]], &trim)?)
        }
    };
    let axis = unit_grid(a.grid);
    let grid = conflict_grid(suite.spec(), w0, &t_a, &t_b, data, &axis, &axis, LossKind::CrossEntropy, ops.as_deref())?;
    let csv = grid.to_csv_string()?;
    eprintln!("mean conflict {:.6}", grid.mean());

    let config = match a.method {
        ConflictMethod::Ta => json!({ "method": a.method, "task_a": a.task_a, "task_b": a.task_b, "grid": a.grid }),
        ConflictMethod::Cat => json!({
            "method": a.method, "task_a": a.task_a, "task_b": a.task_b, "grid": a.grid,
            "trim": trim, "exemplars": n_ex,
        }),
    };
    let mut m = RunManifest::new("conflict", config);
    m.suite_inputs(&a.suite)?;
    m.output(a.csv.display().to_string(), csv.as_bytes());

    let report = match &a.report {
        Some(path) => {
            let (ta, tb) = match &ops {
                Some(ops) => trim_pair(&t_a, &t_b, ops)?,
                None => (t_a.clone(), t_b.clone()),
            };
            let r = conflict_report(
                suite.spec(),
                w0,
                (a.task_a, &ta, data[0]),
                (a.task_b, &tb, data[1]),
                LossKind::CrossEntropy,
            )?;
            let text = serde_json::to_string_pretty(&r)? + "\n";
            m.output(path.display().to_string(), text.as_bytes());
            Some((path, text))
        }
        None => None,
    };
    write_atomic(&a.csv, csv.as_bytes())?;
    if let Some((path, text)) = report {
        write_atomic(path, text.as_bytes())?;
    }
    m.finish(started, &manifest_path(&a.csv))
}

#[derive(Debug, Serialize)]
struct TensorSummary {
    name: String,
    kind: String,
    dtype: String,
    shape: Vec<usize>,
    sha256: String,
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let records = read_records(&bytes).with_context(|| format!("{} is not a valid container", a.file.display()))?;
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8 + header_len..];
    let tensors: Vec<TensorSummary> = records
        .iter()
        .map(|r| {
            let start = r.offset as usize;
            TensorSummary {
                name: r.name.clone(),
                kind: r.kind.to_string(),
                dtype: r.dtype.to_string(),
                shape: r.shape.clone(),
                sha256: sha256_hex(&payload[start..start + r.nbytes as usize]),
            }
        })
        .collect();
    let mut kinds = std::collections::BTreeMap::<&str, usize>::new();
    for t in &tensors {
        *kinds.entry(t.kind.as_str()).or_default() += 1;
    }

    if a.json {
        let out = json!({
            "file": a.file,
            "bytes": bytes.len(),
            "sha256": sha256_hex(&bytes),
            "tensor_count": tensors.len(),
            "kinds": kinds,
            "tensors": tensors,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!("{}: {} tensors, {} bytes, sha256 {}", a.file.display(), tensors.len(), bytes.len(), sha256_hex(&bytes));
    for t in &tensors {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        println!("  {}\t{}\t{}\t[{}]\t{}", t.name, t.kind, t.dtype, shape.join(", "), t.sha256);
    }
    if !kinds.is_empty() {
        let parts: Vec<String> = kinds.iter().map(|(k, n)| format!("{k}={n}")).collect();
        println!("kinds: {}", parts.join(" "));
    }
    Ok(())
}
