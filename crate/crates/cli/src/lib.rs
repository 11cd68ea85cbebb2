//! `dds`: command-line client for the data delivery service.
//!
//! Exit codes: 0 success, 1 invalid input, 2 transport or authentication
//! failure, 3 unknown id. Only `submit` and `dag ingest` change service
//! state, and only through `POST /requests`.

pub mod client;
pub mod config;
pub mod error;
pub mod output;
pub mod shorthand;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dds_core::carousel::{compare_policies, run_scenario, CarouselPolicy, CarouselRun, Comparison};
use dds_core::dag::{ingest_job_graph, JobGraph};
use dds_core::hpo::{run_hpo, EvaluatorHub, HpoResult, HpoTaskSpec, Objective, SimEvaluatorConfig};
use dds_core::backends::Scenario;
use dds_core::model::ParamValue;
use dds_core::wire::WireRequest;
use serde_json::{json, Value};

use crate::client::Client;
use crate::config::{CliConfig, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::output::{cell, pretty, Format, Table};

#[derive(Debug, Parser)]
#[command(name = "dds", version, about = "Client for the data delivery service")]
pub struct Cli {
    /// TOML file with server_url, token_path and output_format.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Service base URL; overrides DDS_SERVER and the config file.
    #[arg(long, global = true)]
    pub server: Option<String>,
    /// File holding the bearer token.
    #[arg(long, global = true)]
    pub token_file: Option<PathBuf>,
    #[arg(long, short = 'o', global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Submit a wire request or a use-case shorthand (`-` reads stdin).
    Submit(SubmitArgs),
    /// Show a request and its works.
    Status(StatusArgs),
    /// List the contents of a request's collections.
    Contents(ContentsArgs),
    /// Dump the service counters.
    Metrics,
    /// Run carousel scenarios locally.
    #[command(subcommand)]
    Carousel(CarouselCommand),
    /// Hyperparameter optimisation.
    #[command(subcommand)]
    Hpo(HpoCommand),
    /// Job graphs.
    #[command(subcommand)]
    Dag(DagCommand),
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    pub file: PathBuf,
    #[arg(long)]
    pub idempotency_key: Option<String>,
    /// Print the expanded wire request instead of submitting it.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct StatusArgs {
    pub request_id: String,
    /// Poll until the request is terminal.
    #[arg(long)]
    pub watch: bool,
    /// Seconds between polls.
    #[arg(long, default_value_t = 2.0)]
    pub interval: f64,
    /// Give up watching after this many seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindFilter {
    Input,
    Output,
    All,
}

#[derive(Debug, Args)]
pub struct ContentsArgs {
    pub request_id: String,
    /// Content status, e.g. Processed.
    #[arg(long)]
    pub status: Option<String>,
    #[arg(long, value_enum, default_value = "input")]
    pub kind: KindFilter,
    #[arg(long, default_value_t = 100)]
    pub page_size: usize,
}

#[derive(Debug, Subcommand)]
pub enum CarouselCommand {
    /// Run one policy on a scenario.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "file-level")]
        policy: CarouselPolicy,
        /// Real-time runs give up after this many seconds.
        #[arg(long, default_value_t = 600.0)]
        deadline: f64,
        /// Also write summary, attempts and occupancy CSVs here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run several policies on virtual time; the first is the baseline.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long = "policy", default_values = ["dataset-level", "file-level"])]
        policies: Vec<CarouselPolicy>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveName {
    /// Sum of squares of the numeric parameters.
    Sphere,
    /// Sum of (v - 1)^2 over the numeric parameters.
    ShiftedSphere,
}

impl ObjectiveName {
    pub fn objective(self) -> Objective {
        let shift = match self {
            ObjectiveName::Sphere => 0.0,
            ObjectiveName::ShiftedSphere => 1.0,
        };
        Arc::new(move |values: &BTreeMap<String, ParamValue>| {
            values
                .values()
                .filter_map(|v| match v {
                    ParamValue::Float(x) => Some(*x),
                    ParamValue::Int(i) => Some(*i as f64),
                    _ => None,
                })
                .map(|x| (x - shift).powi(2))
                .sum()
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum HpoCommand {
    /// Run a task locally against simulated evaluators.
    Run {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value = "shifted-sphere")]
        objective: ObjectiveName,
        #[arg(long, default_value_t = 4)]
        workers: u32,
        /// Seeds evaluator latencies, and so the order losses arrive in.
        #[arg(long, default_value_t = 0)]
        order_seed: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum DagCommand {
    /// Turn a job graph into a request and submit it.
    Ingest {
        #[arg(long)]
        graph: PathBuf,
        /// Graph name; defaults to the file stem.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = shorthand::DEFAULT_CONSUMER)]
        consumer: String,
        #[arg(long)]
        idempotency_key: Option<String>,
        #[arg(long)]
        dry_run: bool,
    },
}

fn read_input(path: &Path) -> CliResult<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| CliError::Validation(format!("stdin: {e}")))?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Transport(format!("stdout: {e}")))
}

pub struct Ctx {
    pub config: CliConfig,
}

impl Ctx {
    fn client(&self) -> CliResult<Client> {
        Ok(Client::new(&self.config.server_url, Some(self.config.token()?)))
    }

    fn format(&self) -> Format {
        self.config.output_format
    }
}

/// Resolves configuration and runs one command, writing to `out`.
pub fn run(cli: Cli, env_server: Option<String>, out: &mut dyn Write) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let config = CliConfig::resolve(file, env_server, cli.server, cli.token_file, cli.format)?;
    let ctx = Ctx { config };
    match cli.command {
        Command::Submit(a) => submit(&ctx, &a, out),
        Command::Status(a) => status(&ctx, &a, out),
        Command::Contents(a) => contents(&ctx, &a, out),
        Command::Metrics => metrics(&ctx, out),
        Command::Carousel(c) => carousel(&ctx, c, out),
        Command::Hpo(HpoCommand::Run {
            task,
            objective,
            workers,
            order_seed,
        }) => hpo_run(&ctx, &task, objective, workers, order_seed, out),
        Command::Dag(DagCommand::Ingest {
            graph,
            name,
            consumer,
            idempotency_key,
            dry_run,
        }) => {
            let text = read_input(&graph)?;
            let g = JobGraph::parse(&text).map_err(|e| CliError::Validation(e.to_string()))?;
            let name = name.unwrap_or_else(|| {
                graph
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("graph")
                    .to_string()
            });
            let wf = ingest_job_graph(&g, &name).map_err(|e| CliError::Validation(e.to_string()))?;
            send(&ctx, &WireRequest::new(wf, &consumer), idempotency_key.as_deref(), dry_run, out)
        }
    }
}

fn submit(ctx: &Ctx, a: &SubmitArgs, out: &mut dyn Write) -> CliResult<()> {
    let req = shorthand::load_document(&read_input(&a.file)?)?;
    send(ctx, &req, a.idempotency_key.as_deref(), a.dry_run, out)
}

fn send(ctx: &Ctx, req: &WireRequest, key: Option<&str>, dry_run: bool, out: &mut dyn Write) -> CliResult<()> {
    if dry_run {
        let mut s = req.render_pretty();
        s.push('\n');
        return emit(out, &s);
    }
    let reply = ctx.client()?.post("/requests", &req.render(), key)?;
    let id = reply.json()?["request_id"]
        .as_str()
        .ok_or_else(|| CliError::Transport("reply has no request_id".into()))?
        .to_string();
    let text = match ctx.format() {
        Format::Table => format!("{id}\n"),
        Format::Json => pretty(&json!({"request_id": id})),
        Format::Csv => {
            let mut t = Table::new(&["request_id"]);
            t.push(vec![id]);
            t.csv()
        }
    };
    emit(out, &text)
}

const TERMINAL: [&str; 3] = ["Finished", "SubFinished", "Failed"];

fn nonzero_counts(v: &Value) -> String {
    v["work_counts"]
        .as_object()
        .map(|m| {
            m.iter()
                .filter(|(_, n)| n.as_u64().unwrap_or(0) > 0)
                .map(|(k, n)| format!("{k}={n}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .unwrap_or_default()
}

fn render_status(v: &Value, format: Format) -> String {
    let works = v["works"].as_array().cloned().unwrap_or_default();
    match format {
        Format::Json => pretty(v),
        Format::Csv => {
            let counts = v["work_counts"].as_object().cloned().unwrap_or_default();
            let mut headers = vec!["request_id", "status", "requester", "consumer", "created_at", "updated_at", "works"];
            headers.extend(counts.keys().map(String::as_str));
            let mut t = Table::new(&headers);
            let mut row: Vec<String> = ["request_id", "status", "requester", "consumer", "created_at", "updated_at"]
                .iter()
                .map(|k| cell(&v[*k]))
                .collect();
            row.push(works.len().to_string());
            row.extend(counts.values().map(cell));
            t.push(row);
            t.csv()
        }
        Format::Table => {
            let mut s = String::new();
            for (label, key) in [
                ("request", "request_id"),
                ("status", "status"),
                ("requester", "requester"),
                ("consumer", "consumer"),
                ("created_at", "created_at"),
                ("updated_at", "updated_at"),
                ("error", "error"),
            ] {
                if !v[key].is_null() {
                    s.push_str(&format!("{label:<11}{}\n", cell(&v[key])));
                }
            }
            s.push_str(&format!("{:<11}{} {}\n", "works", works.len(), nonzero_counts(v)));
            if !works.is_empty() {
                let mut t = Table::new(&["work_id", "template", "status", "generation"]);
                for w in &works {
                    t.push(["work_id", "template", "status", "generation"].iter().map(|k| cell(&w[*k])).collect());
                }
                s.push('\n');
                s.push_str(&t.render(Format::Table));
            }
            s
        }
    }
}

fn status(ctx: &Ctx, a: &StatusArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(a.interval.is_finite() && a.interval > 0.0) {
        return Err(CliError::Validation("--interval must be positive".into()));
    }
    let client = ctx.client()?;
    let path = format!("/requests/{}", a.request_id);
    let started = Instant::now();
    let mut last = String::new();
    loop {
        let v = client.get(&path, &[])?.json()?;
        let status = v["status"].as_str().unwrap_or("").to_string();
        if !a.watch || TERMINAL.contains(&status.as_str()) {
            return emit(out, &render_status(&v, ctx.format()));
        }
        let line = format!("{} {} {}\n", a.request_id, status, nonzero_counts(&v));
        if line != last && ctx.format() == Format::Table {
            emit(out, &line)?;
            let _ = out.flush();
        }
        last = line;
        if a.timeout.is_some_and(|t| started.elapsed().as_secs_f64() >= t) {
            return Err(CliError::Transport(format!("request still {status} after --timeout")));
        }
        std::thread::sleep(Duration::from_secs_f64(a.interval));
    }
}

/// Every page of a listing.
fn fetch_all(client: &Client, path: &str, mut query: Vec<(&str, String)>, page_size: usize) -> CliResult<Vec<Value>> {
    query.push(("page_size", page_size.to_string()));
    let mut items = Vec::new();
    let mut cursor: Option<String> = None;
    loop {
        let mut q = query.clone();
        if let Some(c) = &cursor {
            q.push(("cursor", c.clone()));
        }
        let page = client.get(path, &q)?.json()?;
        items.extend(page["items"].as_array().cloned().unwrap_or_default());
        match page["next_cursor"].as_str() {
            Some(c) => cursor = Some(c.to_string()),
            None => return Ok(items),
        }
    }
}

fn contents(ctx: &Ctx, a: &ContentsArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.page_size == 0 {
        return Err(CliError::Validation("--page-size must be positive".into()));
    }
    let client = ctx.client()?;
    let colls = fetch_all(&client, &format!("/requests/{}/collections", a.request_id), Vec::new(), a.page_size)?;
    let mut rows = Vec::new();
    for c in colls {
        let keep = match a.kind {
            KindFilter::All => true,
            KindFilter::Input => c["kind"] == "Input",
            KindFilter::Output => c["kind"] == "Output",
        };
        if !keep {
            continue;
        }
        let cid = cell(&c["collection_id"]);
        let query = a.status.iter().map(|s| ("status", s.clone())).collect();
        rows.extend(fetch_all(&client, &format!("/collections/{cid}/contents"), query, a.page_size)?);
    }
    let text = match ctx.format() {
        Format::Json => pretty(&Value::Array(rows)),
        f => {
            let cols = ["collection_id", "content_id", "name", "status", "attempt_count", "size_bytes"];
            let mut t = Table::new(&cols);
            for r in &rows {
                t.push(cols.iter().map(|k| cell(&r[*k])).collect());
            }
            t.render(f)
        }
    };
    emit(out, &text)
}

fn metrics(ctx: &Ctx, out: &mut dyn Write) -> CliResult<()> {
    // The endpoint is open; send the token only if one is configured.
    let client = Client::new(&ctx.config.server_url, ctx.config.token().ok());
    let body = client.get("/metrics", &[])?.body;
    let pairs: Vec<(String, String)> = body
        .lines()
        .filter_map(|l| l.split_once(' '))
        .map(|(k, v)| (k.to_string(), v.trim().to_string()))
        .collect();
    let text = match ctx.format() {
        Format::Json => {
            let m: serde_json::Map<String, Value> = pairs
                .into_iter()
                .map(|(k, v)| {
                    let n = v.parse::<u64>().map(Value::from).unwrap_or(Value::String(v));
                    (k, n)
                })
                .collect();
            pretty(&Value::Object(m))
        }
        f => {
            let mut t = Table::new(&["metric", "value"]);
            for (k, v) in pairs {
                t.push(vec![k, v]);
            }
            t.render(f)
        }
    };
    emit(out, &text)
}

fn load_scenario(path: &Path) -> CliResult<Scenario> {
    Scenario::parse(&read_input(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn carousel_table(c: &Comparison, ratios: bool) -> Table {
    let mut cols = vec![
        "policy",
        "status",
        "jobs",
        "mean_attempts",
        "peak_disk_bytes",
        "disk_byte_seconds",
        "makespan_s",
        "first_processing_s",
    ];
    if ratios {
        cols.extend(["peak_disk_ratio", "mean_attempts_ratio", "disk_byte_seconds_ratio"]);
    }
    let mut t = Table::new(&cols);
    for (i, run) in c.runs.iter().enumerate() {
        let m = &run.metrics;
        let mut row = vec![
            run.policy.to_string(),
            run.request_status.to_string(),
            m.jobs().to_string(),
            format!("{:.4}", m.mean_attempts()),
            m.peak_disk_bytes.to_string(),
            m.disk_byte_seconds.to_string(),
            format!("{:.3}", m.makespan as f64 / 1000.0),
            format!("{:.3}", m.time_to_first_processing as f64 / 1000.0),
        ];
        if ratios {
            let r = c.ratios(i);
            row.extend([r.peak_disk, r.mean_attempts, r.disk_byte_seconds].map(|x| format!("{x:.4}")));
        }
        t.push(row);
    }
    t
}

fn write_plots(dir: &Path, c: &Comparison) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("summary.csv"), &c.to_csv())?;
    write_file(&dir.join("attempts.csv"), &c.histogram_csv())?;
    write_file(&dir.join("occupancy.csv"), &c.occupancy_csv())
}

fn carousel(ctx: &Ctx, cmd: CarouselCommand, out: &mut dyn Write) -> CliResult<()> {
    let err = |e: dds_core::carousel::CarouselError| CliError::Validation(e.to_string());
    let (comparison, ratios, out_dir) = match cmd {
        CarouselCommand::Run {
            scenario,
            policy,
            deadline,
            out_dir,
        } => {
            if !(deadline.is_finite() && deadline > 0.0) {
                return Err(CliError::Validation("--deadline must be positive".into()));
            }
            let s = load_scenario(&scenario)?;
            let run: CarouselRun = run_scenario(&s, &policy, Duration::from_secs_f64(deadline)).map_err(err)?;
            (Comparison { runs: vec![run] }, false, out_dir)
        }
        CarouselCommand::Compare {
            scenario,
            policies,
            out_dir,
        } => {
            let s = load_scenario(&scenario)?;
            (compare_policies(&s, &policies).map_err(err)?, true, out_dir)
        }
    };
    if let Some(d) = out_dir {
        write_plots(&d, &comparison)?;
    }
    let text = match ctx.format() {
        Format::Json => pretty(&serde_json::to_value(&comparison).expect("comparison serializes")),
        f => carousel_table(&comparison, ratios).render(f),
    };
    emit(out, &text)
}

fn hpo_run(ctx: &Ctx, task: &Path, objective: ObjectiveName, workers: u32, order_seed: u64, out: &mut dyn Write) -> CliResult<()> {
    let spec: HpoTaskSpec = serde_json::from_str(&read_input(task)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", task.display())))?;
    let mut sim = SimEvaluatorConfig::new(workers);
    sim.order_seed = order_seed;
    let hub = EvaluatorHub::simulated(sim, objective.objective()).map_err(CliError::Validation)?;
    let r: HpoResult = run_hpo(&spec, hub).map_err(|e| CliError::Validation(e.to_string()))?;
    let text = match ctx.format() {
        Format::Json => pretty(&serde_json::to_value(&r).expect("result serializes")),
        Format::Csv => {
            let mut t = Table::new(&["evaluation", "best_loss"]);
            for (i, l) in r.trace.iter().enumerate() {
                t.push(vec![(i + 1).to_string(), l.to_string()]);
            }
            t.csv()
        }
        Format::Table => {
            let best = r
                .best_point
                .as_ref()
                .map(|p| serde_json::to_string(&p.values).expect("values serialize"))
                .unwrap_or_default();
            let mut t = Table::new(&["status", "evaluations", "best_loss", "best_point"]);
            t.push(vec![
                r.request_status.to_string(),
                r.evaluations().to_string(),
                r.best_loss.map(|l| format!("{l:.6e}")).unwrap_or_default(),
                best,
            ]);
            t.render(Format::Table)
        }
    };
    emit(out, &text)
}
