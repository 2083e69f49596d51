use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use odf_core::coordinator::{DefineOutcome, IngestOutcome, PullAction, StableRef};
use odf_core::ingest::{key_indices, project_state};
use odf_core::sync::{self, SyncError, TransferReport};
use odf_core::{CoordinatorError, DatasetId, DatasetKind, MetadataBlock, MetadataEvent, Timestamp, Value, Workspace};

mod manifest;

use manifest::{Manifest, ManifestError};

#[derive(Parser)]
#[command(name = "odf", version, about = "Verifiable bitemporal datasets on your desk")]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    output: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Create a workspace in the current directory (or ODF_WORKSPACE).
    Init,
    /// Define or update a dataset from a YAML manifest.
    Add { manifest: PathBuf },
    /// Run one ingestion round of a root dataset.
    Ingest {
        name: String,
        /// Read this file instead of the manifest's source path.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Bring a dataset and everything it depends on up to date.
    Pull { name: String },
    /// Print the metadata chain.
    Log { name: String },
    /// Check hashes and chain rules, then re-execute transforms.
    Verify {
        name: String,
        #[arg(long)]
        integrity_only: bool,
    },
    /// Print the dataset-level input graph.
    Lineage { name: String },
    /// Trace one output record back to the root records that produced it.
    Trace { name: String, offset: u64 },
    /// Print the dataset's state as of a system time.
    Project {
        name: String,
        #[arg(long, value_name = "RFC3339")]
        as_of: Option<String>,
    },
    /// Assert a root dataset's watermark.
    SetWatermark {
        name: String,
        #[arg(value_name = "RFC3339")]
        watermark: String,
    },
    /// Publish a dataset to a repository directory.
    Push { name: String, repo: PathBuf },
    /// Fetch a dataset from a repository directory.
    PullRemote {
        #[arg(value_name = "DATASET_ID|NAME")]
        dataset: String,
        repo: PathBuf,
    },
    /// Print the last records of a dataset.
    Tail {
        name: String,
        #[arg(short = 'n', default_value_t = 10)]
        n: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error(transparent)]
    Sync(#[from] SyncError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Manifest(ManifestError::Io { .. }) => 3,
            CliError::Manifest(_) => 1,
            CliError::Coordinator(e) if e.is_io() => 3,
            CliError::Coordinator(_) => 1,
            CliError::Sync(SyncError::InvalidChain(_) | SyncError::ObjectMissingInRepo(_)) => 2,
            CliError::Sync(SyncError::RepoUnavailable { .. }) => 3,
            CliError::Sync(SyncError::Local(e)) if e.is_io() => 3,
            CliError::Sync(_) => 1,
        }
    }
}

const OK: u8 = 0;
const VERIFICATION_FAILED: u8 = 2;

/// What a command prints, in both formats, and its exit code.
struct Output {
    json: Value,
    text: String,
    code: u8,
}

impl Output {
    fn ok(json: Value, text: String) -> Output {
        Output { json, text, code: OK }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(out) => {
            match cli.output {
                Format::Json => println!("{}", out.json.canonical_string()),
                Format::Text => print!("{}", out.text),
            }
            ExitCode::from(out.code)
        }
        Err(e) => {
            match cli.output {
                Format::Json => println!("{}", Value::map([("error", Value::str(e.to_string()))]).canonical_string()),
                Format::Text => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn workspace_dir() -> Result<Option<PathBuf>, CliError> {
    Ok(std::env::var_os("ODF_WORKSPACE").map(PathBuf::from))
}

fn open_workspace() -> Result<Workspace, CliError> {
    Ok(match workspace_dir()? {
        Some(dir) => Workspace::open(dir)?,
        None => Workspace::discover(current_dir()?)?,
    })
}

fn current_dir() -> Result<PathBuf, CliError> {
    std::env::current_dir().map_err(|source| CoordinatorError::Io { path: ".".into(), source }.into())
}

fn parse_time(text: &str) -> Result<Timestamp, CliError> {
    Timestamp::parse(text).map_err(|e| CliError::Usage(format!("invalid timestamp {text:?}: {e}")))
}

fn run(cli: &Cli) -> Result<Output, CliError> {
    if let Command::Init = cli.command {
        let dir = match workspace_dir()? {
            Some(d) => d,
            None => current_dir()?,
        };
        let ws = Workspace::init(&dir)?;
        let root = ws.root().display().to_string();
        return Ok(Output::ok(Value::map([("workspace", Value::str(&root))]), format!("initialized workspace at {root}\n")));
    }
    let ws = open_workspace()?;
    let now = Timestamp::now();
    match &cli.command {
        Command::Init => unreachable!(),
        Command::Add { manifest } => add(&ws, manifest, now),
        Command::Ingest { name, source } => ingest(&ws, name, source.as_deref(), now),
        Command::Pull { name } => pull(&ws, name, now),
        Command::Log { name } => log(&ws, name),
        Command::Verify { name, integrity_only } => verify(&ws, name, *integrity_only),
        Command::Lineage { name } => lineage(&ws, name),
        Command::Trace { name, offset } => {
            let id = ws.resolve(name)?;
            let tree = ws.trace(&id, *offset)?;
            let mut text = String::new();
            render_trace(&tree, 0, &mut text);
            Ok(Output::ok(tree.to_value(), text))
        }
        Command::Project { name, as_of } => {
            let as_of = as_of.as_deref().map(parse_time).transpose()?;
            project(&ws, name, as_of)
        }
        Command::SetWatermark { name, watermark } => {
            let id = ws.resolve(name)?;
            let block = ws.set_watermark(&id, parse_time(watermark)?, now)?;
            let text = format!("{}: watermark set to {watermark} (block {})\n", ws.label(&id), block.sequence_number);
            Ok(Output::ok(block_value(&block), text))
        }
        Command::Push { name, repo } => {
            let id = ws.resolve(name)?;
            transfer(&ws, sync::push(&ws, &id, repo)?, "pushed")
        }
        Command::PullRemote { dataset, repo } => {
            let id = match DatasetId::parse(dataset) {
                Some(id) => id,
                None => ws.resolve(dataset)?,
            };
            transfer(&ws, sync::pull_remote(&ws, &id, repo, None)?, "pulled")
        }
        Command::Tail { name, n } => tail(&ws, name, *n),
    }
}

fn add(ws: &Workspace, path: &Path, now: Timestamp) -> Result<Output, CliError> {
    let m = manifest::load(path)?;
    let (id, outcome) = match &m {
        Manifest::Root { name, source, path } => {
            let r = ws.define_root(name, source.clone(), now)?;
            let abs = std::path::absolute(path).map_err(|source| CoordinatorError::Io { path: path.clone(), source })?;
            ws.set_source_path(&r.0, &abs)?;
            r
        }
        Manifest::Derivative { name, inputs, query, engine } => {
            let ids = inputs
                .iter()
                .map(|i| match ws.resolve(i) {
                    Err(CoordinatorError::UnknownDataset(_)) => Err(ManifestError::UnknownInputName(i.clone()).into()),
                    other => other.map_err(CliError::from),
                })
                .collect::<Result<Vec<_>, _>>()?;
            ws.define_derivative(name, ids, query, engine.clone(), now).map_err(|e| match e {
                CoordinatorError::Query(q) => {
                    CliError::Manifest(ManifestError::Invalid { path: "query".into(), message: q.to_string() })
                }
                other => other.into(),
            })?
        }
    };
    let outcome = match outcome {
        DefineOutcome::Created => "created",
        DefineOutcome::Updated => "updated",
        DefineOutcome::Unchanged => "unchanged",
    };
    let json = Value::map([
        ("name", Value::str(m.name())),
        ("dataset_id", Value::str(id.to_string())),
        ("outcome", Value::str(outcome)),
    ]);
    Ok(Output::ok(json, format!("{} {outcome} ({id})\n", m.name())))
}

fn ingest(ws: &Workspace, name: &str, source: Option<&Path>, now: Timestamp) -> Result<Output, CliError> {
    let id = ws.resolve(name)?;
    let label = ws.label(&id);
    let (json, text) = match ws.ingest_round(&id, source, now)? {
        IngestOutcome::Appended { block, records } => (
            Value::map([
                ("outcome", Value::str("appended")),
                ("records", Value::Int(records as i64)),
                ("sequence_number", Value::Int(block.sequence_number as i64)),
                ("watermark", Value::opt_timestamp(block.event.watermark().flatten())),
            ]),
            format!("{label}: appended {records} records (block {})\n", block.sequence_number),
        ),
        IngestOutcome::SourceUnchanged => {
            (Value::map([("outcome", Value::str("source_unchanged"))]), format!("{label}: source unchanged\n"))
        }
        IngestOutcome::NothingNew => {
            (Value::map([("outcome", Value::str("nothing_new"))]), format!("{label}: nothing new\n"))
        }
    };
    Ok(Output::ok(json, text))
}

fn pull(ws: &Workspace, name: &str, now: Timestamp) -> Result<Output, CliError> {
    let id = ws.resolve(name)?;
    let report = ws.pull(&id, now)?;
    let mut text = String::new();
    for (_, name, action) in &report.actions {
        let line = match action {
            PullAction::Ingested { records, sequence_number } => format!("ingested {records} records (block {sequence_number})"),
            PullAction::Transformed { records, sequence_number } => {
                format!("transformed, {records} records (block {sequence_number})")
            }
            PullAction::Restored { objects } => format!("restored {objects} objects"),
            PullAction::Failed(e) => format!("FAILED: {e}"),
            PullAction::Skipped => "skipped (input failed)".to_string(),
        };
        let _ = writeln!(text, "{name}: {line}");
    }
    if report.actions.is_empty() {
        text.push_str("up to date\n");
    }
    let code = if report.is_success() { OK } else { 1 };
    Ok(Output { json: report.to_value(), text, code })
}

fn block_value(block: &MetadataBlock) -> Value {
    let Value::Map(mut m) = block.to_value() else { unreachable!() };
    m.insert("block_hash".into(), Value::hash(&block.block_hash));
    Value::Map(m)
}

fn summary(event: &MetadataEvent) -> String {
    let range = |s: Option<&odf_core::SliceRef>| match s {
        Some(s) => format!("records [{}, {})", s.offset_start, s.offset_end),
        None => "no records".to_string(),
    };
    let wm = |w: &Option<Timestamp>| w.map_or("none".to_string(), |t| t.to_string());
    match event {
        MetadataEvent::Seed { dataset_kind, dataset_name } => format!("{} {dataset_name}", dataset_kind.name()),
        MetadataEvent::SetPollingSource(src) => {
            let cols: Vec<String> = src.schema.columns.iter().map(|c| format!("{} {}", c.name, c.ty)).collect();
            format!("{} ({})", src.format.name(), cols.join(", "))
        }
        MetadataEvent::SetTransform(t) => t.query.split_whitespace().collect::<Vec<_>>().join(" "),
        MetadataEvent::AddData { output_slice, output_watermark, .. } => {
            format!("{}, watermark {}", range(output_slice.as_ref()), wm(output_watermark))
        }
        MetadataEvent::ExecuteTransform { output_slice, output_watermark, late_records_ignored, .. } => {
            let mut s = format!("{}, watermark {}", range(output_slice.as_ref()), wm(output_watermark));
            if *late_records_ignored > 0 {
                let _ = write!(s, ", {late_records_ignored} late");
            }
            s
        }
        MetadataEvent::SetWatermark { new_watermark } => new_watermark.to_string(),
    }
}

fn log(ws: &Workspace, name: &str) -> Result<Output, CliError> {
    let id = ws.resolve(name)?;
    let chain = ws.chain(&id)?;
    let mut text = String::new();
    for b in chain.blocks() {
        let hash = b.block_hash.to_string();
        let _ = writeln!(
            text,
            "{:>4}  {}  {}  {:<16}  {}",
            b.sequence_number,
            &hash[..12],
            b.system_time,
            b.event.kind_name(),
            summary(&b.event)
        );
    }
    let json = Value::map([
        ("dataset_id", Value::str(id.to_string())),
        ("blocks", Value::Array(chain.blocks().iter().map(block_value).collect())),
    ]);
    Ok(Output::ok(json, text))
}

fn verify(ws: &Workspace, name: &str, integrity_only: bool) -> Result<Output, CliError> {
    let id = ws.resolve(name)?;
    let mut text = String::new();
    let mut ok = true;
    let mut integrity = Vec::new();
    for (d, report) in ws.verify_integrity(&id, true)? {
        let label = ws.label(&d);
        match &report.failure {
            None => {
                let _ = writeln!(text, "{label}: integrity ok ({} blocks, {} objects)", report.blocks_checked, report.objects_checked);
            }
            Some(f) => {
                ok = false;
                let _ = writeln!(text, "{label}: INTEGRITY FAILURE at {f}");
            }
        }
        integrity.push(Value::map([
            ("dataset_id", Value::str(d.to_string())),
            ("name", Value::str(label)),
            ("blocks_checked", Value::Int(report.blocks_checked as i64)),
            ("objects_checked", Value::Int(report.objects_checked as i64)),
            (
                "failure",
                match &report.failure {
                    None => Value::Null,
                    Some(f) => Value::map([
                        ("sequence_number", Value::Int(f.sequence_number as i64)),
                        ("block_hash", Value::opt_hash(&f.block_hash)),
                        ("message", Value::str(f.to_string())),
                    ]),
                },
            ),
        ]));
    }
    let mut reproducibility = Value::Null;
    let derivative = ws.chain(&id)?.state().kind == Some(DatasetKind::Derivative);
    if ok && !integrity_only && derivative {
        let report = ws.verify_reproducibility(&id)?;
        match &report.divergence {
            None => {
                let _ = writeln!(text, "{}: reproducible ({} transform blocks re-executed)", ws.label(&id), report.blocks_verified);
            }
            Some(d) => {
                ok = false;
                let _ = writeln!(text, "{}: DIVERGENCE at block seq {}: {}", ws.label(&id), d.sequence_number, d.message);
            }
        }
        reproducibility = report.to_value();
    }
    let json = Value::map([
        ("valid", Value::Bool(ok)),
        ("integrity", Value::Array(integrity)),
        ("reproducibility", reproducibility),
    ]);
    Ok(Output { json, text, code: if ok { OK } else { VERIFICATION_FAILED } })
}

fn lineage(ws: &Workspace, name: &str) -> Result<Output, CliError> {
    let id = ws.resolve(name)?;
    let l = ws.lineage(&id)?;
    let mut text = String::new();
    for n in &l.nodes {
        let inputs: Vec<String> =
            l.edges.iter().filter(|(_, c)| *c == n.dataset_id).map(|(i, _)| ws.label(i)).collect();
        let _ = write!(text, "{} ({})", n.name, n.kind.name());
        if !inputs.is_empty() {
            let _ = write!(text, " <- {}", inputs.join(", "));
        }
        text.push('\n');
    }
    Ok(Output::ok(l.to_value(), text))
}

fn render_trace(node: &odf_core::coordinator::ProvenanceNode, depth: usize, out: &mut String) {
    let offsets: Vec<String> = node.offsets.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "{}{} ({}) offsets [{}]", "  ".repeat(depth), node.name, node.kind.name(), offsets.join(", "));
    for c in &node.children {
        render_trace(c, depth + 1, out);
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn table(columns: &[String], rows: &[Vec<Value>]) -> String {
    let mut text = columns.join("\t");
    text.push('\n');
    for r in rows {
        text.push_str(&r.iter().map(cell).collect::<Vec<_>>().join("\t"));
        text.push('\n');
    }
    text
}

fn ref_value(r: &StableRef) -> Value {
    Value::map([
        ("dataset_id", Value::str(r.dataset_id.to_string())),
        ("as_of", Value::Timestamp(r.as_of)),
        ("head", Value::opt_hash(&r.head)),
        ("offset_bound", Value::Int(r.offset_bound as i64)),
    ])
}

/// Keyed roots project to their live rows; everything else lists records.
fn project(ws: &Workspace, name: &str, as_of: Option<Timestamp>) -> Result<Output, CliError> {
    let id = ws.resolve(name)?;
    let r = ws.resolve_as_of(&id, as_of.unwrap_or(Timestamp::MAX))?;
    let (schema, records) = ws.read_ref(&r)?;
    let columns: Vec<String> = schema.columns.iter().map(|c| c.name.clone()).collect();
    let chain = ws.chain(&id)?;
    let rows: Vec<Vec<Value>> = match &chain.state().polling_source {
        Some(src) => {
            let key = key_indices(&schema, src.merge.primary_key()).map_err(CoordinatorError::from)?;
            project_state(&records, &key, None).map_err(CoordinatorError::from)?.into_values().collect()
        }
        None => records.into_iter().map(|r| r.payload).collect(),
    };
    let json_rows = rows
        .iter()
        .map(|r| Value::map(columns.iter().cloned().zip(r.iter().cloned())))
        .collect();
    let mut json = ref_value(&r);
    if let Value::Map(m) = &mut json {
        m.insert("rows".into(), Value::Array(json_rows));
    }
    Ok(Output::ok(json, table(&columns, &rows)))
}

fn tail(ws: &Workspace, name: &str, n: usize) -> Result<Output, CliError> {
    let id = ws.resolve(name)?;
    let (schema, records) = ws.records(&id)?;
    let skip = records.len().saturating_sub(n);
    let records = &records[skip..];
    let mut columns = vec!["offset".to_string(), "system_time".to_string(), "event_time".to_string()];
    let observed = records.iter().any(|r| r.observed.is_some());
    if observed {
        columns.push("op".into());
    }
    columns.extend(schema.columns.iter().map(|c| c.name.clone()));
    let rows: Vec<Vec<Value>> = records
        .iter()
        .map(|r| {
            let mut row = vec![Value::Int(r.offset as i64), Value::Timestamp(r.system_time), Value::Timestamp(r.event_time)];
            if observed {
                row.push(r.observed.map_or(Value::Null, |o| Value::str(o.code())));
            }
            row.extend(r.payload.iter().cloned());
            row
        })
        .collect();
    let json = Value::Array(records.iter().map(|r| r.to_value(&schema)).collect());
    Ok(Output::ok(json, table(&columns, &rows)))
}

fn transfer(ws: &Workspace, r: TransferReport, verb: &str) -> Result<Output, CliError> {
    let json = Value::map([
        ("dataset_id", Value::str(r.dataset_id.to_string())),
        ("head", Value::hash(&r.head)),
        ("objects_transferred", Value::Int(r.objects_transferred as i64)),
        ("head_changed", Value::Bool(r.head_changed)),
    ]);
    let text = if r.head_changed {
        format!("{}: {verb} {} objects, head {}\n", ws.label(&r.dataset_id), r.objects_transferred, r.head)
    } else {
        format!("{}: already up to date\n", ws.label(&r.dataset_id))
    };
    Ok(Output::ok(json, text))
}
