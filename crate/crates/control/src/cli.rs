//! Command-line client. Subcommands open the configured store directly and
//! print exactly what the matching API call would return.

use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::config::load_config;
use crate::error::ApiError;
use crate::ops::{change_ref, execute, parse, parse_level, parse_status, query_for, Request, DEFAULT_ACTOR, NO_CHANGE};

#[derive(Debug, Parser)]
#[command(name = "evodw", about = "Evolvable data warehouse: service and client")]
struct Cli {
    /// Config file.
    #[arg(long, global = true, default_value = "evodw.json")]
    config: PathBuf,
    /// Name recorded on proposals, applies and rejections.
    #[arg(long, global = true, default_value = DEFAULT_ACTOR)]
    actor: String,
    #[command(subcommand)]
    command: Command,
}

/// A JSON document given inline, from a file, or on stdin.
#[derive(Debug, Args)]
struct Input {
    /// Path to a JSON file; `-` reads stdin.
    #[arg(long, conflicts_with = "json")]
    file: Option<PathBuf>,
    /// Inline JSON.
    #[arg(long)]
    json: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve,
    #[command(subcommand)]
    Schema(SchemaCmd),
    #[command(subcommand)]
    Source(SourceCmd),
    #[command(subcommand)]
    Mapping(MappingCmd),
    #[command(subcommand)]
    Rule(RuleCmd),
    /// Push one raw batch through a source wrapper.
    Ingest {
        source: String,
        /// Batch file; stdin when absent.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Advance the scheduler one tick.
    Tick,
    #[command(subcommand)]
    Level(LevelCmd),
    #[command(subcommand)]
    Changes(ChangesCmd),
    #[command(subcommand)]
    Options(OptionsCmd),
    /// Apply a potential change.
    Apply {
        /// Change id, or NONE for a developer-initiated option.
        #[arg(long, default_value = NO_CHANGE)]
        change: String,
        #[arg(long)]
        option: String,
        /// Option parameter as key=value; repeatable.
        #[arg(long = "param", value_parser = key_value)]
        params: Vec<(String, String)>,
    },
    /// Reject a potential change.
    Reject {
        #[arg(long)]
        option: String,
    },
    #[command(subcommand)]
    Cube(CubeCmd),
    /// Answer a query against a cube.
    Query {
        cube: String,
        #[command(flatten)]
        input: Input,
    },
    /// Print the metadata document.
    Export {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace the metadata with a document.
    Import {
        #[arg(long)]
        file: PathBuf,
    },
    /// Applied and rejected potential changes.
    History,
    /// Integrity check of the stored metadata.
    Validate,
}

#[derive(Debug, Subcommand)]
enum SchemaCmd {
    Put(Input),
    Get {
        dataset: String,
        #[arg(long)]
        version: Option<u32>,
    },
}

#[derive(Debug, Subcommand)]
enum SourceCmd {
    Add(Input),
    List,
}

#[derive(Debug, Subcommand)]
enum MappingCmd {
    Put(Input),
    List,
}

#[derive(Debug, Subcommand)]
enum RuleCmd {
    Add(Input),
}

#[derive(Debug, Subcommand)]
enum LevelCmd {
    /// Datasets at a level.
    Datasets { level: String },
    /// Records of one dataset.
    Records { level: String, dataset: String },
}

#[derive(Debug, Subcommand)]
enum ChangesCmd {
    List {
        #[arg(long)]
        status: Option<String>,
    },
    Propose {
        change: String,
    },
}

#[derive(Debug, Subcommand)]
enum OptionsCmd {
    /// Potential changes generated for a change.
    List {
        #[arg(long)]
        change: String,
    },
    Preview {
        option: String,
    },
    /// Start a developer-initiated change.
    Initiate {
        #[arg(long)]
        kind: String,
        #[arg(long = "param", value_parser = key_value)]
        params: Vec<(String, String)>,
    },
}

#[derive(Debug, Subcommand)]
enum CubeCmd {
    Create(Input),
    Materialize {
        cube: String,
    },
    /// Roll up or drill down a query along one attribute.
    Navigate {
        cube: String,
        #[command(flatten)]
        input: Input,
    },
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Exit status and the two output streams of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

fn read_all(path: Option<&Path>, stdin: &mut dyn Read) -> Result<Vec<u8>, ApiError> {
    let mut buf = Vec::new();
    match path {
        Some(p) if p != Path::new("-") => {
            buf = std::fs::read(p).map_err(|e| ApiError::new("IO_ERROR", format!("{}: {e}", p.display())))?
        }
        _ => {
            stdin.read_to_end(&mut buf).map_err(|e| ApiError::new("IO_ERROR", e.to_string()))?;
        }
    }
    Ok(buf)
}

impl Input {
    fn bytes(&self, stdin: &mut dyn Read) -> Result<Vec<u8>, ApiError> {
        match &self.json {
            Some(j) => Ok(j.clone().into_bytes()),
            None => read_all(self.file.as_deref(), stdin),
        }
    }
}

fn with_params(params: Vec<(String, String)>, mut extra: Map<String, Value>) -> Vec<u8> {
    let p: Map<String, Value> = params.into_iter().map(|(k, v)| (k, Value::String(v))).collect();
    extra.insert("parameters".into(), Value::Object(p));
    Value::Object(extra).to_string().into_bytes()
}

fn request(cmd: Command, actor: &str, stdin: &mut dyn Read) -> Result<Request, ApiError> {
    let actor_obj = || {
        let mut m = Map::new();
        m.insert("actor".into(), json!(actor));
        m
    };
    Ok(match cmd {
        Command::Serve => unreachable!("handled by the caller"),
        Command::Schema(SchemaCmd::Put(i)) => Request::PutSchema(parse(&i.bytes(stdin)?)?),
        Command::Schema(SchemaCmd::Get { dataset, version }) => Request::GetSchema { dataset_id: dataset, version },
        Command::Source(SourceCmd::Add(i)) => Request::RegisterSource(parse(&i.bytes(stdin)?)?),
        Command::Source(SourceCmd::List) => Request::ListSources,
        Command::Mapping(MappingCmd::Put(i)) => Request::PutMapping(parse(&i.bytes(stdin)?)?),
        Command::Mapping(MappingCmd::List) => Request::ListMappings,
        Command::Rule(RuleCmd::Add(i)) => Request::PutRule(parse(&i.bytes(stdin)?)?),
        Command::Ingest { source, file } => {
            Request::Ingest { source_id: source, body: read_all(file.as_deref(), stdin)? }
        }
        Command::Tick => Request::Tick,
        Command::Level(LevelCmd::Datasets { level }) => Request::LevelDatasets(parse_level(&level)?),
        Command::Level(LevelCmd::Records { level, dataset }) => {
            Request::Records { level: parse_level(&level)?, dataset_id: dataset }
        }
        Command::Changes(ChangesCmd::List { status }) => {
            Request::Changes(status.filter(|s| !s.is_empty()).map(|s| parse_status(&s)).transpose()?)
        }
        Command::Changes(ChangesCmd::Propose { change }) => {
            Request::Propose { change_id: change, actor: actor.to_string() }
        }
        Command::Options(OptionsCmd::List { change }) => Request::Options(change),
        Command::Options(OptionsCmd::Preview { option }) => Request::Preview(option),
        Command::Options(OptionsCmd::Initiate { kind, params }) => {
            let mut m = actor_obj();
            m.insert("option_kind".into(), json!(kind));
            Request::Initiate(parse(&with_params(params, m))?)
        }
        Command::Apply { change, option, params } => Request::Apply {
            change_id: change_ref(&change),
            pc_id: option,
            body: parse(&with_params(params, actor_obj()))?,
        },
        Command::Reject { option } => Request::Reject { pc_id: option, actor: actor.to_string() },
        Command::Cube(CubeCmd::Create(i)) => Request::CreateCube(parse(&i.bytes(stdin)?)?),
        Command::Cube(CubeCmd::Materialize { cube }) => Request::Materialize(cube),
        Command::Cube(CubeCmd::Navigate { cube, input }) => {
            let mut n: crate::ops::Navigation = parse(&input.bytes(stdin)?)?;
            n.query = query_for(&cube, n.query)?;
            Request::Navigate(n)
        }
        Command::Query { cube, input } => Request::Query(query_for(&cube, parse(&input.bytes(stdin)?)?)?),
        Command::Export { .. } => Request::Export,
        Command::Import { file } => {
            let bytes = read_all(Some(&file), stdin)?;
            Request::Import(String::from_utf8(bytes).map_err(ApiError::malformed)?)
        }
        Command::History => Request::History,
        Command::Validate => Request::Validate,
    })
}

fn failure(e: &ApiError) -> CliOutput {
    CliOutput { code: 1, stdout: format!("{}\n", e.body()), stderr: String::new() }
}

/// Runs one invocation. `args` includes the program name.
pub fn run_cli<I, T>(args: I, stdin: &mut dyn Read) -> CliOutput
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.exit_code() {
                0 => CliOutput { code: 0, stdout: text, stderr: String::new() },
                _ => CliOutput { code: 2, stdout: String::new(), stderr: text },
            };
        }
    };
    let config = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => return failure(&e),
    };
    if let Command::Serve = cli.command {
        let served = tokio::runtime::Runtime::new()
            .map_err(|e| ApiError::new("IO_ERROR", e.to_string()))
            .and_then(|rt| rt.block_on(crate::api::serve(&config)));
        return match served {
            Ok(()) => CliOutput { code: 0, stdout: String::new(), stderr: String::new() },
            Err(e) => failure(&e),
        };
    }
    let out_file = match &cli.command {
        Command::Export { out } => out.clone(),
        _ => None,
    };
    let result = config.open().and_then(|engine| {
        let req = request(cli.command, &cli.actor, stdin)?;
        execute(&engine, req)
    });
    match result {
        Ok(body) => match out_file {
            Some(p) => match std::fs::write(&p, &body) {
                Ok(()) => CliOutput { code: 0, stdout: String::new(), stderr: String::new() },
                Err(e) => failure(&ApiError::new("IO_ERROR", format!("{}: {e}", p.display()))),
            },
            None => CliOutput { code: 0, stdout: format!("{body}\n"), stderr: String::new() },
        },
        Err(e) => failure(&e),
    }
}
