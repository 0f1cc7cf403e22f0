//! The `meshguard` command line.
//!
//! Exit status: 0 on success, 1 when something fails at runtime (a socket
//! that won't bind, a remote call that fails), 2 for usage and
//! configuration errors.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use clap::{Args, Parser, Subcommand};
use meshguard::gateway::admin::DeployPayload;
use meshguard::gateway::{Gateway, GatewayService, ADMIN_API};
use meshguard::interceptor::{Completion, Location};
use meshguard::model::{EnvelopeKind, MessageEnvelope};
use meshguard::registry::wire::{self, RemoteRegistry};
use meshguard::registry::Registry;
use meshguard::sim::{run_scenario, Scenario};
use meshguard::time::{Clock, SystemClock};
use meshguard::transport::{Server, SharedHandler, SocketForwarder};
use serde_json::{json, Value};

use config::{
    ConfigDocument, ConfigError, DEFAULT_GATEWAY_LISTEN, DEFAULT_PROXY_LISTEN,
    DEFAULT_REGISTRY_LISTEN,
};

const REMOTE_TIMEOUT_MS: u64 = 5_000;

#[derive(Parser, Debug)]
#[command(name = "meshguard", version, about = "Circuit breakers, discovery and an API gateway for service meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Service registry
    #[command(subcommand)]
    Registry(RegistryCmd),
    /// Breaker-guarded reverse proxy with fixed routes
    #[command(subcommand)]
    Proxy(ProxyCmd),
    /// API gateway with a runtime control plane
    #[command(subcommand)]
    Gateway(GatewayCmd),
    /// Deterministic simulation
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Args, Debug)]
struct ServeOpts {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum RegistryCmd {
    /// Serve a registry over a socket.
    Serve(ServeOpts),
    /// Print the live locations of a service, one per line.
    Lookup {
        service: String,
        #[arg(long, value_name = "ADDR", default_value = DEFAULT_REGISTRY_LISTEN)]
        registry: String,
    },
    /// Publish one instance of a service.
    Register {
        service: String,
        #[arg(long)]
        instance: String,
        #[arg(long, value_name = "HOST:PORT")]
        location: String,
        #[arg(long, value_name = "MS")]
        ttl: Option<u64>,
        #[arg(long, value_name = "ADDR", default_value = DEFAULT_REGISTRY_LISTEN)]
        registry: String,
    },
}

#[derive(Subcommand, Debug)]
enum ProxyCmd {
    /// Serve a proxy. Requests pick their route by `api`.
    Serve {
        #[command(flatten)]
        opts: ServeOpts,
        /// Route NAME to the service at ADDR; repeatable.
        #[arg(long = "route", value_name = "NAME=ADDR")]
        routes: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct GatewayAddr {
    #[arg(long, value_name = "ADDR", default_value = DEFAULT_GATEWAY_LISTEN)]
    gateway: String,
}

#[derive(Subcommand, Debug)]
enum GatewayCmd {
    /// Serve a gateway.
    Serve {
        #[command(flatten)]
        opts: ServeOpts,
        /// Registry used to resolve routes that name a service.
        #[arg(long, value_name = "ADDR")]
        registry: Option<String>,
    },
    /// Publish an API on a running gateway.
    Deploy {
        #[command(flatten)]
        at: GatewayAddr,
        #[arg(long)]
        api: String,
        /// Fixed backend address.
        #[arg(long, value_name = "ADDR", conflicts_with = "service", required_unless_present = "service")]
        target: Option<String>,
        /// Service resolved through the gateway's registry.
        #[arg(long)]
        service: Option<String>,
        /// Comma-separated operations the API accepts (default: any).
        #[arg(long, value_delimiter = ',')]
        operations: Option<Vec<String>>,
    },
    /// Remove an API from a running gateway.
    Undeploy {
        #[command(flatten)]
        at: GatewayAddr,
        #[arg(long)]
        api: String,
    },
    /// List the APIs of a running gateway.
    List {
        #[command(flatten)]
        at: GatewayAddr,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ScenarioSource {
    /// File holding a scenario at top level.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Configuration file with a `[scenario]` section.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum SimCmd {
    /// Run a scenario and print its report.
    Run {
        #[command(flatten)]
        source: ScenarioSource,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print a human-readable summary instead of the JSON report.
        #[arg(long)]
        table: bool,
        #[arg(long)]
        print_config: bool,
    },
    /// Check a scenario without running it.
    Validate {
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long)]
        print_config: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(ConfigError),
    Runtime(String),
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) | Failure::Config(_) => 2,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
            Failure::Config(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn emit(out: &mut dyn Write, text: &str) -> Outcome {
    out.write_all(text.as_bytes()).map_err(runtime)?;
    if !text.ends_with('\n') {
        out.write_all(b"\n").map_err(runtime)?;
    }
    out.flush().map_err(runtime)
}

/// Parses `args` (program name first) and runs the command, writing to
/// `out` and `err`. Returns the process exit status.
pub fn run_command<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    2
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {f}");
            f.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::Registry(cmd) => registry(cmd, out),
        Command::Proxy(ProxyCmd::Serve { opts, routes }) => proxy_serve(opts, routes, out),
        Command::Gateway(cmd) => gateway(cmd, out),
        Command::Sim(cmd) => sim(cmd, out),
    }
}

fn load(path: Option<&Path>) -> Result<ConfigDocument, Failure> {
    match path {
        Some(p) => Ok(config::parse_config(p)?),
        None => Ok(ConfigDocument::default().resolve()),
    }
}

fn print_config<T: serde::Serialize>(doc: &T, out: &mut dyn Write) -> Outcome {
    emit(out, &config::print(doc).map_err(runtime)?)
}

fn serve(addr: &str, handler: SharedHandler, what: &str, out: &mut dyn Write) -> Outcome {
    let server = Server::bind(addr, handler).map_err(|e| runtime(format!("cannot listen on {addr}: {e}")))?;
    emit(out, &format!("{what} listening on {}", server.local_addr()))?;
    server.wait();
    Ok(())
}

fn registry(cmd: RegistryCmd, out: &mut dyn Write) -> Outcome {
    match cmd {
        RegistryCmd::Serve(opts) => {
            let mut doc = load(opts.config.as_deref())?;
            let section = doc.registry.get_or_insert_with(Default::default);
            if let Some(l) = opts.listen {
                section.listen = Some(l);
            }
            if opts.print_config {
                return print_config(&doc, out);
            }
            let section = doc.registry.expect("inserted above");
            let addr = section.listen.unwrap_or_else(|| DEFAULT_REGISTRY_LISTEN.into());
            let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
            let handler = wire::handler(Arc::new(RwLock::new(Registry::new())), clock, section.ttl_ms);
            serve(&addr, handler, "registry", out)
        }
        RegistryCmd::Lookup { service, registry } => {
            let locations = RemoteRegistry::new(registry).try_lookup(&service).map_err(runtime)?;
            let text: String = locations.iter().map(|l| format!("{l}\n")).collect();
            out.write_all(text.as_bytes()).map_err(runtime)
        }
        RegistryCmd::Register {
            service,
            instance,
            location,
            ttl,
            registry,
        } => {
            let location = Location::parse(&location).map_err(Failure::Usage)?;
            RemoteRegistry::new(registry)
                .register(&service, &instance, location, ttl)
                .map_err(runtime)?;
            emit(out, &format!("registered {service}/{instance}"))
        }
    }
}

fn build_gateway(doc: &ConfigDocument, extra: Vec<DeployPayload>, clock: &dyn Clock) -> Result<Gateway, Failure> {
    let section = doc.gateway.clone().unwrap_or_default();
    let mut gw = Gateway::with_client_cap(doc.breaker_params(), section.client_breaker_cap);
    for route in section.routes.into_iter().chain(extra) {
        let api = route.api.clone();
        let redirection = route
            .into_redirection(clock.now())
            .map_err(|e| Failure::Usage(format!("route {api}: {e}")))?;
        gw.deploy(redirection)
            .map_err(|e| Failure::Usage(format!("route {api}: {e}")))?;
    }
    Ok(gw)
}

fn proxy_serve(opts: ServeOpts, routes: Vec<String>, out: &mut dyn Write) -> Outcome {
    let mut doc = load(opts.config.as_deref())?;
    let mut extra = Vec::new();
    for r in routes {
        let (api, addr) = r
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--route expects NAME=ADDR, got `{r}`")))?;
        let target = Location::parse(addr).map_err(|e| Failure::Usage(format!("--route {r}: {e}")))?;
        extra.push(DeployPayload {
            api: api.to_string(),
            target: Some(target),
            service: None,
            operations: None,
            breaker: None,
        });
    }
    let section = doc.gateway.get_or_insert_with(Default::default);
    if let Some(l) = opts.listen {
        section.listen = Some(l);
    }
    if opts.print_config {
        section.routes.extend(extra);
        return print_config(&doc, out);
    }
    let clock = Arc::new(SystemClock::new());
    let gw = build_gateway(&doc, extra, clock.as_ref())?;
    let addr = doc
        .gateway
        .and_then(|g| g.listen)
        .unwrap_or_else(|| DEFAULT_PROXY_LISTEN.into());
    let service = Arc::new(GatewayService::new(gw, clock).without_admin());
    serve(&addr, service.into_handler(), "proxy", out)
}

/// Sends one control-plane request and returns the reply payload.
fn admin_call(addr: &str, op: &str, payload: Value) -> Result<Value, Failure> {
    let req = MessageEnvelope::request("cli", op, payload).with_api(ADMIN_API);
    match SocketForwarder::new().call(addr, &req, REMOTE_TIMEOUT_MS) {
        Completion::Reply(reply) if reply.kind == EnvelopeKind::Response => Ok(reply.payload),
        Completion::Reply(reply) => {
            let f = reply.fault.unwrap_or_else(|| meshguard::model::FaultInfo::transport("malformed reply"));
            Err(runtime(format!("{}: {}", f.name, f.detail)))
        }
        Completion::TransportError(e) => Err(runtime(format!("gateway at {addr}: {e}"))),
        Completion::DeadlineExpired => Err(runtime(format!("gateway at {addr} did not answer"))),
    }
}

fn gateway(cmd: GatewayCmd, out: &mut dyn Write) -> Outcome {
    match cmd {
        GatewayCmd::Serve { opts, registry } => {
            let mut doc = load(opts.config.as_deref())?;
            let section = doc.gateway.get_or_insert_with(Default::default);
            if let Some(l) = opts.listen {
                section.listen = Some(l);
            }
            if let Some(r) = registry {
                section.registry = Some(r);
            }
            if opts.print_config {
                return print_config(&doc, out);
            }
            let clock = Arc::new(SystemClock::new());
            let gw = build_gateway(&doc, Vec::new(), clock.as_ref())?;
            let section = doc.gateway.expect("inserted above");
            let mut service = GatewayService::new(gw, clock);
            if let Some(r) = section.registry {
                service = service.with_registry(Arc::new(RemoteRegistry::new(r)));
            }
            let addr = section.listen.unwrap_or_else(|| DEFAULT_GATEWAY_LISTEN.into());
            serve(&addr, Arc::new(service).into_handler(), "gateway", out)
        }
        GatewayCmd::Deploy {
            at,
            api,
            target,
            service,
            operations,
        } => {
            let target = target
                .map(|t| Location::parse(&t))
                .transpose()
                .map_err(Failure::Usage)?;
            let payload = DeployPayload {
                api: api.clone(),
                target,
                service,
                operations,
                breaker: None,
            };
            admin_call(&at.gateway, "deploy", serde_json::to_value(payload).map_err(runtime)?)?;
            emit(out, &format!("deployed {api}"))
        }
        GatewayCmd::Undeploy { at, api } => {
            admin_call(&at.gateway, "undeploy", json!({ "api": api }))?;
            emit(out, &format!("undeployed {api}"))
        }
        GatewayCmd::List { at } => {
            let reply = admin_call(&at.gateway, "list", Value::Null)?;
            emit(out, &serde_json::to_string_pretty(&reply).map_err(runtime)?)
        }
    }
}

enum Loaded {
    Bare(Scenario),
    Document(ConfigDocument),
}

impl Loaded {
    fn scenario(&self) -> Result<&Scenario, Failure> {
        match self {
            Loaded::Bare(s) => Ok(s),
            Loaded::Document(d) => d
                .scenario
                .as_ref()
                .ok_or_else(|| Failure::Usage("configuration has no [scenario] section".into())),
        }
    }

    fn print(&self, out: &mut dyn Write) -> Outcome {
        match self {
            Loaded::Bare(s) => print_config(s, out),
            Loaded::Document(d) => print_config(d, out),
        }
    }
}

fn load_scenario(source: ScenarioSource) -> Result<Loaded, Failure> {
    match (source.scenario, source.config) {
        (Some(p), _) => Ok(Loaded::Bare(config::parse_scenario(&p)?)),
        (None, Some(p)) => Ok(Loaded::Document(config::parse_config(&p)?)),
        (None, None) => Err(Failure::Usage("one of --scenario or --config is required".into())),
    }
}

fn sim(cmd: SimCmd, out: &mut dyn Write) -> Outcome {
    match cmd {
        SimCmd::Run {
            source,
            seed,
            table,
            print_config,
        } => {
            let loaded = load_scenario(source)?;
            if print_config {
                return loaded.print(out);
            }
            let mut scenario = loaded.scenario()?.clone();
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let report = run_scenario(&scenario).map_err(|e| Failure::Usage(format!("scenario: {e}")))?;
            if table {
                emit(out, &report.render_table())
            } else {
                emit(out, &report.to_json())
            }
        }
        SimCmd::Validate {
            source,
            print_config,
        } => {
            let loaded = load_scenario(source)?;
            loaded.scenario()?;
            if print_config {
                return loaded.print(out);
            }
            emit(out, "ok")
        }
    }
}
