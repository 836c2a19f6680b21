//! `airlock` — command-line surface for the data airlock control plane.
//!
//! Exit codes: 0 success, 1 operational error, 2 usage or configuration
//! error, 3 engine lock contention.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};

use airlock_core::access::AccessError;
use airlock_core::audit::{AuditAction, EventFilter};
use airlock_core::daemon::{ControlPlane, Daemon, DaemonError};
use airlock_core::domain::{Principal, Role};
use airlock_core::lock::{EngineLock, LockError};
use airlock_core::record::escape;
use airlock_core::sentinel::Finding;
use airlock_core::session::SessionSpec;
use airlock_core::transfer::{CycleReport, TransferDirection};
use airlock_core::{ChainStatus, Config, JobJournal};

#[derive(Parser)]
#[command(name = "airlock", version, about = "Secure data airlock control plane")]
struct Cli {
    /// Config file path; falls back to the AIRLOCK_CONFIG environment variable.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable output: one record per line, tab-separated
    /// field=value pairs.
    #[arg(long, global = true)]
    porcelain: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the polling daemon until terminated.
    Run,
    /// Run exactly one transfer cycle plus one sentinel pass, then exit.
    RunOnce {
        /// Restrict the cycle to one direction.
        #[arg(long, value_parser = parse_direction)]
        direction: Option<TransferDirection>,
    },
    /// Project administration.
    #[command(subcommand)]
    Project(ProjectCmd),
    /// Egress approval.
    #[command(subcommand)]
    Egress(EgressCmd),
    /// Audit log verification and queries.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Permission isolation auditing.
    #[command(subcommand)]
    Sentinel(SentinelCmd),
    /// Virtual session lifecycle.
    #[command(subcommand)]
    Session(SessionCmd),
    /// Show engine, journal, project, and session state.
    Status,
}

#[derive(Subcommand)]
enum ProjectCmd {
    /// Create a project; the acting principal becomes its first EcoAdmin.
    Add {
        project_id: String,
        #[arg(long)]
        name: String,
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        actor: String,
    },
    /// Set (or remove) one member's roles.
    Member {
        project_id: String,
        subject_id: String,
        /// Comma-separated roles: Member, DataSteward, EcoAdmin, SystemAdmin.
        /// An empty value removes the member.
        #[arg(long, default_value = "")]
        roles: String,
        /// Remove the member (same as --roles "").
        #[arg(long)]
        remove: bool,
        #[arg(long)]
        display_name: Option<String>,
        /// Attest the subject is a US person (required to hold roles).
        #[arg(long)]
        us_person: bool,
        #[arg(long)]
        actor: String,
    },
    /// Revoke all non-admin access and lock the data tree down.
    Freeze {
        project_id: String,
        #[arg(long)]
        actor: String,
    },
    /// Restore membership and tree modes from the freeze receipt.
    Restore {
        project_id: String,
        #[arg(long)]
        actor: String,
    },
}

#[derive(Subcommand)]
enum EgressCmd {
    /// Approve a pending egress job. Requires DataSteward on the project.
    Approve {
        job_id: String,
        #[arg(long)]
        actor: String,
    },
}

#[derive(Subcommand)]
enum AuditCmd {
    /// Recompute the whole hash chain.
    Verify,
    /// List events matching all given filters, in sequence order.
    Query(QueryArgs),
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    project: Option<String>,
    #[arg(long)]
    actor: Option<String>,
    #[arg(long)]
    action: Option<String>,
    /// RFC 3339 lower bound, inclusive.
    #[arg(long)]
    since: Option<String>,
    /// RFC 3339 upper bound, inclusive.
    #[arg(long)]
    until: Option<String>,
    /// key=value pair that must appear in the event detail.
    #[arg(long)]
    detail: Option<String>,
}

#[derive(Subcommand)]
enum SentinelCmd {
    /// Snapshot baselines for one project or all projects with policies.
    Baseline {
        #[arg(long)]
        project: Option<String>,
    },
    /// Audit every declared policy and diff frozen trees now.
    Check,
}

#[derive(Subcommand)]
enum SessionCmd {
    /// Open a stateless session from a golden image.
    Open {
        #[arg(long)]
        user: String,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = airlock_core::session::DEFAULT_MEMORY_MB)]
        memory_mb: u32,
        #[arg(long, default_value_t = airlock_core::session::DEFAULT_CPU_CORES)]
        cores: u32,
        /// Optional launch command template with {overlay}, {memory_mb},
        /// {cores} placeholders.
        #[arg(long)]
        exec: Option<String>,
    },
    /// Close a session and delete its overlay.
    Close { session_id: String },
    /// Force-close sessions whose owning process is gone.
    Reap,
}

fn parse_direction(s: &str) -> Result<TransferDirection, String> {
    s.parse()
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn request_shutdown(_sig: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    let handler = request_shutdown as *const () as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGTERM, handler);
        libc::signal(libc::SIGINT, handler);
    }
}

enum CliError {
    /// Bad invocation or configuration: exit 2.
    Usage(String),
    /// Another engine instance holds the lock: exit 3.
    LockHeld(String),
    /// Everything else: exit 1.
    Operational(String),
}

impl From<DaemonError> for CliError {
    fn from(e: DaemonError) -> Self {
        match e {
            DaemonError::Lock(LockError::Held { path, holder }) => CliError::LockHeld(format!(
                "engine lock at {} held by pid {}",
                path.display(),
                holder.map(|p| p.to_string()).unwrap_or_else(|| "?".into())
            )),
            other => CliError::Operational(other.to_string()),
        }
    }
}

impl From<AccessError> for CliError {
    fn from(e: AccessError) -> Self {
        CliError::Operational(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("airlock: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::LockHeld(msg)) => {
            eprintln!("airlock: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Operational(msg)) => {
            eprintln!("airlock: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli_path: &Option<PathBuf>) -> Result<Config, CliError> {
    let path = cli_path
        .clone()
        .or_else(|| std::env::var_os("AIRLOCK_CONFIG").map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Usage("no config: pass --config or set AIRLOCK_CONFIG".to_string())
        })?;
    Config::load(&path).map_err(|e| CliError::Usage(e.to_string()))
}

/// One porcelain record: tab-separated field=value pairs, values escaped.
fn porcelain_line(fields: &[(&str, String)]) {
    let line = fields
        .iter()
        .map(|(k, v)| format!("{k}={}", escape(v)))
        .collect::<Vec<_>>()
        .join("\t");
    println!("{line}");
}

fn print_report(report: &CycleReport, porcelain: bool) {
    if porcelain {
        porcelain_line(&[
            ("record", "cycle".into()),
            ("jobs", report.jobs.len().to_string()),
            ("files_promoted", report.files_promoted.to_string()),
            ("files_quarantined", report.files_quarantined.to_string()),
            ("pending_approval", report.pending_approval.len().to_string()),
            ("errors", report.errors.len().to_string()),
        ]);
        for (job_id, state) in &report.jobs {
            porcelain_line(&[
                ("record", "job".into()),
                ("job_id", job_id.clone()),
                ("state", state.to_string()),
            ]);
        }
        for job_id in &report.pending_approval {
            porcelain_line(&[("record", "pending".into()), ("job_id", job_id.clone())]);
        }
        for err in &report.errors {
            porcelain_line(&[("record", "error".into()), ("message", err.clone())]);
        }
    } else {
        println!(
            "cycle: {} job(s), {} promoted, {} quarantined, {} pending approval, {} error(s)",
            report.jobs.len(),
            report.files_promoted,
            report.files_quarantined,
            report.pending_approval.len(),
            report.errors.len()
        );
        for (job_id, state) in &report.jobs {
            println!("  job {job_id}: {state}");
        }
        for job_id in &report.pending_approval {
            println!("  job {job_id}: awaiting egress approval");
        }
        for err in &report.errors {
            println!("  error: {err}");
        }
    }
}

fn print_findings(findings: &[(String, Finding)], porcelain: bool) {
    for (project, f) in findings {
        if porcelain {
            porcelain_line(&[
                ("record", "finding".into()),
                ("project", project.clone()),
                ("severity", f.severity.to_string()),
                ("kind", f.kind.to_string()),
                ("path", f.path.to_string_lossy().into_owned()),
            ]);
        } else {
            println!(
                "finding [{}] {} {}: {}",
                f.severity,
                project,
                f.path.display(),
                f.kind
            );
        }
    }
}

/// Seq of the most recent event matching the filter; mutation commands use
/// this to report the audit record they produced.
fn last_seq(plane: &ControlPlane, filter: &EventFilter) -> Result<u64, CliError> {
    let events = plane
        .audit
        .query(filter)
        .map_err(|e| CliError::Operational(e.to_string()))?;
    events
        .last()
        .map(|e| e.seq)
        .ok_or_else(|| CliError::Operational("expected audit event missing".to_string()))
}

fn print_mutation(porcelain: bool, what: &str, seq: u64, extra: &[(&str, String)]) {
    if porcelain {
        let mut fields = vec![("record", what.to_string()), ("audit_seq", seq.to_string())];
        fields.extend(extra.iter().map(|(k, v)| (*k, v.clone())));
        porcelain_line(&fields);
    } else {
        let extras = extra
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        if extras.is_empty() {
            println!("{what}: audit seq {seq}");
        } else {
            println!("{what}: {extras} (audit seq {seq})");
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let porcelain = cli.porcelain;
    let config = load_config(&cli.config)?;
    match cli.command {
        Command::Run => {
            install_signal_handlers();
            let mut daemon = Daemon::open(config)?;
            daemon.run_loop(&SHUTDOWN)?;
            Ok(())
        }
        Command::RunOnce { direction } => {
            let mut daemon = Daemon::open(config)?;
            let directions: BTreeSet<TransferDirection> = match direction {
                Some(d) => [d].into_iter().collect(),
                None => Daemon::all_directions(),
            };
            let (report, findings) = daemon.run_once_for(&directions)?;
            print_report(&report, porcelain);
            print_findings(&findings, porcelain);
            Ok(())
        }
        Command::Project(cmd) => project_cmd(config, cmd, porcelain),
        Command::Egress(cmd) => egress_cmd(config, cmd, porcelain),
        Command::Audit(cmd) => audit_cmd(config, cmd, porcelain),
        Command::Sentinel(cmd) => sentinel_cmd(config, cmd, porcelain),
        Command::Session(cmd) => session_cmd(config, cmd, porcelain),
        Command::Status => status_cmd(config, porcelain),
    }
}

fn project_cmd(config: Config, cmd: ProjectCmd, porcelain: bool) -> Result<(), CliError> {
    let plane = ControlPlane::open(config)?;
    match cmd {
        ProjectCmd::Add {
            project_id,
            name,
            data_root,
            actor,
        } => {
            if !data_root.is_absolute() {
                return Err(CliError::Usage("--data-root must be absolute".into()));
            }
            plane
                .access
                .create_project(&actor, &project_id, &name, &data_root)?;
            let seq = last_seq(
                &plane,
                &EventFilter {
                    project_id: Some(project_id.clone()),
                    action: Some(AuditAction::MembershipChanged),
                    ..Default::default()
                },
            )?;
            print_mutation(porcelain, "project-added", seq, &[("project", project_id)]);
            Ok(())
        }
        ProjectCmd::Member {
            project_id,
            subject_id,
            roles,
            remove,
            display_name,
            us_person,
            actor,
        } => {
            let role_set: BTreeSet<Role> = if remove || roles.is_empty() {
                BTreeSet::new()
            } else {
                roles
                    .split(',')
                    .map(|r| r.trim().parse::<Role>())
                    .collect::<Result<_, _>>()
                    .map_err(CliError::Usage)?
            };
            let subject = Principal::new(
                subject_id.clone(),
                display_name.unwrap_or_else(|| subject_id.clone()),
                us_person,
            );
            plane
                .access
                .set_membership(&actor, &project_id, &subject, role_set)?;
            let seq = last_seq(
                &plane,
                &EventFilter {
                    project_id: Some(project_id.clone()),
                    action: Some(AuditAction::MembershipChanged),
                    ..Default::default()
                },
            )?;
            print_mutation(
                porcelain,
                "membership-changed",
                seq,
                &[("project", project_id), ("subject", subject_id)],
            );
            Ok(())
        }
        ProjectCmd::Freeze { project_id, actor } => {
            plane
                .access
                .freeze_project(&actor, &project_id, Some(&plane.broker))?;
            let seq = last_seq(
                &plane,
                &EventFilter {
                    project_id: Some(project_id.clone()),
                    action: Some(AuditAction::ProjectFrozen),
                    ..Default::default()
                },
            )?;
            print_mutation(porcelain, "project-frozen", seq, &[("project", project_id)]);
            Ok(())
        }
        ProjectCmd::Restore { project_id, actor } => {
            let receipt = plane.access.load_receipt(&project_id)?;
            plane.access.restore_project(&actor, &project_id, &receipt)?;
            let seq = last_seq(
                &plane,
                &EventFilter {
                    project_id: Some(project_id.clone()),
                    action: Some(AuditAction::ProjectRestored),
                    ..Default::default()
                },
            )?;
            print_mutation(porcelain, "project-restored", seq, &[("project", project_id)]);
            Ok(())
        }
    }
}

fn egress_cmd(config: Config, cmd: EgressCmd, porcelain: bool) -> Result<(), CliError> {
    match cmd {
        EgressCmd::Approve { job_id, actor } => {
            let plane = ControlPlane::open(config.clone())?;
            let journal = JobJournal::open(config.layout.journal_dir())
                .map_err(|e| CliError::Operational(e.to_string()))?;
            let job = journal
                .load(&job_id)
                .map_err(|e| CliError::Operational(e.to_string()))?;
            let decision = plane.access.authorize_egress(&actor, &job)?;
            let action = if decision.allowed {
                AuditAction::EgressAuthorized
            } else {
                AuditAction::EgressDenied
            };
            let seq = last_seq(
                &plane,
                &EventFilter {
                    action: Some(action),
                    detail: Some(("job_id".into(), job_id.clone())),
                    ..Default::default()
                },
            )?;
            print_mutation(
                porcelain,
                "egress-decision",
                seq,
                &[
                    ("job_id", job_id),
                    ("allowed", decision.allowed.to_string()),
                    ("reason", decision.reason.clone()),
                ],
            );
            if decision.allowed {
                Ok(())
            } else {
                Err(CliError::Operational(format!(
                    "egress denied: {}",
                    decision.reason
                )))
            }
        }
    }
}

fn audit_cmd(config: Config, cmd: AuditCmd, porcelain: bool) -> Result<(), CliError> {
    let plane = ControlPlane::open(config)?;
    match cmd {
        AuditCmd::Verify => {
            let status = plane
                .audit
                .verify_chain()
                .map_err(|e| CliError::Operational(e.to_string()))?;
            match status {
                ChainStatus::Valid { events } => {
                    if porcelain {
                        porcelain_line(&[
                            ("record", "chain".into()),
                            ("valid", "true".into()),
                            ("events", events.to_string()),
                        ]);
                    } else {
                        println!("audit chain valid: {events} event(s)");
                    }
                    Ok(())
                }
                ChainStatus::FirstBadSeq(seq) => {
                    if porcelain {
                        porcelain_line(&[
                            ("record", "chain".into()),
                            ("valid", "false".into()),
                            ("first_bad_seq", seq.to_string()),
                        ]);
                    } else {
                        println!("audit chain BROKEN at seq {seq}");
                    }
                    Err(CliError::Operational(format!(
                        "audit chain broken at seq {seq}"
                    )))
                }
            }
        }
        AuditCmd::Query(args) => {
            let parse_ts =
                |s: &Option<String>, key: &str| -> Result<Option<DateTime<Utc>>, CliError> {
                    match s {
                        None => Ok(None),
                        Some(raw) => DateTime::parse_from_rfc3339(raw)
                            .map(|t| Some(t.with_timezone(&Utc)))
                            .map_err(|e| CliError::Usage(format!("bad --{key}: {e}"))),
                    }
                };
            let action = match &args.action {
                None => None,
                Some(raw) => Some(raw.parse::<AuditAction>().map_err(CliError::Usage)?),
            };
            let detail = match &args.detail {
                None => None,
                Some(raw) => {
                    let (k, v) = raw
                        .split_once('=')
                        .ok_or_else(|| CliError::Usage("--detail expects key=value".into()))?;
                    Some((k.to_string(), v.to_string()))
                }
            };
            let filter = EventFilter {
                project_id: args.project.clone(),
                actor: args.actor.clone(),
                action,
                since: parse_ts(&args.since, "since")?,
                until: parse_ts(&args.until, "until")?,
                detail,
            };
            let events = plane
                .audit
                .query(&filter)
                .map_err(|e| CliError::Operational(e.to_string()))?;
            for ev in &events {
                if porcelain {
                    let mut fields = vec![
                        ("record", "event".to_string()),
                        ("seq", ev.seq.to_string()),
                        ("timestamp", ev.timestamp.to_rfc3339()),
                        ("actor", ev.actor.clone()),
                        ("project", ev.project_id.clone().unwrap_or_default()),
                        ("action", ev.action.to_string()),
                    ];
                    for (k, v) in &ev.detail {
                        fields.push(("detail", format!("{k}={v}")));
                    }
                    let line = fields
                        .iter()
                        .map(|(k, v)| format!("{k}={}", escape(v)))
                        .collect::<Vec<_>>()
                        .join("\t");
                    println!("{line}");
                } else {
                    let detail = ev
                        .detail
                        .iter()
                        .map(|(k, v)| format!("{k}={v}"))
                        .collect::<Vec<_>>()
                        .join(" ");
                    println!(
                        "#{} {} {} {} {} {}",
                        ev.seq,
                        ev.timestamp.to_rfc3339(),
                        ev.actor,
                        ev.project_id.as_deref().unwrap_or("-"),
                        ev.action,
                        detail
                    );
                }
            }
            if !porcelain {
                println!("{} event(s)", events.len());
            }
            Ok(())
        }
    }
}

fn sentinel_cmd(config: Config, cmd: SentinelCmd, porcelain: bool) -> Result<(), CliError> {
    let plane = ControlPlane::open(config)?;
    match cmd {
        SentinelCmd::Baseline { project } => {
            let targets: Vec<String> = match project {
                Some(p) => vec![p],
                None => plane
                    .access
                    .list_projects()?
                    .into_iter()
                    .map(|p| p.project_id)
                    .collect(),
            };
            for project_id in targets {
                let record = plane.access.load_project(&project_id)?;
                let baseline = plane
                    .sentinel
                    .snapshot_baseline(&project_id, &record.data_root)
                    .map_err(|e| CliError::Operational(e.to_string()))?;
                if porcelain {
                    porcelain_line(&[
                        ("record", "baseline".into()),
                        ("project", project_id.clone()),
                        ("entries", baseline.entries.len().to_string()),
                    ]);
                } else {
                    println!(
                        "baseline for {project_id}: {} entries",
                        baseline.entries.len()
                    );
                }
            }
            Ok(())
        }
        SentinelCmd::Check => {
            let findings = plane.sentinel_pass()?;
            print_findings(&findings, porcelain);
            if !porcelain {
                println!("{} finding(s)", findings.len());
            }
            Ok(())
        }
    }
}

fn session_cmd(config: Config, cmd: SessionCmd, porcelain: bool) -> Result<(), CliError> {
    let mut plane = ControlPlane::open(config)?;
    match cmd {
        SessionCmd::Open {
            user,
            image,
            memory_mb,
            cores,
            exec,
        } => {
            plane.broker.set_exec_hook(exec);
            let spec = SessionSpec::new(user, image)
                .memory_mb(memory_mb)
                .cpu_cores(cores);
            let handle = plane
                .broker
                .open_session(spec)
                .map_err(|e| CliError::Operational(e.to_string()))?;
            let seq = last_seq(
                &plane,
                &EventFilter {
                    action: Some(AuditAction::SessionOpened),
                    detail: Some(("session_id".into(), handle.session_id.clone())),
                    ..Default::default()
                },
            )?;
            print_mutation(
                porcelain,
                "session-opened",
                seq,
                &[
                    ("session_id", handle.session_id.clone()),
                    ("overlay", handle.overlay_path.to_string_lossy().into_owned()),
                    ("share", handle.share_path.to_string_lossy().into_owned()),
                ],
            );
            Ok(())
        }
        SessionCmd::Close { session_id } => {
            let handle = plane
                .broker
                .load_session(&session_id)
                .map_err(|e| CliError::Operational(e.to_string()))?;
            plane
                .broker
                .close_session(&handle)
                .map_err(|e| CliError::Operational(e.to_string()))?;
            let seq = last_seq(
                &plane,
                &EventFilter {
                    action: Some(AuditAction::SessionClosed),
                    detail: Some(("session_id".into(), session_id.clone())),
                    ..Default::default()
                },
            )?;
            print_mutation(porcelain, "session-closed", seq, &[("session_id", session_id)]);
            Ok(())
        }
        SessionCmd::Reap => {
            let reaped = plane
                .broker
                .reap_orphans()
                .map_err(|e| CliError::Operational(e.to_string()))?;
            if porcelain {
                porcelain_line(&[("record", "reap".into()), ("reaped", reaped.to_string())]);
            } else {
                println!("reaped {reaped} orphaned session(s)");
            }
            if reaped > 0 {
                let seq = last_seq(
                    &plane,
                    &EventFilter {
                        action: Some(AuditAction::SessionClosed),
                        ..Default::default()
                    },
                )?;
                print_mutation(porcelain, "sessions-reaped", seq, &[]);
            }
            Ok(())
        }
    }
}

fn status_cmd(config: Config, porcelain: bool) -> Result<(), CliError> {
    let plane = ControlPlane::open(config.clone())?;
    let lock_holder = EngineLock::holder(&config.layout.lock_path());
    let journal = JobJournal::open(config.layout.journal_dir())
        .map_err(|e| CliError::Operational(e.to_string()))?;
    let (jobs, corrupt) = journal
        .list()
        .map_err(|e| CliError::Operational(e.to_string()))?;
    let open_jobs: Vec<_> = jobs.iter().filter(|j| !j.state.is_terminal()).collect();
    let projects = plane.access.list_projects()?;
    let sessions = plane
        .broker
        .list_sessions()
        .map_err(|e| CliError::Operational(e.to_string()))?;
    let chain_len = plane.audit.len();

    if porcelain {
        porcelain_line(&[
            ("record", "engine".into()),
            (
                "lock_holder",
                lock_holder.map(|p| p.to_string()).unwrap_or_default(),
            ),
            ("audit_events", chain_len.to_string()),
            ("jobs_total", jobs.len().to_string()),
            ("jobs_open", open_jobs.len().to_string()),
            ("journal_corrupt", corrupt.len().to_string()),
        ]);
        for job in &open_jobs {
            porcelain_line(&[
                ("record", "open-job".into()),
                ("job_id", job.job_id.clone()),
                ("user", job.user.clone()),
                ("direction", job.direction.to_string()),
                ("state", job.state.to_string()),
            ]);
        }
        for p in &projects {
            porcelain_line(&[
                ("record", "project".into()),
                ("project_id", p.project_id.clone()),
                ("state", p.access_state.to_string()),
                ("members", p.members.len().to_string()),
            ]);
        }
        for s in &sessions {
            porcelain_line(&[
                ("record", "session".into()),
                ("session_id", s.session_id.clone()),
                ("user", s.spec.user.clone()),
                ("state", s.state.to_string()),
            ]);
        }
    } else {
        match lock_holder {
            Some(pid) => println!("engine lock: held by pid {pid}"),
            None => println!("engine lock: free"),
        }
        println!("audit events: {chain_len}");
        println!(
            "journal: {} job(s), {} open, {} corrupt",
            jobs.len(),
            open_jobs.len(),
            corrupt.len()
        );
        for job in &open_jobs {
            println!(
                "  open job {} user={} direction={} state={}",
                job.job_id, job.user, job.direction, job.state
            );
        }
        println!("projects: {}", projects.len());
        for p in &projects {
            println!(
                "  {} [{}] {} member(s)",
                p.project_id,
                p.access_state,
                p.members.len()
            );
        }
        println!("sessions: {}", sessions.len());
        for s in &sessions {
            println!("  {} user={} state={}", s.session_id, s.spec.user, s.state);
        }
    }
    Ok(())
}
