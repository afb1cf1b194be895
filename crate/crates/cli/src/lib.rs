//! Command-line front end for a single-directory deployment.
//!
//! Every subcommand opens the deployment under `--home`, runs one agent
//! operation and writes the changed state back. [`execute`] returns the text to
//! print; the binary maps a [`CliError`] onto its stable exit code.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sovereign_ehr::agents::AgentError;
use sovereign_ehr::audit::AuditError;
use sovereign_ehr::{AbeError, CasError, ErrorCode, LedgerError};

mod commands;
pub mod home;
pub mod relay;
pub mod scenario;

pub use home::{Home, Wallet};
pub use scenario::{run_scenario, ScenarioReport, Step};

#[derive(Debug)]
pub struct CliError {
    pub code: ErrorCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> CliError {
        CliError { code, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

macro_rules! coded {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::new(e.code(), e.to_string())
            }
        })*
    };
}

coded!(AgentError, AuditError, AbeError, CasError, LedgerError);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::new(ErrorCode::Io, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::new(ErrorCode::Malformed, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "sehr", version, about = "Consent-gated health record exchange over a hash-chained ledger")]
pub struct Cli {
    /// Deployment directory.
    #[arg(long, global = true, default_value = ".sehr")]
    pub home: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Provision a new deployment: ledger, object store, authority, hospital and emergency server.
    Init {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "st-mary")]
        hospital: String,
        /// First timestamp of the deterministic clock.
        #[arg(long, default_value_t = 1_700_000_000)]
        start: u64,
        /// Use wall-clock time instead of the deterministic clock.
        #[arg(long)]
        system_clock: bool,
    },
    /// Create a patient wallet with a registry credential.
    RegisterPatient { name: String },
    /// Create a doctor wallet licensed by the hospital.
    RegisterDoctor {
        name: String,
        /// Comma-separated `kind:value` attributes.
        #[arg(long, value_delimiter = ',', required = true)]
        attrs: Vec<String>,
    },
    /// Run the admission handshake and obtain the patient's attribute key.
    Admit { patient: String },
    /// Encrypt and store a record for an admitted patient.
    Store { patient: String, file: PathBuf },
    /// Ask the record's owner for access.
    RequestAccess {
        doctor: String,
        cid: String,
        /// Attributes to request; defaults to all the doctor holds.
        #[arg(long, value_delimiter = ',')]
        attrs: Vec<String>,
        #[arg(long, default_value = "treatment")]
        purpose: String,
    },
    /// Answer a pending consent request.
    Consent(ConsentArgs),
    /// Remove attributes from a record's policy and rotate its key.
    Revoke {
        patient: String,
        cid: String,
        #[arg(long = "attr", required = true)]
        attrs: Vec<String>,
    },
    /// Decrypt a record as a doctor or as its owner.
    Read {
        actor: String,
        cid: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Open a previously fetched envelope version instead of the latest.
        #[arg(long)]
        version: Option<u64>,
    },
    /// Override consent through the emergency server.
    Emergency {
        doctor: String,
        cid: String,
        #[arg(long)]
        why: String,
    },
    /// Accountability reports.
    Audit {
        #[command(subcommand)]
        report: AuditCommand,
    },
    /// Ledger maintenance.
    Ledger {
        #[command(subcommand)]
        action: LedgerCommand,
    },
    /// Execute a scenario file into a fresh deployment.
    RunScenario {
        file: PathBuf,
        /// Append each step's outcome to this file as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stream the transcript over TCP, or receive one.
    Relay(RelayArgs),
}

#[derive(Debug, Args)]
pub struct ConsentArgs {
    pub patient: String,
    pub request_id: String,
    #[arg(long, conflicts_with = "deny", required_unless_present = "deny")]
    pub grant: bool,
    #[arg(long)]
    pub deny: bool,
    /// Grant only these of the requested attributes.
    #[arg(long, value_delimiter = ',', requires = "grant")]
    pub attrs: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RelayArgs {
    /// Address to accept one connection on; received messages are printed.
    #[arg(long, conflicts_with = "connect", required_unless_present = "connect")]
    pub listen: Option<String>,
    /// Address to send the deployment's transcript to.
    #[arg(long)]
    pub connect: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Policy history of one record.
    Consent {
        cid: String,
        #[arg(long)]
        json: bool,
    },
    /// Emergency overrides, optionally filtered.
    Emergency {
        #[arg(long, conflicts_with = "cid")]
        did: Option<String>,
        #[arg(long)]
        cid: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Chain verification plus anchor/store consistency.
    Integrity {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum LedgerCommand {
    /// Re-verify the persisted chain.
    Verify,
}

/// What a command prints, plus its single result value (a CID, a request
/// id, a version) for scenario variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub text: String,
    pub value: String,
}

impl Output {
    pub fn new(text: String, value: String) -> Output {
        Output { text, value }
    }
}

pub fn execute(cli: Cli) -> Result<Output, CliError> {
    commands::dispatch(cli)
}

/// Parses `argv` (without the program name) and runs it.
pub fn execute_args<I, S>(args: I) -> Result<Output, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("sehr")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::new(ErrorCode::Usage, e.to_string()))?;
    execute(cli)
}
