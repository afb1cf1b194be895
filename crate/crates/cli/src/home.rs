//! The deployment directory: ledger, object store, standing agents and wallets.
//!
//! ```text
//! <home>/ledger.jsonl       hash chain, one block per line
//! <home>/cas/               content-addressed objects
//! <home>/state.json         authority, registry, hospital, emergency server, clock, RNG counter
//! <home>/wallets/<name>.json
//! <home>/transcript.jsonl   every agent message, one per line
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sovereign_ehr::abe::AuthorityState;
use sovereign_ehr::agents::{Deployment, DoctorWallet, EmergencyServer, HospitalAgent, PatientWallet, Registry, Services, Transcript};
use sovereign_ehr::{AbeAuthority, Clock, Did, ErrorCode, FsStore, Ledger, StepClock, SystemClock};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClockState {
    Step { next: u64 },
    System,
}

#[derive(Serialize, Deserialize)]
pub struct State {
    pub seed: u64,
    pub commands: u64,
    pub clock: ClockState,
    pub authority: AuthorityState,
    pub registry: Registry,
    pub hospital: HospitalAgent,
    pub emergency: EmergencyServer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "wallet", rename_all = "snake_case")]
pub enum Wallet {
    Patient(PatientWallet),
    Doctor(DoctorWallet),
}

impl Wallet {
    pub fn did(&self) -> &Did {
        match self {
            Wallet::Patient(p) => p.did(),
            Wallet::Doctor(d) => d.did(),
        }
    }
}

/// Clock shared between the ledger and the command that persists it.
struct SharedStep(Arc<StepClock>);

impl Clock for SharedStep {
    fn now(&self) -> u64 {
        self.0.now()
    }
}

pub struct Home {
    pub root: PathBuf,
}

/// A loaded deployment plus what is needed to write it back.
pub struct Session {
    pub home: Home,
    pub deployment: Deployment,
    pub rng: ChaCha20Rng,
    pub transcript: Transcript,
    seed: u64,
    commands: u64,
    step: Option<Arc<StepClock>>,
}

/// Per-command generator: one ChaCha stream per command index.
pub fn command_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut opts = OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(&tmp)?;
        f.write_all(bytes)?;
        f.write_all(b"\n")?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn clock_for(state: ClockState) -> (Box<dyn Clock>, Option<Arc<StepClock>>) {
    match state {
        ClockState::Step { next } => {
            let step = Arc::new(StepClock::new(next, 1));
            (Box::new(SharedStep(step.clone())), Some(step))
        }
        ClockState::System => (Box::new(SystemClock), None),
    }
}

impl Home {
    pub fn new(root: impl Into<PathBuf>) -> Home {
        Home { root: root.into() }
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }

    pub fn cas_root(&self) -> PathBuf {
        self.root.join("cas")
    }

    pub fn state_path(&self) -> PathBuf {
        self.root.join("state.json")
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.root.join("transcript.jsonl")
    }

    pub fn wallet_path(&self, name: &str) -> PathBuf {
        self.root.join("wallets").join(format!("{name}.json"))
    }

    fn check_name(name: &str) -> Result<(), CliError> {
        let ok = !name.is_empty()
            && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(CliError::new(ErrorCode::Usage, format!("invalid actor name `{name}`")))
        }
    }

    /// Provisions a fresh deployment; the directory must be absent or empty.
    pub fn init(root: impl Into<PathBuf>, seed: u64, hospital: &str, clock: ClockState) -> Result<Session, CliError> {
        let home = Home::new(root);
        if home.root.exists() && fs::read_dir(&home.root)?.next().is_some() {
            return Err(CliError::new(
                ErrorCode::DirectoryNotEmpty,
                format!("{} is not empty", home.root.display()),
            ));
        }
        fs::create_dir_all(home.root.join("wallets"))?;
        let mut rng = command_rng(seed, 0);
        let mut authority_seed = [0u8; 32];
        rand_chacha::rand_core::RngCore::fill_bytes(&mut rng, &mut authority_seed);
        let (boxed, step) = clock_for(clock);
        let ledger = Ledger::create(home.ledger_path(), boxed)?;
        let cas = FsStore::open(home.cas_root())?;
        let authority = sovereign_ehr::agents::deployment::new_authority(authority_seed);
        let deployment = Deployment::provision(ledger, cas, authority, hospital, &mut rng)?;
        let session = Session {
            home,
            deployment,
            rng,
            transcript: Transcript::new(),
            seed,
            commands: 1,
            step,
        };
        session.save()?;
        fs::write(session.home.transcript_path(), b"")?;
        Ok(session)
    }

    pub fn open(self) -> Result<Session, CliError> {
        let bytes = fs::read(self.state_path()).map_err(|e| {
            CliError::new(ErrorCode::Io, format!("{}: {e} (run `sehr init` first)", self.state_path().display()))
        })?;
        let state: State = serde_json::from_slice(&bytes)?;
        let (boxed, step) = clock_for(state.clock);
        let ledger = Ledger::open(self.ledger_path(), boxed)?;
        let cas = FsStore::open(self.cas_root())?;
        let services = Services::new(ledger, cas, AbeAuthority::from_state(state.authority));
        let deployment = Deployment {
            services,
            registry: state.registry,
            hospital: state.hospital,
            emergency: state.emergency,
        };
        Ok(Session {
            rng: command_rng(state.seed, state.commands),
            home: self,
            deployment,
            transcript: Transcript::new(),
            seed: state.seed,
            commands: state.commands + 1,
            step,
        })
    }

    pub fn load_wallet(&self, name: &str) -> Result<Wallet, CliError> {
        Home::check_name(name)?;
        let path = self.wallet_path(name);
        let bytes = fs::read(&path)
            .map_err(|_| CliError::new(ErrorCode::UnknownActor, format!("no wallet named `{name}`")))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save_wallet(&self, name: &str, wallet: &Wallet) -> Result<(), CliError> {
        Home::check_name(name)?;
        write_private(&self.wallet_path(name), &serde_json::to_vec_pretty(wallet)?)
    }

    pub fn has_wallet(&self, name: &str) -> bool {
        self.wallet_path(name).exists()
    }

    /// Wallet names in sorted order.
    pub fn wallet_names(&self) -> Result<Vec<String>, CliError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(self.root.join("wallets"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        Ok(names)
    }

    pub fn patient(&self, name: &str) -> Result<PatientWallet, CliError> {
        match self.load_wallet(name)? {
            Wallet::Patient(p) => Ok(p),
            Wallet::Doctor(_) => Err(CliError::new(ErrorCode::UnknownActor, format!("`{name}` is not a patient"))),
        }
    }

    pub fn doctor(&self, name: &str) -> Result<DoctorWallet, CliError> {
        match self.load_wallet(name)? {
            Wallet::Doctor(d) => Ok(d),
            Wallet::Patient(_) => Err(CliError::new(ErrorCode::UnknownActor, format!("`{name}` is not a doctor"))),
        }
    }

    /// The patient wallet whose anywise DID is `did`.
    pub fn patient_by_did(&self, did: &Did) -> Result<PatientWallet, CliError> {
        for name in self.wallet_names()? {
            if let Wallet::Patient(p) = self.load_wallet(&name)? {
                if p.did() == did {
                    return Ok(p);
                }
            }
        }
        Err(CliError::new(ErrorCode::UnknownActor, format!("no local wallet for {did}")))
    }
}

impl Session {
    /// Writes the standing agents, clock and RNG counter, and appends this
    /// command's messages to the transcript.
    pub fn save(&self) -> Result<(), CliError> {
        let d = &self.deployment;
        let clock = match &self.step {
            Some(step) => ClockState::Step { next: step.peek() },
            None => ClockState::System,
        };
        let state = State {
            seed: self.seed,
            commands: self.commands,
            clock,
            authority: d.services.authority.to_state(),
            registry: d.registry.clone(),
            hospital: d.hospital.clone(),
            emergency: d.emergency.clone(),
        };
        write_private(&self.home.state_path(), &serde_json::to_vec_pretty(&state)?)?;
        if !self.transcript.is_empty() {
            let mut f = OpenOptions::new().create(true).append(true).open(self.home.transcript_path())?;
            f.write_all(&self.transcript.to_jsonl())?;
        }
        Ok(())
    }
}
