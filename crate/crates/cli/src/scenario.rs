//! Scripted runs: an ordered list of actor commands, each with an expected
//! outcome. A run stops at the first step whose outcome differs.
//!
//! ```json
//! [
//!   {"command": "init", "args": ["--seed", "7"], "expect": "ok"},
//!   {"actor": "alice", "command": "store", "input": "bp 120/80", "args": ["${input}"], "expect": "ok", "save": "cid"},
//!   {"actor": "bob", "command": "read", "args": ["${cid}"], "expect": "PolicyNotSatisfied"}
//! ]
//! ```
//!
//! `save` binds the step's result value (CID, request id, version, DID) to a
//! variable; `${name}` in later arguments is replaced by it. `${home}` is the
//! deployment directory and `${input}` the file holding the step's `input`.
//! `expect_text` additionally requires a substring of the printed output.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sovereign_ehr::audit::{emergency_pairing, emergency_report, integrity_report, PairingReport};
use sovereign_ehr::ledger::EmergencyFilter;
use sovereign_ehr::ErrorCode;

use crate::{execute_args, CliError, Home};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub expect: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepOutcome {
    pub step: usize,
    pub actor: Option<String>,
    pub command: String,
    pub expect: String,
    pub actual: String,
    pub value: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub steps: Vec<StepOutcome>,
    pub variables: BTreeMap<String, String>,
    pub transcript: PathBuf,
    pub integrity: String,
    pub integrity_clean: bool,
    pub emergency: String,
    pub pairing: Option<PairingReport>,
}

impl ScenarioReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let who = s.actor.as_deref().unwrap_or("-");
            out.push_str(&format!("step {:>2}  {:<8} {:<15} {}\n", s.step, who, s.command, s.actual));
        }
        out.push_str(&format!("transcript: {}\n", self.transcript.display()));
        out.push_str(&self.integrity);
        out.push_str(&self.emergency);
        if let Some(p) = &self.pairing {
            out.push_str(&format!(
                "overrides: {} logged, {} paired, {} grants without log\n",
                p.events,
                p.paired,
                p.grants_without_log.len()
            ));
        }
        out
    }
}

fn substitute(arg: &str, vars: &BTreeMap<String, String>) -> Result<String, CliError> {
    let mut out = String::new();
    let mut rest = arg;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| CliError::new(ErrorCode::Malformed, format!("unterminated variable in `{arg}`")))?;
        let name = &rest[start + 2..start + end];
        let value = vars
            .get(name)
            .ok_or_else(|| CliError::new(ErrorCode::Malformed, format!("unbound variable `{name}`")))?;
        out.push_str(value);
        rest = &rest[start + end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn diverged(outcome: &StepOutcome, why: &str) -> CliError {
    CliError::new(
        ErrorCode::ScenarioDiverged,
        format!(
            "step {} ({} {}): expected {}, got {}{}: {}",
            outcome.step,
            outcome.actor.as_deref().unwrap_or("-"),
            outcome.command,
            outcome.expect,
            outcome.actual,
            why,
            outcome.message
        ),
    )
}

pub fn run_scenario_file(file: &Path, home: &Path, log: Option<&Path>) -> Result<ScenarioReport, CliError> {
    let steps: Vec<Step> = serde_json::from_slice(&fs::read(file)?)?;
    run_scenario(&steps, home, log)
}

/// Runs `steps` against the deployment in `home`, stopping at the first
/// divergence from the expected outcomes.
pub fn run_scenario(steps: &[Step], home: &Path, log: Option<&Path>) -> Result<ScenarioReport, CliError> {
    let mut vars = BTreeMap::new();
    vars.insert("home".to_string(), home.display().to_string());
    let mut outcomes = Vec::new();
    let mut log = match log {
        Some(path) => Some(OpenOptions::new().create(true).append(true).open(path)?),
        None => None,
    };
    for (i, step) in steps.iter().enumerate() {
        let index = i + 1;
        if step.expect != "ok" {
            step.expect.parse::<ErrorCode>().map_err(|e| CliError::new(ErrorCode::Malformed, e))?;
        }
        if let Some(input) = &step.input {
            let dir = home.join("inputs");
            fs::create_dir_all(&dir)?;
            let path = dir.join(format!("step-{index}"));
            fs::write(&path, input)?;
            vars.insert("input".to_string(), path.display().to_string());
        }
        let mut argv = vec!["--home".to_string(), home.display().to_string(), step.command.clone()];
        argv.extend(step.actor.iter().cloned());
        for a in &step.args {
            argv.push(substitute(a, &vars)?);
        }
        let result = execute_args(&argv);
        let (actual, value, message) = match &result {
            Ok(out) => ("ok".to_string(), Some(out.value.clone()), out.text.clone()),
            Err(e) => (e.code.to_string(), None, e.message.clone()),
        };
        let outcome = StepOutcome {
            step: index,
            actor: step.actor.clone(),
            command: step.command.clone(),
            expect: step.expect.clone(),
            actual,
            value,
            message,
        };
        if let Some(f) = log.as_mut() {
            f.write_all(serde_json::to_string(&outcome)?.as_bytes())?;
            f.write_all(b"\n")?;
        }
        if outcome.actual != outcome.expect {
            return Err(diverged(&outcome, ""));
        }
        if let Some(needle) = &step.expect_text {
            let needle = substitute(needle, &vars)?;
            if !outcome.message.contains(&needle) {
                return Err(diverged(&outcome, &format!(" without `{needle}` in the output")));
            }
        }
        if let (Some(var), Some(value)) = (&step.save, &outcome.value) {
            vars.insert(var.clone(), value.clone());
        }
        outcomes.push(outcome);
    }
    final_report(home, outcomes, vars)
}

fn final_report(
    home: &Path,
    steps: Vec<StepOutcome>,
    variables: BTreeMap<String, String>,
) -> Result<ScenarioReport, CliError> {
    let root = Home::new(home);
    let transcript = root.transcript_path();
    let mut report = ScenarioReport {
        steps,
        variables,
        transcript,
        integrity: String::new(),
        integrity_clean: false,
        emergency: String::new(),
        pairing: None,
    };
    if !root.state_path().exists() {
        return Ok(report);
    }
    let session = root.open()?;
    let services = &session.deployment.services;
    let integrity = integrity_report(&services.ledger, services.cas.as_ref());
    report.integrity = integrity.to_table();
    report.integrity_clean = integrity.is_clean();
    report.emergency = emergency_report(&services.ledger, &EmergencyFilter::All).to_table();
    report.pairing = Some(emergency_pairing(&services.ledger));
    Ok(report)
}
