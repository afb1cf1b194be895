use std::collections::BTreeSet;
use std::fs;

use sovereign_ehr::agents::{flows, Decision, DoctorWallet, PatientWallet};
use sovereign_ehr::audit::{consent_report, emergency_pairing, emergency_report, integrity_report};
use sovereign_ehr::ledger::EmergencyFilter;
use sovereign_ehr::{AttributeSet, Cid, Did, ErrorCode, Ledger};

use crate::home::{ClockState, Session};
use crate::{AuditCommand, Cli, CliError, Command, ConsentArgs, Home, LedgerCommand, Output, Wallet};

fn parse_cid(text: &str) -> Result<Cid, CliError> {
    Ok(text.parse::<Cid>()?)
}

fn parse_did(text: &str) -> Result<Did, CliError> {
    text.parse::<Did>().map_err(|e| CliError::new(ErrorCode::Malformed, e.to_string()))
}

fn attribute_set(names: &[String]) -> Result<AttributeSet, CliError> {
    Ok(AttributeSet::new(names.iter().cloned())?)
}

fn save_patient(s: &Session, p: &PatientWallet) -> Result<(), CliError> {
    s.home.save_wallet(&p.name, &Wallet::Patient(p.clone()))
}

fn save_doctor(s: &Session, d: &DoctorWallet) -> Result<(), CliError> {
    s.home.save_wallet(&d.name, &Wallet::Doctor(d.clone()))
}

pub(crate) fn dispatch(cli: Cli) -> Result<Output, CliError> {
    let home = Home::new(cli.home);
    match cli.command {
        Command::Init { seed, hospital, start, system_clock } => {
            let clock = if system_clock { ClockState::System } else { ClockState::Step { next: start } };
            let s = Home::init(&home.root, seed, &hospital, clock)?;
            let d = &s.deployment;
            Ok(Output::new(
                format!(
                    "initialized {}\nhospital  {}\nemergency {}\nregistry  {}",
                    s.home.root.display(),
                    d.hospital.did(),
                    d.emergency.did(),
                    d.registry.did()
                ),
                d.hospital.did().to_string(),
            ))
        }
        Command::RegisterPatient { name } => {
            let mut s = home.open()?;
            if s.home.has_wallet(&name) {
                return Err(CliError::new(ErrorCode::Usage, format!("wallet `{name}` already exists")));
            }
            let p = s.deployment.register_patient(&name, &mut s.rng)?;
            save_patient(&s, &p)?;
            s.save()?;
            Ok(Output::new(format!("patient {name} {}", p.did()), p.did().to_string()))
        }
        Command::RegisterDoctor { name, attrs } => {
            let mut s = home.open()?;
            if s.home.has_wallet(&name) {
                return Err(CliError::new(ErrorCode::Usage, format!("wallet `{name}` already exists")));
            }
            let attrs = attribute_set(&attrs)?;
            let d = s.deployment.register_doctor(&name, &attrs, &mut s.rng)?;
            save_doctor(&s, &d)?;
            s.save()?;
            Ok(Output::new(format!("doctor {name} {} [{}]", d.did(), attrs), d.did().to_string()))
        }
        Command::Admit { patient } => {
            let mut s = home.open()?;
            let mut p = s.home.patient(&patient)?;
            let Session { deployment: d, transcript: t, rng, .. } = &mut s;
            flows::admit(&mut p, &mut d.hospital, &d.services, t, rng)?;
            save_patient(&s, &p)?;
            s.save()?;
            let attr = p.attribute()?;
            Ok(Output::new(format!("admitted {patient} as {attr}"), attr))
        }
        Command::Store { patient, file } => {
            let mut s = home.open()?;
            let mut p = s.home.patient(&patient)?;
            let bytes = fs::read(&file)?;
            let Session { deployment: d, transcript: t, rng, .. } = &mut s;
            let (cid, _) = flows::store_record(&d.hospital, &mut p, &d.services, t, &bytes, rng)?;
            save_patient(&s, &p)?;
            s.save()?;
            Ok(Output::new(cid.to_string(), cid.to_string()))
        }
        Command::RequestAccess { doctor, cid, attrs, purpose } => {
            let mut s = home.open()?;
            let cid = parse_cid(&cid)?;
            let mut doc = s.home.doctor(&doctor)?;
            let requested = if attrs.is_empty() { None } else { Some(attribute_set(&attrs)?) };
            let owner = s
                .deployment
                .services
                .ledger
                .record_owner(&cid)
                .ok_or_else(|| CliError::new(ErrorCode::UnknownCid, format!("{cid} is not anchored")))?;
            let mut p = s.home.patient_by_did(&owner)?;
            let Session { deployment: d, transcript: t, rng, .. } = &mut s;
            if doc.hospital.is_none() {
                flows::connect_doctor(&mut doc, &mut d.hospital, &d.services, t, rng)?;
            }
            let id = flows::request_access(&doc, &mut d.hospital, &mut p, &d.services, t, &cid, requested.as_ref(), &purpose, rng)?;
            save_doctor(&s, &doc)?;
            save_patient(&s, &p)?;
            s.save()?;
            Ok(Output::new(format!("{id} queued for {}", p.name), id))
        }
        Command::Consent(args) => consent(home, args),
        Command::Revoke { patient, cid, attrs } => {
            let mut s = home.open()?;
            let cid = parse_cid(&cid)?;
            let mut p = s.home.patient(&patient)?;
            let attrs: BTreeSet<String> = attrs.into_iter().collect();
            let Session { deployment: d, transcript: t, rng, .. } = &mut s;
            let env = flows::revoke_access(&mut p, &mut d.hospital, &d.services, t, &cid, &attrs, rng)?;
            save_patient(&s, &p)?;
            s.save()?;
            Ok(Output::new(
                format!("{cid} v{} policy {}", env.version, env.consent_policy()),
                env.version.to_string(),
            ))
        }
        Command::Read { actor, cid, output, version } => {
            let s = home.open()?;
            let cid = parse_cid(&cid)?;
            let services = &s.deployment.services;
            let plaintext = match s.home.load_wallet(&actor)? {
                Wallet::Patient(p) => p.read(services, &cid)?,
                Wallet::Doctor(mut doc) => {
                    let bytes = match version {
                        Some(v) => doc.access_cached(services, &cid, v)?,
                        None => doc.access_record(services, &cid)?,
                    };
                    save_doctor(&s, &doc)?;
                    bytes
                }
            };
            let text = match output {
                Some(path) => {
                    fs::write(&path, &plaintext)?;
                    format!("wrote {} bytes to {}", plaintext.len(), path.display())
                }
                None => String::from_utf8_lossy(&plaintext).into_owned(),
            };
            Ok(Output::new(text, plaintext.len().to_string()))
        }
        Command::Emergency { doctor, cid, why } => {
            let mut s = home.open()?;
            let cid = parse_cid(&cid)?;
            let mut doc = s.home.doctor(&doctor)?;
            let Session { deployment: d, transcript: t, rng, .. } = &mut s;
            if doc.emergency.is_none() {
                flows::connect_emergency(&mut doc, &mut d.emergency, &d.services, t, rng)?;
            }
            let version = flows::emergency_access(&mut doc, &mut d.emergency, &d.services, t, &cid, &why, rng)?;
            save_doctor(&s, &doc)?;
            s.save()?;
            Ok(Output::new(format!("{cid} v{version} opened for {doctor} (logged)"), version.to_string()))
        }
        Command::Audit { report } => audit(home, report),
        Command::Ledger { action: LedgerCommand::Verify } => {
            let report = Ledger::verify_file(&home.ledger_path())?;
            let text = serde_json::to_string(&report)?;
            if report.valid {
                Ok(Output::new(format!("valid: {} blocks", report.blocks), report.blocks.to_string()))
            } else {
                Err(CliError::new(ErrorCode::IntegrityViolation, text))
            }
        }
        Command::RunScenario { file, log } => {
            let report = crate::scenario::run_scenario_file(&file, &home.root, log.as_deref())?;
            Ok(Output::new(report.summary(), report.steps.len().to_string()))
        }
        Command::Relay(args) => crate::relay::run(&home, args),
    }
}

fn consent(home: Home, args: ConsentArgs) -> Result<Output, CliError> {
    let mut s = home.open()?;
    let mut p = s.home.patient(&args.patient)?;
    let decision = if args.deny {
        Decision::Deny
    } else if args.attrs.is_empty() {
        Decision::Grant { narrowed: None }
    } else {
        Decision::Grant { narrowed: Some(attribute_set(&args.attrs)?) }
    };
    let Session { deployment: d, transcript: t, rng, .. } = &mut s;
    let outcome = flows::answer_consent(&mut p, &mut d.hospital, &d.services, t, &args.request_id, decision, rng)?;
    save_patient(&s, &p)?;
    s.save()?;
    let text = match outcome.version {
        Some(v) => format!("{} granted [{}], now v{v}", outcome.request_id, outcome.attributes),
        None => format!("{} denied", outcome.request_id),
    };
    Ok(Output::new(text, outcome.decision))
}

fn audit(home: Home, report: AuditCommand) -> Result<Output, CliError> {
    let s = home.open()?;
    let services = &s.deployment.services;
    let ledger = services.ledger.as_ref();
    match report {
        AuditCommand::Consent { cid, json } => {
            let report = consent_report(ledger, services.cas.as_ref(), &parse_cid(&cid)?)?;
            let text = if json { serde_json::to_string_pretty(&report)? } else { report.to_table() };
            Ok(Output::new(text, report.rows.len().to_string()))
        }
        AuditCommand::Emergency { did, cid, json } => {
            let filter = match (did, cid) {
                (Some(d), _) => EmergencyFilter::Requester(parse_did(&d)?),
                (None, Some(c)) => EmergencyFilter::Cid(parse_cid(&c)?),
                (None, None) => EmergencyFilter::All,
            };
            let report = emergency_report(ledger, &filter);
            let pairing = emergency_pairing(ledger);
            let text = if json {
                serde_json::to_string_pretty(&serde_json::json!({ "rows": report.rows, "pairing": pairing }))?
            } else {
                format!(
                    "{}overrides: {} logged, {} paired, {} grants without log\n",
                    report.to_table(),
                    pairing.events,
                    pairing.paired,
                    pairing.grants_without_log.len()
                )
            };
            Ok(Output::new(text, report.rows.len().to_string()))
        }
        AuditCommand::Integrity { json } => {
            let report = integrity_report(ledger, services.cas.as_ref());
            let text = if json { serde_json::to_string_pretty(&report)? } else { report.to_table() };
            if report.is_clean() {
                Ok(Output::new(text, "clean".into()))
            } else {
                Err(CliError::new(ErrorCode::IntegrityViolation, text))
            }
        }
    }
}
