//! Framed TCP transport for multi-process demos.
//!
//! `--connect` replays the deployment's transcript to a peer as
//! length-prefixed frames; `--listen` accepts one connection and prints each
//! message it receives until the peer closes the stream.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};

use sovereign_ehr::agents::message::{read_frame, write_frame};
use sovereign_ehr::agents::AgentMessage;
use sovereign_ehr::ErrorCode;

use crate::{CliError, Home, Output, RelayArgs};

pub fn run(home: &Home, args: RelayArgs) -> Result<Output, CliError> {
    match (args.listen, args.connect) {
        (Some(addr), _) => listen(&addr),
        (None, Some(addr)) => send(home, &addr),
        (None, None) => Err(CliError::new(ErrorCode::Usage, "relay needs --listen or --connect")),
    }
}

/// Sends every message recorded in the home transcript.
pub fn send(home: &Home, addr: &str) -> Result<Output, CliError> {
    let text = fs::read_to_string(home.transcript_path())?;
    let stream = TcpStream::connect(addr)?;
    let mut w = BufWriter::new(stream);
    let mut sent = 0usize;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let msg: AgentMessage = serde_json::from_str(line)?;
        write_frame(&mut w, &msg)?;
        sent += 1;
    }
    w.flush()?;
    Ok(Output::new(format!("sent {sent} frames to {addr}"), sent.to_string()))
}

/// Accepts one connection and returns every message it carried.
pub fn receive(listener: &TcpListener) -> Result<Vec<AgentMessage>, CliError> {
    let (stream, _) = listener.accept()?;
    let mut r = BufReader::new(stream);
    let mut msgs = Vec::new();
    while let Some(msg) = read_frame(&mut r)? {
        msgs.push(msg);
    }
    Ok(msgs)
}

fn listen(addr: &str) -> Result<Output, CliError> {
    let listener = TcpListener::bind(addr)?;
    let msgs = receive(&listener)?;
    let lines: Vec<String> = msgs
        .iter()
        .map(|m| String::from_utf8_lossy(&m.to_canonical_bytes()).into_owned())
        .collect();
    Ok(Output::new(lines.join("\n"), msgs.len().to_string()))
}
