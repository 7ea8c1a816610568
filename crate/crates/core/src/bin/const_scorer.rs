//! A scorer that assigns the same log-probability to every continuation
//! token. Used to exercise the external scorer protocol end to end.
//!
//! Tokens are the whitespace-separated words of the continuation.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::time::Duration;

use clap::Parser;
use likefilter::lm::protocol::{Message, PROTOCOL_VERSION};

#[derive(Debug, Parser)]
#[command(name = "likefilter-const-scorer")]
struct Opts {
    /// Log-probability reported for each token.
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    logprob: f64,
    /// Hold responses until the request stream goes idle, then answer them in reverse order.
    #[arg(long)]
    reorder: bool,
    /// Answer the first N score requests with a malformed line.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
    /// Report an item error for continuations containing this text.
    #[arg(long)]
    error_on: Option<String>,
    #[arg(long, default_value = "const-scorer")]
    backend_id: String,
    /// Serve TCP connections on this address instead of stdio.
    #[arg(long)]
    listen: Option<String>,
}

struct Session<'a> {
    opts: &'a Opts,
    failures_left: usize,
}

impl Session<'_> {
    fn respond(&mut self, id: u64, continuation: &str) -> String {
        if self.failures_left > 0 {
            self.failures_left -= 1;
            return "this is not a protocol message\n".to_string();
        }
        if let Some(needle) = &self.opts.error_on {
            if continuation.contains(needle.as_str()) {
                return Message::Error { id, message: format!("refusing continuation containing {needle:?}") }.to_line();
            }
        }
        let n = continuation.split_whitespace().count();
        Message::Result { id, token_logprobs: vec![self.opts.logprob; n], context_chars: None }.to_line()
    }

    fn serve<R: Read + Send + 'static, W: Write>(&mut self, input: R, mut output: W) -> io::Result<()> {
        let (tx, rx) = mpsc::channel::<String>();
        std::thread::spawn(move || {
            for line in BufReader::new(input).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });

        let Ok(first) = rx.recv() else { return Ok(()) };
        match Message::parse(&first) {
            Ok(Message::Hello { .. }) => {}
            _ => return Err(io::Error::new(io::ErrorKind::InvalidData, "expected hello")),
        }
        output.write_all(Message::Hello { version: PROTOCOL_VERSION, backend_id: self.opts.backend_id.clone() }.to_line().as_bytes())?;
        output.flush()?;

        let mut held: Vec<String> = Vec::new();
        loop {
            let line = if held.is_empty() {
                match rx.recv() {
                    Ok(l) => Some(l),
                    Err(_) => break,
                }
            } else {
                match rx.recv_timeout(Duration::from_millis(20)) {
                    Ok(l) => Some(l),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            };
            match line {
                Some(line) => {
                    let Ok(Message::Score { id, continuation, .. }) = Message::parse(&line) else {
                        continue;
                    };
                    let response = self.respond(id, &continuation);
                    if self.opts.reorder {
                        held.push(response);
                    } else {
                        output.write_all(response.as_bytes())?;
                        output.flush()?;
                    }
                }
                None => {
                    for response in held.drain(..).rev() {
                        output.write_all(response.as_bytes())?;
                    }
                    output.flush()?;
                }
            }
        }
        for response in held.drain(..).rev() {
            output.write_all(response.as_bytes())?;
        }
        output.flush()
    }
}

fn main() -> io::Result<()> {
    let opts = Opts::parse();
    let mut session = Session { opts: &opts, failures_left: opts.fail_first };
    match &opts.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = stream?;
                let input = stream.try_clone()?;
                if let Err(e) = session.serve(input, stream) {
                    eprintln!("connection ended: {e}");
                }
            }
            Ok(())
        }
        None => session.serve(io::stdin(), io::stdout().lock()),
    }
}
