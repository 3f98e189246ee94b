//! Line-protocol backend for tests: answers requests with the toy segmenter or with a
//! deliberately broken reply.

use std::io::{self, BufRead, Write};

use clap::{Parser, ValueEnum};
use regprompt::segmenter::protocol::{decode_request, encode_error, encode_response};
use regprompt::segmenter::{Segmenter, SliceResponse, ToySegmenter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Region growing, like the built-in toy backend.
    Toy,
    /// All-zero masks.
    Zeros,
    /// Masks one pixel short.
    WrongDims,
    /// Echoes the wrong request id.
    WrongId,
    /// Answers every request with an error object.
    Error,
    /// Exits without answering once this many requests have been served.
    Crash,
}

#[derive(Debug, Parser)]
#[command(
    name = "regprompt-mock-segmenter",
    about = "Test backend for the segmenter line protocol"
)]
struct Args {
    #[arg(long, value_enum, default_value_t = Mode::Toy)]
    mode: Mode,

    /// Region-growing tolerance
    #[arg(long, default_value_t = 150.0)]
    tau: f64,

    /// Requests served before a crash (crash mode only)
    #[arg(long, default_value_t = 0)]
    after: usize,
}

fn main() -> io::Result<()> {
    let args = Args::parse();
    let mut toy = ToySegmenter::new(args.tau);
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    for (served, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        if args.mode == Mode::Crash && served >= args.after {
            std::process::exit(1);
        }
        let reply = match decode_request(&line) {
            Err((id, e)) => encode_error(id, &e.to_string()),
            Ok(req) => match args.mode {
                Mode::Error => encode_error(Some(req.request_id), "mock failure"),
                Mode::Zeros => encode_response(&SliceResponse {
                    request_id: req.request_id,
                    mask: vec![0; req.width * req.height],
                    score: None,
                }),
                Mode::WrongDims => encode_response(&SliceResponse {
                    request_id: req.request_id,
                    mask: vec![0; req.width * req.height - 1],
                    score: None,
                }),
                Mode::WrongId | Mode::Toy | Mode::Crash => match toy.segment_slice(&req) {
                    Ok(mut resp) => {
                        if args.mode == Mode::WrongId {
                            resp.request_id += 1;
                        }
                        encode_response(&resp)
                    }
                    Err(e) => encode_error(Some(req.request_id), &e.to_string()),
                },
            },
        };
        writeln!(out, "{reply}")?;
        out.flush()?;
    }
    Ok(())
}
