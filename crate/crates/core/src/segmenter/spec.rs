use std::str::FromStr;
use std::time::Duration;

use super::{ExternalSegmenter, Segmenter, SegmenterError, ToySegmenter};

/// Backend selector: `toy[:tau]`, `exec:<command line>` or `tcp:<host>:<port>`.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmenterSpec {
    Toy { tau: f64 },
    Exec { command: Vec<String> },
    Tcp { address: String },
}

impl FromStr for SegmenterSpec {
    type Err = SegmenterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SegmenterError::InvalidSpec(s.to_string());
        if s == "toy" {
            return Ok(Self::Toy {
                tau: ToySegmenter::default().tau,
            });
        }
        if let Some(tau) = s.strip_prefix("toy:") {
            let tau: f64 = tau.parse().map_err(|_| bad())?;
            return if tau >= 0.0 { Ok(Self::Toy { tau }) } else { Err(bad()) };
        }
        if let Some(cmd) = s.strip_prefix("exec:") {
            let command: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            return if command.is_empty() {
                Err(bad())
            } else {
                Ok(Self::Exec { command })
            };
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            let ok = addr
                .rsplit_once(':')
                .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
            return if ok {
                Ok(Self::Tcp {
                    address: addr.to_string(),
                })
            } else {
                Err(bad())
            };
        }
        Err(bad())
    }
}

impl SegmenterSpec {
    pub fn build(&self, timeout: Duration) -> Result<Box<dyn Segmenter + Send>, SegmenterError> {
        Ok(match self {
            Self::Toy { tau } => Box::new(ToySegmenter::new(*tau)),
            Self::Exec { command } => Box::new(ExternalSegmenter::spawn(command, timeout)?),
            Self::Tcp { address } => Box::new(ExternalSegmenter::connect(address, timeout)?),
        })
    }
}
