use std::io::Write;

use env_logger::{Builder, Env};

use crate::args::LogFormat;

/// Logs go to stderr; `RUST_LOG` overrides the default `info` filter. The JSON form writes one
/// object per event.
pub fn init(format: LogFormat) {
    let mut b = Builder::from_env(Env::default().default_filter_or("info"));
    if format == LogFormat::Json {
        b.format(|buf, record| {
            let event = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{event}")
        });
    }
    let _ = b.try_init();
}
