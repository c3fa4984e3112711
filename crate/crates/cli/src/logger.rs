//! Line-oriented JSON logging on stderr.

use std::io::Write;
use std::sync::OnceLock;

use log::{Level, LevelFilter, Log, Metadata, Record};

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = serde_json::json!({
            "level": record.level().as_str(),
            "target": record.target(),
            "msg": record.args().to_string(),
        });
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{line}");
    }

    fn flush(&self) {
        let _ = std::io::stderr().flush();
    }
}

/// Installs the logger. `CMADET_LOG` selects the level (default `info`).
pub fn init() {
    let level = std::env::var("CMADET_LOG")
        .ok()
        .and_then(|s| s.parse::<Level>().ok())
        .map(|l| l.to_level_filter())
        .unwrap_or(LevelFilter::Info);
    static LOGGER: OnceLock<JsonLogger> = OnceLock::new();
    let logger = LOGGER.get_or_init(|| JsonLogger { level });
    if log::set_logger(logger).is_ok() {
        log::set_max_level(logger.level);
    }
}
