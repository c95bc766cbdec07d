//! `env_logger` output plus a record of every warning for the run manifest.

use std::sync::Mutex;

use log::{Level, Log, Metadata, Record};

static WARNINGS: Mutex<Vec<String>> = Mutex::new(Vec::new());

struct Capture {
    inner: env_logger::Logger,
}

impl Log for Capture {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Warn || self.inner.enabled(metadata)
    }

    fn log(&self, record: &Record) {
        if record.level() <= Level::Warn {
            if let Ok(mut w) = WARNINGS.lock() {
                w.push(record.args().to_string());
            }
        }
        if self.inner.matches(record) {
            self.inner.log(record);
        }
    }

    fn flush(&self) {
        self.inner.flush();
    }
}

pub fn init() {
    let inner = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).build();
    let max = inner.filter().max(log::LevelFilter::Warn);
    if log::set_boxed_logger(Box::new(Capture { inner })).is_ok() {
        log::set_max_level(max);
    }
}

/// Distinct warnings in order of first occurrence.
pub fn warnings() -> Vec<String> {
    let w = WARNINGS.lock().map(|w| w.clone()).unwrap_or_default();
    let mut seen = std::collections::HashSet::new();
    w.into_iter().filter(|m| seen.insert(m.clone())).collect()
}
