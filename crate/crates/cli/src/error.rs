use serde::Serialize;

/// Machine-readable failure record: a stable code, the phase that failed and a
/// human message. Printed as one JSON line on stderr by the binary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("[{phase}] {code}: {message}")]
pub struct CliError {
    pub code: String,
    pub phase: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: &str, phase: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            phase: phase.into(),
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("ConfigError", "config", message)
    }

    pub fn dependency(phase: &str, artifact: &str, produced_by: &str) -> Self {
        Self::new(
            "DependencyError",
            phase,
            format!("missing artifact `{artifact}`; run `{produced_by}` first"),
        )
    }

    pub fn io(phase: &str, e: std::io::Error) -> Self {
        Self::new("IoError", phase, e.to_string())
    }

    /// Wrap a library error, using its variant name as the code.
    pub fn core(phase: &str, e: roomdiff::Error) -> Self {
        let debug = format!("{e:?}");
        let code = debug
            .split(|c: char| !c.is_alphanumeric())
            .next()
            .filter(|s| !s.is_empty())
            .unwrap_or("Error");
        Self::new(code, phase, e.to_string())
    }

    pub fn record(&self) -> String {
        serde_json::to_string(self).expect("error record serializes")
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attach a phase to library results.
pub trait InPhase<T> {
    fn in_phase(self, phase: &str) -> CliResult<T>;
}

impl<T> InPhase<T> for roomdiff::Result<T> {
    fn in_phase(self, phase: &str) -> CliResult<T> {
        self.map_err(|e| CliError::core(phase, e))
    }
}

impl<T> InPhase<T> for std::io::Result<T> {
    fn in_phase(self, phase: &str) -> CliResult<T> {
        self.map_err(|e| CliError::io(phase, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_variant_becomes_code() {
        let e = CliError::core("rlcf", roomdiff::Error::InvalidK);
        assert_eq!(e.code, "InvalidK");
        let e = CliError::core("eval", roomdiff::Error::InsufficientSamples { needed: 2, got: 1 });
        assert_eq!(e.code, "InsufficientSamples");
        let v: serde_json::Value = serde_json::from_str(&e.record()).unwrap();
        assert_eq!(v["phase"], "eval");
        assert!(v["message"].as_str().unwrap().contains("at least 2"));
    }
}
