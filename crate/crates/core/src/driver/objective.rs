//! Objective functions: the trait and the external-command adapter.

use std::io::Write;
use std::process::{Command, Stdio};

use crate::space::{serialize_config, Configuration};

/// A function to minimize over configurations.
pub trait Objective: Send + Sync {
    fn name(&self) -> String;

    fn evaluate(&self, config: &Configuration) -> Result<f64, String>;

    /// Known global minimum, if any.
    fn optimum(&self) -> Option<f64> {
        None
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn name(&self) -> String {
        (**self).name()
    }

    fn evaluate(&self, config: &Configuration) -> Result<f64, String> {
        (**self).evaluate(config)
    }

    fn optimum(&self) -> Option<f64> {
        (**self).optimum()
    }
}

/// Runs `argv` once per evaluation, writing the canonical configuration JSON
/// to its stdin and reading one decimal from its stdout.
#[derive(Debug, Clone)]
pub struct CommandObjective {
    pub argv: Vec<String>,
}

impl CommandObjective {
    pub fn new(argv: Vec<String>) -> Result<Self, String> {
        if argv.is_empty() {
            return Err("empty objective command".into());
        }
        Ok(CommandObjective { argv })
    }
}

impl Objective for CommandObjective {
    fn name(&self) -> String {
        format!("cmd:{}", self.argv.join(" "))
    }

    fn evaluate(&self, config: &Configuration) -> Result<f64, String> {
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("cannot spawn `{}`: {e}", self.argv[0]))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // a command that ignores its input may close the pipe early
            let _ = stdin.write_all(serialize_config(config).as_bytes());
            let _ = stdin.write_all(b"\n");
        }
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("objective command exited with {}", out.status));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let y: f64 = text
            .trim()
            .parse()
            .map_err(|_| format!("objective printed `{}`, expected one number", text.trim()))?;
        if !y.is_finite() {
            return Err(format!("objective returned non-finite value {y}"));
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{fixtures, SearchSpace};

    fn sh(script: &str) -> CommandObjective {
        CommandObjective::new(vec!["sh".into(), "-c".into(), script.into()]).unwrap()
    }

    #[test]
    fn reads_stdout_and_passes_stdin() {
        let space = SearchSpace::parse(fixtures::SVM).unwrap();
        let c = space.sample(1, 0).unwrap();
        assert_eq!(sh("cat > /dev/null; echo ' 2.5 '").evaluate(&c), Ok(2.5));
        // the config arrives on stdin
        let got = sh("grep -q '\"subspace_id\":1' && echo 1 || echo 0").evaluate(&c).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn failures() {
        let space = SearchSpace::parse(fixtures::SVM).unwrap();
        let c = space.sample(1, 0).unwrap();
        assert!(sh("exit 3").evaluate(&c).is_err());
        assert!(sh("echo nan").evaluate(&c).is_err());
        assert!(sh("echo 1 2").evaluate(&c).is_err());
        assert!(CommandObjective::new(vec!["/nonexistent/bin".into()]).unwrap().evaluate(&c).is_err());
        assert!(CommandObjective::new(vec![]).is_err());
    }
}
