//! `--config FILE` support: each `key = value` line becomes `--key value`
//! right after the subcommand, so flags given on the command line win.
//! Boolean flags take `true` or `false`. `#` starts a comment.

use std::fmt;

use clap::CommandFactory;

use crate::Cli;

#[derive(Debug)]
pub enum ConfigError {
    Read(String, std::io::Error),
    Syntax(String),
}

impl ConfigError {
    pub fn exit_code(&self) -> u8 {
        match self {
            ConfigError::Read(..) => 1,
            ConfigError::Syntax(_) => 2,
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read(path, e) => write!(f, "cannot read config `{path}`: {e}"),
            ConfigError::Syntax(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn expand(args: Vec<String>) -> Result<Vec<String>, ConfigError> {
    // top-level options precede the subcommand
    let mut config = None;
    let mut threads_given = false;
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].as_str();
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some((i, 1, v.to_string()));
        } else if a == "--config" {
            match args.get(i + 1) {
                Some(v) => config = Some((i, 2, v.clone())),
                None => return Ok(args),
            }
            i += 1;
        } else if a == "--threads" {
            threads_given = true;
            i += 1;
        } else if a.starts_with("--threads=") {
            threads_given = true;
        } else if !a.starts_with('-') {
            sub = Some(i);
            break;
        }
        i += 1;
    }
    let (Some((at, width, path)), Some(sub)) = (config, sub) else {
        return Ok(args);
    };

    let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Read(path.clone(), e))?;
    let cmd = Cli::command();
    let sub_name = &args[sub];
    let subcommand = cmd
        .find_subcommand(sub_name)
        .ok_or_else(|| ConfigError::Syntax(format!("unknown command `{sub_name}`")))?;

    let mut top = Vec::new();
    let mut inserted = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim().replace('_', "-"), v.trim().to_string()))
            .ok_or_else(|| ConfigError::Syntax(format!("{path}:{}: expected key = value", n + 1)))?;
        if key == "threads" {
            if !threads_given {
                top.extend(["--threads".to_string(), value]);
            }
            continue;
        }
        let is_switch = subcommand
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .is_some_and(|a| !a.get_action().takes_values());
        if is_switch {
            match value.as_str() {
                "true" => inserted.push(format!("--{key}")),
                "false" => {}
                _ => {
                    return Err(ConfigError::Syntax(format!(
                        "{path}:{}: `{key}` takes true or false",
                        n + 1
                    )))
                }
            }
        } else {
            inserted.push(format!("--{key}"));
            inserted.push(value);
        }
    }

    let mut out = Vec::with_capacity(args.len() + inserted.len() + top.len());
    out.extend(args[..at].iter().cloned());
    out.extend(top);
    out.extend(args[at + width..=sub].iter().cloned());
    out.extend(inserted);
    out.extend(args[sub + 1..].iter().cloned());
    Ok(out)
}
