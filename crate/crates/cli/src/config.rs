//! `key = value` configuration files.
//!
//! Keys are long flag names without the leading dashes (`batch-size` or
//! `batch_size`). `true`/`false` toggle switches. The file's entries are
//! spliced in front of the user's own flags so the latter take precedence.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", i + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(format!("line {}: invalid key `{key}`", i + 1));
        }
        if key == "config" {
            return Err(format!("line {}: config files cannot include other config files", i + 1));
        }
        out.push(Entry {
            key,
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

fn to_flags(entries: &[Entry]) -> Vec<OsString> {
    entries
        .iter()
        .filter_map(|e| match e.value.as_str() {
            "true" => Some(format!("--{}", e.key)),
            "false" => None,
            v => Some(format!("--{}={v}", e.key)),
        })
        .map(OsString::from)
        .collect()
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(OsString::from(p));
        }
    }
    None
}

/// Rewrites `prog sub args...` to `prog sub <file flags> args...` when
/// `args` names a config file.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let Some(path) = config_path(&argv[2..]) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let entries = parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = argv[..2].to_vec();
    out.extend(to_flags(&entries));
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let e = parse("# header\nbatch_size = 16\n\nno-augment=true # inline\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].key, "batch-size");
        assert_eq!(e[0].value, "16");
        assert_eq!(e[1].line, 4);
        assert!(parse("just words").is_err());
        assert!(parse("bad key = 1").is_err());
        assert!(parse("config = x").is_err());
    }

    #[test]
    fn flags_precede_user_arguments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "epochs = 3\nno-augment = false\nno_augment = true\n").unwrap();
        let argv: Vec<OsString> = ["msresnet", "train", "--config", p.to_str().unwrap(), "--epochs", "5"]
            .iter()
            .map(OsString::from)
            .collect();
        let out: Vec<String> = expand(argv)
            .unwrap()
            .into_iter()
            .map(|s| s.into_string().unwrap())
            .collect();
        assert_eq!(&out[..4], ["msresnet", "train", "--epochs=3", "--no-augment"]);
        assert_eq!(&out[out.len() - 2..], ["--epochs", "5"]);
    }
}
