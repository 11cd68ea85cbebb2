//! Client configuration: a TOML file, overridden by `DDS_SERVER` and flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::output::Format;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub server_url: Option<String>,
    pub token_path: Option<PathBuf>,
    pub output_format: Option<Format>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliConfig {
    pub server_url: String,
    pub token_path: Option<PathBuf>,
    pub output_format: Format,
}

impl CliConfig {
    /// Flag over environment over file over default.
    pub fn resolve(
        file: ConfigFile,
        env_server: Option<String>,
        flag_server: Option<String>,
        flag_token: Option<PathBuf>,
        flag_format: Option<Format>,
    ) -> CliResult<Self> {
        let server_url = flag_server
            .or(env_server.filter(|s| !s.is_empty()))
            .or(file.server_url)
            .unwrap_or_else(|| DEFAULT_SERVER.to_string());
        check_url(&server_url)?;
        Ok(Self {
            server_url: server_url.trim_end_matches('/').to_string(),
            token_path: flag_token.or(file.token_path),
            output_format: flag_format.or(file.output_format).unwrap_or_default(),
        })
    }

    /// The bearer token, read when a command first needs it.
    pub fn token(&self) -> CliResult<String> {
        let path = self
            .token_path
            .as_ref()
            .ok_or_else(|| CliError::Transport("no token file configured (use --token-file or token_path)".into()))?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Transport(format!("token file {}: {e}", path.display())))?;
        let token = text.trim();
        if token.is_empty() {
            return Err(CliError::Transport(format!("token file {} is empty", path.display())));
        }
        Ok(token.to_string())
    }
}

fn check_url(url: &str) -> CliResult<()> {
    let rest = url
        .strip_prefix("http://")
        .or_else(|| url.strip_prefix("https://"))
        .ok_or_else(|| CliError::Validation(format!("server url `{url}` must start with http:// or https://")))?;
    let host = rest.split('/').next().unwrap_or("");
    if host.is_empty() || host.contains(char::is_whitespace) {
        return Err(CliError::Validation(format!("server url `{url}` has no host")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let file = ConfigFile {
            server_url: Some("http://file:1".into()),
            token_path: Some("/t".into()),
            output_format: Some(Format::Csv),
        };
        let c = CliConfig::resolve(file.clone(), Some("http://env:2".into()), None, None, None).unwrap();
        assert_eq!(c.server_url, "http://env:2");
        assert_eq!(c.output_format, Format::Csv);
        let c = CliConfig::resolve(file.clone(), Some("http://env:2".into()), Some("http://flag:3/".into()), None, Some(Format::Json)).unwrap();
        assert_eq!(c.server_url, "http://flag:3");
        assert_eq!(c.output_format, Format::Json);
        let c = CliConfig::resolve(ConfigFile::default(), None, None, None, None).unwrap();
        assert_eq!(c.server_url, DEFAULT_SERVER);
        assert_eq!(c.output_format, Format::Table);
    }

    #[test]
    fn malformed_url() {
        for u in ["localhost:8080", "http://", "ftp://x", "http:// x"] {
            assert!(CliConfig::resolve(ConfigFile::default(), None, Some(u.into()), None, None).is_err(), "{u}");
        }
    }

    #[test]
    fn config_file_is_strict() {
        let ok: ConfigFile = toml::from_str("server_url = \"http://h:1\"\noutput_format = \"csv\"\n").unwrap();
        assert_eq!(ok.output_format, Some(Format::Csv));
        assert!(toml::from_str::<ConfigFile>("colour = \"red\"\n").is_err());
    }
}
