//! `key = value` settings for `infer`.

use std::path::Path;

use evisynth::gateway::GatewayConfig;

/// Values read from a config file; `None` where the file is silent.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct FileSettings {
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub timeout_s: Option<u64>,
    pub max_retries: Option<u32>,
    pub backoff_base_ms: Option<u64>,
    pub concurrency: Option<usize>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("line {line}: bad value `{value}` for `{key}`"))
}

/// Parses lines of `key = value`. Blank lines and `#` comments are
/// skipped; values may be quoted.
pub fn parse(text: &str) -> Result<FileSettings, String> {
    let mut s = FileSettings::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {line_no}: expected `key = value`"))?;
        let key = key.trim();
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        match key {
            "endpoint_url" | "endpoint" => s.endpoint_url = Some(value.to_string()),
            "model_name" | "model" => s.model_name = Some(value.to_string()),
            "temperature" => s.temperature = Some(parse_value(key, value, line_no)?),
            "max_tokens" => s.max_tokens = Some(parse_value(key, value, line_no)?),
            "timeout_s" | "timeout" => s.timeout_s = Some(parse_value(key, value, line_no)?),
            "max_retries" | "retries" => s.max_retries = Some(parse_value(key, value, line_no)?),
            "backoff_base_ms" => s.backoff_base_ms = Some(parse_value(key, value, line_no)?),
            "concurrency" => s.concurrency = Some(parse_value(key, value, line_no)?),
            other => return Err(format!("line {line_no}: unknown key `{other}`")),
        }
    }
    Ok(s)
}

pub fn load(path: &Path) -> Result<FileSettings, std::io::Error> {
    std::fs::read_to_string(path).and_then(|text| {
        parse(&text).map_err(|m| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: {m}", path.display()),
            )
        })
    })
}

impl FileSettings {
    pub fn apply(&self, config: &mut GatewayConfig) {
        if let Some(v) = &self.endpoint_url {
            config.endpoint_url = v.clone();
        }
        if let Some(v) = &self.model_name {
            config.model_name = v.clone();
        }
        if let Some(v) = self.temperature {
            config.temperature = v;
        }
        if let Some(v) = self.max_tokens {
            config.max_tokens = v;
        }
        if let Some(v) = self.timeout_s {
            config.timeout_s = v;
        }
        if let Some(v) = self.max_retries {
            config.max_retries = v;
        }
        if let Some(v) = self.backoff_base_ms {
            config.backoff_base_ms = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_quotes() {
        let s = parse("# gateway\nendpoint = \"http://h:1/v1\"\nmodel_name=m\ntemperature = 0.2\n\nconcurrency=8\n").unwrap();
        assert_eq!(s.endpoint_url.as_deref(), Some("http://h:1/v1"));
        assert_eq!(s.model_name.as_deref(), Some("m"));
        assert_eq!(s.temperature, Some(0.2));
        assert_eq!(s.concurrency, Some(8));
        assert_eq!(s.max_tokens, None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(parse("colour = red").unwrap_err().contains("unknown key"));
        assert!(parse("max_tokens = lots").unwrap_err().contains("line 1"));
        assert!(parse("just words").is_err());
    }

    #[test]
    fn file_overrides_only_what_it_sets() {
        let mut config = GatewayConfig {
            model_name: "env-model".into(),
            ..GatewayConfig::default()
        };
        parse("max_retries = 0").unwrap().apply(&mut config);
        assert_eq!(config.model_name, "env-model");
        assert_eq!(config.max_retries, 0);
    }
}
