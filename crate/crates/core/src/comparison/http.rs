//! OpenAI-compatible chat-completions engine with inline base64 images.

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::engine::{ComparisonEngine, EngineError, EngineRequest, ImageRef};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageTransport {
    #[default]
    Base64Inline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub model: String,
    #[serde(default)]
    pub image_transport: ImageTransport,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Path pattern for bank images, with `{id}` replaced by the entry id.
    #[serde(default)]
    pub reference_image_template: Option<String>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

fn default_timeout() -> u64 {
    120
}

impl HttpConfig {
    pub fn from_toml(text: &str) -> Result<Self, EngineError> {
        toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))
    }
}

pub struct HttpEngine {
    config: HttpConfig,
    token: String,
    client: reqwest::blocking::Client,
}

impl HttpEngine {
    pub fn new(config: HttpConfig) -> Result<Self, EngineError> {
        let token = std::env::var(&config.token_env).map_err(|_| {
            EngineError::Config(format!(
                "environment variable {} is not set",
                config.token_env
            ))
        })?;
        Self::with_token(config, token)
    }

    pub fn with_token(config: HttpConfig, token: String) -> Result<Self, EngineError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        Ok(Self {
            config,
            token,
            client,
        })
    }

    fn resolve(&self, image: &ImageRef) -> Result<PathBuf, EngineError> {
        if let Some(p) = &image.path {
            return Ok(p.clone());
        }
        self.config
            .reference_image_template
            .as_ref()
            .map(|t| PathBuf::from(t.replace("{id}", &image.id)))
            .ok_or_else(|| {
                EngineError::Config(format!(
                    "no path for image {:?} and no reference_image_template configured",
                    image.id
                ))
            })
    }

    fn data_url(path: &Path) -> Result<String, EngineError> {
        let bytes = std::fs::read(path).map_err(|e| {
            EngineError::Config(format!("cannot read image {}: {e}", path.display()))
        })?;
        let mime = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/png",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    pub fn request_body(&self, request: &EngineRequest) -> Result<Value, EngineError> {
        let mut content = vec![json!({"type": "text", "text": request.prompt})];
        for img in &request.images {
            let url = match self.config.image_transport {
                ImageTransport::Base64Inline => Self::data_url(&self.resolve(img)?)?,
            };
            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0,
        });
        if let Some(n) = self.config.max_tokens {
            body["max_tokens"] = json!(n);
        }
        Ok(body)
    }
}

impl ComparisonEngine for HttpEngine {
    fn complete(&self, request: &EngineRequest) -> Result<String, EngineError> {
        let body = self.request_body(request)?;
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.token)
            .json(&body)
            .send()
            .map_err(|e| EngineError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| EngineError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(EngineError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| EngineError::BadReply(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| EngineError::BadReply("missing choices[0].message.content".into()))
    }

    fn name(&self) -> &str {
        "http"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::engine::RequestKind;
    use crate::triad::Role;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one canned HTTP response and hands back the raw request.
    fn one_shot(status: &str, body: &str) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        let status = status.to_string();
        let body = body.to_string();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            head.push_str(&String::from_utf8_lossy(&buf));
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            tx.send(head).unwrap();
        });
        (format!("http://{addr}/v1/chat/completions"), rx)
    }

    fn config(endpoint: String, dir: &Path) -> HttpConfig {
        HttpConfig {
            endpoint,
            token_env: "UNUSED".into(),
            model: "test-model".into(),
            image_transport: ImageTransport::Base64Inline,
            timeout_secs: 10,
            reference_image_template: Some(format!("{}/{{id}}.png", dir.display())),
            max_tokens: None,
        }
    }

    fn request(dir: &Path) -> EngineRequest {
        EngineRequest {
            kind: RequestKind::Pairwise {
                query_id: "q".into(),
                reference_id: "r".into(),
                role: Role::Anchor,
            },
            prompt: "Question: x".into(),
            images: vec![
                ImageRef {
                    id: "q".into(),
                    path: Some(dir.join("q.jpg")),
                },
                ImageRef::id_only("r"),
            ],
        }
    }

    #[test]
    fn posts_chat_completion_with_inline_images() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("q.jpg"), b"QUERYBYTES").unwrap();
        std::fs::write(dir.path().join("r.png"), b"REFBYTES").unwrap();
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"Answer: B\nConfidence: 70"}}]}"#;
        let (url, rx) = one_shot("200 OK", reply);
        let eng = HttpEngine::with_token(config(url, dir.path()), "sekrit".into()).unwrap();
        let out = eng.complete(&request(dir.path())).unwrap();
        assert_eq!(out, "Answer: B\nConfidence: 70");
        let raw = rx.recv().unwrap();
        assert!(raw
            .to_ascii_lowercase()
            .contains("authorization: bearer sekrit"));
        let b64 = base64::engine::general_purpose::STANDARD;
        assert!(raw.contains(&format!(
            "data:image/jpeg;base64,{}",
            b64.encode(b"QUERYBYTES")
        )));
        assert!(raw.contains(&format!(
            "data:image/png;base64,{}",
            b64.encode(b"REFBYTES")
        )));
        assert!(raw.contains("\"model\":\"test-model\""));
    }

    #[test]
    fn http_error_status_is_retryable() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("q.jpg"), b"Q").unwrap();
        std::fs::write(dir.path().join("r.png"), b"R").unwrap();
        let (url, _rx) = one_shot("503 Service Unavailable", "{}");
        let eng = HttpEngine::with_token(config(url, dir.path()), "t".into()).unwrap();
        let err = eng.complete(&request(dir.path())).unwrap_err();
        assert!(matches!(err, EngineError::Http { status: 503, .. }));
        assert!(err.is_retryable());
    }

    #[test]
    fn config_parses_from_toml() {
        let c = HttpConfig::from_toml(
            "endpoint = \"https://example.invalid/v1/chat/completions\"\ntoken_env = \"API_KEY\"\nmodel = \"m\"\n",
        )
        .unwrap();
        assert_eq!(c.timeout_secs, 120);
        assert_eq!(c.image_transport, ImageTransport::Base64Inline);
        assert!(HttpConfig::from_toml("endpoint = 1").is_err());
    }

    #[test]
    fn missing_image_path_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config("http://127.0.0.1:9/".into(), dir.path());
        c.reference_image_template = None;
        let eng = HttpEngine::with_token(c, "t".into()).unwrap();
        let mut req = request(dir.path());
        req.images.remove(0);
        assert!(matches!(eng.complete(&req), Err(EngineError::Config(_))));
    }
}
