//! HTTP backend speaking chat-completion style JSON.
//!
//! | role      | endpoint                           | request body                                                    | response                                   |
//! |-----------|------------------------------------|-----------------------------------------------------------------|--------------------------------------------|
//! | chat      | `POST {base}/chat/completions`     | `{model, messages:[{role, content}], temperature, top_p, max_tokens}` | `choices[0].message.content`         |
//! | vision    | `POST {base}/chat/completions`     | as chat; the last user message's `content` is a part list with `{"type":"image_url","image_url":{"url":"data:<mime>;base64,..."}}` | as chat |
//! | embed     | `POST {base}/embeddings`           | `{model, input:[{"type":"text","text":...}]}` or `{model, input:[{"type":"image","data":"<base64>"}]}` | `data[0].embedding` |
//! | imagegen  | `POST {base}/images/generations`   | `{model, prompt, n, seed, response_format:"b64_json"}`          | `data[i].b64_json`, or `data[i].error` for a per-image rejection |
//!
//! Requests carry `Authorization: Bearer <token>` when `api_key_env` names a
//! set environment variable. Status 408, 429 and 5xx, timeouts and
//! connection failures are transient; any other 4xx is fatal.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, BackendConfig, BackendError, GatewayError, ImageOutcome, Message, Request, Response};

pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        if config.base_url.is_empty() {
            return Err(GatewayError::InvalidConfig(format!("{}: base_url is empty", config.role)));
        }
        let token = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| {
                GatewayError::InvalidConfig(format!(
                    "{}: environment variable {} is not set",
                    config.role, config.api_key_env
                ))
            })?)
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        Ok(Self { config, client, token })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| BackendError::Fatal(format!("malformed response body: {e}")));
        }
        let msg = format!("HTTP {}: {}", status.as_u16(), truncate(&text, 300));
        if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
            Err(BackendError::Transient(msg))
        } else {
            Err(BackendError::Fatal(msg))
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Best-effort MIME type from magic bytes.
pub fn sniff_mime(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG") {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        "image/jpeg"
    } else if bytes.len() > 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        "image/webp"
    } else if bytes.starts_with(b"GIF8") {
        "image/gif"
    } else {
        "application/octet-stream"
    }
}

fn messages_json(messages: &[Message]) -> Vec<Value> {
    messages.iter().map(|m| json!({ "role": m.role, "content": m.content })).collect()
}

fn chat_body(model: &str, messages: Vec<Value>, decode: &super::DecodeParams) -> Value {
    json!({
        "model": model,
        "messages": messages,
        "temperature": decode.temperature,
        "top_p": decode.top_p,
        "max_tokens": decode.max_tokens,
    })
}

fn content_of(v: &Value) -> Result<String, BackendError> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Fatal("response lacks choices[0].message.content".into()))
}

impl Backend for HttpBackend {
    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        let model = self.config.model_id.as_str();
        match request {
            Request::Chat { messages, decode, .. } => {
                let v = self.post("chat/completions", &chat_body(model, messages_json(messages), decode))?;
                content_of(&v).map(Response::Text)
            }
            Request::Vision { image, messages, decode, .. } => {
                let mut msgs = messages_json(messages);
                let url = format!("data:{};base64,{}", sniff_mime(image), B64.encode(image));
                let image_part = json!({ "type": "image_url", "image_url": { "url": url } });
                match msgs.iter_mut().rev().find(|m| m["role"] == "user") {
                    Some(last) => {
                        let text = last["content"].as_str().unwrap_or_default().to_string();
                        last["content"] = json!([{ "type": "text", "text": text }, image_part]);
                    }
                    None => msgs.push(json!({ "role": "user", "content": [image_part] })),
                }
                let v = self.post("chat/completions", &chat_body(model, msgs, decode))?;
                content_of(&v).map(Response::Text)
            }
            Request::EmbedText { text } => {
                let v = self.post("embeddings", &json!({ "model": model, "input": [{ "type": "text", "text": text }] }))?;
                embedding_of(&v)
            }
            Request::EmbedImage { image } => {
                let body = json!({ "model": model, "input": [{ "type": "image", "data": B64.encode(image) }] });
                embedding_of(&self.post("embeddings", &body)?)
            }
            Request::GenerateImage { prompt, n, seed } => {
                let body = json!({
                    "model": model, "prompt": prompt, "n": n, "seed": seed, "response_format": "b64_json",
                });
                let v = self.post("images/generations", &body)?;
                let data = v
                    .get("data")
                    .and_then(Value::as_array)
                    .ok_or_else(|| BackendError::Fatal("response lacks data[]".into()))?;
                data.iter()
                    .map(|item| {
                        if let Some(b) = item.get("b64_json").and_then(Value::as_str) {
                            B64.decode(b)
                                .map(ImageOutcome::Image)
                                .map_err(|e| BackendError::Fatal(format!("bad base64 image: {e}")))
                        } else {
                            let reason = item.get("error").map(|e| match e {
                                Value::String(s) => s.clone(),
                                other => other.to_string(),
                            });
                            Ok(ImageOutcome::Rejected(reason.unwrap_or_else(|| "no image returned".into())))
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(Response::Images)
            }
        }
    }
}

fn embedding_of(v: &Value) -> Result<Response, BackendError> {
    let arr = v
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Fatal("response lacks data[0].embedding".into()))?;
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| BackendError::Fatal("non-numeric embedding component".into())))
        .collect::<Result<Vec<_>, _>>()
        .map(Response::Vector)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mime_sniffing() {
        assert_eq!(sniff_mime(b"\x89PNG\r\n"), "image/png");
        assert_eq!(sniff_mime(&[0xFF, 0xD8, 0xFF, 0xE0]), "image/jpeg");
        assert_eq!(sniff_mime(b"MOCKIMG1"), "application/octet-stream");
    }

    #[test]
    fn missing_api_key_env_is_config_error() {
        let mut cfg = BackendConfig::new(super::super::Role::Chat, "m");
        cfg.base_url = "http://127.0.0.1:9".into();
        cfg.api_key_env = "CONTRASTAUG_TEST_SURELY_UNSET_KEY".into();
        assert!(matches!(HttpBackend::new(cfg), Err(GatewayError::InvalidConfig(_))));
    }
}
