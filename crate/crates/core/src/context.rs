//! Stance-relevant context extraction: a summarizer for source text and a
//! domain-aware captioner for images.
//!
//! Both sit behind one client with two backends. The stub backend is a
//! pure function of (payload digest, topic, prompt, config) and keeps the
//! whole suite offline; the external backend speaks a small HTTP+JSON
//! protocol to whatever model service the deployment provides. Results
//! are cached by content hash, so renaming files or re-running
//! experiments never re-invokes an expensive backend.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::image::mean_brightness_of_bytes;
use crate::encoders::vocab::split_words;
use crate::error::{Error, Result};

pub const DEFAULT_CAPTION_PROMPT: &str = "Generate the caption for the image";
/// Not part of any published protocol; purely a configurable default.
pub const DEFAULT_SUMMARIZE_PROMPT: &str =
    "Summarize the following text with respect to the topic: <topic>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Stub,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextKind {
    Summarize,
    Caption,
}

impl ContextKind {
    fn tag(self) -> &'static str {
        match self {
            ContextKind::Summarize => "summarize",
            ContextKind::Caption => "caption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub backend: BackendKind,
    pub external_url: Option<String>,
    pub timeout_secs: u64,
    /// On transport failure, fall back to the stub instead of erroring.
    pub fallback_to_stub: bool,
    /// Sentences kept by the stub summarizer.
    pub summary_sentences: usize,
    pub summarize_prompt: String,
    pub caption_prompt: String,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            backend: BackendKind::Stub,
            external_url: None,
            timeout_secs: 30,
            fallback_to_stub: false,
            summary_sentences: 2,
            summarize_prompt: DEFAULT_SUMMARIZE_PROMPT.to_string(),
            caption_prompt: DEFAULT_CAPTION_PROMPT.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextResult {
    pub output: String,
    pub backend: BackendKind,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    output: String,
    backend: BackendKind,
}

/// Disk-persisted map from content hash to result. Single writer at a
/// time; the file is rewritten atomically on every insert.
#[derive(Debug, Default)]
struct ContextCache {
    entries: BTreeMap<String, CacheEntry>,
    path: Option<PathBuf>,
}

impl ContextCache {
    fn open(path: Option<PathBuf>) -> Result<Self> {
        let mut cache = ContextCache {
            entries: BTreeMap::new(),
            path,
        };
        if let Some(p) = &cache.path {
            if p.exists() {
                let raw = std::fs::read_to_string(p)?;
                cache.entries = serde_json::from_str(&raw)
                    .map_err(|e| Error::data(format!("{}: bad cache file: {e}", p.display())))?;
            }
        }
        Ok(cache)
    }

    fn get(&self, key: &str) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    fn insert(&mut self, key: String, entry: CacheEntry) -> Result<()> {
        self.entries.insert(key, entry);
        if let Some(p) = &self.path {
            let tmp = p.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_string_pretty(&self.entries).unwrap())?;
            std::fs::rename(&tmp, p)?;
        }
        Ok(())
    }
}

/// Counters for ablation wiring checks.
#[derive(Debug, Default)]
pub struct ContextStats {
    pub summarize_calls: u64,
    pub caption_calls: u64,
}

pub struct ContextService {
    cfg: ContextConfig,
    cache: Mutex<ContextCache>,
    summarize_calls: AtomicU64,
    caption_calls: AtomicU64,
}

impl ContextService {
    pub fn new(cfg: ContextConfig, cache_path: Option<PathBuf>) -> Result<Self> {
        if cfg.backend == BackendKind::External && cfg.external_url.is_none() {
            return Err(Error::Config(
                "backend=external requires external_url".into(),
            ));
        }
        if cfg.summary_sentences == 0 {
            return Err(Error::Config("summary_sentences must be at least 1".into()));
        }
        if cfg.summarize_prompt.is_empty() || cfg.caption_prompt.is_empty() {
            return Err(Error::Config("prompts must be non-empty".into()));
        }
        Ok(ContextService {
            cfg,
            cache: Mutex::new(ContextCache::open(cache_path)?),
            summarize_calls: AtomicU64::new(0),
            caption_calls: AtomicU64::new(0),
        })
    }

    pub fn stats(&self) -> ContextStats {
        ContextStats {
            summarize_calls: self.summarize_calls.load(Ordering::SeqCst),
            caption_calls: self.caption_calls.load(Ordering::SeqCst),
        }
    }

    /// Summarize source text with respect to a topic.
    pub fn summarize(&self, source_text: &str, topic: &str) -> Result<ContextResult> {
        self.summarize_calls.fetch_add(1, Ordering::SeqCst);
        if source_text.trim().is_empty() {
            return Err(Error::data("summarize: empty source text"));
        }
        let key = cache_key(
            ContextKind::Summarize,
            topic,
            &self.cfg.summarize_prompt,
            source_text.as_bytes(),
        );
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(ContextResult {
                output: hit.output.clone(),
                backend: hit.backend,
                cache_hit: true,
            });
        }

        let (output, backend) = match self.cfg.backend {
            BackendKind::Stub => (
                stub_summarize(source_text, topic, self.cfg.summary_sentences),
                BackendKind::Stub,
            ),
            BackendKind::External => match self.external_summarize(source_text, topic) {
                Ok(s) => (s, BackendKind::External),
                Err(e @ Error::Transport(_)) if self.cfg.fallback_to_stub => {
                    drop(e);
                    (
                        stub_summarize(source_text, topic, self.cfg.summary_sentences),
                        BackendKind::Stub,
                    )
                }
                Err(e) => return Err(e),
            },
        };
        if output.is_empty() {
            return Err(Error::data("summarize produced empty output"));
        }
        self.cache.lock().unwrap().insert(
            key,
            CacheEntry {
                output: output.clone(),
                backend,
            },
        )?;
        Ok(ContextResult {
            output,
            backend,
            cache_hit: false,
        })
    }

    /// Caption an image file in the context of a topic.
    pub fn caption(&self, image_path: &Path, topic: &str) -> Result<ContextResult> {
        self.caption_calls.fetch_add(1, Ordering::SeqCst);
        let name = image_path.display().to_string();
        let bytes = std::fs::read(image_path)
            .map_err(|e| Error::data(format!("caption: cannot read {name}: {e}")))?;
        let key = cache_key(ContextKind::Caption, topic, &self.cfg.caption_prompt, &bytes);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(ContextResult {
                output: hit.output.clone(),
                backend: hit.backend,
                cache_hit: true,
            });
        }

        let (output, backend) = match self.cfg.backend {
            BackendKind::Stub => (stub_caption(&bytes, &name, topic)?, BackendKind::Stub),
            BackendKind::External => match self.external_caption(&bytes, topic) {
                Ok(c) => (c, BackendKind::External),
                Err(e @ Error::Transport(_)) if self.cfg.fallback_to_stub => {
                    drop(e);
                    (stub_caption(&bytes, &name, topic)?, BackendKind::Stub)
                }
                Err(e) => return Err(e),
            },
        };
        if output.is_empty() {
            return Err(Error::data("caption produced empty output"));
        }
        self.cache.lock().unwrap().insert(
            key,
            CacheEntry {
                output: output.clone(),
                backend,
            },
        )?;
        Ok(ContextResult {
            output,
            backend,
            cache_hit: false,
        })
    }

    fn agent(&self) -> ureq::Agent {
        ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_secs(self.cfg.timeout_secs))
            .build()
    }

    fn external_summarize(&self, text: &str, topic: &str) -> Result<String> {
        let url = self.cfg.external_url.as_ref().expect("validated");
        let response = self
            .agent()
            .post(&format!("{url}/v1/summarize"))
            .send_json(serde_json::json!({ "text": text, "topic": topic }))
            .map_err(|e| Error::Transport(format!("summarize: {e}")))?;
        let body: serde_json::Value = response
            .into_json()
            .map_err(|e| Error::Transport(format!("summarize: malformed response: {e}")))?;
        body.get("summary")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("summarize: response missing 'summary'".into()))
    }

    fn external_caption(&self, image_bytes: &[u8], topic: &str) -> Result<String> {
        use base64::Engine;
        let url = self.cfg.external_url.as_ref().expect("validated");
        let b64 = base64::engine::general_purpose::STANDARD.encode(image_bytes);
        let response = self
            .agent()
            .post(&format!("{url}/v1/caption"))
            .send_json(serde_json::json!({
                "image_b64": b64,
                "prompt": self.cfg.caption_prompt,
                "topic": topic,
            }))
            .map_err(|e| Error::Transport(format!("caption: {e}")))?;
        let body: serde_json::Value = response
            .into_json()
            .map_err(|e| Error::Transport(format!("caption: malformed response: {e}")))?;
        body.get("caption")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("caption: response missing 'caption'".into()))
    }
}

fn cache_key(kind: ContextKind, topic: &str, prompt: &str, payload: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.tag().as_bytes());
    hasher.update([0x1f]);
    hasher.update(topic.as_bytes());
    hasher.update([0x1f]);
    hasher.update(prompt.as_bytes());
    hasher.update([0x1f]);
    hasher.update(Sha256::digest(payload));
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Split into sentences on `.`, `!`, `?`, keeping the terminator.
fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        current.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let tail = current.trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Extractive stub: keep the k sentences densest in topic keywords,
/// ties broken by earlier position; output preserves sentence order, so
/// the summary is always a subsequence of the input's sentences.
pub fn stub_summarize(text: &str, topic: &str, k: usize) -> String {
    let sentences = split_sentences(text);
    if sentences.len() <= k {
        return sentences.join(" ");
    }
    let keywords: std::collections::BTreeSet<String> =
        split_words(topic).into_iter().collect();

    let mut scored: Vec<(usize, f64)> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let words = split_words(s);
            let matches = words.iter().filter(|w| keywords.contains(*w)).count();
            let density = if words.is_empty() {
                0.0
            } else {
                matches as f64 / words.len() as f64
            };
            (i, density)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = scored.iter().take(k).map(|&(i, _)| i).collect();
    keep.sort_unstable();
    keep.iter().map(|&i| sentences[i].clone()).collect::<Vec<_>>().join(" ")
}

/// Deterministic template caption from image statistics and topic. The
/// id is derived from the content hash, so identical bytes caption
/// identically regardless of filename.
pub fn stub_caption(image_bytes: &[u8], name: &str, topic: &str) -> Result<String> {
    let brightness = mean_brightness_of_bytes(image_bytes, name)?;
    let digest = hex(&Sha256::digest(image_bytes));
    Ok(format!(
        "image {}: {} related visual content (brightness={:.2})",
        &digest[..12],
        topic,
        brightness
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn ppm(value: u8) -> Vec<u8> {
        let mut out = b"P6\n4 4\n255\n".to_vec();
        out.extend(std::iter::repeat(value).take(4 * 4 * 3));
        out
    }

    #[test]
    fn single_sentence_returned_verbatim() {
        let s = stub_summarize("Climate drives policy decisions.", "climate", 2);
        assert_eq!(s, "Climate drives policy decisions.");
    }

    #[test]
    fn topic_keywords_survive_summarization() {
        let text = "Big data is being used to model and understand climate change. \
                    It aids in predicting future trends and impacts of global warming. \
                    Someone also mentioned a football match. \
                    The referee made a controversial call.";
        let s = stub_summarize(text, "big data and climate change", 2);
        assert!(s.contains("climate"), "{s}");
        assert!(!s.contains("referee"), "{s}");
        // extractive: every output sentence is an input sentence
        for sentence in split_sentences(&s) {
            assert!(text.contains(&sentence), "not extractive: {sentence}");
        }
    }

    #[test]
    fn summarize_is_cached_and_deterministic() {
        let svc = ContextService::new(ContextConfig::default(), None).unwrap();
        let a = svc.summarize("One fact. Another fact. A third.", "fact").unwrap();
        let b = svc.summarize("One fact. Another fact. A third.", "fact").unwrap();
        assert_eq!(a.output, b.output);
        assert!(!a.cache_hit);
        assert!(b.cache_hit);
        assert_eq!(svc.stats().summarize_calls, 2);
    }

    #[test]
    fn empty_source_is_data_error() {
        let svc = ContextService::new(ContextConfig::default(), None).unwrap();
        assert!(matches!(svc.summarize("  ", "t"), Err(Error::Data(_))));
    }

    #[test]
    fn black_image_caption_reports_zero_brightness() {
        let caption = stub_caption(&ppm(0), "black.ppm", "climate change").unwrap();
        assert!(caption.contains("brightness=0.00"), "{caption}");
        assert!(caption.contains("climate change"), "{caption}");
    }

    #[test]
    fn identical_bytes_caption_identically_under_two_names() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        std::fs::write(&p1, ppm(80)).unwrap();
        std::fs::write(&p2, ppm(80)).unwrap();

        let svc = ContextService::new(ContextConfig::default(), None).unwrap();
        let c1 = svc.caption(&p1, "topic").unwrap();
        let c2 = svc.caption(&p2, "topic").unwrap();
        assert_eq!(c1.output, c2.output);
        assert!(c2.cache_hit, "second lookup hits by content hash");
    }

    #[test]
    fn cache_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("cache.json");
        let text = "Sentence one. Sentence two. Sentence three.";
        let first = {
            let svc =
                ContextService::new(ContextConfig::default(), Some(cache_path.clone())).unwrap();
            svc.summarize(text, "sentence").unwrap()
        };
        let svc = ContextService::new(ContextConfig::default(), Some(cache_path)).unwrap();
        let second = svc.summarize(text, "sentence").unwrap();
        assert!(second.cache_hit);
        assert_eq!(first.output, second.output);
    }

    #[test]
    fn stub_backend_never_touches_the_network() {
        // an unroutable external_url is irrelevant when backend=stub
        let cfg = ContextConfig {
            external_url: Some("http://127.0.0.1:1".into()),
            ..ContextConfig::default()
        };
        let svc = ContextService::new(cfg, None).unwrap();
        let out = svc.summarize("Totally offline. Still works.", "offline").unwrap();
        assert_eq!(out.backend, BackendKind::Stub);
    }

    #[test]
    fn external_backend_requires_url() {
        let cfg = ContextConfig {
            backend: BackendKind::External,
            ..ContextConfig::default()
        };
        assert!(matches!(
            ContextService::new(cfg, None),
            Err(Error::Config(_))
        ));
    }

    /// Minimal one-shot HTTP server for client tests.
    fn serve_once(status: &'static str, body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 65536];
                let mut read = 0;
                // read until end of headers + declared content length
                loop {
                    match stream.read(&mut buf[read..]) {
                        Ok(0) => break,
                        Ok(n) => {
                            read += n;
                            let text = String::from_utf8_lossy(&buf[..read]);
                            if let Some(header_end) = text.find("\r\n\r\n") {
                                let content_len = text
                                    .lines()
                                    .find(|l| l.to_lowercase().starts_with("content-length"))
                                    .and_then(|l| l.split(':').nth(1))
                                    .and_then(|v| v.trim().parse::<usize>().ok())
                                    .unwrap_or(0);
                                if read >= header_end + 4 + content_len {
                                    break;
                                }
                            }
                        }
                        Err(_) => break,
                    }
                }
                let response = format!(
                    "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    #[test]
    fn external_summarize_roundtrip() {
        let url = serve_once("200 OK", r#"{"summary":"served summary"}"#);
        let cfg = ContextConfig {
            backend: BackendKind::External,
            external_url: Some(url),
            timeout_secs: 5,
            ..ContextConfig::default()
        };
        let svc = ContextService::new(cfg, None).unwrap();
        let out = svc.summarize("Some long source text.", "topic").unwrap();
        assert_eq!(out.output, "served summary");
        assert_eq!(out.backend, BackendKind::External);
    }

    #[test]
    fn external_caption_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("x.ppm");
        std::fs::write(&img, ppm(128)).unwrap();

        let url = serve_once("200 OK", r#"{"caption":"a globe with a sign"}"#);
        let cfg = ContextConfig {
            backend: BackendKind::External,
            external_url: Some(url),
            timeout_secs: 5,
            ..ContextConfig::default()
        };
        let svc = ContextService::new(cfg, None).unwrap();
        let out = svc.caption(&img, "climate").unwrap();
        assert!(!out.output.is_empty());
        assert_eq!(out.output, "a globe with a sign");
    }

    #[test]
    fn non_2xx_is_transport_error() {
        let url = serve_once("500 Internal Server Error", "{}");
        let cfg = ContextConfig {
            backend: BackendKind::External,
            external_url: Some(url),
            timeout_secs: 5,
            ..ContextConfig::default()
        };
        let svc = ContextService::new(cfg, None).unwrap();
        assert!(matches!(
            svc.summarize("text", "topic"),
            Err(Error::Transport(_))
        ));
    }

    #[test]
    fn malformed_body_is_transport_error() {
        let url = serve_once("200 OK", r#"{"unexpected":"shape"}"#);
        let cfg = ContextConfig {
            backend: BackendKind::External,
            external_url: Some(url),
            timeout_secs: 5,
            ..ContextConfig::default()
        };
        let svc = ContextService::new(cfg, None).unwrap();
        assert!(matches!(
            svc.summarize("text", "topic"),
            Err(Error::Transport(_))
        ));
    }

    #[test]
    fn transport_failure_falls_back_to_stub_when_configured() {
        let cfg = ContextConfig {
            backend: BackendKind::External,
            external_url: Some("http://127.0.0.1:1".into()),
            timeout_secs: 1,
            fallback_to_stub: true,
            ..ContextConfig::default()
        };
        let svc = ContextService::new(cfg, None).unwrap();
        let out = svc.summarize("Fallback sentence.", "fallback").unwrap();
        assert_eq!(out.backend, BackendKind::Stub);
        assert_eq!(out.output, "Fallback sentence.");
    }
}
