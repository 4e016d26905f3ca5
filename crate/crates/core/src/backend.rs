//! HTTP plumbing shared by the segmentation and VQA clients: JSON POST with
//! exponential-backoff retry and a cap on concurrent in-flight requests.

use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// The endpoint could not be reached, timed out or kept answering with a
    /// server error. Safe to retry later.
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("could not encode request: {0}")]
    Encode(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable { .. })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(200),
            max_backoff: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, doubling from the initial backoff.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        InFlightLimit { max: max.max(1), current: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut current = self.current.lock().unwrap_or_else(|e| e.into_inner());
        while *current >= self.max {
            current = self.freed.wait(current).unwrap_or_else(|e| e.into_inner());
        }
        *current += 1;
        InFlightPermit { limit: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut current = self.limit.current.lock().unwrap_or_else(|e| e.into_inner());
        *current -= 1;
        self.limit.freed.notify_one();
    }
}

/// Blocking JSON-over-HTTP client used by the remote backends.
#[derive(Debug)]
pub struct HttpJsonClient {
    client: reqwest::blocking::Client,
    endpoint: url::Url,
    retry: RetryPolicy,
    limit: InFlightLimit,
    retries: AtomicU64,
}

impl HttpJsonClient {
    pub fn new(endpoint: url::Url, retry: RetryPolicy, max_in_flight: usize) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Encode(e.to_string()))?;
        Ok(HttpJsonClient {
            client,
            endpoint,
            retry,
            limit: InFlightLimit::new(max_in_flight),
            retries: AtomicU64::new(0),
        })
    }

    pub fn endpoint(&self) -> &url::Url {
        &self.endpoint
    }

    /// Total retries performed so far across all requests.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, BackendError> {
        let _permit = self.limit.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let failure = match self.client.post(self.endpoint.clone()).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Resp>()
                            .map_err(|e| BackendError::Protocol(format!("malformed response body: {e}")));
                    }
                    if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
                        format!("HTTP {status}")
                    } else {
                        let text = resp.text().unwrap_or_default();
                        return Err(BackendError::Protocol(format!("HTTP {status}: {text}")));
                    }
                }
                Err(e) if e.is_decode() => return Err(BackendError::Protocol(e.to_string())),
                Err(e) => e.to_string(),
            };
            if attempt >= self.retry.max_attempts {
                return Err(BackendError::Unavailable { attempts: attempt, message: failure });
            }
            self.retries.fetch_add(1, Ordering::Relaxed);
            tracing::debug!(endpoint = %self.endpoint, attempt, %failure, "retrying backend request");
            std::thread::sleep(self.retry.backoff(attempt));
        }
    }
}

pub fn encode_png_base64(image: &RgbImage) -> Result<String, BackendError> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| BackendError::Encode(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

pub fn decode_png_base64(data: &str) -> Result<RgbImage, BackendError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| BackendError::Protocol(format!("bad base64: {e}")))?;
    image::load_from_memory(&bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| BackendError::Protocol(format!("bad image payload: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn backoff_doubles_and_caps() {
        let policy = RetryPolicy {
            max_attempts: 10,
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_millis(500),
        };
        assert_eq!(policy.backoff(1), Duration::from_millis(100));
        assert_eq!(policy.backoff(2), Duration::from_millis(200));
        assert_eq!(policy.backoff(3), Duration::from_millis(400));
        assert_eq!(policy.backoff(4), Duration::from_millis(500));
        assert_eq!(policy.backoff(40), Duration::from_millis(500));
    }

    #[test]
    fn in_flight_limit_caps_concurrency() {
        let limit = Arc::new(InFlightLimit::new(2));
        let peak = Arc::new(AtomicU64::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let limit = Arc::clone(&limit);
                let peak = Arc::clone(&peak);
                std::thread::spawn(move || {
                    let _p = limit.acquire();
                    peak.fetch_max(limit.in_flight() as u64, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(limit.in_flight(), 0);
    }

    #[test]
    fn png_base64_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 10, y as u8 * 20, 7]));
        let back = decode_png_base64(&encode_png_base64(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
