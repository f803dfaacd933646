use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Token-bucket burst size in bytes.
pub const BURST_BYTES: f64 = 64.0 * 1024.0;

/// Outbound bandwidth limit for one link direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThrottleSpec {
    Unlimited,
    BitsPerSecond(f64),
}

impl ThrottleSpec {
    pub fn bits_per_second(rate: f64) -> Result<Self> {
        if rate.is_finite() && rate > 0.0 {
            Ok(ThrottleSpec::BitsPerSecond(rate))
        } else {
            Err(Error::Config(format!("throttle rate must be positive, got {rate}")))
        }
    }

    pub fn from_option(rate: Option<f64>) -> Result<Self> {
        rate.map_or(Ok(ThrottleSpec::Unlimited), Self::bits_per_second)
    }
}

/// Sender-side token bucket. A send larger than the available tokens puts the
/// bucket into debt and sleeps until it is repaid, so a long transfer runs at
/// exactly the configured rate after the initial burst.
#[derive(Debug)]
pub struct TokenBucket {
    bytes_per_sec: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(spec: ThrottleSpec) -> Option<TokenBucket> {
        match spec {
            ThrottleSpec::Unlimited => None,
            ThrottleSpec::BitsPerSecond(bps) => Some(TokenBucket {
                bytes_per_sec: bps / 8.0,
                tokens: BURST_BYTES,
                last: Instant::now(),
            }),
        }
    }

    fn refill(&mut self) {
        let now = Instant::now();
        let dt = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + dt * self.bytes_per_sec).min(BURST_BYTES);
    }

    /// Charges `bytes` and blocks until the bucket is non-negative again.
    /// Returns the time spent sleeping.
    pub fn acquire(&mut self, bytes: usize) -> Duration {
        self.refill();
        self.tokens -= bytes as f64;
        if self.tokens >= 0.0 {
            return Duration::ZERO;
        }
        let wait = Duration::from_secs_f64(-self.tokens / self.bytes_per_sec);
        let start = Instant::now();
        std::thread::sleep(wait);
        self.refill();
        start.elapsed()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlimited_has_no_bucket() {
        assert!(TokenBucket::new(ThrottleSpec::Unlimited).is_none());
        assert!(ThrottleSpec::bits_per_second(0.0).is_err());
        assert!(ThrottleSpec::bits_per_second(f64::NAN).is_err());
    }

    #[test]
    fn burst_is_free() {
        let mut b = TokenBucket::new(ThrottleSpec::BitsPerSecond(8.0)).unwrap();
        assert_eq!(b.acquire(60 * 1024), Duration::ZERO);
    }

    #[test]
    fn debt_is_repaid_at_rate() {
        // 8 Mbit/s = 1 MB/s; 64 KiB burst then 100_000 bytes of debt = 0.1 s.
        let mut b = TokenBucket::new(ThrottleSpec::BitsPerSecond(8e6)).unwrap();
        let stall = b.acquire(65536 + 100_000);
        assert!(stall >= Duration::from_millis(95), "{stall:?}");
        assert!(stall < Duration::from_millis(400), "{stall:?}");
    }
}
