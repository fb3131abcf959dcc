use std::time::Instant;

/// A point on the monotonic clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Mark(Instant);

impl Mark {
    pub fn now() -> Self {
        Mark(Instant::now())
    }

    pub fn elapsed_seconds(self) -> f64 {
        timed_execution(self, Mark::now())
    }
}

/// Seconds from `start` to `end`; zero if `end` precedes `start`.
pub fn timed_execution(start: Mark, end: Mark) -> f64 {
    end.0.saturating_duration_since(start.0).as_secs_f64()
}

/// Two decimals, halves rounded away from zero.
pub fn fixed2(x: f64) -> String {
    if !x.is_finite() {
        return "n/a".to_string();
    }
    let r = (x * 100.0).round() / 100.0;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:.2}")
}

pub fn render_minutes(seconds: f64) -> String {
    format!("{} minutes", fixed2(seconds / 60.0))
}
