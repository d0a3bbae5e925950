//! Best-effort process CPU and memory sampling from `/proc`.

use std::fs;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceSample {
    pub cpu_pct: f64,
    pub ram_pct: f64,
}

pub struct ResourceSampler {
    last_cpu_ticks: u64,
    last_at: Instant,
    ticks_per_sec: f64,
    page_size: u64,
    mem_total: u64,
}

fn cpu_ticks() -> Option<u64> {
    let stat = fs::read_to_string("/proc/self/stat").ok()?;
    // fields after the parenthesised command name; utime and stime are 14 and 15
    let rest = &stat[stat.rfind(')')? + 2..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    Some(f.get(11)?.parse::<u64>().ok()? + f.get(12)?.parse::<u64>().ok()?)
}

fn rss_pages() -> Option<u64> {
    let statm = fs::read_to_string("/proc/self/statm").ok()?;
    statm.split_whitespace().nth(1)?.parse().ok()
}

fn mem_total_bytes() -> Option<u64> {
    let info = fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemTotal:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

impl ResourceSampler {
    /// `None` where `/proc` is unavailable.
    pub fn new() -> Option<Self> {
        Some(ResourceSampler {
            last_cpu_ticks: cpu_ticks()?,
            last_at: Instant::now(),
            // USER_HZ is 100 on every mainstream Linux configuration
            ticks_per_sec: 100.0,
            page_size: 4096,
            mem_total: mem_total_bytes()?,
        })
    }

    /// CPU share since the previous sample and current resident memory share.
    pub fn sample(&mut self) -> Option<ResourceSample> {
        let ticks = cpu_ticks()?;
        let now = Instant::now();
        let wall = now.duration_since(self.last_at).as_secs_f64();
        let cpu = (ticks - self.last_cpu_ticks) as f64 / self.ticks_per_sec;
        self.last_cpu_ticks = ticks;
        self.last_at = now;
        let cpu_pct = if wall > 0.0 { cpu / wall * 100.0 } else { 0.0 };
        let ram_pct = rss_pages()? as f64 * self.page_size as f64 / self.mem_total as f64 * 100.0;
        Some(ResourceSample { cpu_pct, ram_pct })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_yields_percentages_on_linux() {
        if let Some(mut s) = ResourceSampler::new() {
            let r = s.sample().unwrap();
            assert!(r.cpu_pct >= 0.0);
            assert!(r.ram_pct > 0.0 && r.ram_pct < 100.0);
        }
    }
}
