//! Plain-text artifact formats. Every file opens with the effective config
//! as `#` comment lines followed by its digest.
//!
//! Motion files hold one frame per line, eight whitespace-separated
//! channels: root x, root y, heading sin, heading cos, vertical, limb sin,
//! limb cos, speed. Feature files hold one 32-channel frame per line.

use std::fmt::Write as _;
use std::path::Path;

use mvq_core::data::{FeatureSequence, MotionSequence, FEATURE_DIM, SPEAKER_DIM};

use crate::config::{digest_text, Config};
use crate::{CliError, Result};

pub fn config_header(cfg: &Config) -> String {
    let mut out = String::new();
    for line in cfg.canonical().lines() {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "# config_digest={}", cfg.digest());
    out
}

/// Recovers the echoed config text and checks it against the digest line.
pub fn echoed_config(text: &str) -> Result<(String, String)> {
    let mut body = String::new();
    let mut digest = None;
    for line in text.lines() {
        let Some(rest) = line.strip_prefix('#') else { continue };
        let rest = rest.strip_prefix(' ').unwrap_or(rest);
        match rest.strip_prefix("config_digest=") {
            Some(d) => {
                digest = Some(d.trim().to_string());
                break;
            }
            None => {
                body.push_str(rest);
                body.push('\n');
            }
        }
    }
    let digest = digest.ok_or_else(|| CliError::Config("artifact carries no config digest".into()))?;
    Ok((body, digest))
}

pub fn verify_echo(text: &str) -> Result<bool> {
    let (body, digest) = echoed_config(text)?;
    Ok(digest_text(&body) == digest)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(path.display().to_string(), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))
}

fn rows(text: &str, width: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("{what} line {}: {e}", i + 1)))?;
        if vals.len() != width {
            return Err(CliError::Config(format!(
                "{what} line {} has {} columns, expected {width}",
                i + 1,
                vals.len()
            )));
        }
        out.extend(vals);
    }
    Ok(out)
}

pub fn motion_text(cfg: &Config, m: &MotionSequence) -> String {
    let mut out = config_header(cfg);
    out.push_str("# frames=");
    out.push_str(&m.len().to_string());
    out.push('\n');
    for t in 0..m.len() {
        let cols: Vec<String> = m.frame(t).iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cols.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_motion(text: &str) -> Result<MotionSequence> {
    Ok(MotionSequence::new(rows(text, mvq_core::data::MOTION_DIM, "motion")?)?)
}

/// Feature file: optional `# speaker=` line, then frames.
pub fn parse_features(text: &str) -> Result<FeatureSequence> {
    let mut speaker = [0.0; SPEAKER_DIM];
    if let Some(line) = text.lines().find_map(|l| l.trim().strip_prefix("# speaker=")) {
        let vals = rows(line.replace(',', " ").as_str(), SPEAKER_DIM, "speaker")?;
        speaker.copy_from_slice(&vals);
    }
    let frames = rows(text, FEATURE_DIM, "features")?;
    if frames.is_empty() {
        return Err(CliError::Config("feature file holds no frames".into()));
    }
    Ok(FeatureSequence { frames, speaker })
}

/// `x y` columns, one pair per line, after a `# x y` label line.
pub fn series_text(cfg: &Config, labels: (&str, &str), points: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut out = config_header(cfg);
    let _ = writeln!(out, "# {} {}", labels.0, labels.1);
    for (x, y) in points {
        let _ = writeln!(out, "{x} {y}");
    }
    out
}
